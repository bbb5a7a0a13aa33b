// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only if all pass.

#include "cops/checkpoint.hpp"
#include "cops/inference.hpp"
#include "cops/metrics.hpp"
#include "cops/training.hpp"

#include "oracles.hpp"
#include "test_util.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>

using namespace cops;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

void progress(const std::string& msg) { std::cerr << "[acceptance] " << msg << std::endl; }

std::vector<double> col_vec(const ad::Var& v) { return testutil::to_vec(v.value()); }

Vector as_vector(const std::vector<double>& v) { return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())); }

oracle::Vae as_oracle(const VaeParams& p) {
    return {p.enc_w1, p.enc_b1, p.enc_w2, p.enc_b2, p.w_mu, p.b_mu, p.w_logvar,
            p.b_logvar, p.dec_w1, p.dec_b1, p.dec_w2, p.dec_b2};
}

VaeParams random_vae(int c, Rng& rng) {
    VaeParams p = VaeParams::init(c, rng());
    p.visit([&](const std::string&, Matrix& m) { m = testutil::randn(m.rows(), m.cols(), rng, 0.4); });
    return p;
}

// ---------------------------------------------------------------------------
// 1. Oracle suite

Outcome criterion_oracles() {
    Stopwatch clock;
    constexpr int kTrials = 20;
    std::map<std::string, double> worst;
    auto record = [&](const std::string& name, double err) { worst[name] = std::max(worst[name], err); };
    Rng rng(2024);
    std::uniform_int_distribution<int> small(1, 5);

    for (int t = 0; t < kTrials; ++t) {
        const int c = t % 2 ? 8 : 6;
        const int heads = t % 3 == 0 ? 1 : 2;
        const int m = small(rng) % 3 + 1;
        const int hw = small(rng) + 1;

        // Prototype extraction.
        PrototypeExtractorParams p = PrototypeExtractorParams::init(m, c, heads, rng());
        p.visit([&](const std::string&, Matrix& x) { x = testutil::randn(x.rows(), x.cols(), rng, 0.5); });
        const Matrix f = testutil::randn(hw, c, rng);
        {
            ad::ParamBinder bind;
            const PrototypeSet s = extract_prototypes(ad::constant(f), p, bind);
            const auto bank = [&](const Matrix& q) {
                return oracle::prototype_bank(q, f, p.wq, p.wk, p.wv, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2, heads);
            };
            record("extract_prototypes", std::max(testutil::max_abs_diff(s.normal.value(), bank(p.query_normal)),
                                                  testutil::max_abs_diff(s.anomaly.value(), bank(p.query_anomaly))));
        }

        // Nearest distances and center loss.
        const Matrix pn = testutil::randn(m, c, rng), pa = testutil::randn(m, c, rng);
        record("nn_distances",
               testutil::max_abs_diff(nn_distances(ad::constant(f), ad::constant(pn)).distances.value(),
                                      oracle::nn_distances(f, pn)));
        std::vector<double> y(hw);
        for (int i = 0; i < hw; ++i) y[i] = static_cast<double>(rng() % 2);
        record("center_loss",
               std::abs(center_loss(ad::constant(f), ad::constant(pn), ad::constant(pa), as_vector(y)).scalar() -
                        oracle::center_loss(f, pn, pa, y)));

        // VAE.
        const VaeParams vae = random_vae(c, rng);
        const oracle::Vae ov = as_oracle(vae);
        const Matrix g = testutil::randn(1, c, rng);
        {
            ad::ParamBinder bind;
            const LatentStats st = vae_encode(ad::constant(g), vae, bind);
            Matrix mu, lv;
            oracle::vae_encode(ov, g, mu, lv);
            record("vae_encode", std::max(testutil::max_abs_diff(st.mu.value(), mu),
                                          testutil::max_abs_diff(st.log_var.value(), lv)));
            const Matrix z = testutil::randn(3, c, rng);
            record("vae_decode",
                   testutil::max_abs_diff(vae_decode(ad::constant(z), vae, bind).value(), oracle::vae_decode(ov, z)));
            const Matrix eps = testutil::randn(1, c, rng);
            record("reparameterize",
                   testutil::max_abs_diff(reparameterize(ad::constant(mu), ad::constant(lv), eps).value(),
                                          oracle::reparameterize(mu, lv, eps)));
            const Matrix s = testutil::randn(1, c, rng);
            record("vae_loss", std::abs(vae_loss(ad::constant(g), ad::constant(s), ad::constant(mu), ad::constant(lv)).scalar() -
                                        oracle::vae_loss(g, s, mu, lv)));
        }

        // Similarities, mask, refinement.
        const Matrix en = testutil::randn(1, c, rng), ea = testutil::randn(1, c, rng);
        const double tau = t % 2 ? 0.07 : 0.5;
        const SimilarityBundle sb =
            initial_similarities({ad::constant(en), ad::constant(ea)}, ad::constant(f), ad::constant(g), tau);
        const oracle::Similarities os = oracle::similarities(en, ea, f, g, tau);
        record("initial_similarities",
               std::max({testutil::max_abs_diff(sb.local_normal.value(), os.local_n),
                         testutil::max_abs_diff(sb.local_anomaly.value(), os.local_a),
                         std::abs(sb.global_normal.scalar() - os.global_n),
                         std::abs(sb.global_anomaly.scalar() - os.global_a)}));

        const Matrix dn = testutil::uniform(hw, 1, rng, 0.0, 2.0), da = testutil::uniform(hw, 1, rng, 0.0, 2.0);
        const double alpha = testutil::uniform(1, 1, rng)(0, 0);
        const bool max_norm = t % 2 == 1;
        const ad::Var mask = spatial_mask(ad::constant(dn), ad::constant(da), alpha,
                                          max_norm ? DistanceNorm::Max : DistanceNorm::L2);
        record("spatial_mask", testutil::max_abs_diff(
                                   mask.value(), oracle::spatial_mask(testutil::to_vec(dn), testutil::to_vec(da), alpha, max_norm)));

        const double beta = testutil::uniform(1, 1, rng)(0, 0);
        const RefinedScores rs = refine(sb, mask, beta);
        const oracle::Refined orf = oracle::refine(os, col_vec(mask), beta);
        record("refine", std::max({testutil::max_abs_diff(rs.local_normal.value(), orf.local_n),
                                   testutil::max_abs_diff(rs.local_anomaly.value(), orf.local_a),
                                   std::abs(rs.global_normal.scalar() - orf.global_n),
                                   std::abs(rs.global_anomaly.scalar() - orf.global_a)}));

        // Composite loss on an upsampled-size map.
        const int h = 4, w = 4;
        const Matrix sn = testutil::uniform(h * w, 1, rng), sa = testutil::uniform(h * w, 1, rng);
        Matrix yy = (testutil::uniform(h, w, rng).array() > 0.6).cast<double>();
        if (t == 0) yy.setZero();
        const double sg = testutil::uniform(1, 1, rng, 0.01, 0.99)(0, 0);
        const GlocalLossTerms gl = glocal_loss(ad::constant(sn), ad::constant(sa), ad::scalar(sg), yy);
        std::vector<double> yflat;
        for (int r = 0; r < h; ++r)
            for (int cc = 0; cc < w; ++cc) yflat.push_back(yy(r, cc));
        const oracle::GlocalTerms og = oracle::glocal_loss(testutil::to_vec(sn), testutil::to_vec(sa), sg, yflat);
        record("glocal_loss", std::max({std::abs(gl.dice_anomaly.scalar() - og.dice_anomaly),
                                        std::abs(gl.dice_normal.scalar() - og.dice_normal),
                                        std::abs(gl.focal.scalar() - og.focal), std::abs(gl.bce.scalar() - og.bce),
                                        std::abs(gl.total.scalar() - og.total())}));
    }

    double max_err = 0.0;
    std::string worst_name;
    for (const auto& [name, err] : worst)
        if (err >= max_err) {
            max_err = err;
            worst_name = name;
        }
    const double secs = clock.seconds();
    Outcome o;
    o.pass = worst.size() == 11 && max_err <= 1e-9 && secs < 30.0;
    o.detail = std::to_string(worst.size()) + " functions x " + std::to_string(kTrials) + " instances, max abs err " +
               fmt("%.2e", max_err) + " (" + worst_name + "), " + fmt("%.1f s", secs);
    return o;
}

// ---------------------------------------------------------------------------
// 2. Gradient suite

RunConfig gradient_config() {
    RunConfig cfg = testutil::tiny_config();  // C=8, 2x2 grid, M=2, R=2
    return cfg;
}

/// Relative error per parameter matrix; a floor keeps vanishing gradients from
/// turning round-off into a large ratio.
double fd_error(Matrix& param, const Matrix& analytic, const std::function<double()>& loss) {
    Matrix numeric(param.rows(), param.cols());
    const double h = 1e-5;
    for (Eigen::Index i = 0; i < param.size(); ++i) {
        const double saved = param(i);
        param(i) = saved + h;
        const double up = loss();
        param(i) = saved - h;
        const double down = loss();
        param(i) = saved;
        numeric(i) = (up - down) / (2.0 * h);
    }
    const double denom = std::max({analytic.norm(), numeric.norm(), 1e-7});
    return (analytic - numeric).norm() / denom;
}

struct GradReport {
    double worst = 0.0;
    std::string where;
    int arrays = 0;
};

template <typename LossFn>
void check_group(CopsModel& model, const std::vector<ParamGroup>& groups, LossFn loss, GradReport& rep) {
    std::vector<CopsModel::NamedParam> params;
    for (auto& p : model.parameters())
        if (std::find(groups.begin(), groups.end(), p.group) != groups.end()) params.push_back(p);

    ad::ParamBinder bind;
    for (auto& p : params) bind.set_trainable(*p.value);
    loss(bind).backward();
    for (auto& p : params) {
        const Matrix analytic = bind.grad(*p.value);
        const double err = fd_error(*p.value, analytic, [&] {
            ad::ParamBinder b;
            return loss(b).scalar();
        });
        ++rep.arrays;
        if (err >= rep.worst) {
            rep.worst = err;
            rep.where = p.name;
        }
    }
}

Outcome criterion_gradients() {
    Stopwatch clock;
    const RunConfig cfg = gradient_config();
    CopsModel model = CopsModel::create(cfg);
    // Move away from the initialization so no group sits at a special point.
    Rng perturb(77);
    for (auto& p : model.parameters())
        if (p.group != ParamGroup::Frozen) *p.value += testutil::randn(p.value->rows(), p.value->cols(), perturb, 0.05);

    // An anomalous example with a mask touching some but not all patches.
    const DatasetManifest ds = testutil::tiny_dataset(cfg, 8, 3);
    std::optional<TrainingExample> ex;
    for (const Sample& s : ds.samples) {
        if (s.label != 1) continue;
        TrainingExample cand = prepare_example(model, sample_image(s, cfg.image_height, cfg.image_width),
                                               sample_mask(s, cfg.image_height, cfg.image_width), s.label);
        const double frac = cand.patch_labels->mean();
        if (frac > 0.0 && frac < 1.0) {
            ex = std::move(cand);
            break;
        }
    }
    if (!ex) return {false, "no partially anomalous example in the fixture"};

    GradReport ests, icts, saga;
    const ad::Var features = ad::constant(ex->local.features);
    check_group(model, {ParamGroup::Theta},
                [&](ad::ParamBinder& bind) {
                    const PrototypeSet ps = extract_prototypes(features, model.extractor, bind);
                    return center_loss(features, ps.normal, ps.anomaly, *ex->patch_labels);
                },
                ests);

    check_group(model, {ParamGroup::Psi},
                [&](ad::ParamBinder& bind) {
                    Rng rng(11);
                    const ad::Var g = ad::constant(ex->global.g);
                    const ClassTokenSamples ct =
                        sample_class_tokens(model.vae, cfg.num_samples, SamplingMode::Posterior, g, rng, bind);
                    return vae_loss(g, ad::rows(ct.samples, 0, 1), ct.mu, ct.log_var);
                },
                icts);

    check_group(model, {ParamGroup::Psi, ParamGroup::Omega, ParamGroup::Phi},
                [&](ad::ParamBinder& bind) {
                    Rng rng(12);
                    const ForwardPass fp =
                        run_forward(model, ex->global, ex->local, SamplingMode::Posterior, rng, bind);
                    const int gh = ex->local.grid_h, gw = ex->local.grid_w;
                    const int h = static_cast<int>(ex->mask->rows()), w = static_cast<int>(ex->mask->cols());
                    return glocal_loss(upsample(fp.refined.local_normal, gh, gw, h, w),
                                       upsample(fp.refined.local_anomaly, gh, gw, h, w), fp.refined.global_anomaly,
                                       *ex->mask, cfg.loss_options())
                        .total;
                },
                saga);

    const double secs = clock.seconds();
    const double worst = std::max({ests.worst, icts.worst, saga.worst});
    Outcome o;
    o.pass = worst < 1e-4 && secs < 120.0 && ests.arrays > 0 && icts.arrays > 0 && saga.arrays > 0;
    o.detail = "max rel err L_ESTS/theta " + fmt("%.1e", ests.worst) + ", L_ICTS/psi " + fmt("%.1e", icts.worst) +
               ", L_SAGA/psi,omega,phi " + fmt("%.1e", saga.worst) + " (" + saga.where + "), " +
               std::to_string(ests.arrays + icts.arrays + saga.arrays) + " arrays, " + fmt("%.1f s", secs);
    return o;
}

// ---------------------------------------------------------------------------
// 3. Normalization and limits

Outcome criterion_limits() {
    Rng rng(31);
    double sum_err = 0.0, beta_err = 0.0, alpha_err = 0.0, kl_min = INFINITY, kl_zero = INFINITY, scale_err = 0.0;
    bool dropped_term_ignored = true;

    // Similarities on a trained-shape forward pass as well as random inputs.
    const RunConfig cfg = testutil::tiny_config();
    const CopsModel model = CopsModel::create(cfg);
    const DatasetManifest ds = testutil::tiny_dataset(cfg, 2, 4, false);
    for (const Sample& s : ds.samples) {
        const auto [g, f] = model.vision.encode(sample_image(s, cfg.image_height, cfg.image_width));
        ad::ParamBinder bind;
        Rng r(5);
        const ForwardPass fp = run_forward(model, g, f, SamplingMode::Prior, r, bind);
        sum_err = std::max(sum_err, ((fp.similarities.local_normal.value() + fp.similarities.local_anomaly.value())
                                         .array() -
                                     1.0)
                                        .abs()
                                        .maxCoeff());
    }

    for (int t = 0; t < 50; ++t) {
        const int c = 6, hw = 9;
        const Matrix en = testutil::randn(1, c, rng), ea = testutil::randn(1, c, rng);
        const Matrix f = testutil::randn(hw, c, rng), g = testutil::randn(1, c, rng);
        const double tau = testutil::uniform(1, 1, rng, 0.01, 1.0)(0, 0);
        const SimilarityBundle sb =
            initial_similarities({ad::constant(en), ad::constant(ea)}, ad::constant(f), ad::constant(g), tau);
        sum_err = std::max(sum_err,
                           ((sb.local_normal.value() + sb.local_anomaly.value()).array() - 1.0).abs().maxCoeff());

        const ad::Var mask = ad::constant(testutil::uniform(hw, 1, rng));
        const RefinedScores r = refine(sb, mask, 1.0);
        beta_err = std::max({beta_err, std::abs(r.global_normal.scalar() - sb.global_normal.scalar()),
                             std::abs(r.global_anomaly.scalar() - sb.global_anomaly.scalar())});

        const Matrix dn = testutil::uniform(hw, 1, rng, 0.0, 2.0), da = testutil::uniform(hw, 1, rng, 0.0, 2.0);
        const Matrix other = testutil::uniform(hw, 1, rng, 0.0, 2.0);
        const Matrix m1 = spatial_mask(ad::constant(dn), ad::constant(da), 1.0).value();
        const Matrix m0 = spatial_mask(ad::constant(dn), ad::constant(da), 0.0).value();
        alpha_err = std::max({alpha_err, testutil::max_abs_diff(m1, dn / dn.norm()),
                              testutil::max_abs_diff(m0, (1.0 - (da / da.norm()).array()).matrix())});
        dropped_term_ignored = dropped_term_ignored &&
                               testutil::bit_identical(m1, spatial_mask(ad::constant(dn), ad::constant(other), 1.0).value()) &&
                               testutil::bit_identical(m0, spatial_mask(ad::constant(other), ad::constant(da), 0.0).value());

        const double k = testutil::uniform(1, 1, rng, 0.01, 100.0)(0, 0);
        for (DistanceNorm norm : {DistanceNorm::L2, DistanceNorm::Max}) {
            const Matrix base = spatial_mask(ad::constant(dn), ad::constant(da), 0.3, norm).value();
            const Matrix scaled = spatial_mask(ad::constant(k * dn), ad::constant(k * da), 0.3, norm).value();
            scale_err = std::max(scale_err, testutil::max_abs_diff(base, scaled));
        }

        const Matrix mu = testutil::randn(1, c, rng), lv = testutil::randn(1, c, rng, 2.0);
        // With a perfect reconstruction the objective is the KL term alone.
        kl_min = std::min(kl_min, vae_loss(ad::constant(g), ad::constant(g), ad::constant(mu), ad::constant(lv)).scalar());
    }
    kl_zero = vae_loss(ad::constant(Matrix::Ones(1, 6)), ad::constant(Matrix::Ones(1, 6)), ad::constant(Matrix::Zero(1, 6)),
                       ad::constant(Matrix::Zero(1, 6)))
                  .scalar();

    Outcome o;
    o.pass = sum_err <= 1e-6 && beta_err == 0.0 && alpha_err <= 1e-15 && dropped_term_ignored && kl_min >= 0.0 &&
             kl_zero == 0.0 && scale_err <= 1e-12;
    o.detail = "sum err " + fmt("%.1e", sum_err) + ", beta=1 err " + fmt("%.1e", beta_err) + ", alpha limits err " +
               fmt("%.1e", alpha_err) + (dropped_term_ignored ? " (dropped term ignored)" : " (dropped term leaks)") +
               ", min KL " + fmt("%.3g", kl_min) + ", KL(0,1) " + fmt("%.1e", kl_zero) + ", scale err " +
               fmt("%.1e", scale_err);
    return o;
}

// ---------------------------------------------------------------------------
// 4. Parameter-group isolation

std::set<ParamGroup> changed_after_step(bool ests, bool icts, bool saga) {
    RunConfig cfg = testutil::tiny_config();
    cfg.loss_ests = ests;
    cfg.loss_icts = icts;
    cfg.loss_saga = saga;
    CopsModel model = CopsModel::create(cfg);
    std::vector<TrainingExample> ex;
    for (const Sample& s : testutil::tiny_dataset(cfg, 8, 0).samples)
        ex.push_back(prepare_example(model, sample_image(s, cfg.image_height, cfg.image_width),
                                     sample_mask(s, cfg.image_height, cfg.image_width), s.label));
    std::vector<const TrainingExample*> batch;
    for (const auto& e : ex) batch.push_back(&e);
    const auto before = testutil::snapshot(model);
    AdamOptimizer opt(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    Rng rng(1);
    train_step(model, batch, opt, rng);
    std::set<ParamGroup> out;
    const auto params = model.parameters();
    for (size_t i = 0; i < params.size(); ++i)
        if (!testutil::bit_identical(*params[i].value, before[i])) out.insert(params[i].group);
    return out;
}

std::string group_list(const std::set<ParamGroup>& s) {
    std::string out = "{";
    for (ParamGroup g : s) out += (out.size() > 1 ? "," : "") + std::string(group_name(g));
    return out + "}";
}

Outcome criterion_isolation(CopsModel& trained) {
    const auto e = changed_after_step(true, false, false);
    const auto i = changed_after_step(false, true, false);
    const auto s = changed_after_step(false, false, true);
    const bool terms_ok = e == std::set{ParamGroup::Theta} && i == std::set{ParamGroup::Psi} &&
                          s == std::set{ParamGroup::Psi, ParamGroup::Omega, ParamGroup::Phi};

    CopsModel fresh = CopsModel::create(trained.config);
    const auto a = trained.group(ParamGroup::Frozen), b = fresh.group(ParamGroup::Frozen);
    bool frozen_ok = a.size() == b.size() && !a.empty();
    for (size_t k = 0; frozen_ok && k < a.size(); ++k) frozen_ok = testutil::bit_identical(*a[k], *b[k]);

    Outcome o;
    o.pass = terms_ok && frozen_ok;
    o.detail = "L_ESTS moves " + group_list(e) + ", L_ICTS moves " + group_list(i) + ", L_SAGA moves " + group_list(s) +
               "; " + std::to_string(a.size()) + " frozen arrays " +
               (frozen_ok ? "bit-identical after full run" : "CHANGED after full run");
    return o;
}

// ---------------------------------------------------------------------------
// 5. Metric oracles

Outcome criterion_metrics() {
    Rng rng(55);
    double worst = 0.0;
    int cases = 0;
    for (int n = 1; n <= 200; ++n) {
        for (int rep = 0; rep < 2; ++rep) {
            const int levels = rep == 0 ? 5 : 1000000;
            std::uniform_int_distribution<int> lvl(0, levels - 1), bit(0, 1);
            std::vector<double> s(n);
            std::vector<int> y(n);
            for (int i = 0; i < n; ++i) {
                s[i] = lvl(rng) / static_cast<double>(levels);
                y[i] = bit(rng);
            }
            const auto a = auroc(s, y);
            const auto ap = average_precision(s, y);
            const bool both = std::count(y.begin(), y.end(), 1) > 0 && std::count(y.begin(), y.end(), 0) > 0;
            if (a.has_value() != both) return {false, "AUROC definedness wrong at n=" + std::to_string(n)};
            if (a) worst = std::max(worst, std::abs(*a - oracle::auroc_pairs(s, y)));
            if (ap) worst = std::max(worst, std::abs(*ap - oracle::ap_sweep(s, y)));
            ++cases;
        }
    }
    const bool perfect = *auroc({0.1, 0.2, 0.3, 0.7, 0.8}, {0, 0, 0, 1, 1}) == 1.0 &&
                         *average_precision({0.1, 0.2, 0.3, 0.7, 0.8}, {0, 0, 0, 1, 1}) == 1.0;
    const bool ties = *auroc(std::vector<double>(10, 0.4), {0, 1, 0, 1, 1, 0, 0, 0, 1, 0}) == 0.5;
    Outcome o;
    o.pass = worst <= 1e-9 && perfect && ties;
    o.detail = std::to_string(cases) + " cases n=1..200, max abs err " + fmt("%.1e", worst) + ", perfect separation " +
               (perfect ? "1.0" : "WRONG") + ", all ties " + (ties ? "0.5" : "WRONG");
    return o;
}

// ---------------------------------------------------------------------------
// 6 and 7. Synthetic end-to-end protocol

struct SynthRun {
    TrainResult trained;
    MetricReport report;
    double seconds = 0.0;
};

SynthRun synth_run(std::uint64_t seed, bool all_modules) {
    Stopwatch clock;
    RunConfig cfg;
    cfg.seed = seed;
    cfg.enable_ests = cfg.enable_icts = cfg.enable_saga = all_modules;
    SynthOptions opts;
    opts.num_categories = 4;
    opts.per_category = 64;
    opts.image_height = cfg.image_height;
    opts.image_width = cfg.image_width;
    opts.seed = seed;
    auto [train_set, test_set] = synth_dataset(opts);
    if (!categories_disjoint(train_set, test_set)) throw std::runtime_error("synthetic split not disjoint");
    SynthRun r{train(cfg, train_set), {}, 0.0};
    r.report = evaluate(r.trained.model, test_set, cfg.seed);
    r.seconds = clock.seconds();
    progress(std::string(all_modules ? "full" : "variant A") + " seed " + std::to_string(seed) + ": I-AUROC " +
             fmt("%.4f", r.report.average.image_auroc.value_or(-1)) + " P-AUROC " +
             fmt("%.4f", r.report.average.pixel_auroc.value_or(-1)) + " in " + fmt("%.1f s", r.seconds));
    return r;
}

Outcome criterion_end_to_end(const SynthRun& r) {
    const double i = r.report.average.image_auroc.value_or(0.0);
    const double p = r.report.average.pixel_auroc.value_or(0.0);
    Outcome o;
    o.pass = i >= 0.85 && p >= 0.80 && r.seconds <= 600.0;
    o.detail = "I-AUROC " + fmt("%.4f", i) + " (>= 0.85), P-AUROC " + fmt("%.4f", p) + " (>= 0.80), " +
               fmt("%.1f s", r.seconds) + " (<= 600 s)";
    return o;
}

Outcome criterion_ablation(const SynthRun& full_seed0) {
    double full = 0.0, base = 0.0;
    std::string per_seed;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const double f = seed == 0 ? full_seed0.report.average.image_auroc.value_or(0.0)
                                   : synth_run(seed, true).report.average.image_auroc.value_or(0.0);
        const double b = synth_run(seed, false).report.average.image_auroc.value_or(0.0);
        full += f / 3.0;
        base += b / 3.0;
        per_seed += " s" + std::to_string(seed) + " " + fmt("%.3f", f) + "/" + fmt("%.3f", b);
    }
    Outcome o;
    o.pass = full >= base;
    o.detail = "mean I-AUROC full " + fmt("%.4f", full) + " vs variant A " + fmt("%.4f", base) + " (full/A:" +
               per_seed + ")";
    return o;
}

// ---------------------------------------------------------------------------
// 8. Determinism and persistence

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Outcome criterion_determinism() {
    RunConfig cfg;
    cfg.epochs = 2;
    SynthOptions opts;
    opts.per_category = 8;
    auto [train_set, test_set] = synth_dataset(opts);

    auto run = [&](std::string& log, std::string& report) {
        TrainResult r = train(cfg, train_set, [&](const EpochSummary& e) { log += format_epoch_line(e) + "\n"; });
        const MetricReport m = evaluate(r.model, test_set, cfg.seed);
        report = m.to_table() + m.to_key_value();
        return r;
    };
    std::string log_a, log_b, rep_a, rep_b;
    TrainResult a = run(log_a, rep_a);
    run(log_b, rep_b);
    const bool logs_same = !log_a.empty() && log_a == log_b;
    const bool reports_same = !rep_a.empty() && rep_a == rep_b;

    const fs::path dir = fs::temp_directory_path() / "cops_acceptance";
    fs::create_directories(dir);
    const fs::path ckpt = dir / "model.ckpt";
    save_checkpoint(a.model, ckpt.string());
    const CopsModel back = load_checkpoint(ckpt.string());
    bool predictions_same = true;
    for (size_t i = 0; i < test_set.samples.size(); ++i) {
        const ImageTensor img = sample_image(test_set.samples[i], cfg.image_height, cfg.image_width);
        Rng r1(derive_seed(cfg.seed, 1000 + i)), r2(derive_seed(cfg.seed, 1000 + i));
        const AnomalyResult p = predict(img, a.model, r1), q = predict(img, back, r2);
        predictions_same = predictions_same && std::bit_cast<std::uint64_t>(p.score) == std::bit_cast<std::uint64_t>(q.score) &&
                           testutil::bit_identical(p.anomaly_map, q.anomaly_map);
    }
    const MetricReport reloaded = evaluate(back, test_set, cfg.seed);
    const bool reloaded_report_same = reloaded.to_table() + reloaded.to_key_value() == rep_a;

    Rng rng(8);
    const Matrix map = testutil::randn(32, 32, rng);
    const fs::path raw = dir / "map.raw", raw2 = dir / "map2.raw";
    write_raw_map(raw.string(), map);
    const Matrix decoded = read_raw_map(raw.string());
    write_raw_map(raw2.string(), decoded);
    const bool raw_ok = testutil::bit_identical(decoded, map.cast<float>().cast<double>()) &&
                        read_bytes(raw) == read_bytes(raw2) && testutil::bit_identical(read_raw_map(raw2.string()), decoded);

    Outcome o;
    o.pass = logs_same && reports_same && predictions_same && reloaded_report_same && raw_ok;
    o.detail = std::string("loss logs ") + (logs_same ? "identical" : "DIFFER") + ", reports " +
               (reports_same ? "identical" : "DIFFER") + ", checkpoint predictions " +
               (predictions_same && reloaded_report_same ? "bit-identical" : "DIFFER") + ", raw map " +
               (raw_ok ? "round-trips exactly" : "MISMATCH");
    return o;
}

// ---------------------------------------------------------------------------
// 9. Defaults audit

Outcome criterion_defaults() {
    const RunConfig c;
    const bool ok = c.context_length == 6 && c.state_length == 6 && c.class_length == 2 && c.num_samples == 10 &&
                    c.alpha == 0.3 && c.beta == 0.9 && c.tau == 0.07 && c.learning_rate == 0.001 &&
                    c.batch_size == 8 && c.epochs == 10 && c.gaussian_sigma == 4.0 && c.seed == 0;
    return {ok, "K=" + std::to_string(c.context_length) + " M=" + std::to_string(c.state_length) +
                    " N=" + std::to_string(c.class_length) + " R=" + std::to_string(c.num_samples) + " alpha=" +
                    fmt("%g", c.alpha) + " beta=" + fmt("%g", c.beta) + " tau=" + fmt("%g", c.tau) + " lr=" +
                    fmt("%g", c.learning_rate) + " batch=" + std::to_string(c.batch_size) + " epochs=" +
                    std::to_string(c.epochs) + " sigma=" + fmt("%g", c.gaussian_sigma) + " seed=" +
                    std::to_string(c.seed)};
}

Outcome guarded(const std::function<Outcome()>& f) {
    try {
        return f();
    } catch (const std::exception& e) {
        return {false, std::string("exception: ") + e.what()};
    }
}

}  // namespace

int main() {
    spdlog::set_level(spdlog::level::warn);
    std::map<int, std::pair<std::string, Outcome>> results;

    progress("criterion 1");
    results[1] = {"reference oracles", guarded(criterion_oracles)};
    progress("criterion 2");
    results[2] = {"finite-difference gradients", guarded(criterion_gradients)};
    progress("criterion 3");
    results[3] = {"normalization and limits", guarded(criterion_limits)};
    progress("criterion 5");
    results[5] = {"metric oracles", guarded(criterion_metrics)};
    progress("criterion 6");
    std::optional<SynthRun> seed0;
    results[6] = {"synthetic zero-shot end to end", guarded([&] {
                      seed0 = synth_run(0, true);
                      return criterion_end_to_end(*seed0);
                  })};
    progress("criterion 4");
    results[4] = {"parameter-group isolation", guarded([&] {
                      if (!seed0) return Outcome{false, "no trained model from criterion 6"};
                      return criterion_isolation(seed0->trained.model);
                  })};
    progress("criterion 7");
    results[7] = {"ablation direction", guarded([&] {
                      if (!seed0) return Outcome{false, "no trained model from criterion 6"};
                      return criterion_ablation(*seed0);
                  })};
    progress("criterion 8");
    results[8] = {"determinism and persistence", guarded(criterion_determinism)};
    results[9] = {"hyperparameter defaults", guarded(criterion_defaults)};

    int failed = 0;
    for (const auto& [n, entry] : results) {
        const auto& [name, o] = entry;
        if (!o.pass) ++failed;
        std::printf("%s  criterion %d  %s: %s\n", o.pass ? "PASS" : "FAIL", n, name.c_str(), o.detail.c_str());
    }
    std::printf("%d/%zu criteria passed\n", static_cast<int>(results.size()) - failed, results.size());
    return failed == 0 ? 0 : 1;
}
