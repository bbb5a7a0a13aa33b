#include "cops/training.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace cops {

namespace {

constexpr ParamGroup kTrainableGroups[] = {ParamGroup::Theta, ParamGroup::Psi, ParamGroup::Omega, ParamGroup::Phi};

struct ExampleLoss {
    ad::Var ests, icts, saga;
};

ExampleLoss example_losses(const CopsModel& model, const TrainingExample& ex, Rng& rng, ad::ParamBinder& bind) {
    const RunConfig& cfg = model.config;
    const SamplingMode mode = cfg.train_sampling == "prior" ? SamplingMode::Prior : SamplingMode::Posterior;
    ForwardPass fp = run_forward(model, ex.global, ex.local, mode, rng, bind);

    ExampleLoss out;
    if (cfg.enable_ests && cfg.loss_ests && ex.patch_labels) {
        out.ests = center_loss(fp.features, fp.prototypes.normal, fp.prototypes.anomaly, *ex.patch_labels);
    }
    if (cfg.enable_icts && cfg.loss_icts) {
        if (mode == SamplingMode::Posterior && fp.class_tokens.samples.rows() > 0) {
            out.icts = vae_loss(fp.global, ad::rows(fp.class_tokens.samples, 0, 1), fp.class_tokens.mu,
                                fp.class_tokens.log_var, cfg.vae_mean_reconstruction);
        } else {
            LatentStats stats = vae_encode(fp.global, model.vae, bind);
            Matrix eps = random_normal(1, cfg.embed_dim, 1.0, rng);
            ad::Var s = vae_decode(reparameterize(stats.mu, stats.log_var, eps), model.vae, bind);
            out.icts = vae_loss(fp.global, s, stats.mu, stats.log_var, cfg.vae_mean_reconstruction);
        }
    }
    if (cfg.loss_saga) {
        if (ex.mask) {
            const int gh = ex.local.grid_h, gw = ex.local.grid_w;
            const int h = static_cast<int>(ex.mask->rows()), w = static_cast<int>(ex.mask->cols());
            ad::Var up_n = upsample(fp.refined.local_normal, gh, gw, h, w);
            ad::Var up_a = upsample(fp.refined.local_anomaly, gh, gw, h, w);
            out.saga = glocal_loss(up_n, up_a, fp.refined.global_anomaly, *ex.mask, cfg.loss_options()).total;
        } else {
            // Mask-free sample: only the image-level term applies.
            const double lo = 1e-7, hi = 1.0 - 1e-7;
            ad::Var s = ad::clamp(fp.refined.global_anomaly, lo, hi);
            out.saga = ex.label == 1 ? ad::scale(ad::log(s), -1.0) : ad::scale(ad::log(ad::one_minus(s)), -1.0);
        }
    }
    return out;
}

}  // namespace

Vector downsample_mask(const Matrix& mask, int patch_size) {
    if (patch_size < 1) throw std::invalid_argument("downsample_mask: patch size must be positive");
    if (mask.rows() % patch_size != 0 || mask.cols() % patch_size != 0) {
        throw std::invalid_argument("downsample_mask: mask " + std::to_string(mask.rows()) + "x" +
                                    std::to_string(mask.cols()) + " not divisible by patch size " +
                                    std::to_string(patch_size));
    }
    const Eigen::Index gh = mask.rows() / patch_size;
    const Eigen::Index gw = mask.cols() / patch_size;
    Vector y(gh * gw);
    for (Eigen::Index i = 0; i < gh; ++i)
        for (Eigen::Index j = 0; j < gw; ++j)
            y(i * gw + j) = mask.block(i * patch_size, j * patch_size, patch_size, patch_size).maxCoeff() > 0.5 ? 1.0 : 0.0;
    return y;
}

TrainingExample prepare_example(const CopsModel& model, const ImageTensor& image, const std::optional<Matrix>& mask,
                                int label) {
    TrainingExample ex;
    auto [g, f] = model.vision.encode(image);
    ex.global = std::move(g);
    ex.local = std::move(f);
    ex.label = label;
    if (mask) {
        ex.mask = *mask;
        ex.patch_labels = downsample_mask(*mask, model.config.patch_size);
        ex.label = mask->maxCoeff() > 0.5 ? 1 : 0;
    }
    return ex;
}

AdamOptimizer::AdamOptimizer(double learning_rate, double beta1, double beta2, double eps)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (learning_rate < 0.0) throw std::invalid_argument("Adam: negative learning rate");
}

void AdamOptimizer::step(const std::vector<Matrix*>& params, const std::vector<std::optional<Matrix>>& grads) {
    if (params.size() != grads.size()) throw std::invalid_argument("Adam: params/grads length mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
        if (!grads[i]) continue;
        Matrix& p = *params[i];
        const Matrix& g = *grads[i];
        auto [it, inserted] = state_.try_emplace(params[i]);
        Moments& s = it->second;
        if (inserted) {
            s.m = Matrix::Zero(p.rows(), p.cols());
            s.v = Matrix::Zero(p.rows(), p.cols());
        }
        ++s.steps;
        s.m = beta1_ * s.m + (1.0 - beta1_) * g;
        s.v = beta2_ * s.v + (1.0 - beta2_) * g.cwiseProduct(g);
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(s.steps));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(s.steps));
        const Matrix update =
            (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + eps_);
        p -= lr_ * update;
    }
}

LossRecord train_step(CopsModel& model, std::span<const TrainingExample* const> batch, AdamOptimizer& optimizer,
                      Rng& rng) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    std::vector<Matrix*> params;
    for (ParamGroup g : kTrainableGroups)
        for (Matrix* m : model.group(g)) params.push_back(m);

    std::vector<std::optional<Matrix>> grads(params.size());
    LossRecord rec;
    for (const TrainingExample* ex : batch) {
        ad::ParamBinder bind;
        for (Matrix* m : params) bind.set_trainable(*m);
        ExampleLoss l = example_losses(model, *ex, rng, bind);

        ad::Var total;
        auto fold = [&](const ad::Var& term, double& acc, const char* name) {
            if (!term.defined()) return;
            const double v = term.scalar();
            if (!std::isfinite(v) && !rec.aborted) {
                rec.aborted = true;
                rec.diagnostic = std::string("non-finite ") + name + " loss";
            }
            acc += v;
            total = total.defined() ? ad::add(total, term) : term;
        };
        fold(l.ests, rec.ests, "ESTS");
        fold(l.icts, rec.icts, "ICTS");
        fold(l.saga, rec.saga, "SAGA");
        if (rec.aborted || !total.defined()) continue;

        total.backward();
        for (size_t i = 0; i < params.size(); ++i) {
            if (!bind.reached(*params[i])) continue;
            if (grads[i]) {
                *grads[i] += bind.grad(*params[i]);
            } else {
                grads[i] = bind.grad(*params[i]);
            }
        }
    }

    const double n = static_cast<double>(batch.size());
    rec.ests /= n;
    rec.icts /= n;
    rec.saga /= n;
    if (rec.aborted) {
        spdlog::warn("train step aborted: {}", rec.diagnostic);
        return rec;
    }
    for (auto& g : grads)
        if (g) *g /= n;
    optimizer.step(params, grads);
    return rec;
}

std::string format_epoch_line(const EpochSummary& e) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "epoch %3d  L_ESTS %.8f  L_ICTS %.8f  L_SAGA %.8f  total %.8f  steps %d aborted %d",
                  e.epoch, e.mean.ests, e.mean.icts, e.mean.saga, e.mean.total(), e.steps, e.aborted_steps);
    return buf;
}

TrainResult train(const RunConfig& cfg, const DatasetManifest& dataset,
                  const std::function<void(const EpochSummary&)>& on_epoch) {
    cfg.validate();
    if (dataset.samples.empty()) throw std::invalid_argument("train: empty dataset");
    TrainResult result{CopsModel::create(cfg), {}};
    CopsModel& model = result.model;
    model.train_categories = dataset.categories();

    std::vector<TrainingExample> examples;
    examples.reserve(dataset.samples.size());
    for (const Sample& s : dataset.samples) {
        const ImageTensor img = sample_image(s, cfg.image_height, cfg.image_width);
        examples.push_back(prepare_example(model, img, sample_mask(s, cfg.image_height, cfg.image_width), s.label));
    }

    AdamOptimizer opt(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    Rng sample_rng(derive_seed(cfg.seed, 500));
    std::vector<size_t> order(examples.size());
    std::iota(order.begin(), order.end(), size_t{0});

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, 600 + static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        EpochSummary summary;
        summary.epoch = epoch;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            std::vector<const TrainingExample*> batch;
            for (size_t i = start; i < std::min(order.size(), start + static_cast<size_t>(cfg.batch_size)); ++i)
                batch.push_back(&examples[order[i]]);
            LossRecord rec = train_step(model, batch, opt, sample_rng);
            if (rec.aborted) {
                ++summary.aborted_steps;
                continue;
            }
            summary.mean.ests += rec.ests;
            summary.mean.icts += rec.icts;
            summary.mean.saga += rec.saga;
            ++summary.steps;
        }
        if (summary.steps > 0) {
            summary.mean.ests /= summary.steps;
            summary.mean.icts /= summary.steps;
            summary.mean.saga /= summary.steps;
        }
        spdlog::debug("{}", format_epoch_line(summary));
        if (on_epoch) on_epoch(summary);
        result.epochs.push_back(summary);
    }
    return result;
}

}  // namespace cops
