#include "cops/training.hpp"

#include "cops/checkpoint.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <filesystem>
#include <set>

using namespace cops;

namespace {

std::vector<TrainingExample> examples_for(const CopsModel& model, const DatasetManifest& ds) {
    std::vector<TrainingExample> out;
    const RunConfig& cfg = model.config;
    for (const Sample& s : ds.samples)
        out.push_back(prepare_example(model, sample_image(s, cfg.image_height, cfg.image_width),
                                      sample_mask(s, cfg.image_height, cfg.image_width), s.label));
    return out;
}

std::vector<const TrainingExample*> pointers(const std::vector<TrainingExample>& ex, size_t n) {
    std::vector<const TrainingExample*> out;
    for (size_t i = 0; i < std::min(n, ex.size()); ++i) out.push_back(&ex[i]);
    return out;
}

// Groups owning at least one array that differs from the snapshot.
std::set<ParamGroup> changed_groups(CopsModel& model, const std::vector<Matrix>& before) {
    std::set<ParamGroup> out;
    const auto params = model.parameters();
    for (size_t i = 0; i < params.size(); ++i)
        if (!testutil::bit_identical(*params[i].value, before[i])) out.insert(params[i].group);
    return out;
}

std::set<ParamGroup> step_with(RunConfig cfg, bool ests, bool icts, bool saga) {
    cfg.loss_ests = ests;
    cfg.loss_icts = icts;
    cfg.loss_saga = saga;
    CopsModel model = CopsModel::create(cfg);
    const auto ex = examples_for(model, testutil::tiny_dataset(cfg, 8, 0));
    const auto before = testutil::snapshot(model);
    AdamOptimizer opt(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    Rng rng(1);
    const auto batch = pointers(ex, 4);
    train_step(model, batch, opt, rng);
    return changed_groups(model, before);
}

}  // namespace

TEST_CASE("mask downsampling") {
    CHECK(downsample_mask(Matrix::Zero(16, 16), 8).isZero());
    Matrix one = Matrix::Zero(16, 16);
    one(9, 3) = 1.0;
    const Vector y = downsample_mask(one, 8);
    CHECK(y.sum() == 1.0);
    CHECK(y(2) == 1.0);

    Rng rng(1);
    const Matrix m = (testutil::uniform(16, 16, rng).array() > 0.97).cast<double>();
    const Vector got = downsample_mask(m, 8);
    for (int gy = 0; gy < 2; ++gy)
        for (int gx = 0; gx < 2; ++gx) {
            double any = 0.0;
            for (int y = 0; y < 8; ++y)
                for (int x = 0; x < 8; ++x) any = std::max(any, m(gy * 8 + y, gx * 8 + x));
            CHECK(got(gy * 2 + gx) == any);
        }
    CHECK_THROWS_AS(downsample_mask(Matrix::Zero(12, 16), 8), std::invalid_argument);
}

TEST_CASE("Adam follows the bias-corrected update and skips absent gradients") {
    Matrix a = Matrix::Constant(1, 2, 1.0), b = Matrix::Constant(1, 1, 5.0);
    AdamOptimizer opt(0.1, 0.9, 0.999, 1e-8);
    const Matrix g1 = (Matrix(1, 2) << 0.5, -2.0).finished();
    const Matrix g2 = (Matrix(1, 2) << 1.0, 1.0).finished();
    opt.step({&a, &b}, {g1, std::nullopt});
    opt.step({&a, &b}, {g2, std::nullopt});
    CHECK(b(0, 0) == 5.0);
    for (int i = 0; i < 2; ++i) {
        double m = 0, v = 0, p = 1.0;
        for (int t = 1; t <= 2; ++t) {
            const double g = t == 1 ? g1(0, i) : g2(0, i);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            p -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
        }
        CHECK(a(0, i) == doctest::Approx(p).epsilon(1e-14));
    }
}

TEST_CASE("each loss term only moves its own parameter groups") {
    const RunConfig cfg = testutil::tiny_config();
    CHECK(step_with(cfg, true, false, false) == std::set{ParamGroup::Theta});
    CHECK(step_with(cfg, false, true, false) == std::set{ParamGroup::Psi});
    CHECK(step_with(cfg, false, false, true) == std::set{ParamGroup::Psi, ParamGroup::Omega, ParamGroup::Phi});
}

TEST_CASE("train step contract") {
    RunConfig cfg = testutil::tiny_config();
    CopsModel model = CopsModel::create(cfg);
    const auto ex = examples_for(model, testutil::tiny_dataset(cfg, 8, 1));
    const auto batch = pointers(ex, 4);

    SUBCASE("zero learning rate leaves parameters but reports losses") {
        const auto before = testutil::snapshot(model);
        AdamOptimizer opt(0.0, 0.9, 0.999, 1e-8);
        Rng rng(2);
        const LossRecord rec = train_step(model, batch, opt, rng);
        CHECK(changed_groups(model, before).empty());
        CHECK(rec.ests > 0.0);
        CHECK(rec.icts > 0.0);
        CHECK(rec.saga > 0.0);
        CHECK_FALSE(rec.aborted);
    }
    SUBCASE("identical seeds give identical loss trajectories") {
        auto run = [&] {
            CopsModel m = CopsModel::create(cfg);
            AdamOptimizer opt(cfg.learning_rate, 0.9, 0.999, 1e-8);
            Rng rng(3);
            std::vector<double> out;
            for (int i = 0; i < 2; ++i) out.push_back(train_step(m, batch, opt, rng).total());
            return out;
        };
        const auto a = run(), b = run();
        CHECK(a == b);
        CHECK(a[0] != a[1]);
    }
    SUBCASE("non-finite loss aborts without touching parameters") {
        cfg.enable_icts = false;
        CopsModel m = CopsModel::create(cfg);
        TrainingExample bad = ex[0];
        bad.local.features(0, 0) = std::nan("");
        const std::vector<const TrainingExample*> poisoned{&ex[1], &bad};
        const auto before = testutil::snapshot(m);
        AdamOptimizer opt(cfg.learning_rate, 0.9, 0.999, 1e-8);
        Rng rng(4);
        const LossRecord rec = train_step(m, poisoned, opt, rng);
        CHECK(rec.aborted);
        CHECK_FALSE(rec.diagnostic.empty());
        CHECK(changed_groups(m, before).empty());
    }
    SUBCASE("empty batch rejected") {
        AdamOptimizer opt(cfg.learning_rate, 0.9, 0.999, 1e-8);
        Rng rng(5);
        CHECK_THROWS_AS(train_step(model, std::span<const TrainingExample* const>{}, opt, rng), std::invalid_argument);
    }
}

TEST_CASE("mask-free samples train the image-level term only") {
    RunConfig cfg = testutil::tiny_config();
    cfg.loss_icts = false;
    CopsModel model = CopsModel::create(cfg);
    auto ex = examples_for(model, testutil::tiny_dataset(cfg, 4, 2));
    for (auto& e : ex) {
        e.mask.reset();
        e.patch_labels.reset();
    }
    const auto before = testutil::snapshot(model);
    AdamOptimizer opt(cfg.learning_rate, 0.9, 0.999, 1e-8);
    Rng rng(6);
    const LossRecord rec = train_step(model, pointers(ex, 4), opt, rng);
    CHECK(rec.ests == 0.0);
    CHECK(rec.saga > 0.0);
    CHECK_FALSE(changed_groups(model, before).contains(ParamGroup::Theta));
}

TEST_CASE("training run") {
    RunConfig cfg = testutil::tiny_config();
    const DatasetManifest ds = testutil::tiny_dataset(cfg, 6, 3);

    SUBCASE("one epoch produces a loadable checkpoint") {
        std::vector<std::string> lines;
        TrainResult r = train(cfg, ds, [&](const EpochSummary& e) { lines.push_back(format_epoch_line(e)); });
        REQUIRE(r.epochs.size() == 1);
        CHECK(lines.size() == 1);
        CHECK(lines[0].rfind("epoch   1  L_ESTS ", 0) == 0);
        CHECK(r.model.train_categories == ds.categories());
        const auto path = std::filesystem::temp_directory_path() / "cops_training_smoke.ckpt";
        save_checkpoint(r.model, path.string());
        CHECK_NOTHROW(load_checkpoint(path.string()));
        std::filesystem::remove(path);
    }
    SUBCASE("disabling the prototype module leaves theta untouched") {
        cfg.enable_ests = false;
        cfg.epochs = 2;
        TrainResult r = train(cfg, ds);
        CopsModel fresh = CopsModel::create(cfg);
        const auto a = r.model.group(ParamGroup::Theta), b = fresh.group(ParamGroup::Theta);
        for (size_t i = 0; i < a.size(); ++i) CHECK(testutil::bit_identical(*a[i], *b[i]));
        CHECK(r.epochs.back().mean.ests == 0.0);
    }
    SUBCASE("frozen backbone is bit-identical after training") {
        cfg.epochs = 2;
        TrainResult r = train(cfg, ds);
        CopsModel fresh = CopsModel::create(cfg);
        const auto a = r.model.group(ParamGroup::Frozen), b = fresh.group(ParamGroup::Frozen);
        REQUIRE(a.size() == b.size());
        for (size_t i = 0; i < a.size(); ++i) CHECK(testutil::bit_identical(*a[i], *b[i]));
    }
    SUBCASE("empty dataset rejected") {
        CHECK_THROWS_AS(train(cfg, DatasetManifest{}), std::invalid_argument);
    }
}

TEST_CASE("the VAE term falls over ten epochs on the synthetic set (majority of seeds)") {
    int decreased = 0;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        RunConfig cfg;
        cfg.seed = seed;
        SynthOptions o;
        o.per_category = 12;
        o.seed = seed;
        const TrainResult r = train(cfg, synth_dataset(o).first);
        MESSAGE("seed " << seed << ": L_ICTS " << r.epochs.front().mean.icts << " -> " << r.epochs.back().mean.icts);
        if (r.epochs.back().mean.icts < r.epochs.front().mean.icts) ++decreased;
    }
    CHECK(decreased >= 2);
}
