#pragma once

#include "cops/data.hpp"
#include "cops/model.hpp"

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace cops {

/// Max-pools an h x w {0, 1} mask onto the patch grid; row-major patch order.
Vector downsample_mask(const Matrix& mask, int patch_size);

/// Frozen-backbone features and labels for one training image, computed once.
struct TrainingExample {
    GlobalFeature global;
    LocalFeatureMap local;
    std::optional<Matrix> mask;          // h x w
    std::optional<Vector> patch_labels;  // HW
    int label = 0;
};

TrainingExample prepare_example(const CopsModel& model, const ImageTensor& image, const std::optional<Matrix>& mask,
                                 int label);

class AdamOptimizer {
public:
    AdamOptimizer(double learning_rate, double beta1, double beta2, double eps);

    /// Updates params[i] with grads[i]. Params without a gradient this step are skipped
    /// entirely, so their moments and values stay untouched.
    void step(const std::vector<Matrix*>& params, const std::vector<std::optional<Matrix>>& grads);

    double learning_rate() const { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }

private:
    struct Moments {
        Matrix m, v;
        long long steps = 0;
    };
    double lr_, beta1_, beta2_, eps_;
    std::unordered_map<const Matrix*, Moments> state_;
};

struct LossRecord {
    double ests = 0.0;
    double icts = 0.0;
    double saga = 0.0;
    bool aborted = false;
    std::string diagnostic;

    double total() const { return ests + icts + saga; }
};

/// One optimizer step on the batch-averaged objective
///   L_ESTS (theta) + L_ICTS (psi) + L_SAGA (psi, omega, phi).
/// A non-finite loss aborts the step and leaves every parameter untouched.
LossRecord train_step(CopsModel& model, std::span<const TrainingExample* const> batch, AdamOptimizer& optimizer,
                      Rng& rng);

struct EpochSummary {
    int epoch = 0;
    LossRecord mean;
    int steps = 0;
    int aborted_steps = 0;
};

struct TrainResult {
    CopsModel model;
    std::vector<EpochSummary> epochs;
};

/// One line per epoch, fixed formatting; byte-identical for identical runs.
std::string format_epoch_line(const EpochSummary& e);

/// Full training run. The callback, if set, sees each epoch summary as it completes.
TrainResult train(const RunConfig& cfg, const DatasetManifest& dataset,
                  const std::function<void(const EpochSummary&)>& on_epoch = {});

}  // namespace cops
