#pragma once

#include "cops/backbone.hpp"
#include "cops/saga.hpp"

#include <cstdint>
#include <string>

namespace cops {

/// Every tunable of a run. Defaults reproduce the reference hyperparameters;
/// backbone sizes default to the desk-scale toy encoder.
struct RunConfig {
    // Prompt layout and sampling.
    int context_length = 6;
    int state_length = 6;
    int class_length = 2;
    int num_samples = 10;

    // Alignment.
    double alpha = 0.3;
    double beta = 0.9;
    double tau = 0.07;
    std::string distance_norm = "l2";  // "l2" | "max"

    // Optimization.
    double learning_rate = 1e-3;
    int batch_size = 8;
    int epochs = 10;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;

    // Inference.
    double gaussian_sigma = 4.0;
    bool shared_eval_samples = false;
    std::string pixel_pooling = "pooled";  // "pooled" | "per_image"

    // Loss shaping.
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;
    double dice_eps = 1.0;
    bool vae_mean_reconstruction = false;
    std::string train_sampling = "posterior";  // "posterior" | "prior"
    std::string inference_sampling = "prior";  // "prior" | "posterior"

    // Module toggles (ablation variants). A disabled module contributes neither its
    // architectural effect nor its loss term.
    bool enable_ests = true;
    bool enable_icts = true;
    bool enable_saga = true;

    // Per-term switches for the three objectives, independent of the module toggles.
    bool loss_ests = true;
    bool loss_icts = true;
    bool loss_saga = true;

    // Backbone.
    int embed_dim = 64;
    int patch_size = 8;
    int image_height = 32;
    int image_width = 32;
    int vision_layers = 2;
    int vision_heads = 4;
    int text_layers = 9;
    int text_heads = 4;
    int mlp_ratio = 2;
    int deep_prompt_groups = 8;
    int deep_prompt_length = 4;
    int prototype_heads = 8;

    EncoderConfig encoder_config() const;
    TextConfig text_config() const;
    GlocalLossOptions loss_options() const;
    DistanceNorm distance_norm_kind() const;

    /// Throws std::invalid_argument naming the offending field.
    void validate() const;

    std::string to_json() const;
    /// Unknown keys are rejected with an error naming the key; absent keys keep defaults.
    static RunConfig from_json(const std::string& text);
    static RunConfig load(const std::string& path);
};

}  // namespace cops
