#pragma once

// Spatially-aware glocal alignment: text/image cosine-softmax similarities,
// a prototype-distance spatial mask, local/global score interaction and the
// composite Dice + Focal + BCE training loss.

#include "cops/autodiff.hpp"
#include "cops/backbone.hpp"
#include "cops/prompts.hpp"

#include <vector>

namespace cops {

struct TextEmbeddingPair {
    ad::Var normal;   // 1 x C
    ad::Var anomaly;  // 1 x C
};

/// Mean over the R pairs of the encoded normal and anomaly prompts.
TextEmbeddingPair compute_text_embeddings(const std::vector<PromptPair>& pairs, const TextBackbone& text,
                                          ad::ParamBinder& bind);

struct SimilarityBundle {
    ad::Var local_normal;    // HW x 1
    ad::Var local_anomaly;   // HW x 1
    ad::Var global_normal;   // 1 x 1
    ad::Var global_anomaly;  // 1 x 1
    double tau = 0.07;
};

/// Two-way softmax over {normal, anomaly} of cos(e, x) / tau for every patch row of
/// `features` and for `global`.
SimilarityBundle initial_similarities(const TextEmbeddingPair& text, const ad::Var& features,
                                      const ad::Var& global, double tau);

enum class DistanceNorm { L2, Max };

/// alpha * d^n / ||d^n|| + (1 - alpha) * (1 - d^a / ||d^a||). A norm below 1e-8 makes
/// its normalized term zero.
ad::Var spatial_mask(const ad::Var& dist_normal, const ad::Var& dist_anomaly, double alpha,
                     DistanceNorm norm = DistanceNorm::L2);

struct RefinedScores {
    ad::Var local_normal;    // HW x 1, S_l^n * M
    ad::Var local_anomaly;   // HW x 1, S_l^a * M
    ad::Var global_normal;   // 1 x 1, beta * s_g^n + (1 - beta) * max(local_normal)
    ad::Var global_anomaly;  // 1 x 1
};

RefinedScores refine(const SimilarityBundle& bundle, const ad::Var& mask, double beta);

/// (h*w) x (H*W) bilinear interpolation operator on row-major flattened maps, using
/// half-pixel centers with edge clamping.
Matrix bilinear_upsample_matrix(int grid_h, int grid_w, int out_h, int out_w);

/// Upsamples an H*W column (row-major patches) to an h x w map.
Matrix upsample_map(const Matrix& map, int grid_h, int grid_w, int out_h, int out_w);

/// Differentiable variant returning the (h*w) x 1 row-major flattened map.
ad::Var upsample(const ad::Var& map, int grid_h, int grid_w, int out_h, int out_w);

struct GlocalLossOptions {
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;  // weight on the anomaly class
    double dice_eps = 1.0;
    double prob_clamp = 1e-7;
};

struct GlocalLossTerms {
    ad::Var total;
    ad::Var dice_anomaly;
    ad::Var dice_normal;
    ad::Var focal;
    ad::Var bce;
};

/// 1 - (2 sum(p q) + eps) / (sum(p) + sum(q) + eps).
ad::Var dice_loss(const ad::Var& pred, const Matrix& target, double eps);

/// Dice(S~a, Y) + Dice(S~n, 1 - Y) + Focal([S~n, S~a], Y) + BCE(s^a_g, max Y).
/// Maps are (h*w) x 1 row-major; mask is h x w with entries in {0, 1}.
GlocalLossTerms glocal_loss(const ad::Var& local_normal, const ad::Var& local_anomaly,
                            const ad::Var& global_anomaly, const Matrix& mask,
                            const GlocalLossOptions& opts = {});

}  // namespace cops
