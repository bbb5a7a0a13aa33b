#pragma once

// Implicit class token sampling: a symmetric VAE over the global image feature.
// Decoded latent samples become additive class-word offsets in the prompts.

#include "cops/autodiff.hpp"
#include "cops/random.hpp"

#include <cstdint>
#include <optional>

namespace cops {

struct VaeParams {
    Matrix enc_w1, enc_b1, enc_w2, enc_b2;
    Matrix w_mu, b_mu, w_logvar, b_logvar;
    Matrix dec_w1, dec_b1, dec_w2, dec_b2;

    static VaeParams init(int embed_dim, std::uint64_t seed);

    int embed_dim() const { return static_cast<int>(enc_w1.rows()); }

    template <typename F>
    void visit(F&& f) {
        f("psi.enc_w1", enc_w1); f("psi.enc_b1", enc_b1);
        f("psi.enc_w2", enc_w2); f("psi.enc_b2", enc_b2);
        f("psi.w_mu", w_mu); f("psi.b_mu", b_mu);
        f("psi.w_logvar", w_logvar); f("psi.b_logvar", b_logvar);
        f("psi.dec_w1", dec_w1); f("psi.dec_b1", dec_b1);
        f("psi.dec_w2", dec_w2); f("psi.dec_b2", dec_b2);
    }
};

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

struct LatentStats {
    ad::Var mu;       // rows x C
    ad::Var log_var;  // rows x C, clamped to [kLogVarMin, kLogVarMax]
};

/// h = MLP_e(g); mu = h W_mu + b_mu; log_var = h W_sigma + b_sigma. Accepts any number of rows.
LatentStats vae_encode(const ad::Var& global, const VaeParams& params, ad::ParamBinder& bind);

/// z = mu + exp(log_var / 2) * eps, elementwise.
ad::Var reparameterize(const ad::Var& mu, const ad::Var& log_var, const Matrix& eps);

/// s = MLP_d(z), row by row.
ad::Var vae_decode(const ad::Var& z, const VaeParams& params, ad::ParamBinder& bind);

enum class SamplingMode { Posterior, Prior };

struct ClassTokenSamples {
    ad::Var samples;  // R x C decoded class tokens
    ad::Var mu;       // 1 x C (posterior mode only)
    ad::Var log_var;  // 1 x C (posterior mode only)
    Matrix eps;       // R x C standard-normal draws
};

/// Draws R class tokens. Posterior mode encodes `global` and reparameterizes with fresh
/// noise per row; prior mode decodes z ~ N(0, I) directly.
ClassTokenSamples sample_class_tokens(const VaeParams& params, int count, SamplingMode mode,
                                      const std::optional<ad::Var>& global, Rng& rng, ad::ParamBinder& bind);

/// ||s - g||^2 + 0.5 * sum(mu^2 + sigma^2 - log sigma^2 - 1).
/// With mean_reconstruction the squared error is divided by C.
ad::Var vae_loss(const ad::Var& global, const ad::Var& reconstruction, const ad::Var& mu, const ad::Var& log_var,
                 bool mean_reconstruction = false);

}  // namespace cops
