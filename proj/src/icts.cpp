#include "cops/icts.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace cops {

namespace {

ad::Var mlp(const ad::Var& x, const Matrix& w1, const Matrix& b1, const Matrix& w2, const Matrix& b2,
            ad::ParamBinder& bind) {
    ad::Var h = ad::gelu(ad::add_row(ad::matmul(x, bind(w1)), bind(b1)));
    return ad::add_row(ad::matmul(h, bind(w2)), bind(b2));
}

constexpr double kDecoderOutputStd = 0.02;

}  // namespace

VaeParams VaeParams::init(int embed_dim, std::uint64_t seed) {
    if (embed_dim < 1) throw std::invalid_argument("VaeParams: embed_dim must be positive");
    Rng rng(derive_seed(seed, 30));
    const double stddev = 1.0 / std::sqrt(static_cast<double>(embed_dim));
    auto weight = [&] { return random_normal(embed_dim, embed_dim, stddev, rng); };
    auto bias = [&] { return Matrix::Zero(1, embed_dim).eval(); };
    VaeParams p;
    p.enc_w1 = weight(); p.enc_b1 = bias();
    p.enc_w2 = weight(); p.enc_b2 = bias();
    p.w_mu = weight(); p.b_mu = bias();
    p.w_logvar = weight(); p.b_logvar = bias();
    p.dec_w1 = weight(); p.dec_b1 = bias();
    // Small output layer: decoded class tokens start at the scale of the frozen features
    // instead of the unit-variance latent.
    p.dec_w2 = random_normal(embed_dim, embed_dim, kDecoderOutputStd, rng); p.dec_b2 = bias();
    return p;
}

LatentStats vae_encode(const ad::Var& global, const VaeParams& params, ad::ParamBinder& bind) {
    if (global.cols() != params.embed_dim()) throw std::invalid_argument("vae_encode: feature width mismatch");
    if (!global.value().allFinite()) throw std::invalid_argument("vae_encode: non-finite global feature");
    ad::Var h = mlp(global, params.enc_w1, params.enc_b1, params.enc_w2, params.enc_b2, bind);
    ad::Var mu = ad::add_row(ad::matmul(h, bind(params.w_mu)), bind(params.b_mu));
    ad::Var log_var = ad::add_row(ad::matmul(h, bind(params.w_logvar)), bind(params.b_logvar));
    return {mu, ad::clamp(log_var, kLogVarMin, kLogVarMax)};
}

ad::Var reparameterize(const ad::Var& mu, const ad::Var& log_var, const Matrix& eps) {
    if (eps.rows() != mu.rows() || eps.cols() != mu.cols()) throw std::invalid_argument("reparameterize: eps shape");
    ad::Var sigma = ad::exp(ad::scale(log_var, 0.5));
    return ad::add(mu, ad::mul(sigma, ad::constant(eps)));
}

ad::Var vae_decode(const ad::Var& z, const VaeParams& params, ad::ParamBinder& bind) {
    if (z.cols() != params.embed_dim()) throw std::invalid_argument("vae_decode: latent width mismatch");
    return mlp(z, params.dec_w1, params.dec_b1, params.dec_w2, params.dec_b2, bind);
}

ClassTokenSamples sample_class_tokens(const VaeParams& params, int count, SamplingMode mode,
                                      const std::optional<ad::Var>& global, Rng& rng, ad::ParamBinder& bind) {
    if (count < 0) throw std::invalid_argument("sample_class_tokens: negative sample count");
    const int c = params.embed_dim();
    ClassTokenSamples out;
    if (mode == SamplingMode::Posterior && !global) {
        throw std::invalid_argument("sample_class_tokens: posterior sampling requires a global feature");
    }
    out.eps = random_normal(count, c, 1.0, rng);
    if (count == 0) {
        out.samples = ad::constant(Matrix(0, c));
        return out;
    }
    ad::Var z;
    if (mode == SamplingMode::Posterior) {
        LatentStats stats = vae_encode(*global, params, bind);
        out.mu = stats.mu;
        out.log_var = stats.log_var;
        std::vector<ad::Var> mu_rows(static_cast<size_t>(count), stats.mu);
        std::vector<ad::Var> lv_rows(static_cast<size_t>(count), stats.log_var);
        z = reparameterize(ad::vstack(mu_rows), ad::vstack(lv_rows), out.eps);
    } else {
        z = ad::constant(out.eps);
    }
    out.samples = vae_decode(z, params, bind);
    return out;
}

ad::Var vae_loss(const ad::Var& global, const ad::Var& reconstruction, const ad::Var& mu, const ad::Var& log_var,
                 bool mean_reconstruction) {
    ad::Var diff = ad::sub(reconstruction, global);
    ad::Var rec = ad::sum(ad::mul(diff, diff));
    if (mean_reconstruction) rec = ad::scale(rec, 1.0 / static_cast<double>(global.cols()));
    // 0.5 * sum(mu^2 + exp(lv) - lv - 1)
    ad::Var kl_terms = ad::add_scalar(ad::sub(ad::add(ad::mul(mu, mu), ad::exp(log_var)), log_var), -1.0);
    return ad::add(rec, ad::scale(ad::sum(kl_terms), 0.5));
}

}  // namespace cops
