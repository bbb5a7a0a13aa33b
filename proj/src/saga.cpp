#include "cops/saga.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace cops {

namespace {

constexpr double kNormFloor = 1e-8;

ad::Var normalized_by_norm(const ad::Var& d, DistanceNorm norm) {
    const double value = norm == DistanceNorm::L2 ? d.value().norm() : d.value().cwiseAbs().maxCoeff();
    if (value < kNormFloor) return ad::constant(Matrix::Zero(d.rows(), d.cols()));
    ad::Var n = norm == DistanceNorm::L2 ? ad::pow(ad::sum(ad::mul(d, d)), 0.5) : ad::max_all(d);
    return ad::mul_scalar(d, ad::pow(n, -1.0));
}

Matrix flatten_row_major(const Matrix& m) {
    Matrix out(m.size(), 1);
    Eigen::Index k = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) out(k++, 0) = m(r, c);
    return out;
}

}  // namespace

TextEmbeddingPair compute_text_embeddings(const std::vector<PromptPair>& pairs, const TextBackbone& text,
                                          ad::ParamBinder& bind) {
    if (pairs.empty()) throw std::invalid_argument("compute_text_embeddings: no prompt pairs");
    std::vector<ad::Var> prompts;
    prompts.reserve(pairs.size() * 2);
    for (const auto& p : pairs) prompts.push_back(p.normal);
    for (const auto& p : pairs) prompts.push_back(p.anomaly);
    ad::Var emb = text.encode_batch(prompts, bind);
    const auto r = static_cast<Eigen::Index>(pairs.size());
    return {ad::mean_rows(ad::rows(emb, 0, r)), ad::mean_rows(ad::rows(emb, r, r))};
}

SimilarityBundle initial_similarities(const TextEmbeddingPair& text, const ad::Var& features,
                                      const ad::Var& global, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("initial_similarities: tau must be positive");
    ad::Var emb = ad::normalize_rows(ad::vstack({text.normal, text.anomaly}), kNormFloor);
    ad::Var emb_t = ad::transpose(emb);
    ad::Var local = ad::softmax_rows(ad::scale(ad::matmul(ad::normalize_rows(features, kNormFloor), emb_t), 1.0 / tau));
    ad::Var glob = ad::softmax_rows(ad::scale(ad::matmul(ad::normalize_rows(global, kNormFloor), emb_t), 1.0 / tau));
    return {ad::cols(local, 0, 1), ad::cols(local, 1, 1), ad::cols(glob, 0, 1), ad::cols(glob, 1, 1), tau};
}

ad::Var spatial_mask(const ad::Var& dist_normal, const ad::Var& dist_anomaly, double alpha, DistanceNorm norm) {
    if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("spatial_mask: alpha must lie in [0, 1]");
    if (dist_normal.rows() != dist_anomaly.rows() || dist_normal.cols() != dist_anomaly.cols())
        throw std::invalid_argument("spatial_mask: distance vectors differ in shape");
    if ((dist_normal.value().array() < 0.0).any() || (dist_anomaly.value().array() < 0.0).any())
        throw std::invalid_argument("spatial_mask: distances must be nonnegative");
    ad::Var normal_term = ad::scale(normalized_by_norm(dist_normal, norm), alpha);
    ad::Var anomaly_term = ad::scale(ad::one_minus(normalized_by_norm(dist_anomaly, norm)), 1.0 - alpha);
    return ad::add(normal_term, anomaly_term);
}

RefinedScores refine(const SimilarityBundle& bundle, const ad::Var& mask, double beta) {
    if (beta < 0.0 || beta > 1.0) throw std::invalid_argument("refine: beta must lie in [0, 1]");
    RefinedScores out;
    out.local_normal = ad::mul(bundle.local_normal, mask);
    out.local_anomaly = ad::mul(bundle.local_anomaly, mask);
    out.global_normal =
        ad::add(ad::scale(bundle.global_normal, beta), ad::scale(ad::max_all(out.local_normal), 1.0 - beta));
    out.global_anomaly =
        ad::add(ad::scale(bundle.global_anomaly, beta), ad::scale(ad::max_all(out.local_anomaly), 1.0 - beta));
    return out;
}

Matrix bilinear_upsample_matrix(int grid_h, int grid_w, int out_h, int out_w) {
    if (grid_h < 1 || grid_w < 1 || out_h < grid_h || out_w < grid_w)
        throw std::invalid_argument("bilinear_upsample_matrix: target must be at least the grid size");
    Matrix u = Matrix::Zero(static_cast<Eigen::Index>(out_h) * out_w, static_cast<Eigen::Index>(grid_h) * grid_w);
    auto axis = [](int out_i, int in_n, int out_n, int& i0, int& i1, double& frac) {
        double src = (out_i + 0.5) * static_cast<double>(in_n) / out_n - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in_n - 1));
        i0 = static_cast<int>(std::floor(src));
        i1 = std::min(i0 + 1, in_n - 1);
        frac = src - i0;
    };
    for (int y = 0; y < out_h; ++y) {
        int y0, y1;
        double fy;
        axis(y, grid_h, out_h, y0, y1, fy);
        for (int x = 0; x < out_w; ++x) {
            int x0, x1;
            double fx;
            axis(x, grid_w, out_w, x0, x1, fx);
            const Eigen::Index row = static_cast<Eigen::Index>(y) * out_w + x;
            u(row, y0 * grid_w + x0) += (1 - fy) * (1 - fx);
            u(row, y0 * grid_w + x1) += (1 - fy) * fx;
            u(row, y1 * grid_w + x0) += fy * (1 - fx);
            u(row, y1 * grid_w + x1) += fy * fx;
        }
    }
    return u;
}

Matrix upsample_map(const Matrix& map, int grid_h, int grid_w, int out_h, int out_w) {
    if (map.size() != static_cast<Eigen::Index>(grid_h) * grid_w)
        throw std::invalid_argument("upsample_map: map size does not match grid");
    const Matrix flat = Eigen::Map<const Matrix>(map.data(), map.size(), 1);
    const Matrix up = bilinear_upsample_matrix(grid_h, grid_w, out_h, out_w) * flat;
    Matrix out(out_h, out_w);
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x) out(y, x) = up(static_cast<Eigen::Index>(y) * out_w + x, 0);
    return out;
}

ad::Var upsample(const ad::Var& map, int grid_h, int grid_w, int out_h, int out_w) {
    if (map.rows() != static_cast<Eigen::Index>(grid_h) * grid_w || map.cols() != 1)
        throw std::invalid_argument("upsample: expected an (H*W) x 1 map");
    return ad::matmul(ad::constant(bilinear_upsample_matrix(grid_h, grid_w, out_h, out_w)), map);
}

ad::Var dice_loss(const ad::Var& pred, const Matrix& target, double eps) {
    ad::Var t = ad::constant(target);
    ad::Var inter = ad::sum(ad::mul(pred, t));
    ad::Var num = ad::add_scalar(ad::scale(inter, 2.0), eps);
    ad::Var den = ad::add_scalar(ad::add_scalar(ad::sum(pred), target.sum()), eps);
    return ad::one_minus(ad::div(num, den));
}

GlocalLossTerms glocal_loss(const ad::Var& local_normal, const ad::Var& local_anomaly,
                            const ad::Var& global_anomaly, const Matrix& mask, const GlocalLossOptions& opts) {
    for (Eigen::Index i = 0; i < mask.size(); ++i) {
        if (mask(i) != 0.0 && mask(i) != 1.0) throw std::invalid_argument("glocal_loss: mask must be binary");
    }
    if (local_anomaly.rows() != mask.size() || local_normal.rows() != mask.size())
        throw std::invalid_argument("glocal_loss: map size " + std::to_string(local_anomaly.rows()) +
                                    " != mask size " + std::to_string(mask.size()));
    const Matrix y = flatten_row_major(mask);
    const Matrix not_y = (1.0 - y.array()).matrix();
    const double lo = opts.prob_clamp;
    const double hi = 1.0 - opts.prob_clamp;

    GlocalLossTerms t;
    t.dice_anomaly = dice_loss(local_anomaly, y, opts.dice_eps);
    t.dice_normal = dice_loss(local_normal, not_y, opts.dice_eps);

    // Masked maps need not sum to one; renormalize per pixel into two-class probabilities.
    ad::Var pn = ad::clamp(local_normal, lo, hi);
    ad::Var pa = ad::clamp(local_anomaly, lo, hi);
    ad::Var p_anom = ad::clamp(ad::div(pa, ad::add(pn, pa)), lo, hi);
    ad::Var p_norm = ad::one_minus(p_anom);
    ad::Var pos = ad::mul(ad::pow(p_norm, opts.focal_gamma), ad::log(p_anom));
    ad::Var neg = ad::mul(ad::pow(p_anom, opts.focal_gamma), ad::log(p_norm));
    ad::Var focal_sum = ad::add(ad::scale(ad::mul(pos, ad::constant(y)), opts.focal_alpha),
                                ad::scale(ad::mul(neg, ad::constant(not_y)), 1.0 - opts.focal_alpha));
    t.focal = ad::scale(ad::mean(focal_sum), -1.0);

    const double target = mask.size() > 0 ? mask.maxCoeff() : 0.0;
    ad::Var s = ad::clamp(global_anomaly, lo, hi);
    t.bce = target > 0.5 ? ad::scale(ad::log(s), -1.0) : ad::scale(ad::log(ad::one_minus(s)), -1.0);

    t.total = ad::add(ad::add(t.dice_anomaly, t.dice_normal), ad::add(t.focal, t.bce));
    return t;
}

}  // namespace cops
