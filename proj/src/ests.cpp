#include "cops/ests.hpp"

#include "cops/random.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace cops {

PrototypeExtractorParams PrototypeExtractorParams::init(int num_prototypes, int embed_dim, int num_heads,
                                                        std::uint64_t seed) {
    if (num_prototypes < 1 || embed_dim < 1) throw std::invalid_argument("prototype extractor: sizes must be positive");
    if (num_heads < 1 || embed_dim % num_heads != 0)
        throw std::invalid_argument("prototype extractor: num_heads must divide embed_dim");
    Rng rng(derive_seed(seed, 20));
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(embed_dim));
    PrototypeExtractorParams p;
    p.num_heads = num_heads;
    p.query_normal = random_normal(num_prototypes, embed_dim, 0.02, rng);
    p.query_anomaly = random_normal(num_prototypes, embed_dim, 0.02, rng);
    p.wq = random_normal(embed_dim, embed_dim, proj_std, rng);
    p.wk = random_normal(embed_dim, embed_dim, proj_std, rng);
    p.wv = random_normal(embed_dim, embed_dim, proj_std, rng);
    p.ffn_w1 = random_normal(embed_dim, embed_dim, proj_std, rng);
    p.ffn_b1 = Matrix::Zero(1, embed_dim);
    p.ffn_w2 = random_normal(embed_dim, embed_dim, proj_std, rng);
    p.ffn_b2 = Matrix::Zero(1, embed_dim);
    return p;
}

PrototypeSet extract_prototypes(const ad::Var& features, const PrototypeExtractorParams& params,
                                ad::ParamBinder& bind) {
    if (features.rows() < 1) throw std::invalid_argument("extract_prototypes: empty feature map");
    if (features.cols() != params.wq.rows()) throw std::invalid_argument("extract_prototypes: feature width mismatch");
    const Eigen::Index m = params.num_prototypes();
    const double scale = 1.0 / std::sqrt(static_cast<double>(features.cols() / params.num_heads));

    // Both query banks attend over the same keys/values; stacking them is equivalent
    // to two separate attention calls.
    ad::Var queries = ad::vstack({bind(params.query_normal), bind(params.query_anomaly)});
    ad::Var q = ad::matmul(queries, bind(params.wq));
    ad::Var k = ad::matmul(features, bind(params.wk));
    ad::Var v = ad::matmul(features, bind(params.wv));
    ad::Var attended =
        ad::attention(q, ad::vstack({k, k}), ad::vstack({v, v}), params.num_heads, m, features.rows(), scale);
    ad::Var t_prime = ad::add(attended, queries);
    ad::Var hidden = ad::gelu(ad::add_row(ad::matmul(t_prime, bind(params.ffn_w1)), bind(params.ffn_b1)));
    ad::Var ffn = ad::add_row(ad::matmul(hidden, bind(params.ffn_w2)), bind(params.ffn_b2));
    ad::Var protos = ad::add(ffn, t_prime);
    return {ad::rows(protos, 0, m), ad::rows(protos, m, m)};
}

NearestDistances nn_distances(const ad::Var& features, const ad::Var& prototypes) {
    if (features.cols() != prototypes.cols()) throw std::invalid_argument("nn_distances: width mismatch");
    if (prototypes.rows() < 1) throw std::invalid_argument("nn_distances: no prototypes");
    NearestDistances out;
    ad::Var fn = ad::normalize_rows(features, 1e-8, &out.clamped_norms);
    ad::Var pn = ad::normalize_rows(prototypes, 1e-8, &out.clamped_norms);
    ad::Var cos = ad::matmul(fn, ad::transpose(pn));
    out.distances = ad::min_per_row(ad::clamp(ad::one_minus(cos), 0.0, 2.0), &out.nearest);
    return out;
}

ad::Var center_loss(const ad::Var& features, const ad::Var& proto_normal, const ad::Var& proto_anomaly,
                    const Vector& patch_labels) {
    if (patch_labels.size() != features.rows()) {
        throw std::invalid_argument("center_loss: label length " + std::to_string(patch_labels.size()) +
                                    " != patch count " + std::to_string(features.rows()));
    }
    for (Eigen::Index i = 0; i < patch_labels.size(); ++i) {
        if (patch_labels(i) != 0.0 && patch_labels(i) != 1.0)
            throw std::invalid_argument("center_loss: patch labels must be 0 or 1");
    }
    ad::Var dn = nn_distances(features, proto_normal).distances;
    ad::Var da = nn_distances(features, proto_anomaly).distances;
    ad::Var y = ad::constant(patch_labels);
    ad::Var not_y = ad::constant((1.0 - patch_labels.array()).matrix());
    return ad::mean(ad::add(ad::mul(dn, not_y), ad::mul(da, y)));
}

}  // namespace cops
