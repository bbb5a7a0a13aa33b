#pragma once

// Explicit state token synthesis: learnable normal/anomaly queries cross-attend
// over patch features to produce per-image state prototypes, and a center loss
// pulls each patch toward its nearest prototype of the matching state.

#include "cops/autodiff.hpp"

#include <cstdint>
#include <vector>

namespace cops {

struct PrototypeExtractorParams {
    Matrix query_normal, query_anomaly;  // M x C
    Matrix wq, wk, wv;                   // C x C
    Matrix ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    int num_heads = 8;

    static PrototypeExtractorParams init(int num_prototypes, int embed_dim, int num_heads, std::uint64_t seed);

    int num_prototypes() const { return static_cast<int>(query_normal.rows()); }

    template <typename F>
    void visit(F&& f) {
        f("theta.query_normal", query_normal);
        f("theta.query_anomaly", query_anomaly);
        f("theta.wq", wq);
        f("theta.wk", wk);
        f("theta.wv", wv);
        f("theta.ffn_w1", ffn_w1);
        f("theta.ffn_b1", ffn_b1);
        f("theta.ffn_w2", ffn_w2);
        f("theta.ffn_b2", ffn_b2);
    }
};

struct PrototypeSet {
    ad::Var normal;   // M x C
    ad::Var anomaly;  // M x C
};

/// T' = MHA(T W_q, F W_k, F W_v) + T;  P = FFN(T') + T'.
PrototypeSet extract_prototypes(const ad::Var& features, const PrototypeExtractorParams& params,
                                ad::ParamBinder& bind);

struct NearestDistances {
    ad::Var distances;                  // HW x 1, min_m (1 - cos(f_i, p_m))
    std::vector<Eigen::Index> nearest;  // argmin prototype per patch
    int clamped_norms = 0;              // rows whose norm fell below 1e-8
};

NearestDistances nn_distances(const ad::Var& features, const ad::Var& prototypes);

/// (1/HW) sum_i d_i^n (1 - y_i) + d_i^a y_i, with y the patch-level labels in {0, 1}.
ad::Var center_loss(const ad::Var& features, const ad::Var& proto_normal, const ad::Var& proto_anomaly,
                    const Vector& patch_labels);

}  // namespace cops
