#include "cops/prompts.hpp"

#include "cops/random.hpp"

#include <stdexcept>
#include <string>

namespace cops {

DualPromptParams init_dual_prompts(int context_len, int state_len, int class_len, int embed_dim,
                                   std::uint64_t seed) {
    if (context_len < 1 || state_len < 1 || class_len < 1 || embed_dim < 1) {
        throw std::invalid_argument("init_dual_prompts: K, M, N and C must be positive (got " +
                                    std::to_string(context_len) + ", " + std::to_string(state_len) + ", " +
                                    std::to_string(class_len) + ", " + std::to_string(embed_dim) + ")");
    }
    constexpr double stddev = 0.02;
    DualPromptParams p;
    Rng normal_rng(derive_seed(seed, 10));
    p.context_normal = random_normal(context_len, embed_dim, stddev, normal_rng);
    p.state_normal = random_normal(state_len, embed_dim, stddev, normal_rng);
    p.class_normal = random_normal(class_len, embed_dim, stddev, normal_rng);
    Rng anomaly_rng(derive_seed(seed, 11));
    p.context_anomaly = random_normal(context_len, embed_dim, stddev, anomaly_rng);
    p.state_anomaly = random_normal(state_len, embed_dim, stddev, anomaly_rng);
    p.class_anomaly = random_normal(class_len, embed_dim, stddev, anomaly_rng);
    return p;
}

std::vector<PromptPair> assemble_prompts(const DualPromptParams& params, const ad::Var& proto_normal,
                                         const ad::Var& proto_anomaly, const ad::Var& class_samples,
                                         ad::ParamBinder& bind) {
    const int c = params.embed_dim();
    const int m = params.state_length();
    for (const ad::Var* p : {&proto_normal, &proto_anomaly}) {
        if (p->rows() != m) {
            throw std::invalid_argument("assemble_prompts: prototype count " + std::to_string(p->rows()) +
                                        " != state length M=" + std::to_string(m));
        }
        if (p->cols() != c) throw std::invalid_argument("assemble_prompts: prototype width != C");
    }
    if (class_samples.rows() > 0 && class_samples.cols() != c) {
        throw std::invalid_argument("assemble_prompts: class sample width != C");
    }

    ad::Var ctx_n = bind(params.context_normal);
    ad::Var ctx_a = bind(params.context_anomaly);
    ad::Var state_n = ad::add(bind(params.state_normal), proto_normal);
    ad::Var state_a = ad::add(bind(params.state_anomaly), proto_anomaly);
    ad::Var cls_n = bind(params.class_normal);
    ad::Var cls_a = bind(params.class_anomaly);

    std::vector<PromptPair> pairs;
    if (class_samples.rows() == 0) {
        pairs.push_back({ad::vstack({ctx_n, state_n, cls_n}), ad::vstack({ctx_a, state_a, cls_a}), 1});
        return pairs;
    }
    for (Eigen::Index i = 0; i < class_samples.rows(); ++i) {
        ad::Var s = ad::rows(class_samples, i, 1);
        pairs.push_back({ad::vstack({ctx_n, state_n, ad::add_row(cls_n, s)}),
                         ad::vstack({ctx_a, state_a, ad::add_row(cls_a, s)}), static_cast<int>(i + 1)});
    }
    return pairs;
}

}  // namespace cops
