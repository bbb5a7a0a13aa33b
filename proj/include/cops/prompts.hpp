#pragma once

// Learnable dual prompts (context | state | class) and their assembly with
// image-conditioned prototypes and sampled class tokens.

#include "cops/autodiff.hpp"

#include <cstdint>
#include <vector>

namespace cops {

struct DualPromptParams {
    Matrix context_normal, context_anomaly;  // K x C
    Matrix state_normal, state_anomaly;      // M x C
    Matrix class_normal, class_anomaly;      // N x C

    int context_length() const { return static_cast<int>(context_normal.rows()); }
    int state_length() const { return static_cast<int>(state_normal.rows()); }
    int class_length() const { return static_cast<int>(class_normal.rows()); }
    int prompt_length() const { return context_length() + state_length() + class_length(); }
    int embed_dim() const { return static_cast<int>(context_normal.cols()); }

    template <typename F>
    void visit(F&& f) {
        f("phi.context_normal", context_normal);
        f("phi.context_anomaly", context_anomaly);
        f("phi.state_normal", state_normal);
        f("phi.state_anomaly", state_anomaly);
        f("phi.class_normal", class_normal);
        f("phi.class_anomaly", class_anomaly);
    }
};

struct PromptPair {
    ad::Var normal;   // L x C
    ad::Var anomaly;  // L x C
    int index = 0;    // 1-based sample index
};

/// Tokens drawn from normal(0, 0.02); normal and anomaly banks use independent streams.
DualPromptParams init_dual_prompts(int context_len, int state_len, int class_len, int embed_dim, std::uint64_t seed);

/// Builds one prompt pair per row of class_samples:
///   normal_i  = [u^n | v^n + P_n | w^n + s_i]
///   anomaly_i = [u^a | v^a + P_a | w^a + s_i]
/// With zero rows in class_samples the class words stay raw and a single pair is returned.
std::vector<PromptPair> assemble_prompts(const DualPromptParams& params, const ad::Var& proto_normal,
                                         const ad::Var& proto_anomaly, const ad::Var& class_samples,
                                         ad::ParamBinder& bind);

}  // namespace cops
