#pragma once

// Frozen desk-scale stand-ins for the CLIP vision and text towers.
//
// The vision encoder runs two residual streams through shared frozen blocks:
// the ordinary query-key path yields the global (class-token) feature and a
// value-value path yields the patch features. The text encoder is a small
// transformer whose only trainable part is a bank of deep-prompt tokens that
// overwrite the leading prefix positions at the input of layers 2..9.

#include "cops/autodiff.hpp"
#include "cops/random.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace cops {

struct EncoderConfig {
    int embed_dim = 64;
    int patch_size = 8;
    int image_height = 32;
    int image_width = 32;
    int num_layers = 2;
    int num_heads = 4;
    int mlp_ratio = 2;
    std::uint64_t seed = 0;

    int grid_h() const { return image_height / patch_size; }
    int grid_w() const { return image_width / patch_size; }
    int num_patches() const { return grid_h() * grid_w(); }

    /// Throws std::invalid_argument naming the offending field.
    void validate() const;
};

/// h x w x 3 image in [0, 1], channel-last, row-major.
struct ImageTensor {
    int height = 0;
    int width = 0;
    std::vector<double> data;

    ImageTensor() = default;
    ImageTensor(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w * 3, 0.0) {}

    double& at(int y, int x, int c) { return data[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    double at(int y, int x, int c) const { return data[(static_cast<size_t>(y) * width + x) * 3 + c]; }
};

struct GlobalFeature {
    RowVector g;
};

/// Row i is patch (i / grid_w, i % grid_w).
struct LocalFeatureMap {
    Matrix features;
    int grid_h = 0;
    int grid_w = 0;
};

/// Pre-LayerNorm transformer block weights. Row-vector convention: y = x W + b.
/// Small: every weight N(0, 0.02^2). FanIn: linear maps N(0, 1/fan_in).
enum class BlockInit { Small, FanIn };

struct TransformerBlock {
    Matrix ln1_gamma, ln1_beta;
    Matrix wq, bq, wk, bk, wv, bv, wo, bo;
    Matrix ln2_gamma, ln2_beta;
    Matrix fc1_w, fc1_b, fc2_w, fc2_b;

    static TransformerBlock init(int dim, int hidden, Rng& rng, BlockInit scheme = BlockInit::Small);

    template <typename F>
    void visit(F&& f) {
        f("ln1_gamma", ln1_gamma); f("ln1_beta", ln1_beta);
        f("wq", wq); f("bq", bq); f("wk", wk); f("bk", bk);
        f("wv", wv); f("bv", bv); f("wo", wo); f("bo", bo);
        f("ln2_gamma", ln2_gamma); f("ln2_beta", ln2_beta);
        f("fc1_w", fc1_w); f("fc1_b", fc1_b); f("fc2_w", fc2_w); f("fc2_b", fc2_b);
    }
};

enum class AttentionKind { QueryKey, ValueValue };

/// Multi-head self-attention without residual over (seqs * seq_len) stacked rows.
ad::Var self_attention(const ad::Var& x, const TransformerBlock& w, AttentionKind kind, int num_heads,
                       Eigen::Index seq_len, ad::ParamBinder& bind);

/// One pre-LN block: x + attn(LN1 x), then + FFN(LN2 .).
ad::Var transformer_block(const ad::Var& x, const TransformerBlock& w, AttentionKind kind, int num_heads,
                          Eigen::Index seq_len, ad::ParamBinder& bind);

/// Standalone consistent self-attention: tokens + softmax(V V^T / sqrt(d)) V W_o + b_o,
/// with V = tokens W_v + b_v. Uses only the value/output projections of w.
Matrix vv_attention(const Matrix& tokens, const TransformerBlock& w, int num_heads);

class VisionEncoder {
public:
    struct BranchOverride {
        bool zero_qkv_attention = false;
        bool zero_vv_attention = false;
    };

    VisionEncoder() = default;
    explicit VisionEncoder(const EncoderConfig& cfg);

    const EncoderConfig& config() const { return cfg_; }
    bool initialized() const { return patch_proj_.size() > 0; }

    std::pair<GlobalFeature, LocalFeatureMap> encode(const ImageTensor& image) const;
    /// Test hook: replaces one branch's attention output with zeros at every layer.
    std::pair<GlobalFeature, LocalFeatureMap> encode(const ImageTensor& image, BranchOverride override) const;

    /// HW x C patch embeddings before class token and positions are added.
    Matrix patch_embed(const ImageTensor& image) const;

    template <typename F>
    void visit(F&& f) {
        f("vision.patch_proj", patch_proj_);
        f("vision.class_embedding", class_embedding_);
        f("vision.positional", positional_);
        for (size_t i = 0; i < blocks_.size(); ++i) {
            const std::string prefix = "vision.block" + std::to_string(i) + ".";
            blocks_[i].visit([&](const char* name, Matrix& m) { f(prefix + name, m); });
        }
    }

private:
    void check_image(const ImageTensor& image) const;

    EncoderConfig cfg_;
    Matrix patch_proj_;       // (p*p*3) x C
    Matrix class_embedding_;  // 1 x C
    Matrix positional_;       // (1 + HW) x C
    std::vector<TransformerBlock> blocks_;
};

struct TextConfig {
    int embed_dim = 64;
    int num_layers = 9;
    int num_heads = 4;
    int mlp_ratio = 2;
    int prompt_length = 14;
    int prefix_length = 4;
    int deep_prompt_groups = 8;
    std::uint64_t seed = 0;

    void validate() const;
};

class TextBackbone {
public:
    TextBackbone() = default;
    explicit TextBackbone(const TextConfig& cfg);

    const TextConfig& config() const { return cfg_; }

    /// Pooled end-of-sequence embedding (1 x C) for one prompt of shape L x C.
    ad::Var encode(const ad::Var& prompt, ad::ParamBinder& bind) const;
    /// Stacked embeddings (B x C), one row per prompt, computed as one batched pass.
    ad::Var encode_batch(const std::vector<ad::Var>& prompts, ad::ParamBinder& bind) const;

    /// Trainable deep-prompt groups; group j feeds the input of layer j + 2 (1-based).
    std::vector<Matrix>& deep_prompts() { return deep_prompts_; }
    const std::vector<Matrix>& deep_prompts() const { return deep_prompts_; }

    /// Visits frozen weights only.
    template <typename F>
    void visit_frozen(F&& f) {
        f("text.prefix", prefix_);
        f("text.eos", eos_);
        f("text.positional", positional_);
        f("text.ln_final_gamma", ln_final_gamma_);
        f("text.ln_final_beta", ln_final_beta_);
        f("text.projection", projection_);
        for (size_t i = 0; i < blocks_.size(); ++i) {
            const std::string prefix = "text.block" + std::to_string(i) + ".";
            blocks_[i].visit([&](const char* name, Matrix& m) { f(prefix + name, m); });
        }
    }

    template <typename F>
    void visit_trainable(F&& f) {
        for (size_t i = 0; i < deep_prompts_.size(); ++i) f("omega.deep_prompt" + std::to_string(i), deep_prompts_[i]);
    }

private:
    TextConfig cfg_;
    Matrix prefix_;      // prefix_length x C, layer-1 prefix
    Matrix eos_;         // 1 x C
    Matrix positional_;  // (prefix + L + 1) x C
    std::vector<TransformerBlock> blocks_;
    Matrix ln_final_gamma_, ln_final_beta_;
    Matrix projection_;  // C x C
    std::vector<Matrix> deep_prompts_;
};

}  // namespace cops
