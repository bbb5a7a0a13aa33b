#include "cops/backbone.hpp"

#include <cmath>
#include <stdexcept>

namespace cops {

namespace {

constexpr double kInitStd = 0.02;

void require_positive(int v, const char* name) {
    if (v < 1) throw std::invalid_argument(std::string(name) + " must be positive, got " + std::to_string(v));
}

ad::Var feed_forward(const ad::Var& x, const TransformerBlock& w, ad::ParamBinder& bind) {
    ad::Var h = ad::gelu(ad::add_row(ad::matmul(x, bind(w.fc1_w)), bind(w.fc1_b)));
    return ad::add_row(ad::matmul(h, bind(w.fc2_w)), bind(w.fc2_b));
}

}  // namespace

void EncoderConfig::validate() const {
    require_positive(embed_dim, "embed_dim");
    require_positive(patch_size, "patch_size");
    require_positive(image_height, "image_height");
    require_positive(image_width, "image_width");
    require_positive(num_layers, "num_layers");
    require_positive(num_heads, "num_heads");
    require_positive(mlp_ratio, "mlp_ratio");
    if (image_height % patch_size != 0)
        throw std::invalid_argument("image_height " + std::to_string(image_height) + " not divisible by patch_size " +
                                    std::to_string(patch_size));
    if (image_width % patch_size != 0)
        throw std::invalid_argument("image_width " + std::to_string(image_width) + " not divisible by patch_size " +
                                    std::to_string(patch_size));
    if (embed_dim % num_heads != 0)
        throw std::invalid_argument("embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
                                    std::to_string(num_heads));
}

TransformerBlock TransformerBlock::init(int dim, int hidden, Rng& rng, BlockInit scheme) {
    auto std_for = [&](int fan_in) {
        return scheme == BlockInit::FanIn ? 1.0 / std::sqrt(static_cast<double>(fan_in)) : kInitStd;
    };
    TransformerBlock b;
    b.ln1_gamma = Matrix::Ones(1, dim);
    b.ln1_beta = Matrix::Zero(1, dim);
    b.wq = random_normal(dim, dim, std_for(dim), rng);
    b.bq = Matrix::Zero(1, dim);
    b.wk = random_normal(dim, dim, std_for(dim), rng);
    b.bk = Matrix::Zero(1, dim);
    b.wv = random_normal(dim, dim, std_for(dim), rng);
    b.bv = Matrix::Zero(1, dim);
    b.wo = random_normal(dim, dim, std_for(dim), rng);
    b.bo = Matrix::Zero(1, dim);
    b.ln2_gamma = Matrix::Ones(1, dim);
    b.ln2_beta = Matrix::Zero(1, dim);
    b.fc1_w = random_normal(dim, hidden, std_for(dim), rng);
    b.fc1_b = Matrix::Zero(1, hidden);
    b.fc2_w = random_normal(hidden, dim, std_for(hidden), rng);
    b.fc2_b = Matrix::Zero(1, dim);
    return b;
}

ad::Var self_attention(const ad::Var& x, const TransformerBlock& w, AttentionKind kind, int num_heads,
                       Eigen::Index seq_len, ad::ParamBinder& bind) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(x.cols() / num_heads));
    ad::Var v = ad::add_row(ad::matmul(x, bind(w.wv)), bind(w.bv));
    ad::Var mixed;
    if (kind == AttentionKind::QueryKey) {
        ad::Var q = ad::add_row(ad::matmul(x, bind(w.wq)), bind(w.bq));
        ad::Var k = ad::add_row(ad::matmul(x, bind(w.wk)), bind(w.bk));
        mixed = ad::attention(q, k, v, num_heads, seq_len, seq_len, scale);
    } else {
        mixed = ad::attention(v, v, v, num_heads, seq_len, seq_len, scale);
    }
    return ad::add_row(ad::matmul(mixed, bind(w.wo)), bind(w.bo));
}

ad::Var transformer_block(const ad::Var& x, const TransformerBlock& w, AttentionKind kind, int num_heads,
                          Eigen::Index seq_len, ad::ParamBinder& bind) {
    ad::Var h = ad::layer_norm_rows(x, bind(w.ln1_gamma), bind(w.ln1_beta));
    ad::Var y = ad::add(x, self_attention(h, w, kind, num_heads, seq_len, bind));
    ad::Var h2 = ad::layer_norm_rows(y, bind(w.ln2_gamma), bind(w.ln2_beta));
    return ad::add(y, feed_forward(h2, w, bind));
}

Matrix vv_attention(const Matrix& tokens, const TransformerBlock& w, int num_heads) {
    if (tokens.rows() < 1) throw std::invalid_argument("vv_attention: need at least one token");
    if (tokens.cols() != w.wv.rows()) throw std::invalid_argument("vv_attention: token width mismatch");
    ad::ParamBinder bind;
    ad::Var x = ad::constant(tokens);
    return ad::add(x, self_attention(x, w, AttentionKind::ValueValue, num_heads, tokens.rows(), bind)).value();
}

VisionEncoder::VisionEncoder(const EncoderConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(cfg.seed, 1));
    const int c = cfg.embed_dim;
    const int patch_dim = cfg.patch_size * cfg.patch_size * 3;
    patch_proj_ = random_normal(patch_dim, c, kInitStd, rng);
    class_embedding_ = random_normal(1, c, kInitStd, rng);
    positional_ = random_normal(1 + cfg.num_patches(), c, kInitStd, rng);
    for (int i = 0; i < cfg.num_layers; ++i) blocks_.push_back(TransformerBlock::init(c, c * cfg.mlp_ratio, rng));
}

void VisionEncoder::check_image(const ImageTensor& image) const {
    if (image.height != cfg_.image_height)
        throw std::invalid_argument("image height " + std::to_string(image.height) + " != configured " +
                                    std::to_string(cfg_.image_height));
    if (image.width != cfg_.image_width)
        throw std::invalid_argument("image width " + std::to_string(image.width) + " != configured " +
                                    std::to_string(cfg_.image_width));
    if (image.data.size() != static_cast<size_t>(image.height) * image.width * 3)
        throw std::invalid_argument("image channel axis: expected 3 channels");
}

Matrix VisionEncoder::patch_embed(const ImageTensor& image) const {
    check_image(image);
    const int p = cfg_.patch_size;
    const int gw = cfg_.grid_w();
    Matrix patches(cfg_.num_patches(), p * p * 3);
    for (int i = 0; i < cfg_.num_patches(); ++i) {
        const int py = (i / gw) * p;
        const int px = (i % gw) * p;
        int k = 0;
        for (int y = 0; y < p; ++y)
            for (int x = 0; x < p; ++x)
                for (int ch = 0; ch < 3; ++ch) patches(i, k++) = image.at(py + y, px + x, ch);
    }
    return patches * patch_proj_;
}

std::pair<GlobalFeature, LocalFeatureMap> VisionEncoder::encode(const ImageTensor& image) const {
    return encode(image, BranchOverride{});
}

std::pair<GlobalFeature, LocalFeatureMap> VisionEncoder::encode(const ImageTensor& image,
                                                                BranchOverride override) const {
    const Eigen::Index n = 1 + cfg_.num_patches();
    Matrix tokens(n, cfg_.embed_dim);
    tokens.row(0) = class_embedding_.row(0);
    tokens.bottomRows(n - 1) = patch_embed(image);
    tokens += positional_;

    ad::ParamBinder bind;  // nothing trainable: pure forward
    ad::Var qkv = ad::constant(tokens);
    ad::Var vv = ad::constant(tokens);
    const Matrix zeros = Matrix::Zero(n, cfg_.embed_dim);
    for (const auto& blk : blocks_) {
        auto step = [&](const ad::Var& x, AttentionKind kind, bool zero_attn) {
            ad::Var h = ad::layer_norm_rows(x, bind(blk.ln1_gamma), bind(blk.ln1_beta));
            ad::Var attn = zero_attn ? ad::constant(zeros) : self_attention(h, blk, kind, cfg_.num_heads, n, bind);
            ad::Var y = ad::add(x, attn);
            ad::Var h2 = ad::layer_norm_rows(y, bind(blk.ln2_gamma), bind(blk.ln2_beta));
            return ad::add(y, feed_forward(h2, blk, bind));
        };
        qkv = step(qkv, AttentionKind::QueryKey, override.zero_qkv_attention);
        vv = step(vv, AttentionKind::ValueValue, override.zero_vv_attention);
    }

    GlobalFeature g{qkv.value().row(0)};
    LocalFeatureMap f{vv.value().bottomRows(n - 1), cfg_.grid_h(), cfg_.grid_w()};
    return {std::move(g), std::move(f)};
}

void TextConfig::validate() const {
    require_positive(embed_dim, "text.embed_dim");
    require_positive(num_heads, "text.num_heads");
    require_positive(prompt_length, "text.prompt_length");
    require_positive(prefix_length, "text.prefix_length");
    require_positive(mlp_ratio, "text.mlp_ratio");
    if (embed_dim % num_heads != 0) throw std::invalid_argument("text.embed_dim not divisible by text.num_heads");
    if (num_layers < deep_prompt_groups + 1)
        throw std::invalid_argument("text.num_layers must be at least deep_prompt_groups + 1");
}

TextBackbone::TextBackbone(const TextConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(cfg.seed, 2));
    const int c = cfg.embed_dim;
    prefix_ = random_normal(cfg.prefix_length, c, kInitStd, rng);
    eos_ = random_normal(1, c, kInitStd, rng);
    positional_ = random_normal(cfg.prefix_length + cfg.prompt_length + 1, c, kInitStd, rng);
    for (int i = 0; i < cfg.num_layers; ++i) blocks_.push_back(TransformerBlock::init(c, c * cfg.mlp_ratio, rng, BlockInit::FanIn));
    ln_final_gamma_ = Matrix::Ones(1, c);
    ln_final_beta_ = Matrix::Zero(1, c);
    projection_ = random_normal(c, c, 1.0 / std::sqrt(static_cast<double>(c)), rng);
    Rng prompt_rng(derive_seed(cfg.seed, 3));
    for (int i = 0; i < cfg.deep_prompt_groups; ++i)
        deep_prompts_.push_back(random_normal(cfg.prefix_length, c, kInitStd, prompt_rng));
}

ad::Var TextBackbone::encode(const ad::Var& prompt, ad::ParamBinder& bind) const {
    return encode_batch({prompt}, bind);
}

ad::Var TextBackbone::encode_batch(const std::vector<ad::Var>& prompts, ad::ParamBinder& bind) const {
    if (prompts.empty()) throw std::invalid_argument("encode_batch: no prompts");
    const Eigen::Index seq = cfg_.prefix_length + cfg_.prompt_length + 1;
    const Eigen::Index batch = static_cast<Eigen::Index>(prompts.size());

    ad::Var prefix = bind(prefix_);
    ad::Var eos = bind(eos_);
    std::vector<ad::Var> seqs;
    for (const auto& p : prompts) {
        if (p.rows() != cfg_.prompt_length)
            throw std::invalid_argument("encode_text: prompt length " + std::to_string(p.rows()) + " != configured " +
                                        std::to_string(cfg_.prompt_length));
        if (p.cols() != cfg_.embed_dim) throw std::invalid_argument("encode_text: prompt width mismatch");
        seqs.push_back(ad::vstack({prefix, p, eos}));
    }
    ad::Var pos = bind(positional_);
    std::vector<ad::Var> pos_rep(static_cast<size_t>(batch), pos);
    ad::Var x = ad::add(ad::vstack(seqs), ad::vstack(pos_rep));

    for (int layer = 0; layer < cfg_.num_layers; ++layer) {
        if (layer >= 1 && layer <= cfg_.deep_prompt_groups) {
            // Overwrite the prefix slots with this layer's learnable tokens.
            ad::Var deep = bind(deep_prompts_[static_cast<size_t>(layer - 1)]);
            std::vector<ad::Var> parts;
            for (Eigen::Index b = 0; b < batch; ++b) {
                parts.push_back(deep);
                parts.push_back(ad::rows(x, b * seq + cfg_.prefix_length, seq - cfg_.prefix_length));
            }
            x = ad::vstack(parts);
        }
        x = transformer_block(x, blocks_[static_cast<size_t>(layer)], AttentionKind::QueryKey, cfg_.num_heads, seq,
                              bind);
    }

    std::vector<ad::Var> pooled;
    for (Eigen::Index b = 0; b < batch; ++b) pooled.push_back(ad::rows(x, b * seq + seq - 1, 1));
    ad::Var eos_out = ad::layer_norm_rows(ad::vstack(pooled), bind(ln_final_gamma_), bind(ln_final_beta_));
    return ad::matmul(eos_out, bind(projection_));
}

}  // namespace cops
