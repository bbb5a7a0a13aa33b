#include "cops/model.hpp"

namespace cops {

const char* group_name(ParamGroup g) {
    switch (g) {
        case ParamGroup::Theta: return "theta";
        case ParamGroup::Psi: return "psi";
        case ParamGroup::Omega: return "omega";
        case ParamGroup::Phi: return "phi";
        case ParamGroup::Frozen: return "frozen";
    }
    return "?";
}

CopsModel CopsModel::create(const RunConfig& cfg) {
    cfg.validate();
    CopsModel m;
    m.config = cfg;
    m.vision = VisionEncoder(cfg.encoder_config());
    m.text = TextBackbone(cfg.text_config());
    m.prompts = init_dual_prompts(cfg.context_length, cfg.state_length, cfg.class_length, cfg.embed_dim, cfg.seed);
    m.extractor = PrototypeExtractorParams::init(cfg.state_length, cfg.embed_dim, cfg.prototype_heads, cfg.seed);
    m.vae = VaeParams::init(cfg.embed_dim, cfg.seed);
    return m;
}

std::vector<CopsModel::NamedParam> CopsModel::parameters() {
    std::vector<NamedParam> out;
    vision.visit([&](const std::string& n, Matrix& m) { out.push_back({n, ParamGroup::Frozen, &m}); });
    text.visit_frozen([&](const std::string& n, Matrix& m) { out.push_back({n, ParamGroup::Frozen, &m}); });
    text.visit_trainable([&](const std::string& n, Matrix& m) { out.push_back({n, ParamGroup::Omega, &m}); });
    prompts.visit([&](const std::string& n, Matrix& m) { out.push_back({n, ParamGroup::Phi, &m}); });
    extractor.visit([&](const std::string& n, Matrix& m) { out.push_back({n, ParamGroup::Theta, &m}); });
    vae.visit([&](const std::string& n, Matrix& m) { out.push_back({n, ParamGroup::Psi, &m}); });
    return out;
}

std::vector<Matrix*> CopsModel::group(ParamGroup g) {
    std::vector<Matrix*> out;
    for (auto& p : parameters())
        if (p.group == g) out.push_back(p.value);
    return out;
}

ForwardPass run_forward(const CopsModel& model, const GlobalFeature& global, const LocalFeatureMap& local,
                        SamplingMode sampling, Rng& rng, ad::ParamBinder& bind) {
    const RunConfig& cfg = model.config;
    const Eigen::Index c = cfg.embed_dim;
    const Eigen::Index m = cfg.state_length;

    ForwardPass fp;
    fp.features = ad::constant(local.features);
    fp.global = ad::constant(global.g);

    ad::Var proto_n, proto_a;
    if (cfg.enable_ests) {
        fp.prototypes = extract_prototypes(fp.features, model.extractor, bind);
        proto_n = ad::detach(fp.prototypes.normal);
        proto_a = ad::detach(fp.prototypes.anomaly);
    } else {
        proto_n = ad::constant(Matrix::Zero(m, c));
        proto_a = ad::constant(Matrix::Zero(m, c));
    }

    const int count = cfg.enable_icts ? cfg.num_samples : 0;
    fp.class_tokens = sample_class_tokens(model.vae, count, sampling, fp.global, rng, bind);

    auto pairs = assemble_prompts(model.prompts, proto_n, proto_a, fp.class_tokens.samples, bind);
    fp.text = compute_text_embeddings(pairs, model.text, bind);
    fp.similarities = initial_similarities(fp.text, fp.features, fp.global, cfg.tau);

    const Eigen::Index hw = local.features.rows();
    if (cfg.enable_saga && cfg.enable_ests) {
        fp.dist_normal = nn_distances(fp.features, proto_n).distances;
        fp.dist_anomaly = nn_distances(fp.features, proto_a).distances;
        fp.mask = spatial_mask(fp.dist_normal, fp.dist_anomaly, cfg.alpha, cfg.distance_norm_kind());
    } else {
        fp.mask = ad::constant(Matrix::Ones(hw, 1));
    }
    const double beta = cfg.enable_saga ? cfg.beta : 1.0;
    fp.refined = refine(fp.similarities, fp.mask, beta);
    return fp;
}

}  // namespace cops
