#include "cops/config.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace cops {

namespace {

using json = nlohmann::ordered_json;

template <typename Cfg, typename F>
void visit_fields(Cfg& c, F&& f) {
    f("context_length", c.context_length);
    f("state_length", c.state_length);
    f("class_length", c.class_length);
    f("num_samples", c.num_samples);
    f("alpha", c.alpha);
    f("beta", c.beta);
    f("tau", c.tau);
    f("distance_norm", c.distance_norm);
    f("learning_rate", c.learning_rate);
    f("batch_size", c.batch_size);
    f("epochs", c.epochs);
    f("adam_beta1", c.adam_beta1);
    f("adam_beta2", c.adam_beta2);
    f("adam_eps", c.adam_eps);
    f("seed", c.seed);
    f("gaussian_sigma", c.gaussian_sigma);
    f("shared_eval_samples", c.shared_eval_samples);
    f("pixel_pooling", c.pixel_pooling);
    f("focal_gamma", c.focal_gamma);
    f("focal_alpha", c.focal_alpha);
    f("dice_eps", c.dice_eps);
    f("vae_mean_reconstruction", c.vae_mean_reconstruction);
    f("train_sampling", c.train_sampling);
    f("inference_sampling", c.inference_sampling);
    f("enable_ests", c.enable_ests);
    f("enable_icts", c.enable_icts);
    f("enable_saga", c.enable_saga);
    f("loss_ests", c.loss_ests);
    f("loss_icts", c.loss_icts);
    f("loss_saga", c.loss_saga);
    f("embed_dim", c.embed_dim);
    f("patch_size", c.patch_size);
    f("image_height", c.image_height);
    f("image_width", c.image_width);
    f("vision_layers", c.vision_layers);
    f("vision_heads", c.vision_heads);
    f("text_layers", c.text_layers);
    f("text_heads", c.text_heads);
    f("mlp_ratio", c.mlp_ratio);
    f("deep_prompt_groups", c.deep_prompt_groups);
    f("deep_prompt_length", c.deep_prompt_length);
    f("prototype_heads", c.prototype_heads);
}

void fail(const std::string& field, const std::string& why) {
    throw std::invalid_argument("config field '" + field + "': " + why);
}

}  // namespace

EncoderConfig RunConfig::encoder_config() const {
    EncoderConfig e;
    e.embed_dim = embed_dim;
    e.patch_size = patch_size;
    e.image_height = image_height;
    e.image_width = image_width;
    e.num_layers = vision_layers;
    e.num_heads = vision_heads;
    e.mlp_ratio = mlp_ratio;
    e.seed = seed;
    return e;
}

TextConfig RunConfig::text_config() const {
    TextConfig t;
    t.embed_dim = embed_dim;
    t.num_layers = text_layers;
    t.num_heads = text_heads;
    t.mlp_ratio = mlp_ratio;
    t.prompt_length = context_length + state_length + class_length;
    t.prefix_length = deep_prompt_length;
    t.deep_prompt_groups = deep_prompt_groups;
    t.seed = seed;
    return t;
}

GlocalLossOptions RunConfig::loss_options() const {
    GlocalLossOptions o;
    o.focal_gamma = focal_gamma;
    o.focal_alpha = focal_alpha;
    o.dice_eps = dice_eps;
    return o;
}

DistanceNorm RunConfig::distance_norm_kind() const {
    return distance_norm == "max" ? DistanceNorm::Max : DistanceNorm::L2;
}

void RunConfig::validate() const {
    auto positive = [](const char* name, auto v) {
        if (!(v > 0)) fail(name, "must be positive");
    };
    positive("context_length", context_length);
    positive("state_length", state_length);
    positive("class_length", class_length);
    if (num_samples < 0) fail("num_samples", "must be nonnegative");
    if (alpha < 0.0 || alpha > 1.0) fail("alpha", "must lie in [0, 1]");
    if (beta < 0.0 || beta > 1.0) fail("beta", "must lie in [0, 1]");
    positive("tau", tau);
    if (distance_norm != "l2" && distance_norm != "max") fail("distance_norm", "expected \"l2\" or \"max\"");
    positive("learning_rate", learning_rate);
    positive("batch_size", batch_size);
    positive("epochs", epochs);
    if (gaussian_sigma < 0.0) fail("gaussian_sigma", "must be nonnegative");
    if (pixel_pooling != "pooled" && pixel_pooling != "per_image")
        fail("pixel_pooling", "expected \"pooled\" or \"per_image\"");
    if (train_sampling != "posterior" && train_sampling != "prior")
        fail("train_sampling", "expected \"posterior\" or \"prior\"");
    if (inference_sampling != "posterior" && inference_sampling != "prior")
        fail("inference_sampling", "expected \"prior\" or \"posterior\"");
    positive("dice_eps", dice_eps);
    if (focal_alpha < 0.0 || focal_alpha > 1.0) fail("focal_alpha", "must lie in [0, 1]");
    if (focal_gamma < 0.0) fail("focal_gamma", "must be nonnegative");
    if (prototype_heads < 1 || embed_dim % prototype_heads != 0) fail("prototype_heads", "must divide embed_dim");
    positive("deep_prompt_length", deep_prompt_length);
    encoder_config().validate();
    text_config().validate();
}

std::string RunConfig::to_json() const {
    json j = json::object();
    visit_fields(*this, [&](const char* name, const auto& v) { j[name] = v; });
    return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(std::string("config: malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
    RunConfig cfg;
    for (const auto& [key, value] : j.items()) {
        bool found = false;
        visit_fields(cfg, [&](const char* name, auto& field) {
            if (key != name) return;
            found = true;
            try {
                field = value.get<std::remove_reference_t<decltype(field)>>();
            } catch (const json::exception&) {
                fail(key, "wrong value type");
            }
        });
        if (!found) throw std::invalid_argument("config: unknown key '" + key + "'");
    }
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

}  // namespace cops
