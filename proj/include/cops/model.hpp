#pragma once

// The full conditional-prompt model and the forward pass shared by training
// and inference.

#include "cops/backbone.hpp"
#include "cops/config.hpp"
#include "cops/ests.hpp"
#include "cops/icts.hpp"
#include "cops/prompts.hpp"
#include "cops/saga.hpp"

#include <string>
#include <utility>
#include <vector>

namespace cops {

enum class ParamGroup { Theta, Psi, Omega, Phi, Frozen };

const char* group_name(ParamGroup g);

struct CopsModel {
    RunConfig config;
    VisionEncoder vision;
    TextBackbone text;
    DualPromptParams prompts;
    PrototypeExtractorParams extractor;
    VaeParams vae;
    std::vector<std::string> train_categories;  // recorded by training, checked by evaluation

    static CopsModel create(const RunConfig& cfg);

    /// False for a default-constructed model that never received weights.
    bool ready() const { return vision.initialized() && extractor.wq.size() > 0 && vae.w_mu.size() > 0; }

    struct NamedParam {
        std::string name;
        ParamGroup group;
        Matrix* value;
    };
    /// Every array of the model, frozen backbone included, in a fixed order.
    std::vector<NamedParam> parameters();
    std::vector<Matrix*> group(ParamGroup g);
};

/// Intermediate quantities of one forward pass over precomputed image features.
struct ForwardPass {
    ad::Var features;  // HW x C
    ad::Var global;    // 1 x C
    PrototypeSet prototypes;       // gradient-carrying (theta)
    ClassTokenSamples class_tokens;
    TextEmbeddingPair text;
    SimilarityBundle similarities;
    ad::Var dist_normal, dist_anomaly;  // empty when ESTS is disabled
    ad::Var mask;                       // HW x 1
    RefinedScores refined;
};

/// encode-free part of the pipeline: prototypes, class sampling, prompt assembly,
/// text encoding, similarities, spatial mask and refinement. Prototypes reach the
/// prompts and the mask detached, so only the center loss trains theta.
ForwardPass run_forward(const CopsModel& model, const GlobalFeature& global, const LocalFeatureMap& local,
                        SamplingMode sampling, Rng& rng, ad::ParamBinder& bind);

}  // namespace cops
