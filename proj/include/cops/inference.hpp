#pragma once

#include "cops/model.hpp"

#include <optional>
#include <string>

namespace cops {

struct AnomalyResult {
    double score = 0.0;   // refined global anomaly probability
    Matrix anomaly_map;   // h x w, smoothed
    std::optional<ForwardPass> diagnostics;
};

/// Separable Gaussian smoothing, radius ceil(3 sigma), mirror padding that repeats
/// the edge sample (d c b a | a b c d). sigma == 0 returns the input unchanged.
Matrix gaussian_filter(const Matrix& image, double sigma);

/// Scores one image. The rng drives class-token sampling only.
AnomalyResult predict(const ImageTensor& image, const CopsModel& model, Rng& rng, bool keep_diagnostics = false);

AnomalyResult predict_features(const GlobalFeature& global, const LocalFeatureMap& local, int height, int width,
                               const CopsModel& model, Rng& rng, bool keep_diagnostics = false);

/// Raw map: uint32 height, uint32 width (little-endian), then height*width float32
/// little-endian values in row-major order.
void write_raw_map(const std::string& path, const Matrix& map);
Matrix read_raw_map(const std::string& path);

/// 8-bit grayscale PNG of the map, min-max normalized (flat maps render black).
void write_heatmap_png(const std::string& path, const Matrix& map);

/// "<path>\t<score>" with fixed precision.
std::string format_score_line(const std::string& image_path, double score);

}  // namespace cops
