#pragma once

// Dataset ingestion: MVTec-style folder trees and a procedural texture
// generator that produces disjoint train/test category splits.
//
// Layout (per category):
//   <root>/<category>/test/good/<name>.png
//   <root>/<category>/test/<defect>/<name>.png
//   <root>/<category>/ground_truth/<defect>/<name>_mask.png

#include "cops/backbone.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace cops {

struct Sample {
    std::string image_path;             // empty for in-memory samples
    std::optional<ImageTensor> image;   // in-memory pixels, if present
    std::string mask_path;              // empty when no mask file
    std::optional<Matrix> mask;         // in-memory h x w {0, 1} mask, if present
    bool has_mask = false;              // pixel annotation available (zero mask for good images)
    int label = 0;                      // 1 = anomalous
    std::string category;
    std::string defect;                 // "good" for normal samples
};

struct DatasetManifest {
    std::vector<Sample> samples;
    std::string split;  // "train" | "test"

    /// Sorted, unique category names.
    std::vector<std::string> categories() const;
    /// Whether any sample of the category carries a pixel mask.
    bool category_has_masks(const std::string& category) const;
};

/// True when no category name appears in both manifests.
bool categories_disjoint(const DatasetManifest& a, const DatasetManifest& b);

ImageTensor read_image(const std::string& path, int height, int width);
/// {0, 1} mask thresholded at 128 after nearest-neighbor resizing.
Matrix read_mask(const std::string& path, int height, int width);
void write_image(const std::string& path, const ImageTensor& image);
void write_mask(const std::string& path, const Matrix& mask);

/// Pixels of a sample at the requested size (file-backed samples are resized).
ImageTensor sample_image(const Sample& s, int height, int width);
/// Mask at the requested size; zero mask for good images; nullopt when unannotated.
std::optional<Matrix> sample_mask(const Sample& s, int height, int width);

/// Scans an MVTec-style tree. Ordering: categories, then defect folders, then file
/// names, all lexicographic. Images are not decoded here beyond a readability check.
DatasetManifest load_mvtec_layout(const std::string& root);

/// Writes a manifest of in-memory samples in the MVTec layout (round-trips through
/// load_mvtec_layout).
void write_mvtec_layout(const DatasetManifest& manifest, const std::string& root);

struct SynthOptions {
    int num_categories = 4;
    int per_category = 64;
    int image_height = 32;
    int image_width = 32;
    std::uint64_t seed = 0;
};

/// Procedural textures, one per category; half of each category's images carry a
/// foreign-texture ellipse with an exact mask. The first half of the categories
/// (rounded down) form the train split, the rest the test split.
std::pair<DatasetManifest, DatasetManifest> synth_dataset(const SynthOptions& opts);

}  // namespace cops
