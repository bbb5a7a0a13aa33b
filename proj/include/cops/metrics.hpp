#pragma once

#include "cops/data.hpp"
#include "cops/model.hpp"

#include <optional>
#include <string>
#include <vector>

namespace cops {

/// Area under the ROC curve via the Mann-Whitney statistic with midranks for ties.
/// nullopt when only one class is present.
std::optional<double> auroc(const std::vector<double>& scores, const std::vector<int>& labels);

/// Step-wise average precision: sum over distinct thresholds (descending) of
/// (R_k - R_{k-1}) * P_k. Tied scores form one threshold. nullopt without positives.
std::optional<double> average_precision(const std::vector<double>& scores, const std::vector<int>& labels);

struct CategoryMetrics {
    std::string name;
    std::optional<double> image_auroc, image_ap, pixel_auroc, pixel_ap;
    size_t num_images = 0;
};

struct MetricReport {
    std::vector<CategoryMetrics> categories;
    CategoryMetrics average;  // unweighted mean over categories that report each value

    std::string to_table() const;
    std::string to_key_value() const;
};

enum class PixelPooling { Pooled, PerImage };

/// Image scores and pixel maps for one category, kept for metric computation.
struct CategoryScores {
    std::vector<double> image_scores;
    std::vector<int> image_labels;
    std::vector<Matrix> maps;                  // only for images with a mask
    std::vector<Matrix> masks;
};

CategoryMetrics category_metrics(const std::string& name, const CategoryScores& scores, PixelPooling pooling);

/// Averages each metric over the categories that define it.
CategoryMetrics average_metrics(const std::vector<CategoryMetrics>& per_category);

/// Runs inference on every sample and reports per-category and averaged metrics.
/// Sample i draws class tokens from its own stream derived from seed and i, unless
/// the config asks for one shared draw.
MetricReport evaluate(const CopsModel& model, const DatasetManifest& dataset, std::uint64_t seed);

}  // namespace cops
