#include "cops/metrics.hpp"

#include "cops/inference.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdio>
#include <map>
#include <numeric>
#include <stdexcept>

namespace cops {

namespace {

void check_inputs(const std::vector<double>& scores, const std::vector<int>& labels, const char* who) {
    if (scores.size() != labels.size()) throw std::invalid_argument(std::string(who) + ": scores/labels length mismatch");
    for (int l : labels)
        if (l != 0 && l != 1) throw std::invalid_argument(std::string(who) + ": labels must be 0 or 1");
}

std::string fmt_opt(const std::optional<double>& v) {
    if (!v) return "-";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", *v);
    return buf;
}

std::string fmt_kv(const std::optional<double>& v) {
    if (!v) return "-";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.8f", *v);
    return buf;
}

}  // namespace

std::optional<double> auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_inputs(scores, labels, "auroc");
    const size_t n = scores.size();
    size_t pos = 0;
    for (int l : labels) pos += static_cast<size_t>(l);
    const size_t neg = n - pos;
    if (pos == 0 || neg == 0) return std::nullopt;

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    double rank_sum = 0.0;
    for (size_t i = 0; i < n;) {
        size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (size_t k = i; k <= j; ++k)
            if (labels[order[k]] == 1) rank_sum += midrank;
        i = j + 1;
    }
    const double np = static_cast<double>(pos), nn = static_cast<double>(neg);
    return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

std::optional<double> average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_inputs(scores, labels, "average_precision");
    const size_t n = scores.size();
    size_t pos = 0;
    for (int l : labels) pos += static_cast<size_t>(l);
    if (pos == 0) return std::nullopt;

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });
    double ap = 0.0, prev_recall = 0.0;
    size_t tp = 0, seen = 0;
    for (size_t i = 0; i < n;) {
        size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) {
            tp += static_cast<size_t>(labels[order[j]]);
            ++j;
        }
        seen = j;
        const double recall = static_cast<double>(tp) / static_cast<double>(pos);
        const double precision = static_cast<double>(tp) / static_cast<double>(seen);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    return ap;
}

CategoryMetrics category_metrics(const std::string& name, const CategoryScores& s, PixelPooling pooling) {
    CategoryMetrics m;
    m.name = name;
    m.num_images = s.image_scores.size();
    m.image_auroc = auroc(s.image_scores, s.image_labels);
    m.image_ap = average_precision(s.image_scores, s.image_labels);
    if (s.maps.empty()) return m;

    if (pooling == PixelPooling::Pooled) {
        std::vector<double> px;
        std::vector<int> py;
        for (size_t i = 0; i < s.maps.size(); ++i) {
            const Matrix& map = s.maps[i];
            const Matrix& mask = s.masks[i];
            for (Eigen::Index y = 0; y < map.rows(); ++y)
                for (Eigen::Index x = 0; x < map.cols(); ++x) {
                    px.push_back(map(y, x));
                    py.push_back(mask(y, x) > 0.5 ? 1 : 0);
                }
        }
        m.pixel_auroc = auroc(px, py);
        m.pixel_ap = average_precision(px, py);
    } else {
        double sum_auc = 0.0, sum_ap = 0.0;
        int n_auc = 0, n_ap = 0;
        for (size_t i = 0; i < s.maps.size(); ++i) {
            std::vector<double> px;
            std::vector<int> py;
            for (Eigen::Index y = 0; y < s.maps[i].rows(); ++y)
                for (Eigen::Index x = 0; x < s.maps[i].cols(); ++x) {
                    px.push_back(s.maps[i](y, x));
                    py.push_back(s.masks[i](y, x) > 0.5 ? 1 : 0);
                }
            if (auto a = auroc(px, py)) {
                sum_auc += *a;
                ++n_auc;
            }
            if (auto a = average_precision(px, py)) {
                sum_ap += *a;
                ++n_ap;
            }
        }
        if (n_auc) m.pixel_auroc = sum_auc / n_auc;
        if (n_ap) m.pixel_ap = sum_ap / n_ap;
    }
    return m;
}

CategoryMetrics average_metrics(const std::vector<CategoryMetrics>& per_category) {
    CategoryMetrics avg;
    avg.name = "average";
    auto mean_of = [&](std::optional<double> CategoryMetrics::*field) -> std::optional<double> {
        double sum = 0.0;
        int n = 0;
        for (const auto& c : per_category)
            if (c.*field) {
                sum += *(c.*field);
                ++n;
            }
        if (n == 0) return std::nullopt;
        return sum / n;
    };
    avg.image_auroc = mean_of(&CategoryMetrics::image_auroc);
    avg.image_ap = mean_of(&CategoryMetrics::image_ap);
    avg.pixel_auroc = mean_of(&CategoryMetrics::pixel_auroc);
    avg.pixel_ap = mean_of(&CategoryMetrics::pixel_ap);
    for (const auto& c : per_category) avg.num_images += c.num_images;
    return avg;
}

MetricReport evaluate(const CopsModel& model, const DatasetManifest& dataset, std::uint64_t seed) {
    if (!model.ready()) throw std::logic_error("evaluate: model has no weights loaded");
    const RunConfig& cfg = model.config;
    std::map<std::string, CategoryScores> per_cat;
    for (size_t i = 0; i < dataset.samples.size(); ++i) {
        const Sample& s = dataset.samples[i];
        const ImageTensor img = sample_image(s, cfg.image_height, cfg.image_width);
        Rng rng(cfg.shared_eval_samples ? derive_seed(seed, 999) : derive_seed(seed, 1000 + i));
        AnomalyResult r = predict(img, model, rng);
        CategoryScores& cs = per_cat[s.category];
        cs.image_scores.push_back(r.score);
        cs.image_labels.push_back(s.label);
        if (auto mask = sample_mask(s, cfg.image_height, cfg.image_width)) {
            cs.maps.push_back(std::move(r.anomaly_map));
            cs.masks.push_back(std::move(*mask));
        }
    }
    const PixelPooling pooling = cfg.pixel_pooling == "per_image" ? PixelPooling::PerImage : PixelPooling::Pooled;
    MetricReport report;
    for (const auto& [name, cs] : per_cat) {
        report.categories.push_back(category_metrics(name, cs, pooling));
        spdlog::debug("evaluated category {} ({} images)", name, cs.image_scores.size());
    }
    report.average = average_metrics(report.categories);
    return report;
}

std::string MetricReport::to_table() const {
    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%-20s %8s %8s %8s %8s %7s\n", "category", "I-AUROC", "I-AP", "P-AUROC", "P-AP",
                  "images");
    out += buf;
    auto row = [&](const CategoryMetrics& c) {
        std::snprintf(buf, sizeof(buf), "%-20s %8s %8s %8s %8s %7zu\n", c.name.c_str(), fmt_opt(c.image_auroc).c_str(),
                      fmt_opt(c.image_ap).c_str(), fmt_opt(c.pixel_auroc).c_str(), fmt_opt(c.pixel_ap).c_str(),
                      c.num_images);
        out += buf;
    };
    for (const auto& c : categories) row(c);
    row(average);
    return out;
}

std::string MetricReport::to_key_value() const {
    std::string out;
    auto emit = [&](const CategoryMetrics& c) {
        out += c.name + ".image_auroc=" + fmt_kv(c.image_auroc) + "\n";
        out += c.name + ".image_ap=" + fmt_kv(c.image_ap) + "\n";
        out += c.name + ".pixel_auroc=" + fmt_kv(c.pixel_auroc) + "\n";
        out += c.name + ".pixel_ap=" + fmt_kv(c.pixel_ap) + "\n";
    };
    for (const auto& c : categories) emit(c);
    emit(average);
    return out;
}

}  // namespace cops
