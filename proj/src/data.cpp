#include "cops/data.hpp"

#include "cops/random.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>
#include <stdexcept>

namespace fs = std::filesystem;

namespace cops {

namespace {

constexpr const char* kDefectName = "foreign_texture";

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

std::vector<fs::path> sorted_entries(const fs::path& dir, bool want_dirs) {
    std::vector<fs::path> out;
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) return out;
    for (const auto& e : fs::directory_iterator(dir, ec)) {
        if (want_dirs ? e.is_directory() : e.is_regular_file()) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

bool is_image_file(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".tif" || ext == ".tiff";
}

std::string zero_pad(int i) {
    std::string s = std::to_string(i);
    return std::string(s.size() < 3 ? 3 - s.size() : 0, '0') + s;
}

struct Wave {
    double freq_y, freq_x, amplitude, phase_jitter;
    double gain[3];
};

struct TextureStyle {
    double base[3];
    std::vector<Wave> waves;
    double noise;
};

TextureStyle make_style(Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    TextureStyle s;
    for (double& b : s.base) b = 0.3 + 0.4 * u(rng);
    for (int k = 0; k < 2; ++k) {
        const double freq = 0.5 + 2.0 * u(rng);
        const double angle = std::numbers::pi * u(rng);
        Wave w{};
        w.freq_y = freq * std::sin(angle);
        w.freq_x = freq * std::cos(angle);
        w.amplitude = 0.05 + 0.07 * u(rng);
        for (double& g : w.gain) g = 0.5 + 0.5 * u(rng);
        s.waves.push_back(w);
    }
    s.noise = 0.02;
    return s;
}

ImageTensor render_normal(const TextureStyle& style, int h, int w, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 2.0 * std::numbers::pi);
    std::normal_distribution<double> noise(0.0, style.noise);
    std::vector<double> phases;
    for (size_t k = 0; k < style.waves.size(); ++k) phases.push_back(u(rng));
    ImageTensor img(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                double v = style.base[c];
                for (size_t k = 0; k < style.waves.size(); ++k) {
                    const Wave& wv = style.waves[k];
                    const double arg = 2.0 * std::numbers::pi * (wv.freq_y * y / h + wv.freq_x * x / w) + phases[k];
                    v += wv.amplitude * wv.gain[c] * std::sin(arg);
                }
                img.at(y, x, c) = v + noise(rng);
            }
        }
    }
    return img;
}

/// Inserts a high-frequency striped ellipse; returns the exact mask.
Matrix insert_anomaly(ImageTensor& img, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const int h = img.height;
    const int w = img.width;
    const double area = (0.05 + 0.20 * u(rng)) * h * w;
    const double ratio = 0.6 + 1.0 * u(rng);
    const double semi_a = std::sqrt(area * ratio / std::numbers::pi);
    const double semi_b = area / (std::numbers::pi * semi_a);
    const double theta = std::numbers::pi * u(rng);
    const double reach = std::max(semi_a, semi_b);
    const double lo_y = std::min(reach, h / 2.0), hi_y = std::max(h - reach, h / 2.0);
    const double lo_x = std::min(reach, w / 2.0), hi_x = std::max(w - reach, w / 2.0);
    const double cy = lo_y + (hi_y - lo_y) * u(rng);
    const double cx = lo_x + (hi_x - lo_x) * u(rng);

    // One foreign-texture family shared by every category: stripes alternating between
    // a dark and a saturated warm color, jittered per image.
    double dark[3] = {0.10, 0.10, 0.15};
    double warm[3] = {0.90, 0.35, 0.20};
    for (int c = 0; c < 3; ++c) {
        const double jitter = 0.16 * u(rng) - 0.08;
        dark[c] += jitter;
        warm[c] += jitter;
    }
    const double period = 2.0 + 2.0 * u(rng);
    const double stripe_angle = std::numbers::pi * u(rng);
    std::normal_distribution<double> noise(0.0, 0.05);

    Matrix mask = Matrix::Zero(h, w);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
            const double ra = (dx * ct + dy * st) / semi_a;
            const double rb = (-dx * st + dy * ct) / semi_b;
            if (ra * ra + rb * rb > 1.0) continue;
            mask(y, x) = 1.0;
            const double t = x * std::cos(stripe_angle) + y * std::sin(stripe_angle);
            const double* color = std::sin(2.0 * std::numbers::pi * t / period) > 0.0 ? warm : dark;
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = color[c] + noise(rng);
        }
    }
    if (mask.sum() == 0.0) {
        // Degenerate draw: mark the center pixel so the mask is never empty.
        const int y = std::clamp(static_cast<int>(cy), 0, h - 1);
        const int x = std::clamp(static_cast<int>(cx), 0, w - 1);
        mask(y, x) = 1.0;
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = warm[c];
    }
    return mask;
}

}  // namespace

std::vector<std::string> DatasetManifest::categories() const {
    std::set<std::string> s;
    for (const auto& x : samples) s.insert(x.category);
    return {s.begin(), s.end()};
}

bool DatasetManifest::category_has_masks(const std::string& category) const {
    return std::any_of(samples.begin(), samples.end(),
                       [&](const Sample& s) { return s.category == category && s.label == 1 && s.has_mask; });
}

bool categories_disjoint(const DatasetManifest& a, const DatasetManifest& b) {
    const auto ca = a.categories();
    const auto cb = b.categories();
    std::vector<std::string> common;
    std::set_intersection(ca.begin(), ca.end(), cb.begin(), cb.end(), std::back_inserter(common));
    return common.empty();
}

ImageTensor read_image(const std::string& path, int height, int width) {
    cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
    if (bgr.empty()) throw std::runtime_error("cannot decode image " + path);
    if (bgr.rows != height || bgr.cols != width) {
        cv::Mat resized;
        cv::resize(bgr, resized, cv::Size(width, height), 0, 0, cv::INTER_AREA);
        bgr = resized;
    }
    ImageTensor img(height, width);
    for (int y = 0; y < height; ++y) {
        const auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < width; ++x) {
            img.at(y, x, 0) = row[x][2] / 255.0;
            img.at(y, x, 1) = row[x][1] / 255.0;
            img.at(y, x, 2) = row[x][0] / 255.0;
        }
    }
    return img;
}

Matrix read_mask(const std::string& path, int height, int width) {
    cv::Mat gray = cv::imread(path, cv::IMREAD_GRAYSCALE);
    if (gray.empty()) throw std::runtime_error("cannot decode mask " + path);
    if (gray.rows != height || gray.cols != width) {
        cv::Mat resized;
        cv::resize(gray, resized, cv::Size(width, height), 0, 0, cv::INTER_NEAREST);
        gray = resized;
    }
    Matrix m(height, width);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) m(y, x) = gray.at<unsigned char>(y, x) >= 128 ? 1.0 : 0.0;
    return m;
}

void write_image(const std::string& path, const ImageTensor& image) {
    cv::Mat bgr(image.height, image.width, CV_8UC3);
    for (int y = 0; y < image.height; ++y) {
        auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < image.width; ++x) {
            for (int c = 0; c < 3; ++c) {
                row[x][2 - c] = static_cast<unsigned char>(std::lround(std::clamp(image.at(y, x, c), 0.0, 1.0) * 255.0));
            }
        }
    }
    fs::create_directories(fs::path(path).parent_path());
    if (!cv::imwrite(path, bgr)) throw std::runtime_error("cannot write image " + path);
}

void write_mask(const std::string& path, const Matrix& mask) {
    cv::Mat gray(static_cast<int>(mask.rows()), static_cast<int>(mask.cols()), CV_8UC1);
    for (int y = 0; y < gray.rows; ++y)
        for (int x = 0; x < gray.cols; ++x) gray.at<unsigned char>(y, x) = mask(y, x) > 0.5 ? 255 : 0;
    fs::create_directories(fs::path(path).parent_path());
    if (!cv::imwrite(path, gray)) throw std::runtime_error("cannot write mask " + path);
}

ImageTensor sample_image(const Sample& s, int height, int width) {
    if (s.image) {
        if (s.image->height != height || s.image->width != width)
            throw std::invalid_argument("in-memory sample has size " + std::to_string(s.image->height) + "x" +
                                        std::to_string(s.image->width) + ", expected " + std::to_string(height) +
                                        "x" + std::to_string(width));
        return *s.image;
    }
    return read_image(s.image_path, height, width);
}

std::optional<Matrix> sample_mask(const Sample& s, int height, int width) {
    if (!s.has_mask) return std::nullopt;
    if (s.mask) return *s.mask;
    if (s.label == 0 || s.mask_path.empty()) return Matrix::Zero(height, width);
    return read_mask(s.mask_path, height, width);
}

DatasetManifest load_mvtec_layout(const std::string& root) {
    DatasetManifest manifest;
    manifest.split = "test";
    const fs::path root_path(root);
    const auto categories = sorted_entries(root_path, true);
    if (categories.empty()) {
        spdlog::warn("no categories found under {}", root);
        return manifest;
    }
    for (const auto& cat_dir : categories) {
        const std::string category = cat_dir.filename().string();
        const fs::path gt_root = cat_dir / "ground_truth";
        const bool annotated = fs::is_directory(gt_root);
        for (const auto& defect_dir : sorted_entries(cat_dir / "test", true)) {
            const std::string defect = defect_dir.filename().string();
            for (const auto& file : sorted_entries(defect_dir, false)) {
                if (!is_image_file(file)) continue;
                cv::Mat probe = cv::imread(file.string(), cv::IMREAD_UNCHANGED);
                if (probe.empty()) {
                    spdlog::warn("skipping unreadable image {}", file.string());
                    continue;
                }
                Sample s;
                s.image_path = file.string();
                s.category = category;
                s.defect = defect;
                s.label = defect == "good" ? 0 : 1;
                if (s.label == 0) {
                    s.has_mask = annotated;
                } else {
                    const fs::path mask = gt_root / defect / (file.stem().string() + "_mask.png");
                    if (fs::is_regular_file(mask)) {
                        s.mask_path = mask.string();
                        s.has_mask = true;
                    } else {
                        if (annotated) spdlog::warn("no mask for anomalous image {}; loading mask-free", file.string());
                        s.has_mask = false;
                    }
                }
                manifest.samples.push_back(std::move(s));
            }
        }
    }
    return manifest;
}

void write_mvtec_layout(const DatasetManifest& manifest, const std::string& root) {
    std::map<std::pair<std::string, std::string>, int> counters;
    for (const auto& s : manifest.samples) {
        if (!s.image) throw std::invalid_argument("write_mvtec_layout: sample without in-memory pixels");
        const std::string defect = s.label == 0 ? "good" : (s.defect.empty() ? kDefectName : s.defect);
        const std::string name = zero_pad(counters[{s.category, defect}]++);
        const fs::path cat = fs::path(root) / s.category;
        write_image((cat / "test" / defect / (name + ".png")).string(), *s.image);
        if (s.label == 1 && s.mask) {
            write_mask((cat / "ground_truth" / defect / (name + "_mask.png")).string(), *s.mask);
        }
    }
}

std::pair<DatasetManifest, DatasetManifest> synth_dataset(const SynthOptions& opts) {
    if (opts.num_categories < 2)
        throw std::invalid_argument("synth_dataset: need at least 2 categories for a disjoint split");
    if (opts.per_category < 1) throw std::invalid_argument("synth_dataset: per_category must be positive");
    DatasetManifest train, test;
    train.split = "train";
    test.split = "test";
    const int n_train = opts.num_categories / 2;
    for (int k = 0; k < opts.num_categories; ++k) {
        Rng rng(derive_seed(opts.seed, 100 + static_cast<std::uint64_t>(k)));
        const TextureStyle style = make_style(rng);
        const std::string category = "texture_" + std::string(k < 10 ? "0" : "") + std::to_string(k);
        DatasetManifest& target = k < n_train ? train : test;
        for (int i = 0; i < opts.per_category; ++i) {
            Sample s;
            s.category = category;
            ImageTensor img = render_normal(style, opts.image_height, opts.image_width, rng);
            Matrix mask = Matrix::Zero(opts.image_height, opts.image_width);
            if (i % 2 == 1) {
                mask = insert_anomaly(img, rng);
                s.label = 1;
                s.defect = kDefectName;
            } else {
                s.defect = "good";
            }
            for (double& v : img.data) v = quantize(v);
            s.image = std::move(img);
            s.mask = std::move(mask);
            s.has_mask = true;
            target.samples.push_back(std::move(s));
        }
    }
    return {std::move(train), std::move(test)};
}

}  // namespace cops
