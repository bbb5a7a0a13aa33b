#include "cops/inference.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace cops {

namespace {

Eigen::Index reflect_index(Eigen::Index i, Eigen::Index n) {
    const Eigen::Index period = 2 * n;
    Eigen::Index m = i % period;
    if (m < 0) m += period;
    return m < n ? m : period - 1 - m;
}

std::vector<double> gaussian_kernel(double sigma, int radius) {
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[i + radius];
    }
    for (double& v : k) v /= sum;
    return k;
}

void put_u32(std::ofstream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const unsigned char* b) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

Matrix gaussian_filter(const Matrix& image, double sigma) {
    if (!(sigma >= 0.0)) throw std::invalid_argument("gaussian_filter: sigma must be non-negative");
    if (sigma == 0.0 || image.size() == 0) return image;
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    const std::vector<double> k = gaussian_kernel(sigma, radius);
    const Eigen::Index h = image.rows(), w = image.cols();

    Matrix tmp(h, w);
    for (Eigen::Index y = 0; y < h; ++y)
        for (Eigen::Index x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int d = -radius; d <= radius; ++d) acc += k[d + radius] * image(y, reflect_index(x + d, w));
            tmp(y, x) = acc;
        }
    Matrix out(h, w);
    for (Eigen::Index y = 0; y < h; ++y)
        for (Eigen::Index x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int d = -radius; d <= radius; ++d) acc += k[d + radius] * tmp(reflect_index(y + d, h), x);
            out(y, x) = acc;
        }
    return out;
}

AnomalyResult predict_features(const GlobalFeature& global, const LocalFeatureMap& local, int height, int width,
                               const CopsModel& model, Rng& rng, bool keep_diagnostics) {
    ad::ParamBinder bind;  // nothing trainable: no graph is recorded
    const SamplingMode mode =
        model.config.inference_sampling == "posterior" ? SamplingMode::Posterior : SamplingMode::Prior;
    ForwardPass fp = run_forward(model, global, local, mode, rng, bind);
    AnomalyResult r;
    r.score = fp.refined.global_anomaly.scalar();
    const Matrix up = upsample_map(fp.refined.local_anomaly.value(), local.grid_h, local.grid_w, height, width);
    r.anomaly_map = gaussian_filter(up, model.config.gaussian_sigma);
    if (keep_diagnostics) r.diagnostics = std::move(fp);
    return r;
}

AnomalyResult predict(const ImageTensor& image, const CopsModel& model, Rng& rng, bool keep_diagnostics) {
    if (!model.ready()) throw std::logic_error("predict: model has no weights loaded");
    auto [g, f] = model.vision.encode(image);
    return predict_features(g, f, image.height, image.width, model, rng, keep_diagnostics);
}

void write_raw_map(const std::string& path, const Matrix& map) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    put_u32(out, static_cast<std::uint32_t>(map.rows()));
    put_u32(out, static_cast<std::uint32_t>(map.cols()));
    for (Eigen::Index y = 0; y < map.rows(); ++y)
        for (Eigen::Index x = 0; x < map.cols(); ++x)
            put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(map(y, x))));
    if (!out) throw std::runtime_error("write failed: " + path);
}

Matrix read_raw_map(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 8) throw std::runtime_error("raw map truncated: " + path);
    const std::uint32_t h = get_u32(buf.data());
    const std::uint32_t w = get_u32(buf.data() + 4);
    if (buf.size() != 8 + 4ull * h * w) throw std::runtime_error("raw map size mismatch: " + path);
    Matrix m(h, w);
    const unsigned char* p = buf.data() + 8;
    for (std::uint32_t y = 0; y < h; ++y)
        for (std::uint32_t x = 0; x < w; ++x, p += 4) m(y, x) = std::bit_cast<float>(get_u32(p));
    return m;
}

void write_heatmap_png(const std::string& path, const Matrix& map) {
    const double lo = map.size() ? map.minCoeff() : 0.0;
    const double hi = map.size() ? map.maxCoeff() : 0.0;
    const double span = hi - lo;
    cv::Mat img(static_cast<int>(map.rows()), static_cast<int>(map.cols()), CV_8UC1);
    for (int y = 0; y < img.rows; ++y)
        for (int x = 0; x < img.cols; ++x) {
            const double v = span > 0.0 ? (map(y, x) - lo) / span : 0.0;
            img.at<unsigned char>(y, x) = static_cast<unsigned char>(std::lround(255.0 * v));
        }
    if (!cv::imwrite(path, img)) throw std::runtime_error("cannot write " + path);
}

std::string format_score_line(const std::string& image_path, double score) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "\t%.8f", score);
    return image_path + buf;
}

}  // namespace cops
