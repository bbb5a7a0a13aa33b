#include "cops/checkpoint.hpp"

#include <json.hpp>
#include <zlib.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <vector>

namespace cops {

namespace {

constexpr char kMagic[8] = {'C', 'O', 'P', 'S', 'C', 'K', 'P', 'T'};
constexpr std::uint8_t kDtypeF64 = 1;

class Writer {
public:
    void bytes(const void* p, size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    template <typename T>
    void le(T v) {
        for (size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
    }
    std::vector<unsigned char>& buffer() { return buf_; }

private:
    std::vector<unsigned char> buf_;
};

class Reader {
public:
    Reader(const unsigned char* data, size_t size) : p_(data), end_(data + size) {}
    const unsigned char* take(size_t n) {
        if (static_cast<size_t>(end_ - p_) < n) throw std::runtime_error("checkpoint truncated");
        const unsigned char* out = p_;
        p_ += n;
        return out;
    }
    template <typename T>
    T le() {
        const unsigned char* b = take(sizeof(T));
        T v = 0;
        for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(b[i]) << (8 * i);
        return v;
    }
    bool done() const { return p_ == end_; }

private:
    const unsigned char* p_;
    const unsigned char* end_;
};

std::uint32_t checksum(const unsigned char* data, size_t n) {
    uLong crc = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks.
    while (n > 0) {
        const uInt chunk = static_cast<uInt>(std::min<size_t>(n, 1u << 30));
        crc = crc32(crc, data, chunk);
        data += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

}  // namespace

void save_checkpoint(CopsModel& model, const std::string& path) {
    Writer w;
    w.bytes(kMagic, sizeof(kMagic));
    w.le<std::uint32_t>(kCheckpointVersion);
    nlohmann::json meta;
    meta["config"] = nlohmann::json::parse(model.config.to_json());
    meta["seed"] = model.config.seed;
    meta["train_categories"] = model.train_categories;
    const std::string meta_text = meta.dump(2);
    w.le<std::uint64_t>(meta_text.size());
    w.bytes(meta_text.data(), meta_text.size());

    const auto params = model.parameters();
    w.le<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        w.le<std::uint32_t>(static_cast<std::uint32_t>(p.name.size()));
        w.bytes(p.name.data(), p.name.size());
        w.le<std::uint8_t>(kDtypeF64);
        w.le<std::uint32_t>(2);
        w.le<std::uint64_t>(static_cast<std::uint64_t>(p.value->rows()));
        w.le<std::uint64_t>(static_cast<std::uint64_t>(p.value->cols()));
        for (Eigen::Index r = 0; r < p.value->rows(); ++r)
            for (Eigen::Index c = 0; c < p.value->cols(); ++c) w.le<std::uint64_t>(std::bit_cast<std::uint64_t>((*p.value)(r, c)));
    }
    const std::uint32_t crc = checksum(w.buffer().data(), w.buffer().size());
    w.le<std::uint32_t>(crc);

    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        out.write(reinterpret_cast<const char*>(w.buffer().data()), static_cast<std::streamsize>(w.buffer().size()));
        out.flush();
        if (!out) {
            std::error_code ec;
            fs::remove(tmp, ec);
            throw std::runtime_error("write failed: " + tmp.string());
        }
    }
    fs::rename(tmp, target);
}

CopsModel load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path);
    const std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < sizeof(kMagic) + 4 + 4) throw std::runtime_error("checkpoint truncated: " + path);
    if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) throw std::runtime_error("not a checkpoint: " + path);

    Reader head(buf.data() + sizeof(kMagic), 4);
    const auto version = head.le<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw std::runtime_error("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
    }
    const size_t body = buf.size() - 4;
    Reader tail(buf.data() + body, 4);
    if (tail.le<std::uint32_t>() != checksum(buf.data(), body)) throw std::runtime_error("checkpoint checksum mismatch: " + path);

    Reader r(buf.data() + sizeof(kMagic) + 4, body - sizeof(kMagic) - 4);
    const auto meta_len = r.le<std::uint64_t>();
    const unsigned char* meta_ptr = r.take(meta_len);
    const nlohmann::json meta = nlohmann::json::parse(std::string(reinterpret_cast<const char*>(meta_ptr), meta_len));
    const RunConfig cfg = RunConfig::from_json(meta.at("config").dump());

    std::map<std::string, Matrix> arrays;
    const auto count = r.le<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = r.le<std::uint32_t>();
        const unsigned char* name_ptr = r.take(name_len);
        std::string name(reinterpret_cast<const char*>(name_ptr), name_len);
        if (r.le<std::uint8_t>() != kDtypeF64) throw std::runtime_error("checkpoint: unsupported dtype for " + name);
        if (r.le<std::uint32_t>() != 2) throw std::runtime_error("checkpoint: expected 2-d array for " + name);
        const auto rows = r.le<std::uint64_t>();
        const auto cols = r.le<std::uint64_t>();
        Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        for (Eigen::Index a = 0; a < m.rows(); ++a)
            for (Eigen::Index b = 0; b < m.cols(); ++b) m(a, b) = std::bit_cast<double>(r.le<std::uint64_t>());
        if (!arrays.emplace(std::move(name), std::move(m)).second) throw std::runtime_error("checkpoint: duplicate array");
    }
    if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");

    CopsModel model = CopsModel::create(cfg);
    const auto params = model.parameters();
    if (params.size() != arrays.size()) throw std::runtime_error("checkpoint: array count does not match model");
    for (const auto& p : params) {
        auto it = arrays.find(p.name);
        if (it == arrays.end()) throw std::runtime_error("checkpoint: missing array " + p.name);
        if (it->second.rows() != p.value->rows() || it->second.cols() != p.value->cols())
            throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
    }
    for (const auto& p : params) *p.value = std::move(arrays.at(p.name));
    model.train_categories = meta.value("train_categories", std::vector<std::string>{});
    return model;
}

}  // namespace cops
