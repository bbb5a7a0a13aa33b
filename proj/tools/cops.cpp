// Command-line front end: synth-data, train, eval, predict.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include "cops/checkpoint.hpp"
#include "cops/data.hpp"
#include "cops/inference.hpp"
#include "cops/metrics.hpp"
#include "cops/training.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace cops;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

RunConfig load_config(const std::string& path) {
    try {
        return path.empty() ? RunConfig{} : RunConfig::load(path);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << text;
        if (!out) throw std::runtime_error("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

void require_path(const std::string& path, const char* what) {
    if (path.empty()) throw UsageError(std::string("missing --") + what);
    if (!fs::exists(path)) throw UsageError(std::string("--") + what + " path does not exist: " + path);
}

int cmd_synth(const std::string& config_path, const std::string& out, std::optional<std::uint64_t> seed,
              int categories, int per_category) {
    if (out.empty()) throw UsageError("missing --out");
    const RunConfig cfg = load_config(config_path);
    SynthOptions opts;
    opts.num_categories = categories;
    opts.per_category = per_category;
    opts.image_height = cfg.image_height;
    opts.image_width = cfg.image_width;
    opts.seed = seed.value_or(cfg.seed);
    auto [train_set, test_set] = synth_dataset(opts);
    write_mvtec_layout(train_set, (fs::path(out) / "train").string());
    write_mvtec_layout(test_set, (fs::path(out) / "test").string());
    std::cout << "wrote " << train_set.samples.size() << " train and " << test_set.samples.size()
              << " test images to " << out << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data, const std::string& out,
              std::optional<std::uint64_t> seed) {
    RunConfig cfg = load_config(config_path);
    if (seed) cfg.seed = *seed;
    require_path(data, "data");
    if (out.empty()) throw UsageError("missing --out");
    const DatasetManifest dataset = load_mvtec_layout(data);

    std::string log;
    TrainResult result = train(cfg, dataset, [&](const EpochSummary& e) {
        const std::string line = format_epoch_line(e);
        std::cout << line << "\n";
        log += line + "\n";
    });
    save_checkpoint(result.model, out);
    write_text(out + ".loss.log", log);
    std::cout << "checkpoint written to " << out << "\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& out,
             std::optional<std::uint64_t> seed) {
    require_path(checkpoint, "checkpoint");
    require_path(data, "data");
    const CopsModel model = load_checkpoint(checkpoint);
    const DatasetManifest dataset = load_mvtec_layout(data);
    const std::set<std::string> seen(model.train_categories.begin(), model.train_categories.end());
    for (const auto& c : dataset.categories())
        if (seen.contains(c)) spdlog::warn("category '{}' was also used for training; results are not zero-shot", c);
    for (const auto& c : dataset.categories())
        if (!dataset.category_has_masks(c)) spdlog::warn("category '{}' has no masks; pixel metrics absent", c);

    const MetricReport report = evaluate(model, dataset, seed.value_or(model.config.seed));
    const std::string table = report.to_table();
    std::cout << table;
    if (!out.empty()) {
        write_text(fs::path(out) / "report.txt", table);
        write_text(fs::path(out) / "metrics.txt", report.to_key_value());
    }
    return 0;
}

int cmd_predict(const std::string& checkpoint, const std::string& data, const std::string& out,
                std::optional<std::uint64_t> seed) {
    require_path(checkpoint, "checkpoint");
    require_path(data, "data");
    if (out.empty()) throw UsageError("missing --out");
    const CopsModel model = load_checkpoint(checkpoint);
    const RunConfig& cfg = model.config;

    std::vector<fs::path> images;
    if (fs::is_directory(data)) {
        for (const auto& entry : fs::directory_iterator(data)) {
            std::string ext = entry.path().extension().string();
            std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
            if (entry.is_regular_file() && (ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp"))
                images.push_back(entry.path());
        }
        std::sort(images.begin(), images.end());
    } else {
        images.push_back(data);
    }
    fs::create_directories(out);
    std::ofstream scores(fs::path(out) / "scores.txt", std::ios::app);
    if (!scores) throw std::runtime_error("cannot open scores file in " + out);

    const std::uint64_t base = seed.value_or(cfg.seed);
    for (size_t i = 0; i < images.size(); ++i) {
        const ImageTensor img = read_image(images[i].string(), cfg.image_height, cfg.image_width);
        Rng rng(cfg.shared_eval_samples ? derive_seed(base, 999) : derive_seed(base, 1000 + i));
        const AnomalyResult r = predict(img, model, rng);
        const std::string stem = images[i].stem().string();
        write_raw_map((fs::path(out) / (stem + ".raw")).string(), r.anomaly_map);
        write_heatmap_png((fs::path(out) / (stem + "_heatmap.png")).string(), r.anomaly_map);
        scores << format_score_line(images[i].string(), r.score) << "\n";
    }
    std::cout << "scored " << images.size() << " image(s) into " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    spdlog::set_pattern("[%l] %v");
    if (const char* level = std::getenv("COPS_LOG_LEVEL")) spdlog::set_level(spdlog::level::from_str(level));

    CLI::App app{"Conditional prompt synthesis for zero-shot anomaly detection"};
    app.require_subcommand(1);

    std::string config_path, checkpoint, data, out;
    std::optional<std::uint64_t> seed;
    int categories = 4, per_category = 64;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--seed", seed, "Random seed (overrides the config)");
        sub->add_option("--out", out, "Output path");
    };
    CLI::App* synth = app.add_subcommand("synth-data", "Write a synthetic MVTec-style dataset (train/ and test/)");
    synth->add_option("--config", config_path, "Run config (JSON)");
    synth->add_option("--categories", categories, "Number of texture categories")->check(CLI::Range(2, 64));
    synth->add_option("--per-category", per_category, "Images per category")->check(CLI::Range(2, 100000));
    add_common(synth);

    CLI::App* train_cmd = app.add_subcommand("train", "Train and write a checkpoint");
    train_cmd->add_option("--config", config_path, "Run config (JSON)");
    train_cmd->add_option("--data", data, "Training dataset root");
    add_common(train_cmd);

    CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file");
    eval_cmd->add_option("--data", data, "Evaluation dataset root");
    add_common(eval_cmd);

    CLI::App* predict_cmd = app.add_subcommand("predict", "Score images and write anomaly maps");
    predict_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file");
    predict_cmd->add_option("--data", data, "Image file or directory");
    add_common(predict_cmd);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*synth) return cmd_synth(config_path, out, seed, categories, per_category);
        if (*train_cmd) return cmd_train(config_path, data, out, seed);
        if (*eval_cmd) return cmd_eval(checkpoint, data, out, seed);
        if (*predict_cmd) return cmd_predict(checkpoint, data, out, seed);
    } catch (const UsageError& e) {
        spdlog::error("{}", e.what());
        return 1;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 2;
    }
    return 1;
}
