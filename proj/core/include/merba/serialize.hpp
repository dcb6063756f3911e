#pragma once
// On-disk formats: the flat JSON run configuration (with builtin presets),
// sample datasets (tensor files plus an index), and model checkpoints
// (per-parameter tensor files plus a manifest).

#include <memory>

#include "merba/train.hpp"

namespace merba {

// Raw label vocabulary as configured; the validated LabelSpace derives from it.
struct LabelConfig {
    std::vector<std::string> full;
    std::vector<std::pair<std::string, std::string>> coarse_map;  // full -> group
    std::vector<std::string> fine;
};
LabelSpace build_space(const LabelConfig& lc);

struct AppConfig {
    ModelConfig model;
    LabelConfig labels;
    TrainConfig train;
    SynthSpec synth;
    std::string synth_preset = "three";  // "three" | "confusable" | "custom"
    int64_t synth_per_class = 8;
};

AppConfig default_config();    // full-size recognizer
AppConfig miniature_config();  // desk-scale variant for fast runs

// Strict parse: unknown keys are rejected, known keys override the defaults.
AppConfig parse_config_json(const std::string& text);
std::string config_json(const AppConfig& cfg);
// "default" and "miniature" name the builtins; anything else is a file path.
AppConfig load_config(const std::string& name_or_path);

// dir/index.json plus one [H,W,3] tensor file per sample.
void save_dataset(const std::string& dir, const std::vector<Sample>& samples,
                  const LabelSpace& space);
std::vector<Sample> load_dataset(const std::string& dir, const LabelSpace& space);

// dir/config.json, dir/manifest.json, and one tensor file per registry entry
// (running statistics included, so reload is bit-exact).
void save_checkpoint(const std::string& dir, const Model& m, const AppConfig& cfg,
                     int64_t epoch);

struct LoadedCheckpoint {
    AppConfig cfg;
    std::unique_ptr<Model> model;
    int64_t epoch = 0;
};
LoadedCheckpoint load_checkpoint(const std::string& dir);

}  // namespace merba
