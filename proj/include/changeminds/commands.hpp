#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "changeminds/config.hpp"
#include "changeminds/data.hpp"
#include "changeminds/predictor.hpp"
#include "changeminds/training.hpp"

namespace changeminds::commands {

namespace fs = std::filesystem;

/// Seeds torch and pins intra-op threads to one so runs are reproducible.
void seed_everything(std::uint64_t seed);

struct TrainResult {
    fs::path run_dir;
    std::vector<training::LossRecord> losses;
    training::EvalReport final_report;
};

/// Trains on `config.data_root`, validating every `eval_interval` epochs.
/// The run directory (created under `runs_root(config)` unless `run_dir` is
/// given) receives config.toml, vocab.json, loss_log.csv, epochs.csv,
/// last/best checkpoints and report.{csv,txt}.
TrainResult cmd_train(const config::RunConfig& config, std::ostream& log,
                      const std::optional<fs::path>& run_dir = std::nullopt);

/// A model rebuilt from a checkpoint's embedded config and vocabulary.
struct LoadedModel {
    config::RunConfig config;
    data::Vocabulary vocab;
    predictor::ChangeMinds model{nullptr};
};
LoadedModel load_for_inference(const fs::path& checkpoint);

/// Evaluates a checkpoint on one split. Writes report.csv and report.txt into
/// `out_dir` when given.
training::EvalReport cmd_eval(const fs::path& checkpoint, const fs::path& data_root, const std::string& split,
                              const std::optional<fs::path>& out_dir, std::ostream& log);

struct PredictOptions {
    fs::path checkpoint;
    fs::path image_t1;
    fs::path image_t2;
    std::optional<fs::path> ground_truth; // mask PNG with class ids
    fs::path out_dir;
    bool attention = false; // one heat map per generated word
};

struct PredictResult {
    fs::path change_map;
    fs::path overlay;
    fs::path caption_file;
    std::string caption;
    std::vector<fs::path> attention_maps;
};

PredictResult cmd_predict(const PredictOptions& options);

/// Change-map overlay. With ground truth: TP green, TN white, FP red,
/// FN blue (change vs no change). Without: classes tinted over the post image.
/// Returns uint8 [H, W, 3].
torch::Tensor render_overlay(const torch::Tensor& prediction, const std::optional<torch::Tensor>& truth,
                             const torch::Tensor& image_t2);

struct SynthOptions {
    fs::path out_dir;
    int num_samples = 64;
    int val_samples = 0; // written to the val split from a separate stream
    int image_size = 64;
    int references = 1;
    std::uint64_t seed = 42;
    std::string split = "train";
    bool force = false;
};

/// Generates a synthetic dataset in the LEVIR-MCI layout.
void cmd_synth(const SynthOptions& options);

} // namespace changeminds::commands
