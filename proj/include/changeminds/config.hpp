#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "changeminds/predictor.hpp"
#include "changeminds/training.hpp"

namespace changeminds::config {

namespace fs = std::filesystem;

/// Everything a command needs, resolvable before any compute starts.
///
/// Text form is a flat `key = value` file. Keys are dotted (`train.lr`) or
/// grouped under `[section]` headers; `#` starts a comment. Lists are written
/// `[16, 32, 64, 128]`, strings may be quoted.
struct RunConfig {
    predictor::ModelConfig model;
    training::TrainConfig train;
    fs::path data_root;
    std::string train_split = "train";
    std::string val_split = "val";
    int workers = 1;
    fs::path output_dir; // empty: $CHANGEMINDS_RUNS or ./runs

    /// Sets one dotted key from its text value. Unknown keys raise a
    /// ConfigError that lists every valid key.
    void set(const std::string& key, const std::string& value);
    /// Applies a file or string in the text form on top of the current values.
    void merge_text(const std::string& text);
    void merge_file(const fs::path& path);

    /// Canonical text form: every key, grouped by section. Parsing it back
    /// reproduces the config.
    std::string serialize() const;
    /// Git blob hash (SHA-1 hex) of `serialize()`.
    std::string hash() const;

    /// Checks cross-field constraints (the model config is resolved with a
    /// placeholder vocabulary size when none is set).
    void validate() const;

    static std::vector<std::string> keys();
    /// CPU-sized preset: 64x64 images, encoder dims [16, 32, 64, 128],
    /// window 4, d_c 64, d 128, L 1.
    static RunConfig tiny();
};

/// Resolves the run-directory root from the config, the environment or ./runs.
fs::path runs_root(const RunConfig& config);

} // namespace changeminds::config
