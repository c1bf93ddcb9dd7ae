#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "changeminds/data.hpp"
#include "changeminds/metrics.hpp"
#include "changeminds/predictor.hpp"

namespace changeminds::training {

namespace fs = std::filesystem;

enum class LossMode { kCdOnly, kCcOnly, kMultitask };

std::string to_string(LossMode mode);
/// Accepts "cd_only", "cc_only", "multitask"; throws ConfigError otherwise.
LossMode parse_loss_mode(const std::string& text);

struct TrainConfig {
    std::int64_t epochs = 50;
    double base_lr = 1e-4;
    double min_lr = 1e-7;
    std::int64_t batch_size = 8;
    std::uint64_t seed = 42;
    LossMode loss_mode = LossMode::kMultitask;
    fs::path checkpoint_dir;
    std::int64_t eval_interval = 1; // epochs between validations
    std::int64_t max_steps = 0;     // stop early after this many steps (0: no cap)

    void validate() const;
};

struct LossRecord {
    std::int64_t step = 0;
    double l_cd = 0.0;
    double l_cc = 0.0;
    double total = 0.0;
    double weight = 0.0; // effective CD weight detach(L_CC) / detach(L_CD)
    double lr = 0.0;
};

/// CSV header and row for the loss log.
std::string loss_log_header();
std::string loss_log_row(const LossRecord& record);

/// Pixel-averaged cross-entropy. log_probs [B, C, H, W], masks int64 [B, H, W].
/// Throws DataError for a mask class >= C.
torch::Tensor cd_loss(const torch::Tensor& log_probs, const torch::Tensor& masks);

/// Token-averaged cross-entropy with PAD targets masked out; zero when every
/// target is PAD. log_probs [B, T, N], targets int64 [B, T].
torch::Tensor cc_loss(const torch::Tensor& log_probs, const torch::Tensor& targets);

struct BalancedLoss {
    torch::Tensor total;
    double weight = 0.0;
};

/// L_CC + L_CD * detach(L_CC) / detach(L_CD). With L_CD == 0 the CD term is
/// dropped and the weight reported as 0.
BalancedLoss balanced_multitask_loss(const torch::Tensor& l_cc, const torch::Tensor& l_cd);

/// Cosine annealing from base to min over `total_steps` optimizer steps:
/// step 0 gets base, step total_steps - 1 gets min.
double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr, double min_lr);

/// Everything a checkpoint needs besides tensors to rebuild its model.
struct CheckpointMeta {
    std::int64_t step = 0;
    std::string config_hash;
    std::string config_text;
    std::string vocabulary_json;
};

/// Reads only the metadata of a checkpoint. Throws DataError when the file is
/// missing or unreadable.
CheckpointMeta read_checkpoint_meta(const fs::path& path);

/// Loads model parameters (and nothing else) from a checkpoint.
void load_model_weights(predictor::ChangeMinds& model, const fs::path& path);

class Trainer {
public:
    /// `total_steps` sizes the cosine schedule.
    Trainer(predictor::ChangeMinds model, TrainConfig config, std::int64_t total_steps);

    /// One forward over the shared representation, the mode-selected loss and
    /// one Adam step. Throws NumericError on a non-finite loss.
    LossRecord train_step(const data::Batch& batch);

    /// Shuffles `samples` with the trainer's RNG, then steps through them in
    /// batches. Stops early once `max_steps` is reached.
    std::vector<LossRecord> train_epoch(const std::vector<data::BiTemporalSample>& samples);

    /// Writes parameters, optimizer moments, step, RNG state and `meta`.
    void save_checkpoint(const fs::path& path, const CheckpointMeta& meta) const;
    /// Restores everything `save_checkpoint` wrote. Warns on stderr when the
    /// stored config hash differs from `expected_hash`.
    CheckpointMeta load_checkpoint(const fs::path& path, const std::string& expected_hash);

    std::int64_t step() const { return step_; }
    std::int64_t total_steps() const { return total_steps_; }
    bool finished() const;
    double current_lr() const;
    const TrainConfig& config() const { return config_; }
    predictor::ChangeMinds& model() { return model_; }
    torch::optim::Adam& optimizer() { return *optimizer_; }

private:
    predictor::ChangeMinds model_;
    TrainConfig config_;
    std::int64_t total_steps_;
    std::int64_t step_ = 0;
    std::unique_ptr<torch::optim::Adam> optimizer_;
    std::mt19937_64 rng_;
};

struct EvalReport {
    bool has_cd = false;
    double miou = 0.0;
    std::vector<double> class_iou;
    metrics::F1Ciou change; // change vs no-change
    bool has_cc = false;
    metrics::CaptionEvalReport captions;
    double teacher_forced_accuracy = 0.0;
    std::int64_t exact_matches = 0; // greedy decode equals one of its references
    std::int64_t num_samples = 0;
    std::vector<std::string> sample_ids;
    std::vector<std::string> decoded; // greedy captions, space-joined

    metrics::MetricRows rows() const;
};

struct EvalOptions {
    std::int64_t batch_size = 8;
    bool segmentation = true;
    bool captions = true;
};

/// Deterministic evaluation: argmax change maps, teacher-forced accuracy on
/// each sample's first reference, greedy decoding scored against all references.
EvalReport evaluate(predictor::ChangeMinds& model, const std::vector<data::BiTemporalSample>& samples,
                    const data::Vocabulary& vocab, const EvalOptions& options);

/// Which report sections a loss mode trains.
EvalOptions eval_options_for(LossMode mode, std::int64_t batch_size);

} // namespace changeminds::training
