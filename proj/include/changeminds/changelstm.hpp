#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "changeminds/encoder.hpp"

namespace changeminds::changelstm {

enum class ScanMode { kRecurrent, kParallel };
enum class Direction { kForward, kReverse };

struct ChangeLSTMConfig {
    std::int64_t hidden_dim = 256; // d_c
    std::int64_t depth = 2;        // L; 2L blocks, 0 disables the module
    std::int64_t num_heads = 4;
    std::int64_t conv_kernel = 1;  // causal conv width along the sequence
    std::array<std::int64_t, 4> level_channels{192, 384, 768, 1536};
    // Spatial size of each level at the training resolution (sizes the
    // learned position embeddings).
    std::array<std::int64_t, 4> level_sizes{64, 32, 16, 8};
    ScanMode scan = ScanMode::kParallel;

    std::int64_t num_blocks() const { return 2 * depth; }
    void validate() const;
};

/// Where each pyramid level lives inside the flattened sequence.
struct LevelLayout {
    struct Level {
        std::int64_t height = 0;
        std::int64_t width = 0;
        std::int64_t channels = 0;
    };
    std::vector<Level> levels;
    std::vector<std::int64_t> offsets; // start of each level; offsets[0] == 0
    std::int64_t total = 0;            // T = sum h_l * w_l

    static LevelLayout from_pyramid(const encoder::FeaturePyramid& pyramid);
    std::int64_t length(std::size_t level) const { return levels[level].height * levels[level].width; }
};

struct TokenSequence {
    torch::Tensor values; // [B, T, d_c]
    LevelLayout layout;
};

/// Recurrent state of one mLSTM layer, stabilized in the log domain:
/// the true memory and normalizer are exp(m) * C and exp(m) * n.
struct MlstmState {
    torch::Tensor memory;     // C: [B, heads, d_k, d_v]
    torch::Tensor normalizer; // n: [B, heads, d_k]
    torch::Tensor stabilizer; // m: [B, heads]

    static MlstmState zeros(std::int64_t batch, std::int64_t heads, std::int64_t key_dim, std::int64_t value_dim,
                            const torch::TensorOptions& options);
};

/// Head-split mLSTM inputs. Keys are scaled by 1/sqrt(d_k) inside the scan.
struct MlstmInputs {
    torch::Tensor query;      // [B, heads, T, d_k]
    torch::Tensor key;        // [B, heads, T, d_k]
    torch::Tensor value;      // [B, heads, T, d_v]
    torch::Tensor input_gate; // pre-activation i~: [B, heads, T]
    torch::Tensor forget_gate;// pre-activation f~: [B, heads, T]
    torch::Tensor output_gate;// pre-activation: [B, heads, T, d_v]
};

/// One recurrence step at time t; returns h_t [B, heads, d_v] and updates `state`.
torch::Tensor mlstm_step(MlstmState& state, const MlstmInputs& in, std::int64_t t);

/// Causal left-to-right mLSTM recurrence. Returns [B, T, heads * d_v].
/// Throws NumericError naming the first non-finite time step.
torch::Tensor mlstm_scan(const MlstmInputs& in);

/// The same function evaluated in closed form over all steps at once
/// (quadratic in T). Used by the blocks by default.
torch::Tensor mlstm_parallel(const MlstmInputs& in);

/// LN -> expand to 2 d_c -> [causal conv -> SiLU -> mLSTM] * SiLU(gate)
/// -> output projection -> + input. Reverse blocks run on the flipped sequence.
class XlstmBlockImpl : public torch::nn::Module {
public:
    XlstmBlockImpl(std::int64_t dim, std::int64_t num_heads, std::int64_t conv_kernel, Direction direction,
                   ScanMode scan = ScanMode::kParallel);

    torch::Tensor forward(const torch::Tensor& sequence);
    /// The block without the direction flip.
    torch::Tensor body(const torch::Tensor& sequence);

    Direction direction() const { return direction_; }
    void set_scan_mode(ScanMode scan) { scan_ = scan; }

    torch::nn::LayerNorm norm{nullptr};
    torch::nn::Linear up{nullptr};
    torch::nn::Conv1d conv{nullptr};
    torch::nn::Linear q_proj{nullptr};
    torch::nn::Linear k_proj{nullptr};
    torch::nn::Linear v_proj{nullptr};
    torch::nn::Linear gate_proj{nullptr}; // -> [i~, f~] per head
    torch::nn::Linear o_proj{nullptr};
    torch::nn::Linear out{nullptr};

private:
    std::int64_t dim_;
    std::int64_t num_heads_;
    std::int64_t conv_kernel_;
    Direction direction_;
    ScanMode scan_;
};
TORCH_MODULE(XlstmBlock);

class ChangeLSTMImpl : public torch::nn::Module {
public:
    explicit ChangeLSTMImpl(const ChangeLSTMConfig& config);

    /// Projects every level to d_c, flattens in raster order, concatenates
    /// level 1..4 and adds position and level embeddings.
    TokenSequence project_and_flatten(const encoder::FeaturePyramid& pyramid);

    /// Runs the 2L alternating-direction blocks.
    torch::Tensor refine(const torch::Tensor& sequence);

    /// Slices the sequence per level and projects back to each level's channels.
    std::vector<torch::Tensor> unflatten(const TokenSequence& sequence);

    /// Full module; with depth 0 the pyramid is returned unchanged.
    std::vector<torch::Tensor> forward(const encoder::FeaturePyramid& pyramid);

    const ChangeLSTMConfig& config() const { return config_; }
    std::int64_t blocks_executed() const { return blocks_executed_; }

    std::vector<torch::nn::Conv2d> level_proj;
    std::vector<torch::nn::Conv2d> back_proj;
    std::vector<torch::Tensor> position_embed; // per level [d_c, h_l, w_l]
    torch::Tensor level_embed;                 // [4, d_c]
    std::vector<XlstmBlock> blocks;

private:
    ChangeLSTMConfig config_;
    std::int64_t blocks_executed_ = 0;
};
TORCH_MODULE(ChangeLSTM);

} // namespace changeminds::changelstm
