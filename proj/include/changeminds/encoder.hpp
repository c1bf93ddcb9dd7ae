#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include <torch/torch.h>

namespace changeminds::encoder {

struct EncoderConfig {
    std::int64_t in_channels = 3;
    std::int64_t patch_size = 4;
    std::array<std::int64_t, 4> dims{96, 192, 384, 768};
    std::array<std::int64_t, 4> depths{2, 2, 6, 2};
    std::array<std::int64_t, 4> heads{3, 6, 12, 24};
    std::int64_t window = 7;
    std::int64_t mlp_ratio = 4;
    // Pad feature maps up to a multiple of the window. Without padding every
    // stage resolution must be divisible by its window.
    bool pad_to_window = true;
    std::array<double, 3> mean{0.0, 0.0, 0.0};
    std::array<double, 3> std{1.0, 1.0, 1.0};

    /// Input sides must be divisible by patch_size * 2^3.
    std::int64_t size_divisor() const { return patch_size * 8; }
    void validate() const;
};

/// Per-level change features: level l is [B, 2*dims[l], H / 2^(l+2), W / 2^(l+2)].
struct FeaturePyramid {
    std::vector<torch::Tensor> levels;
};

/// Relative position index for an m x m window into a bias table sized for
/// windows up to `table_window`: [m^2, m^2] entries in [0, (2*table_window-1)^2).
torch::Tensor relative_position_index(std::int64_t window, std::int64_t table_window);

/// Additive attention mask for a cyclically shifted, padded feature map:
/// [num_windows, M^2, M^2] with 0 where tokens share a pre-shift region and
/// -100 elsewhere.
torch::Tensor shifted_window_mask(std::int64_t height, std::int64_t width, std::int64_t window, std::int64_t shift);

/// [B, H, W, C] -> [B * nW, M*M, C]
torch::Tensor window_partition(const torch::Tensor& x, std::int64_t window);
/// [B * nW, M*M, C] -> [B, H, W, C]
torch::Tensor window_reverse(const torch::Tensor& windows, std::int64_t window, std::int64_t height,
                             std::int64_t width);

/// Multi-head self-attention inside M x M windows with a learned relative
/// position bias table of (2M-1)^2 entries per head.
class WindowAttentionImpl : public torch::nn::Module {
public:
    WindowAttentionImpl(std::int64_t dim, std::int64_t window, std::int64_t num_heads);

    /// x: [num_windows * B, m^2, dim]; mask: optional [num_windows, m^2, m^2]
    /// additive. `window` m defaults to the construction window M and may be
    /// smaller (maps smaller than M).
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& mask = {}, std::int64_t window = 0);

    /// Same as forward, additionally returning the attention weights
    /// [num_windows * B, heads, m^2, m^2].
    std::pair<torch::Tensor, torch::Tensor> forward_with_weights(const torch::Tensor& x,
                                                                 const torch::Tensor& mask = {},
                                                                 std::int64_t window = 0);

    /// Gathered bias B for an m x m window: [heads, m^2, m^2].
    torch::Tensor position_bias(std::int64_t window = 0);

    std::int64_t window() const { return window_; }
    std::int64_t num_heads() const { return num_heads_; }

    torch::nn::Linear qkv{nullptr};
    torch::nn::Linear proj{nullptr};
    torch::Tensor bias_table;

private:
    std::int64_t dim_;
    std::int64_t window_;
    std::int64_t num_heads_;
};
TORCH_MODULE(WindowAttention);

/// One Swin unit: x + (S)W-MHSA(LN(x)), then x + MLP(LN(x)).
/// `shift` = 0 gives W-MHSA; shift > 0 cyclically rolls the map and masks
/// attention across the wrap boundary.
class SwinBlockImpl : public torch::nn::Module {
public:
    SwinBlockImpl(std::int64_t dim, std::int64_t num_heads, std::int64_t window, std::int64_t shift,
                  std::int64_t mlp_ratio, bool pad_to_window = true);

    /// x: [B, H*W, C] with spatial size (height, width).
    torch::Tensor forward(const torch::Tensor& x, std::int64_t height, std::int64_t width);

    /// Window and shift after clamping to the feature size.
    std::pair<std::int64_t, std::int64_t> effective_window(std::int64_t height, std::int64_t width) const;

    torch::nn::LayerNorm norm1{nullptr};
    WindowAttention attn{nullptr};
    torch::nn::LayerNorm norm2{nullptr};
    torch::nn::Linear fc1{nullptr};
    torch::nn::Linear fc2{nullptr};

private:
    std::int64_t dim_;
    std::int64_t num_heads_;
    std::int64_t window_;
    std::int64_t shift_;
    bool pad_to_window_;
};
TORCH_MODULE(SwinBlock);

/// The four-equation cycle: a W-MHSA unit followed by an SW-MHSA unit.
class SwinBlockPairImpl : public torch::nn::Module {
public:
    SwinBlockPairImpl(std::int64_t dim, std::int64_t num_heads, std::int64_t window, std::int64_t mlp_ratio,
                      bool pad_to_window = true, std::optional<std::int64_t> shift = std::nullopt);

    torch::Tensor forward(const torch::Tensor& x, std::int64_t height, std::int64_t width);

    SwinBlock regular{nullptr};
    SwinBlock shifted{nullptr};
};
TORCH_MODULE(SwinBlockPair);

/// 2x2 neighborhood concatenation, LayerNorm and a linear reduction.
class PatchMergingImpl : public torch::nn::Module {
public:
    PatchMergingImpl(std::int64_t in_dim, std::int64_t out_dim);
    torch::Tensor forward(const torch::Tensor& x, std::int64_t height, std::int64_t width);

    torch::nn::LayerNorm norm{nullptr};
    torch::nn::Linear reduction{nullptr};
};
TORCH_MODULE(PatchMerging);

/// Four-stage shifted-window backbone returning [B, C_l, H_l, W_l] per stage.
class SwinBackboneImpl : public torch::nn::Module {
public:
    explicit SwinBackboneImpl(const EncoderConfig& config);
    std::vector<torch::Tensor> forward(const torch::Tensor& images);

    const EncoderConfig& config() const { return config_; }

private:
    EncoderConfig config_;
    torch::nn::Conv2d patch_embed_{nullptr};
    torch::nn::LayerNorm embed_norm_{nullptr};
    std::vector<std::vector<SwinBlock>> stages_;
    std::vector<PatchMerging> merges_;
    std::vector<torch::nn::LayerNorm> out_norms_;
};
TORCH_MODULE(SwinBackbone);

/// Weight-shared encoder over both temporal images; per level the two
/// feature maps are concatenated on channels ([F1; F2]).
class SiameseEncoderImpl : public torch::nn::Module {
public:
    explicit SiameseEncoderImpl(const EncoderConfig& config);
    FeaturePyramid forward(const torch::Tensor& images_t1, const torch::Tensor& images_t2);

    /// Channel count of each pyramid level (2 * dims).
    std::array<std::int64_t, 4> level_channels() const;

    SwinBackbone backbone{nullptr};

private:
    EncoderConfig config_;
    torch::Tensor mean_;
    torch::Tensor std_;
};
TORCH_MODULE(SiameseEncoder);

/// Truncated normal (std 0.02) for linear weights, zero biases, unit LayerNorm.
void init_transformer_weights(torch::nn::Module& module);

} // namespace changeminds::encoder
