#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include "changeminds/changelstm.hpp"
#include "changeminds/encoder.hpp"

namespace changeminds::predictor {

struct DecoderConfig {
    std::int64_t hidden_dim = 512; // d
    std::vector<std::int64_t> ppm_scales{1, 2, 3, 6};
    std::int64_t output_stride = 4; // 4: fuse at H/4; 1: upsample y to full resolution
    std::int64_t num_classes = 3;
    std::int64_t text_heads = 8;
    std::int64_t text_layers = 1;
    std::int64_t max_caption_len = 40;
    std::int64_t norm_groups = 8;
    // Stop L_CC gradients at y (ablation arm).
    bool detach_caption_input = false;

    void validate() const;
};

/// Multi-head attention with separate Q/K/V/output projections.
/// Q comes from `query`, K and V from `memory`.
class MultiHeadAttentionImpl : public torch::nn::Module {
public:
    MultiHeadAttentionImpl(std::int64_t dim, std::int64_t num_heads);

    /// query: [B, Tq, d]; memory: [B, Tk, d]; mask: optional bool [Tq, Tk],
    /// true where attention is blocked. Returns ([B, Tq, d], weights [B, heads, Tq, Tk]).
    std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& query, const torch::Tensor& memory,
                                                    const torch::Tensor& mask = {});

    std::int64_t num_heads() const { return num_heads_; }

    torch::nn::Linear q_proj{nullptr};
    torch::nn::Linear k_proj{nullptr};
    torch::nn::Linear v_proj{nullptr};
    torch::nn::Linear o_proj{nullptr};

    // When set, attention logits are replaced by zeros (uniform weights).
    bool force_uniform = false;

private:
    std::int64_t dim_;
    std::int64_t num_heads_;
};
TORCH_MODULE(MultiHeadAttention);

/// UperNet-style fusion: PPM on the deepest level, top-down FPN with lateral
/// 1x1 convs to d/4 channels, all levels resized to the largest and fused to d.
class UnifiedDecoderImpl : public torch::nn::Module {
public:
    UnifiedDecoderImpl(const std::array<std::int64_t, 4>& level_channels, const DecoderConfig& config);

    /// levels: 4 tensors [B, C_l, H_l, W_l], strictly decreasing in size.
    /// Returns y: [B, d, H_1, W_1] (or upsampled x4 for output stride 1).
    torch::Tensor forward(const std::vector<torch::Tensor>& levels);

private:
    struct ConvNormAct {
        torch::nn::Conv2d conv{nullptr};
        torch::nn::GroupNorm norm{nullptr};
    };
    ConvNormAct make_block(const std::string& name, std::int64_t in, std::int64_t out, std::int64_t kernel);
    torch::Tensor apply(ConvNormAct& block, const torch::Tensor& x);

    DecoderConfig config_;
    std::vector<ConvNormAct> ppm_;
    ConvNormAct ppm_fuse_;
    std::vector<ConvNormAct> laterals_;
    std::vector<ConvNormAct> fpn_convs_;
    ConvNormAct fuse_;
};
TORCH_MODULE(UnifiedDecoder);

/// 1x1 conv to class logits, bilinear upsampling to the input size.
class CdHeadImpl : public torch::nn::Module {
public:
    CdHeadImpl(std::int64_t dim, std::int64_t num_classes);

    /// Logits [B, C, out_h, out_w].
    torch::Tensor logits(const torch::Tensor& y, std::int64_t out_h, std::int64_t out_w);
    /// Per-pixel class probabilities [B, C, out_h, out_w].
    torch::Tensor forward(const torch::Tensor& y, std::int64_t out_h, std::int64_t out_w);

    torch::nn::Conv2d classifier{nullptr};
};
TORCH_MODULE(CdHead);

/// Post-norm decoder layer: masked self-attention, cross-attention to the
/// image tokens, MLP; each followed by LN(x + sublayer(x)).
class CaptionLayerImpl : public torch::nn::Module {
public:
    CaptionLayerImpl(std::int64_t dim, std::int64_t num_heads);

    torch::Tensor forward(const torch::Tensor& text, const torch::Tensor& image_tokens,
                          torch::Tensor* cross_weights = nullptr);

    MultiHeadAttention self_attn{nullptr};
    torch::nn::LayerNorm norm1{nullptr};
    MultiHeadAttention cross_attn{nullptr};
    torch::nn::LayerNorm norm2{nullptr};
    torch::nn::Linear fc1{nullptr};
    torch::nn::Linear fc2{nullptr};
    torch::nn::LayerNorm norm3{nullptr};
};
TORCH_MODULE(CaptionLayer);

/// Sinusoidal position table [length, dim].
torch::Tensor sinusoidal_positions(std::int64_t length, std::int64_t dim);

/// Boolean [t, t] mask, true above the diagonal (future positions).
torch::Tensor causal_mask(std::int64_t length);

class CaptionHeadImpl : public torch::nn::Module {
public:
    CaptionHeadImpl(std::int64_t dim, std::int64_t num_heads, std::int64_t num_layers, std::int64_t vocab_size,
                    std::int64_t max_len);

    /// y [B, d, h, w] -> y' [B, h*w, d] through a 1x1 conv.
    torch::Tensor project_image(const torch::Tensor& y);

    /// Teacher-forced next-word logits for every prefix: tokens [B, t] -> [B, t, N].
    /// If `cross_weights` is given it receives the last layer's cross-attention
    /// weights averaged over heads: [B, t, h*w].
    torch::Tensor forward(const torch::Tensor& tokens, const torch::Tensor& image_tokens,
                          torch::Tensor* cross_weights = nullptr);

    /// Next-word distribution after the last token: [B, N].
    torch::Tensor step(const torch::Tensor& tokens, const torch::Tensor& image_tokens);

    std::int64_t vocab_size() const { return vocab_size_; }
    std::int64_t max_len() const { return max_len_; }

    torch::nn::Conv2d image_proj{nullptr};
    torch::nn::Embedding embed{nullptr};
    std::vector<CaptionLayer> layers;
    torch::nn::Linear vocab_proj{nullptr};

private:
    std::int64_t dim_;
    std::int64_t vocab_size_;
    std::int64_t max_len_;
    torch::Tensor positions_;
};
TORCH_MODULE(CaptionHead);

struct DecodeResult {
    std::vector<std::vector<std::int64_t>> ids;        // per sample, starting with START
    std::vector<std::vector<torch::Tensor>> attention; // per sample, per generated word: [h*w]
};

/// Greedy decoding from START until END or `max_len` tokens (START included).
DecodeResult greedy_decode(CaptionHead& head, const torch::Tensor& image_tokens, std::int64_t max_len,
                           bool keep_attention = false);

struct ModelConfig {
    encoder::EncoderConfig encoder;
    changelstm::ChangeLSTMConfig changelstm;
    DecoderConfig decoder;
    std::int64_t vocab_size = 0;
    std::int64_t image_size = 256; // training resolution, sizes the position embeddings

    /// Fills derived fields (level channels and sizes) and validates.
    void resolve();
};

struct MultitaskOutput {
    torch::Tensor cd_log_probs; // [B, C, H, W]
    torch::Tensor cc_log_probs; // [B, max_len - 1, N]
    torch::Tensor representation;
};

class ChangeMindsImpl : public torch::nn::Module {
public:
    explicit ChangeMindsImpl(ModelConfig config);

    /// Encoder + ChangeLSTM + unified decoder: the shared y.
    torch::Tensor representation(const torch::Tensor& images_t1, const torch::Tensor& images_t2);

    /// Both heads on one y. caption_ids [B, L] are teacher-forced: inputs
    /// ids[:, :-1], predictions aligned with ids[:, 1:].
    MultitaskOutput heads(const torch::Tensor& y, const torch::Tensor& caption_ids, std::int64_t out_h,
                          std::int64_t out_w);

    MultitaskOutput forward(const torch::Tensor& images_t1, const torch::Tensor& images_t2,
                            const torch::Tensor& caption_ids);

    const ModelConfig& config() const { return config_; }
    std::int64_t representation_calls() const { return representation_calls_; }

    encoder::SiameseEncoder encoder{nullptr};
    changelstm::ChangeLSTM changelstm{nullptr};
    UnifiedDecoder decoder{nullptr};
    CdHead cd_head{nullptr};
    CaptionHead cc_head{nullptr};

private:
    ModelConfig config_;
    std::int64_t representation_calls_ = 0;
};
TORCH_MODULE(ChangeMinds);

} // namespace changeminds::predictor
