#include "changeminds/predictor.hpp"

#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "changeminds/data.hpp"
#include "changeminds/errors.hpp"

namespace changeminds::predictor {

namespace F = torch::nn::functional;
using torch::indexing::Slice;

void DecoderConfig::validate() const {
    if (hidden_dim <= 0 || hidden_dim % 4 != 0) {
        throw ConfigError(fmt::format("decoder hidden dim must be a positive multiple of 4, got {}", hidden_dim));
    }
    if (output_stride != 1 && output_stride != 4) {
        throw ConfigError(fmt::format("decoder output stride must be 1 or 4, got {}", output_stride));
    }
    if (num_classes < 2) {
        throw ConfigError(fmt::format("need at least 2 change classes, got {}", num_classes));
    }
    if (text_heads < 1 || hidden_dim % text_heads != 0) {
        throw ConfigError(fmt::format("text dim {} not divisible by {} heads", hidden_dim, text_heads));
    }
    if (text_layers < 1) {
        throw ConfigError("caption decoder needs at least one layer");
    }
    if (max_caption_len < 2) {
        throw ConfigError(fmt::format("max caption length must be >= 2, got {}", max_caption_len));
    }
    if (ppm_scales.empty()) {
        throw ConfigError("PPM needs at least one pooling scale");
    }
}

// ---------------------------------------------------------------------------

MultiHeadAttentionImpl::MultiHeadAttentionImpl(std::int64_t dim, std::int64_t num_heads)
    : dim_(dim), num_heads_(num_heads) {
    if (dim % num_heads != 0) {
        throw ConfigError(fmt::format("attention dim {} not divisible by {} heads", dim, num_heads));
    }
    q_proj = register_module("q_proj", torch::nn::Linear(dim, dim));
    k_proj = register_module("k_proj", torch::nn::Linear(dim, dim));
    v_proj = register_module("v_proj", torch::nn::Linear(dim, dim));
    o_proj = register_module("o_proj", torch::nn::Linear(dim, dim));
}

std::pair<torch::Tensor, torch::Tensor> MultiHeadAttentionImpl::forward(const torch::Tensor& query,
                                                                        const torch::Tensor& memory,
                                                                        const torch::Tensor& mask) {
    const auto b = query.size(0);
    const auto tq = query.size(1);
    const auto tk = memory.size(1);
    const auto head_dim = dim_ / num_heads_;
    auto q = q_proj(query).view({b, tq, num_heads_, head_dim}).transpose(1, 2);
    auto k = k_proj(memory).view({b, tk, num_heads_, head_dim}).transpose(1, 2);
    auto v = v_proj(memory).view({b, tk, num_heads_, head_dim}).transpose(1, 2);

    torch::Tensor logits;
    if (force_uniform) {
        logits = torch::zeros({b, num_heads_, tq, tk}, q.options());
    } else {
        logits = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim));
    }
    if (mask.defined()) {
        logits = logits.masked_fill(mask, -std::numeric_limits<float>::infinity());
    }
    auto weights = torch::softmax(logits, -1);
    auto context = torch::matmul(weights, v).transpose(1, 2).reshape({b, tq, dim_});
    return {o_proj(context), weights};
}

// ---------------------------------------------------------------------------

UnifiedDecoderImpl::ConvNormAct UnifiedDecoderImpl::make_block(const std::string& name, std::int64_t in,
                                                               std::int64_t out, std::int64_t kernel) {
    ConvNormAct block;
    block.conv = register_module(name + "_conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, kernel)
                                                                        .padding(kernel / 2)
                                                                        .bias(true)));
    // Groups must leave at least two channels per group so that 1x1 pooled maps normalize.
    auto groups = std::gcd(config_.norm_groups, out);
    while (groups > 1 && out / groups < 2) {
        groups = std::gcd(groups / 2, out);
    }
    block.norm = register_module(name + "_norm", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, out)));
    return block;
}

torch::Tensor UnifiedDecoderImpl::apply(ConvNormAct& block, const torch::Tensor& x) {
    return torch::relu(block.norm(block.conv(x)));
}

UnifiedDecoderImpl::UnifiedDecoderImpl(const std::array<std::int64_t, 4>& level_channels, const DecoderConfig& config)
    : config_(config) {
    config_.validate();
    const auto quarter = config_.hidden_dim / 4;
    for (std::size_t s = 0; s < config_.ppm_scales.size(); ++s) {
        ppm_.push_back(make_block(fmt::format("ppm{}", s), level_channels[3], quarter, 1));
    }
    ppm_fuse_ = make_block("ppm_fuse",
                           level_channels[3] + quarter * static_cast<std::int64_t>(config_.ppm_scales.size()), quarter,
                           3);
    for (std::size_t l = 0; l < 3; ++l) {
        laterals_.push_back(make_block(fmt::format("lateral{}", l + 1), level_channels[l], quarter, 1));
        fpn_convs_.push_back(make_block(fmt::format("fpn{}", l + 1), quarter, quarter, 3));
    }
    fuse_ = make_block("fuse", 4 * quarter, config_.hidden_dim, 3);
}

torch::Tensor UnifiedDecoderImpl::forward(const std::vector<torch::Tensor>& levels) {
    if (levels.size() != 4) {
        throw ShapeError(fmt::format("unified decoder expects 4 levels, got {}", levels.size()));
    }
    for (std::size_t l = 1; l < 4; ++l) {
        if (levels[l].size(2) >= levels[l - 1].size(2) || levels[l].size(3) >= levels[l - 1].size(3)) {
            throw ShapeError(fmt::format("unified decoder: level {} ({}x{}) is not smaller than level {} ({}x{})",
                                         l + 1, levels[l].size(2), levels[l].size(3), l, levels[l - 1].size(2),
                                         levels[l - 1].size(3)));
        }
    }
    const auto size_of = [](const torch::Tensor& t) { return std::vector<std::int64_t>{t.size(2), t.size(3)}; };
    const auto bilinear = [](const torch::Tensor& t, std::vector<std::int64_t> size) {
        return F::interpolate(t, F::InterpolateFuncOptions().size(size).mode(torch::kBilinear).align_corners(false));
    };

    // Pyramid pooling on the deepest level.
    const auto& deepest = levels[3];
    std::vector<torch::Tensor> pooled{deepest};
    for (std::size_t s = 0; s < ppm_.size(); ++s) {
        const auto scale = config_.ppm_scales[s];
        auto p = F::adaptive_avg_pool2d(deepest, F::AdaptiveAvgPool2dFuncOptions({scale, scale}));
        pooled.push_back(bilinear(apply(ppm_[s], p), size_of(deepest)));
    }
    std::vector<torch::Tensor> fpn(4);
    fpn[3] = apply(ppm_fuse_, torch::cat(pooled, 1));

    // Top-down pathway with nearest-neighbor upsampling.
    for (int l = 2; l >= 0; --l) {
        auto lateral = apply(laterals_[static_cast<std::size_t>(l)], levels[static_cast<std::size_t>(l)]);
        auto top = F::interpolate(fpn[static_cast<std::size_t>(l + 1)],
                                  F::InterpolateFuncOptions().size(size_of(lateral)).mode(torch::kNearest));
        fpn[static_cast<std::size_t>(l)] = lateral + top;
    }
    for (std::size_t l = 0; l < 3; ++l) {
        fpn[l] = apply(fpn_convs_[l], fpn[l]);
    }
    const auto target = size_of(fpn[0]);
    for (std::size_t l = 1; l < 4; ++l) {
        fpn[l] = bilinear(fpn[l], target);
    }
    return apply(fuse_, torch::cat(fpn, 1));
}

// ---------------------------------------------------------------------------

CdHeadImpl::CdHeadImpl(std::int64_t dim, std::int64_t num_classes) {
    classifier = register_module("classifier", torch::nn::Conv2d(torch::nn::Conv2dOptions(dim, num_classes, 1)));
}

torch::Tensor CdHeadImpl::logits(const torch::Tensor& y, std::int64_t out_h, std::int64_t out_w) {
    auto out = classifier(y);
    if (out.size(2) != out_h || out.size(3) != out_w) {
        out = F::interpolate(out, F::InterpolateFuncOptions()
                                      .size(std::vector<std::int64_t>{out_h, out_w})
                                      .mode(torch::kBilinear)
                                      .align_corners(false));
    }
    return out;
}

torch::Tensor CdHeadImpl::forward(const torch::Tensor& y, std::int64_t out_h, std::int64_t out_w) {
    return torch::softmax(logits(y, out_h, out_w), 1);
}

// ---------------------------------------------------------------------------

CaptionLayerImpl::CaptionLayerImpl(std::int64_t dim, std::int64_t num_heads) {
    self_attn = register_module("self_attn", MultiHeadAttention(dim, num_heads));
    norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    cross_attn = register_module("cross_attn", MultiHeadAttention(dim, num_heads));
    norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    fc1 = register_module("fc1", torch::nn::Linear(dim, 4 * dim));
    fc2 = register_module("fc2", torch::nn::Linear(4 * dim, dim));
    norm3 = register_module("norm3", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
}

torch::Tensor CaptionLayerImpl::forward(const torch::Tensor& text, const torch::Tensor& image_tokens,
                                        torch::Tensor* cross_weights) {
    auto z = norm1(text + self_attn(text, text, causal_mask(text.size(1)).to(text.device())).first);
    auto [context, weights] = cross_attn(z, image_tokens);
    if (cross_weights != nullptr) {
        *cross_weights = weights.mean(1);
    }
    z = norm2(z + context);
    return norm3(z + fc2(torch::gelu(fc1(z))));
}

torch::Tensor sinusoidal_positions(std::int64_t length, std::int64_t dim) {
    auto pos = torch::arange(length, torch::kFloat64).unsqueeze(1);
    auto idx = torch::arange(0, dim, 2, torch::kFloat64);
    auto freq = torch::exp(idx * (-std::log(10000.0) / static_cast<double>(dim)));
    auto table = torch::zeros({length, dim}, torch::kFloat64);
    table.index_put_({Slice(), Slice(0, torch::indexing::None, 2)}, torch::sin(pos * freq));
    table.index_put_({Slice(), Slice(1, torch::indexing::None, 2)}, torch::cos(pos * freq).index({Slice(), Slice(0, dim / 2)}));
    return table.to(torch::kFloat32);
}

torch::Tensor causal_mask(std::int64_t length) {
    return torch::ones({length, length}, torch::kBool).triu(1);
}

CaptionHeadImpl::CaptionHeadImpl(std::int64_t dim, std::int64_t num_heads, std::int64_t num_layers,
                                 std::int64_t vocab_size, std::int64_t max_len)
    : dim_(dim), vocab_size_(vocab_size), max_len_(max_len) {
    if (vocab_size <= data::SpecialTokens::kUnk) {
        throw ConfigError(fmt::format("vocabulary size {} leaves no room for words", vocab_size));
    }
    image_proj = register_module("image_proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(dim, dim, 1)));
    embed = register_module("embed", torch::nn::Embedding(vocab_size, dim));
    for (std::int64_t l = 0; l < num_layers; ++l) {
        layers.push_back(register_module(fmt::format("layer{}", l + 1), CaptionLayer(dim, num_heads)));
    }
    vocab_proj = register_module("vocab_proj", torch::nn::Linear(dim, vocab_size));
    positions_ = register_buffer("positions", sinusoidal_positions(max_len, dim));
    for (auto& layer : layers) {
        encoder::init_transformer_weights(*layer);
    }
    encoder::init_transformer_weights(*vocab_proj);
}

torch::Tensor CaptionHeadImpl::project_image(const torch::Tensor& y) {
    return image_proj(y).flatten(2).transpose(1, 2);
}

torch::Tensor CaptionHeadImpl::forward(const torch::Tensor& tokens, const torch::Tensor& image_tokens,
                                       torch::Tensor* cross_weights) {
    if (tokens.dim() != 2 || tokens.size(1) == 0) {
        throw ShapeError("caption head needs a non-empty token prefix [B, t]");
    }
    if (tokens.size(1) > max_len_) {
        throw ShapeError(fmt::format("caption prefix of {} tokens exceeds max length {}", tokens.size(1), max_len_));
    }
    auto z = embed(tokens) + positions_.index({Slice(0, tokens.size(1))}).unsqueeze(0);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        z = layers[l](z, image_tokens, l + 1 == layers.size() ? cross_weights : nullptr);
    }
    return vocab_proj(z);
}

torch::Tensor CaptionHeadImpl::step(const torch::Tensor& tokens, const torch::Tensor& image_tokens) {
    return torch::softmax(forward(tokens, image_tokens).select(1, -1), -1);
}

DecodeResult greedy_decode(CaptionHead& head, const torch::Tensor& image_tokens, std::int64_t max_len,
                           bool keep_attention) {
    torch::NoGradGuard guard;
    const auto batch = image_tokens.size(0);
    max_len = std::min(max_len, head->max_len());
    auto tokens = torch::full({batch, 1}, data::SpecialTokens::kStart, torch::kInt64);
    std::vector<bool> done(static_cast<std::size_t>(batch), false);
    DecodeResult result;
    result.ids.assign(static_cast<std::size_t>(batch), {data::SpecialTokens::kStart});
    result.attention.resize(static_cast<std::size_t>(batch));

    while (tokens.size(1) < max_len) {
        torch::Tensor weights;
        auto logits = head->forward(tokens, image_tokens, keep_attention ? &weights : nullptr).select(1, -1);
        auto next = logits.argmax(-1);
        auto next_acc = next.accessor<std::int64_t, 1>();
        bool all_done = true;
        for (std::int64_t b = 0; b < batch; ++b) {
            const auto i = static_cast<std::size_t>(b);
            if (done[i]) {
                continue;
            }
            result.ids[i].push_back(next_acc[b]);
            if (keep_attention) {
                result.attention[i].push_back(weights[b].select(0, -1).clone());
            }
            done[i] = next_acc[b] == data::SpecialTokens::kEnd;
            all_done = all_done && done[i];
        }
        if (all_done) {
            break;
        }
        tokens = torch::cat({tokens, next.unsqueeze(1)}, 1);
    }
    return result;
}

// ---------------------------------------------------------------------------

void ModelConfig::resolve() {
    encoder.validate();
    decoder.validate();
    if (image_size % encoder.size_divisor() != 0) {
        throw ConfigError(fmt::format("image size {} must be divisible by {}", image_size, encoder.size_divisor()));
    }
    for (std::size_t l = 0; l < 4; ++l) {
        changelstm.level_channels[l] = 2 * encoder.dims[l];
        changelstm.level_sizes[l] = image_size / (encoder.patch_size << l);
    }
    changelstm.validate();
    if (vocab_size <= data::SpecialTokens::kUnk) {
        throw ConfigError(fmt::format("vocabulary size {} leaves no room for words", vocab_size));
    }
}

ChangeMindsImpl::ChangeMindsImpl(ModelConfig config) : config_(std::move(config)) {
    config_.resolve();
    encoder = register_module("encoder", encoder::SiameseEncoder(config_.encoder));
    changelstm = register_module("changelstm", changelstm::ChangeLSTM(config_.changelstm));
    decoder = register_module("decoder", UnifiedDecoder(config_.changelstm.level_channels, config_.decoder));
    cd_head = register_module("cd_head", CdHead(config_.decoder.hidden_dim, config_.decoder.num_classes));
    cc_head = register_module("cc_head", CaptionHead(config_.decoder.hidden_dim, config_.decoder.text_heads,
                                                     config_.decoder.text_layers, config_.vocab_size,
                                                     config_.decoder.max_caption_len));
}

torch::Tensor ChangeMindsImpl::representation(const torch::Tensor& images_t1, const torch::Tensor& images_t2) {
    ++representation_calls_;
    auto pyramid = encoder(images_t1, images_t2);
    auto levels = changelstm(pyramid);
    auto y = decoder(levels);
    if (config_.decoder.output_stride == 1) {
        y = F::interpolate(y, F::InterpolateFuncOptions()
                                  .size(std::vector<std::int64_t>{images_t1.size(2), images_t1.size(3)})
                                  .mode(torch::kBilinear)
                                  .align_corners(false));
    }
    return y;
}

MultitaskOutput ChangeMindsImpl::heads(const torch::Tensor& y, const torch::Tensor& caption_ids, std::int64_t out_h,
                                       std::int64_t out_w) {
    MultitaskOutput out;
    out.representation = y;
    out.cd_log_probs = torch::log_softmax(cd_head->logits(y, out_h, out_w), 1);
    if (caption_ids.defined() && caption_ids.size(1) >= 2) {
        auto image_tokens = cc_head->project_image(config_.decoder.detach_caption_input ? y.detach() : y);
        auto inputs = caption_ids.index({Slice(), Slice(0, -1)});
        out.cc_log_probs = torch::log_softmax(cc_head(inputs, image_tokens), -1);
    }
    return out;
}

MultitaskOutput ChangeMindsImpl::forward(const torch::Tensor& images_t1, const torch::Tensor& images_t2,
                                         const torch::Tensor& caption_ids) {
    auto y = representation(images_t1, images_t2);
    return heads(y, caption_ids, images_t1.size(2), images_t1.size(3));
}

} // namespace changeminds::predictor
