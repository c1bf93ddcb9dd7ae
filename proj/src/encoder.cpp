#include "changeminds/encoder.hpp"

#include <fmt/format.h>

#include "changeminds/errors.hpp"

namespace changeminds::encoder {

namespace F = torch::nn::functional;
using torch::indexing::None;
using torch::indexing::Slice;

void EncoderConfig::validate() const {
    if (patch_size < 1 || window < 1 || mlp_ratio < 1) {
        throw ConfigError("encoder patch size, window and MLP ratio must be positive");
    }
    for (std::size_t l = 0; l < 4; ++l) {
        if (dims[l] < 1 || depths[l] < 0 || heads[l] < 1) {
            throw ConfigError(fmt::format("encoder stage {} has invalid dims/depth/heads", l + 1));
        }
        if (dims[l] % heads[l] != 0) {
            throw ConfigError(fmt::format("encoder stage {}: dim {} not divisible by {} heads", l + 1, dims[l],
                                          heads[l]));
        }
    }
}

torch::Tensor relative_position_index(std::int64_t window, std::int64_t table_window) {
    if (window > table_window) {
        throw ConfigError(fmt::format("window {} exceeds the bias table window {}", window, table_window));
    }
    auto coords = torch::stack(torch::meshgrid({torch::arange(window), torch::arange(window)}, "ij"));
    auto flat = coords.flatten(1);                                  // [2, m^2]
    auto rel = flat.unsqueeze(2) - flat.unsqueeze(1);               // [2, m^2, m^2]
    rel = rel.permute({1, 2, 0}).contiguous() + (table_window - 1); // shift to start at 0
    return rel.select(2, 0) * (2 * table_window - 1) + rel.select(2, 1);
}

torch::Tensor window_partition(const torch::Tensor& x, std::int64_t window) {
    const auto b = x.size(0);
    const auto h = x.size(1);
    const auto w = x.size(2);
    const auto c = x.size(3);
    return x.view({b, h / window, window, w / window, window, c})
        .permute({0, 1, 3, 2, 4, 5})
        .contiguous()
        .view({-1, window * window, c});
}

torch::Tensor window_reverse(const torch::Tensor& windows, std::int64_t window, std::int64_t height,
                             std::int64_t width) {
    const auto c = windows.size(-1);
    const auto b = windows.size(0) / ((height / window) * (width / window));
    return windows.view({b, height / window, width / window, window, window, c})
        .permute({0, 1, 3, 2, 4, 5})
        .contiguous()
        .view({b, height, width, c});
}

torch::Tensor shifted_window_mask(std::int64_t height, std::int64_t width, std::int64_t window, std::int64_t shift) {
    auto regions = torch::zeros({1, height, width, 1});
    const std::array<std::pair<std::int64_t, std::int64_t>, 3> bands_h{
        {{0, height - window}, {height - window, height - shift}, {height - shift, height}}};
    const std::array<std::pair<std::int64_t, std::int64_t>, 3> bands_w{
        {{0, width - window}, {width - window, width - shift}, {width - shift, width}}};
    float id = 0.0f;
    for (const auto& [h0, h1] : bands_h) {
        for (const auto& [w0, w1] : bands_w) {
            regions.index_put_({Slice(), Slice(h0, h1), Slice(w0, w1), Slice()}, id);
            id += 1.0f;
        }
    }
    auto per_window = window_partition(regions, window).squeeze(-1); // [nW, M^2]
    auto diff = per_window.unsqueeze(1) - per_window.unsqueeze(2);
    return torch::where(diff != 0, torch::full_like(diff, -100.0), torch::zeros_like(diff));
}

// ---------------------------------------------------------------------------

WindowAttentionImpl::WindowAttentionImpl(std::int64_t dim, std::int64_t window, std::int64_t num_heads)
    : dim_(dim), window_(window), num_heads_(num_heads) {
    if (dim % num_heads != 0) {
        throw ConfigError(fmt::format("attention dim {} not divisible by {} heads", dim, num_heads));
    }
    qkv = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
    proj = register_module("proj", torch::nn::Linear(dim, dim));
    bias_table = register_parameter("relative_position_bias_table",
                                    torch::zeros({(2 * window - 1) * (2 * window - 1), num_heads}));
}

torch::Tensor WindowAttentionImpl::position_bias(std::int64_t window) {
    window = window > 0 ? window : window_;
    const auto n = window * window;
    const auto index = relative_position_index(window, window_).view({-1});
    return bias_table.index_select(0, index).view({n, n, num_heads_}).permute({2, 0, 1});
}

std::pair<torch::Tensor, torch::Tensor> WindowAttentionImpl::forward_with_weights(const torch::Tensor& x,
                                                                                  const torch::Tensor& mask,
                                                                                  std::int64_t window) {
    window = window > 0 ? window : window_;
    const auto b = x.size(0);
    const auto n = x.size(1);
    const auto c = x.size(2);
    if (window > window_) {
        throw ShapeError(fmt::format("window {} exceeds the attention window {}", window, window_));
    }
    if (n != window * window) {
        throw ShapeError(fmt::format("window attention expects {} tokens per window, got {}", window * window, n));
    }
    if (c != dim_) {
        throw ShapeError(fmt::format("window attention expects {} channels, got {}", dim_, c));
    }
    const auto head_dim = c / num_heads_;
    auto qkv_out = qkv(x).view({b, n, 3, num_heads_, head_dim}).permute({2, 0, 3, 1, 4});
    auto q = qkv_out[0] * (1.0 / std::sqrt(static_cast<double>(head_dim)));
    auto k = qkv_out[1];
    auto v = qkv_out[2];

    auto logits = torch::matmul(q, k.transpose(-2, -1)) + position_bias(window).unsqueeze(0);
    if (mask.defined()) {
        const auto num_windows = mask.size(0);
        logits = logits.view({b / num_windows, num_windows, num_heads_, n, n}) + mask.unsqueeze(1).unsqueeze(0);
        logits = logits.view({b, num_heads_, n, n});
    }
    auto weights = torch::softmax(logits, -1);
    auto out = torch::matmul(weights, v).transpose(1, 2).reshape({b, n, c});
    return {proj(out), weights};
}

torch::Tensor WindowAttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& mask, std::int64_t window) {
    return forward_with_weights(x, mask, window).first;
}

// ---------------------------------------------------------------------------

SwinBlockImpl::SwinBlockImpl(std::int64_t dim, std::int64_t num_heads, std::int64_t window, std::int64_t shift,
                             std::int64_t mlp_ratio, bool pad_to_window)
    : dim_(dim), num_heads_(num_heads), window_(window), shift_(shift), pad_to_window_(pad_to_window) {
    if (shift < 0 || shift >= window) {
        throw ConfigError(fmt::format("shift {} must be in [0, window {})", shift, window));
    }
    norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    attn = register_module("attn", WindowAttention(dim, window, num_heads));
    norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    fc1 = register_module("fc1", torch::nn::Linear(dim, dim * mlp_ratio));
    fc2 = register_module("fc2", torch::nn::Linear(dim * mlp_ratio, dim));
}

std::pair<std::int64_t, std::int64_t> SwinBlockImpl::effective_window(std::int64_t height, std::int64_t width) const {
    // A window covering the whole map needs no shift. Without padding a map
    // smaller than the window is left to the divisibility check.
    const auto side = std::min(height, width);
    if (side == window_ || (side < window_ && pad_to_window_)) {
        return {std::min(height, width), 0};
    }
    return {window_, shift_};
}

torch::Tensor SwinBlockImpl::forward(const torch::Tensor& x, std::int64_t height, std::int64_t width) {
    const auto b = x.size(0);
    if (x.size(1) != height * width) {
        throw ShapeError(fmt::format("swin block: {} tokens for a {}x{} map", x.size(1), height, width));
    }
    const auto [window, shift] = effective_window(height, width);
    if (!pad_to_window_ && (height % window != 0 || width % window != 0)) {
        throw ConfigError(fmt::format("feature map {}x{} is not divisible by window {} and padding is disabled",
                                      height, width, window));
    }
    auto shortcut = x;
    auto h = norm1(x).view({b, height, width, dim_});
    const auto pad_b = (window - height % window) % window;
    const auto pad_r = (window - width % window) % window;
    if (pad_b > 0 || pad_r > 0) {
        h = F::pad(h, F::PadFuncOptions({0, 0, 0, pad_r, 0, pad_b}));
    }
    const auto hp = height + pad_b;
    const auto wp = width + pad_r;

    torch::Tensor mask;
    if (shift > 0) {
        h = torch::roll(h, {-shift, -shift}, {1, 2});
        mask = shifted_window_mask(hp, wp, window, shift).to(h.options());
    }
    auto windows = attn(window_partition(h, window), mask, window);
    h = window_reverse(windows, window, hp, wp);
    if (shift > 0) {
        h = torch::roll(h, {shift, shift}, {1, 2});
    }
    if (pad_b > 0 || pad_r > 0) {
        h = h.index({Slice(), Slice(None, height), Slice(None, width), Slice()}).contiguous();
    }
    auto out = shortcut + h.view({b, height * width, dim_});
    return out + fc2(torch::gelu(fc1(norm2(out))));
}

SwinBlockPairImpl::SwinBlockPairImpl(std::int64_t dim, std::int64_t num_heads, std::int64_t window,
                                     std::int64_t mlp_ratio, bool pad_to_window, std::optional<std::int64_t> shift) {
    regular = register_module("regular", SwinBlock(dim, num_heads, window, 0, mlp_ratio, pad_to_window));
    shifted = register_module("shifted",
                              SwinBlock(dim, num_heads, window, shift.value_or(window / 2), mlp_ratio, pad_to_window));
}

torch::Tensor SwinBlockPairImpl::forward(const torch::Tensor& x, std::int64_t height, std::int64_t width) {
    return shifted(regular(x, height, width), height, width);
}

// ---------------------------------------------------------------------------

PatchMergingImpl::PatchMergingImpl(std::int64_t in_dim, std::int64_t out_dim) {
    norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({4 * in_dim})));
    reduction = register_module("reduction", torch::nn::Linear(torch::nn::LinearOptions(4 * in_dim, out_dim).bias(false)));
}

torch::Tensor PatchMergingImpl::forward(const torch::Tensor& x, std::int64_t height, std::int64_t width) {
    const auto b = x.size(0);
    const auto c = x.size(2);
    if (height % 2 != 0 || width % 2 != 0) {
        throw ShapeError(fmt::format("patch merging needs even sides, got {}x{}", height, width));
    }
    auto grid = x.view({b, height, width, c});
    auto x0 = grid.index({Slice(), Slice(0, None, 2), Slice(0, None, 2), Slice()});
    auto x1 = grid.index({Slice(), Slice(1, None, 2), Slice(0, None, 2), Slice()});
    auto x2 = grid.index({Slice(), Slice(0, None, 2), Slice(1, None, 2), Slice()});
    auto x3 = grid.index({Slice(), Slice(1, None, 2), Slice(1, None, 2), Slice()});
    auto merged = torch::cat({x0, x1, x2, x3}, -1).view({b, (height / 2) * (width / 2), 4 * c});
    return reduction(norm(merged));
}

// ---------------------------------------------------------------------------

namespace {

void trunc_normal_(torch::Tensor& t, double std) {
    torch::NoGradGuard guard;
    t.normal_(0.0, std);
    for (int round = 0; round < 16; ++round) {
        auto outside = t.abs() > 2.0 * std;
        if (!outside.any().item<bool>()) {
            break;
        }
        t.masked_scatter_(outside, torch::randn({outside.sum().item<std::int64_t>()}, t.options()) * std);
    }
    t.clamp_(-2.0 * std, 2.0 * std);
}

} // namespace

namespace {

void init_one(torch::nn::Module& m) {
    if (auto* linear = m.as<torch::nn::Linear>()) {
        trunc_normal_(linear->weight, 0.02);
        if (linear->bias.defined()) {
            linear->bias.zero_();
        }
    } else if (auto* ln = m.as<torch::nn::LayerNorm>()) {
        ln->weight.fill_(1.0);
        ln->bias.zero_();
    } else if (auto* wa = m.as<WindowAttention>()) {
        trunc_normal_(wa->bias_table, 0.02);
    }
}

} // namespace

void init_transformer_weights(torch::nn::Module& module) {
    torch::NoGradGuard guard;
    // modules(true) needs a shared_ptr owner, which constructors do not have yet.
    init_one(module);
    for (auto& m : module.modules(/*include_self=*/false)) {
        init_one(*m);
    }
}

SwinBackboneImpl::SwinBackboneImpl(const EncoderConfig& config) : config_(config) {
    config_.validate();
    patch_embed_ = register_module(
        "patch_embed", torch::nn::Conv2d(torch::nn::Conv2dOptions(config.in_channels, config.dims[0], config.patch_size)
                                             .stride(config.patch_size)));
    embed_norm_ = register_module("embed_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({config.dims[0]})));
    for (std::size_t l = 0; l < 4; ++l) {
        std::vector<SwinBlock> blocks;
        for (std::int64_t i = 0; i < config.depths[l]; ++i) {
            // Even positions are W-MHSA, odd ones SW-MHSA: consecutive pairs form the four-equation cycle.
            const auto shift = (i % 2 == 1) ? config.window / 2 : 0;
            blocks.push_back(register_module(fmt::format("stage{}_block{}", l + 1, i),
                                             SwinBlock(config.dims[l], config.heads[l], config.window, shift,
                                                       config.mlp_ratio, config.pad_to_window)));
        }
        stages_.push_back(std::move(blocks));
        out_norms_.push_back(register_module(fmt::format("out_norm{}", l + 1),
                                             torch::nn::LayerNorm(torch::nn::LayerNormOptions({config.dims[l]}))));
        if (l < 3) {
            merges_.push_back(
                register_module(fmt::format("merge{}", l + 1), PatchMerging(config.dims[l], config.dims[l + 1])));
        }
    }
    init_transformer_weights(*this);
}

std::vector<torch::Tensor> SwinBackboneImpl::forward(const torch::Tensor& images) {
    auto x = patch_embed_(images); // [B, C, H/4, W/4]
    const auto b = x.size(0);
    auto h = x.size(2);
    auto w = x.size(3);
    auto tokens = embed_norm_(x.flatten(2).transpose(1, 2));
    std::vector<torch::Tensor> outputs;
    for (std::size_t l = 0; l < 4; ++l) {
        for (auto& block : stages_[l]) {
            tokens = block(tokens, h, w);
        }
        outputs.push_back(out_norms_[l](tokens).transpose(1, 2).reshape({b, config_.dims[l], h, w}));
        if (l < 3) {
            tokens = merges_[l](tokens, h, w);
            h /= 2;
            w /= 2;
        }
    }
    return outputs;
}

// ---------------------------------------------------------------------------

SiameseEncoderImpl::SiameseEncoderImpl(const EncoderConfig& config) : config_(config) {
    backbone = register_module("backbone", SwinBackbone(config));
    mean_ = register_buffer("pixel_mean", torch::tensor({config.mean[0], config.mean[1], config.mean[2]},
                                                        torch::kFloat32).view({1, 3, 1, 1}));
    std_ = register_buffer("pixel_std", torch::tensor({config.std[0], config.std[1], config.std[2]},
                                                      torch::kFloat32).view({1, 3, 1, 1}));
}

std::array<std::int64_t, 4> SiameseEncoderImpl::level_channels() const {
    return {2 * config_.dims[0], 2 * config_.dims[1], 2 * config_.dims[2], 2 * config_.dims[3]};
}

FeaturePyramid SiameseEncoderImpl::forward(const torch::Tensor& images_t1, const torch::Tensor& images_t2) {
    if (!images_t1.sizes().equals(images_t2.sizes())) {
        throw ShapeError("siamese encoder: the two temporal images differ in shape");
    }
    if (images_t1.dim() != 4 || images_t1.size(1) != config_.in_channels) {
        throw ShapeError(fmt::format("siamese encoder expects [B, {}, H, W] images", config_.in_channels));
    }
    const auto divisor = config_.size_divisor();
    if (images_t1.size(2) % divisor != 0 || images_t1.size(3) % divisor != 0) {
        throw ShapeError(fmt::format("input {}x{} must be divisible by patch size x 8 = {}", images_t1.size(2),
                                     images_t1.size(3), divisor));
    }
    // Two passes over the same parameters.
    const auto f1 = backbone((images_t1 - mean_) / std_);
    const auto f2 = backbone((images_t2 - mean_) / std_);
    FeaturePyramid pyramid;
    for (std::size_t l = 0; l < 4; ++l) {
        pyramid.levels.push_back(torch::cat({f1[l], f2[l]}, 1));
    }
    return pyramid;
}

} // namespace changeminds::encoder
