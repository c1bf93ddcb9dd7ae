#include "changeminds/changelstm.hpp"

#include <cmath>

#include <fmt/format.h>

#include "changeminds/errors.hpp"

namespace changeminds::changelstm {

namespace F = torch::nn::functional;
using torch::indexing::Slice;

void ChangeLSTMConfig::validate() const {
    if (hidden_dim <= 0) {
        throw ConfigError(fmt::format("ChangeLSTM hidden dim must be positive, got {}", hidden_dim));
    }
    if (depth < 0) {
        throw ConfigError(fmt::format("ChangeLSTM depth must be >= 0 (0 disables), got {}", depth));
    }
    if (num_heads < 1 || hidden_dim % num_heads != 0) {
        throw ConfigError(fmt::format("ChangeLSTM hidden dim {} not divisible by {} heads", hidden_dim, num_heads));
    }
    if (conv_kernel < 1) {
        throw ConfigError("ChangeLSTM causal conv kernel must be >= 1");
    }
}

LevelLayout LevelLayout::from_pyramid(const encoder::FeaturePyramid& pyramid) {
    LevelLayout layout;
    for (const auto& level : pyramid.levels) {
        layout.offsets.push_back(layout.total);
        layout.levels.push_back({level.size(2), level.size(3), level.size(1)});
        layout.total += level.size(2) * level.size(3);
    }
    return layout;
}

MlstmState MlstmState::zeros(std::int64_t batch, std::int64_t heads, std::int64_t key_dim, std::int64_t value_dim,
                             const torch::TensorOptions& options) {
    return {torch::zeros({batch, heads, key_dim, value_dim}, options), torch::zeros({batch, heads, key_dim}, options),
            torch::zeros({batch, heads}, options)};
}

namespace {

void check_finite(const MlstmInputs& in) {
    const auto t_len = in.query.size(2);
    auto bad = torch::zeros({t_len}, torch::kBool);
    const auto reduce = [&](const torch::Tensor& x) {
        // Collapse everything except the time axis (dim 2).
        auto flags = torch::isfinite(x).logical_not();
        flags = flags.transpose(0, 2).reshape({t_len, -1}).any(1);
        bad.logical_or_(flags.cpu());
    };
    reduce(in.query);
    reduce(in.key);
    reduce(in.value);
    reduce(in.input_gate);
    reduce(in.forget_gate);
    reduce(in.output_gate);
    if (bad.any().item<bool>()) {
        const auto t = bad.nonzero()[0][0].item<std::int64_t>();
        throw NumericError(fmt::format("mLSTM input is not finite at sequence position {}", t));
    }
}

} // namespace

torch::Tensor mlstm_step(MlstmState& state, const MlstmInputs& in, std::int64_t t) {
    const auto key_dim = in.key.size(-1);
    auto q = in.query.select(2, t);                                              // [B, H, dk]
    auto k = in.key.select(2, t) / std::sqrt(static_cast<double>(key_dim));     // [B, H, dk]
    auto v = in.value.select(2, t);                                              // [B, H, dv]
    auto i_pre = in.input_gate.select(2, t);                                     // [B, H]
    auto f_pre = in.forget_gate.select(2, t);                                    // [B, H]

    auto m_new = torch::maximum(f_pre + state.stabilizer, i_pre);
    auto i_gate = torch::exp(i_pre - m_new);
    auto f_gate = torch::exp(f_pre + state.stabilizer - m_new);

    state.memory = f_gate.unsqueeze(-1).unsqueeze(-1) * state.memory +
                   i_gate.unsqueeze(-1).unsqueeze(-1) * k.unsqueeze(-1) * v.unsqueeze(-2);
    state.normalizer = f_gate.unsqueeze(-1) * state.normalizer + i_gate.unsqueeze(-1) * k;
    state.stabilizer = m_new;

    auto numerator = (q.unsqueeze(-1) * state.memory).sum(-2);                  // [B, H, dv]
    auto denominator = torch::maximum((state.normalizer * q).sum(-1).abs(), torch::exp(-m_new));
    return torch::sigmoid(in.output_gate.select(2, t)) * numerator / denominator.unsqueeze(-1);
}

torch::Tensor mlstm_scan(const MlstmInputs& in) {
    check_finite(in);
    const auto batch = in.query.size(0);
    const auto heads = in.query.size(1);
    const auto t_len = in.query.size(2);
    auto state = MlstmState::zeros(batch, heads, in.key.size(-1), in.value.size(-1), in.query.options());
    std::vector<torch::Tensor> outputs;
    outputs.reserve(static_cast<std::size_t>(t_len));
    for (std::int64_t t = 0; t < t_len; ++t) {
        outputs.push_back(mlstm_step(state, in, t));
    }
    auto h = torch::stack(outputs, 2); // [B, H, T, dv]
    return h.permute({0, 2, 1, 3}).reshape({batch, t_len, -1});
}

torch::Tensor mlstm_parallel(const MlstmInputs& in) {
    check_finite(in);
    const auto batch = in.query.size(0);
    const auto t_len = in.query.size(2);
    const auto key_dim = in.key.size(-1);

    // log_decay[t, s] = sum_{r = s+1..t} f~_r for s <= t, computed as a masked
    // cumulative sum so long sequences do not lose precision.
    auto f = in.forget_gate.unsqueeze(-1).expand({-1, -1, t_len, t_len}); // [B, H, T(t), T(s)], value f~_t
    auto strictly_lower = torch::ones({t_len, t_len}, torch::kBool).tril(-1).to(f.device());
    auto log_decay = torch::cumsum(f.masked_fill(strictly_lower.logical_not(), 0.0), 2);
    auto causal = torch::ones({t_len, t_len}, torch::kBool).tril().to(f.device());

    auto log_weights = (log_decay + in.input_gate.unsqueeze(2))
                           .masked_fill(causal.logical_not(), -std::numeric_limits<float>::infinity());
    auto m = std::get<0>(log_weights.max(-1, /*keepdim=*/true)); // [B, H, T, 1]
    auto decay = torch::exp(log_weights - m);

    auto scores = torch::matmul(in.query, in.key.transpose(-2, -1)) / std::sqrt(static_cast<double>(key_dim));
    auto weighted = scores * decay;
    auto denominator = torch::maximum(weighted.sum(-1, true).abs(), torch::exp(-m));
    auto h = torch::matmul(weighted, in.value) / denominator;
    h = torch::sigmoid(in.output_gate) * h;
    return h.permute({0, 2, 1, 3}).reshape({batch, t_len, -1});
}

// ---------------------------------------------------------------------------

XlstmBlockImpl::XlstmBlockImpl(std::int64_t dim, std::int64_t num_heads, std::int64_t conv_kernel,
                               Direction direction, ScanMode scan)
    : dim_(dim), num_heads_(num_heads), conv_kernel_(conv_kernel), direction_(direction), scan_(scan) {
    norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    up = register_module("up", torch::nn::Linear(dim, 2 * dim));
    conv = register_module("conv", torch::nn::Conv1d(torch::nn::Conv1dOptions(dim, dim, conv_kernel)));
    q_proj = register_module("q_proj", torch::nn::Linear(dim, dim));
    k_proj = register_module("k_proj", torch::nn::Linear(dim, dim));
    v_proj = register_module("v_proj", torch::nn::Linear(dim, dim));
    gate_proj = register_module("gate_proj", torch::nn::Linear(dim, 2 * num_heads));
    o_proj = register_module("o_proj", torch::nn::Linear(dim, dim));
    out = register_module("out", torch::nn::Linear(dim, dim));

    torch::NoGradGuard guard;
    encoder::init_transformer_weights(*this);
    gate_proj->weight.zero_();
    gate_proj->bias.zero_();
}

torch::Tensor XlstmBlockImpl::body(const torch::Tensor& sequence) {
    const auto batch = sequence.size(0);
    const auto t_len = sequence.size(1);
    const auto head_dim = dim_ / num_heads_;

    auto expanded = up(norm(sequence)).chunk(2, -1);
    auto branch = expanded[0].transpose(1, 2); // [B, d, T]
    if (conv_kernel_ > 1) {
        branch = F::pad(branch, F::PadFuncOptions({conv_kernel_ - 1, 0})); // left pad keeps it causal
    }
    auto activated = torch::silu(conv(branch)).transpose(1, 2); // [B, T, d]

    const auto split_heads = [&](const torch::Tensor& x) {
        return x.view({batch, t_len, num_heads_, head_dim}).permute({0, 2, 1, 3});
    };
    auto gates = gate_proj(activated).view({batch, t_len, 2, num_heads_}).permute({2, 0, 3, 1});
    MlstmInputs in{split_heads(q_proj(activated)), split_heads(k_proj(activated)), split_heads(v_proj(activated)),
                   gates[0], gates[1], split_heads(o_proj(activated))};
    auto memory_out = scan_ == ScanMode::kParallel ? mlstm_parallel(in) : mlstm_scan(in);
    return out(memory_out * torch::silu(expanded[1])) + sequence;
}

torch::Tensor XlstmBlockImpl::forward(const torch::Tensor& sequence) {
    if (direction_ == Direction::kForward) {
        return body(sequence);
    }
    return body(sequence.flip({1})).flip({1});
}

// ---------------------------------------------------------------------------

ChangeLSTMImpl::ChangeLSTMImpl(const ChangeLSTMConfig& config) : config_(config) {
    config_.validate();
    if (config_.depth == 0) {
        return;
    }
    const auto d = config_.hidden_dim;
    for (std::size_t l = 0; l < 4; ++l) {
        level_proj.push_back(register_module(fmt::format("level_proj{}", l + 1),
                                             torch::nn::Conv2d(torch::nn::Conv2dOptions(config_.level_channels[l], d, 1))));
        back_proj.push_back(register_module(fmt::format("back_proj{}", l + 1),
                                            torch::nn::Conv2d(torch::nn::Conv2dOptions(d, config_.level_channels[l], 1))));
        const auto side = config_.level_sizes[l];
        position_embed.push_back(register_parameter(fmt::format("position_embed{}", l + 1),
                                                    torch::randn({d, side, side}) * 0.02));
    }
    level_embed = register_parameter("level_embed", torch::randn({4, d}) * 0.02);
    for (std::int64_t b = 0; b < config_.num_blocks(); ++b) {
        // Odd-numbered blocks (1st, 3rd, ...) run forward, even-numbered ones reverse.
        const auto dir = b % 2 == 0 ? Direction::kForward : Direction::kReverse;
        blocks.push_back(register_module(fmt::format("block{}", b + 1),
                                         XlstmBlock(d, config_.num_heads, config_.conv_kernel, dir, config_.scan)));
    }
}

TokenSequence ChangeLSTMImpl::project_and_flatten(const encoder::FeaturePyramid& pyramid) {
    if (pyramid.levels.size() != 4) {
        throw ShapeError(fmt::format("ChangeLSTM expects 4 pyramid levels, got {}", pyramid.levels.size()));
    }
    if (config_.depth == 0) {
        throw ConfigError("ChangeLSTM is disabled (depth 0); nothing to project");
    }
    TokenSequence seq;
    seq.layout = LevelLayout::from_pyramid(pyramid);
    std::vector<torch::Tensor> parts;
    for (std::size_t l = 0; l < 4; ++l) {
        const auto& x = pyramid.levels[l];
        if (x.size(1) != config_.level_channels[l]) {
            throw ShapeError(fmt::format("ChangeLSTM level {}: expected {} channels, got {}", l + 1,
                                         config_.level_channels[l], x.size(1)));
        }
        auto projected = level_proj[l](x);
        auto pos = position_embed[l];
        if (pos.size(1) != x.size(2) || pos.size(2) != x.size(3)) {
            pos = F::interpolate(pos.unsqueeze(0), F::InterpolateFuncOptions()
                                                       .size(std::vector<std::int64_t>{x.size(2), x.size(3)})
                                                       .mode(torch::kBilinear)
                                                       .align_corners(false))
                      .squeeze(0);
        }
        projected = projected + pos.unsqueeze(0) + level_embed[static_cast<std::int64_t>(l)].view({1, -1, 1, 1});
        parts.push_back(projected.flatten(2).transpose(1, 2)); // raster order
    }
    seq.values = torch::cat(parts, 1);
    return seq;
}

torch::Tensor ChangeLSTMImpl::refine(const torch::Tensor& sequence) {
    blocks_executed_ = 0;
    auto x = sequence;
    for (auto& block : blocks) {
        x = block(x);
        ++blocks_executed_;
    }
    return x;
}

std::vector<torch::Tensor> ChangeLSTMImpl::unflatten(const TokenSequence& sequence) {
    std::vector<torch::Tensor> out;
    const auto batch = sequence.values.size(0);
    for (std::size_t l = 0; l < sequence.layout.levels.size(); ++l) {
        const auto& lv = sequence.layout.levels[l];
        const auto start = sequence.layout.offsets[l];
        auto slice = sequence.values.index({Slice(), Slice(start, start + lv.height * lv.width), Slice()});
        auto grid = slice.transpose(1, 2).reshape({batch, config_.hidden_dim, lv.height, lv.width});
        out.push_back(back_proj[l](grid));
    }
    return out;
}

std::vector<torch::Tensor> ChangeLSTMImpl::forward(const encoder::FeaturePyramid& pyramid) {
    if (config_.depth == 0) {
        blocks_executed_ = 0;
        return pyramid.levels;
    }
    auto seq = project_and_flatten(pyramid);
    seq.values = refine(seq.values);
    return unflatten(seq);
}

} // namespace changeminds::changelstm
