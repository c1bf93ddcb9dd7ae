#include "changeminds/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "changeminds/errors.hpp"

namespace changeminds::training {

namespace F = torch::nn::functional;
using torch::indexing::Slice;

std::string to_string(LossMode mode) {
    switch (mode) {
    case LossMode::kCdOnly:
        return "cd_only";
    case LossMode::kCcOnly:
        return "cc_only";
    case LossMode::kMultitask:
        return "multitask";
    }
    return "multitask";
}

LossMode parse_loss_mode(const std::string& text) {
    if (text == "cd_only") {
        return LossMode::kCdOnly;
    }
    if (text == "cc_only") {
        return LossMode::kCcOnly;
    }
    if (text == "multitask") {
        return LossMode::kMultitask;
    }
    throw ConfigError(fmt::format("unknown loss mode '{}' (expected cd_only, cc_only or multitask)", text));
}

void TrainConfig::validate() const {
    if (epochs < 1) {
        throw ConfigError(fmt::format("epochs must be >= 1, got {}", epochs));
    }
    if (!(base_lr > 0.0) || min_lr < 0.0 || min_lr > base_lr) {
        throw ConfigError(fmt::format("need 0 <= min lr <= base lr and base lr > 0, got {} / {}", min_lr, base_lr));
    }
    if (batch_size < 1) {
        throw ConfigError(fmt::format("batch size must be >= 1, got {}", batch_size));
    }
    if (eval_interval < 1) {
        throw ConfigError(fmt::format("eval interval must be >= 1, got {}", eval_interval));
    }
    if (max_steps < 0) {
        throw ConfigError(fmt::format("max steps must be >= 0, got {}", max_steps));
    }
}

std::string loss_log_header() { return "step,L_cd,L_cc,L_total,weight,lr\n"; }

std::string loss_log_row(const LossRecord& r) {
    return fmt::format("{},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g}\n", r.step, r.l_cd, r.l_cc, r.total, r.weight, r.lr);
}

torch::Tensor cd_loss(const torch::Tensor& log_probs, const torch::Tensor& masks) {
    if (log_probs.dim() != 4 || masks.dim() != 3) {
        throw ShapeError("cd_loss expects log-probabilities [B, C, H, W] and masks [B, H, W]");
    }
    if (log_probs.size(0) != masks.size(0) || log_probs.size(2) != masks.size(1) || log_probs.size(3) != masks.size(2)) {
        throw ShapeError(fmt::format("cd_loss: log-probabilities [{}] do not match masks [{}]",
                                     fmt::join(log_probs.sizes(), ", "), fmt::join(masks.sizes(), ", ")));
    }
    const auto classes = log_probs.size(1);
    if (masks.numel() > 0) {
        const auto hi = masks.max().item<std::int64_t>();
        const auto lo = masks.min().item<std::int64_t>();
        if (hi >= classes || lo < 0) {
            throw DataError(fmt::format("mask class {} outside [0, {})", hi >= classes ? hi : lo, classes));
        }
    }
    return F::nll_loss(log_probs, masks);
}

torch::Tensor cc_loss(const torch::Tensor& log_probs, const torch::Tensor& targets) {
    if (log_probs.dim() != 3 || targets.dim() != 2 || log_probs.size(1) != targets.size(1)) {
        throw ShapeError("cc_loss expects log-probabilities [B, T, N] and targets [B, T]");
    }
    const auto vocab = log_probs.size(2);
    if (targets.numel() > 0 && targets.max().item<std::int64_t>() >= vocab) {
        throw DataError(fmt::format("target id {} outside vocabulary of {}", targets.max().item<std::int64_t>(), vocab));
    }
    const auto valid = targets.ne(data::SpecialTokens::kPad);
    const auto count = valid.sum().item<std::int64_t>();
    if (count == 0) {
        return log_probs.sum() * 0.0;
    }
    auto picked = log_probs.gather(2, targets.unsqueeze(2)).squeeze(2);
    return -(picked * valid.to(picked.scalar_type())).sum() / static_cast<double>(count);
}

BalancedLoss balanced_multitask_loss(const torch::Tensor& l_cc, const torch::Tensor& l_cd) {
    if (l_cd.item<double>() == 0.0) {
        return {l_cc, 0.0};
    }
    auto ratio = l_cc.detach() / l_cd.detach();
    return {l_cc + l_cd * ratio, ratio.item<double>()};
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr, double min_lr) {
    if (total_steps <= 1) {
        return base_lr;
    }
    const auto clamped = std::clamp<std::int64_t>(step, 0, total_steps - 1);
    const double progress = static_cast<double>(clamped) / static_cast<double>(total_steps - 1);
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------

namespace {

std::string read_string(torch::serialize::InputArchive& archive, const std::string& key) {
    c10::IValue value;
    archive.read(key, value);
    return value.toStringRef();
}

torch::serialize::InputArchive open_archive(const fs::path& path) {
    if (!fs::exists(path)) {
        throw DataError(fmt::format("checkpoint not found: {}", path.string()));
    }
    torch::serialize::InputArchive archive;
    try {
        archive.load_from(path.string());
    } catch (const c10::Error& e) {
        throw DataError(fmt::format("cannot read checkpoint {}: {}", path.string(), e.what_without_backtrace()));
    }
    return archive;
}

CheckpointMeta read_meta(torch::serialize::InputArchive& archive, const fs::path& path) {
    CheckpointMeta meta;
    try {
        c10::IValue step;
        archive.read("step", step);
        meta.step = step.toInt();
        meta.config_hash = read_string(archive, "config_hash");
        meta.config_text = read_string(archive, "config");
        meta.vocabulary_json = read_string(archive, "vocabulary");
    } catch (const c10::Error& e) {
        throw DataError(fmt::format("checkpoint {} lacks metadata: {}", path.string(), e.what_without_backtrace()));
    }
    return meta;
}

void load_module(torch::nn::Module& model, torch::serialize::InputArchive& archive, const fs::path& path) {
    // Module::load replaces tensors wholesale, so shapes are compared afterwards.
    std::vector<std::pair<std::string, std::vector<std::int64_t>>> shapes;
    for (const auto& p : model.named_parameters()) {
        shapes.emplace_back(p.key(), p.value().sizes().vec());
    }
    try {
        torch::serialize::InputArchive weights;
        archive.read("model", weights);
        model.load(weights);
    } catch (const c10::Error& e) {
        throw DataError(
            fmt::format("checkpoint {} does not match the model: {}", path.string(), e.what_without_backtrace()));
    }
    const auto loaded = model.named_parameters();
    for (const auto& [name, sizes] : shapes) {
        const auto got = loaded[name].sizes().vec();
        if (got != sizes) {
            throw DataError(fmt::format("checkpoint {} does not match the model: {} has shape [{}], expected [{}]",
                                        path.string(), name, fmt::join(got, ", "), fmt::join(sizes, ", ")));
        }
    }
}

} // namespace

CheckpointMeta read_checkpoint_meta(const fs::path& path) {
    auto archive = open_archive(path);
    return read_meta(archive, path);
}

void load_model_weights(predictor::ChangeMinds& model, const fs::path& path) {
    auto archive = open_archive(path);
    load_module(*model, archive, path);
}

Trainer::Trainer(predictor::ChangeMinds model, TrainConfig config, std::int64_t total_steps)
    : model_(std::move(model)), config_(std::move(config)), total_steps_(total_steps), rng_(config_.seed) {
    config_.validate();
    if (total_steps_ < 1) {
        throw ConfigError(fmt::format("schedule needs at least one step, got {}", total_steps_));
    }
    optimizer_ = std::make_unique<torch::optim::Adam>(model_->parameters(),
                                                      torch::optim::AdamOptions(config_.base_lr).weight_decay(0.0));
}

bool Trainer::finished() const {
    return step_ >= total_steps_ || (config_.max_steps > 0 && step_ >= config_.max_steps);
}

double Trainer::current_lr() const { return cosine_lr(step_, total_steps_, config_.base_lr, config_.min_lr); }

LossRecord Trainer::train_step(const data::Batch& batch) {
    model_->train();
    const double lr = current_lr();
    for (auto& group : optimizer_->param_groups()) {
        static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
    }
    optimizer_->zero_grad();

    auto out = model_->forward(batch.images_t1, batch.images_t2, batch.caption_ids);
    auto l_cd = cd_loss(out.cd_log_probs, batch.masks);
    auto targets = batch.caption_ids.index({Slice(), Slice(1, torch::indexing::None)});
    auto l_cc = cc_loss(out.cc_log_probs, targets);

    LossRecord record;
    record.step = step_;
    record.lr = lr;
    record.l_cd = l_cd.item<double>();
    record.l_cc = l_cc.item<double>();

    torch::Tensor total;
    switch (config_.loss_mode) {
    case LossMode::kCdOnly:
        total = l_cd;
        record.weight = 1.0;
        break;
    case LossMode::kCcOnly:
        total = l_cc;
        record.weight = 0.0;
        break;
    case LossMode::kMultitask: {
        auto balanced = balanced_multitask_loss(l_cc, l_cd);
        total = balanced.total;
        record.weight = balanced.weight;
        break;
    }
    }
    record.total = total.item<double>();
    if (!std::isfinite(record.total) || !std::isfinite(record.l_cd) || !std::isfinite(record.l_cc)) {
        throw NumericError(fmt::format("non-finite loss at step {}: L_cd={} L_cc={} L_total={}", step_, record.l_cd,
                                       record.l_cc, record.total));
    }
    total.backward();
    optimizer_->step();
    ++step_;
    return record;
}

std::vector<LossRecord> Trainer::train_epoch(const std::vector<data::BiTemporalSample>& samples) {
    if (samples.empty()) {
        throw DataError("cannot train on an empty dataset");
    }
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng_);

    const auto max_len = model_->config().decoder.max_caption_len;
    const auto batch_size = static_cast<std::size_t>(config_.batch_size);
    std::vector<LossRecord> records;
    std::vector<data::BiTemporalSample> chunk;
    for (std::size_t start = 0; start < order.size() && !finished(); start += batch_size) {
        chunk.clear();
        for (std::size_t i = start; i < std::min(order.size(), start + batch_size); ++i) {
            chunk.push_back(samples[order[i]]);
        }
        records.push_back(train_step(data::collate(chunk, max_len, &rng_)));
    }
    return records;
}

void Trainer::save_checkpoint(const fs::path& path, const CheckpointMeta& meta) const {
    torch::serialize::OutputArchive root;
    torch::serialize::OutputArchive weights;
    model_->save(weights);
    root.write("model", weights);
    torch::serialize::OutputArchive optim;
    optimizer_->save(optim);
    root.write("optimizer", optim);
    root.write("step", c10::IValue(step_));
    root.write("config_hash", c10::IValue(meta.config_hash));
    root.write("config", c10::IValue(meta.config_text));
    root.write("vocabulary", c10::IValue(meta.vocabulary_json));
    std::ostringstream rng_state;
    rng_state << rng_;
    root.write("rng", c10::IValue(rng_state.str()));
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    root.save_to(path.string());
}

CheckpointMeta Trainer::load_checkpoint(const fs::path& path, const std::string& expected_hash) {
    auto archive = open_archive(path);
    auto meta = read_meta(archive, path);
    if (meta.config_hash != expected_hash) {
        fmt::print(stderr, "warning: checkpoint {} was written with config {} but the current config is {}\n",
                   path.string(), meta.config_hash, expected_hash);
    }
    load_module(*model_, archive, path);
    try {
        torch::serialize::InputArchive optim;
        archive.read("optimizer", optim);
        optimizer_->load(optim);
        std::istringstream rng_state(read_string(archive, "rng"));
        rng_state >> rng_;
    } catch (const c10::Error& e) {
        throw DataError(fmt::format("checkpoint {} has no usable optimizer state: {}", path.string(),
                                    e.what_without_backtrace()));
    }
    step_ = meta.step;
    return meta;
}

// ---------------------------------------------------------------------------

metrics::MetricRows EvalReport::rows() const {
    metrics::MetricRows out;
    if (has_cd) {
        out.emplace_back("mIoU", miou);
        out.emplace_back("F1", change.f1);
        out.emplace_back("cIoU", change.ciou);
        for (std::size_t c = 0; c < class_iou.size(); ++c) {
            out.emplace_back(fmt::format("IoU_{}", c), class_iou[c]);
        }
    }
    if (has_cc) {
        for (std::size_t n = 0; n < 4; ++n) {
            out.emplace_back(fmt::format("BLEU-{}", n + 1), captions.bleu[n]);
        }
        out.emplace_back("ROUGE-L", captions.rouge_l);
        out.emplace_back("CIDEr-D", captions.cider_d);
        out.emplace_back("TF-accuracy", teacher_forced_accuracy);
        out.emplace_back("exact-match", num_samples > 0 ? static_cast<double>(exact_matches) / num_samples : 0.0);
    }
    return out;
}

EvalOptions eval_options_for(LossMode mode, std::int64_t batch_size) {
    EvalOptions options;
    options.batch_size = batch_size;
    options.segmentation = mode != LossMode::kCcOnly;
    options.captions = mode != LossMode::kCdOnly;
    return options;
}

EvalReport evaluate(predictor::ChangeMinds& model, const std::vector<data::BiTemporalSample>& samples,
                    const data::Vocabulary& vocab, const EvalOptions& options) {
    if (samples.empty()) {
        throw DataError("cannot evaluate an empty dataset");
    }
    torch::NoGradGuard guard;
    model->eval();
    const auto& config = model->config();
    const int classes = static_cast<int>(config.decoder.num_classes);
    const auto max_len = config.decoder.max_caption_len;

    EvalReport report;
    report.has_cd = options.segmentation;
    report.has_cc = options.captions;
    metrics::ConfusionAccumulator confusion(classes);
    metrics::ConfusionAccumulator binary(2);
    std::vector<metrics::Tokens> candidates;
    std::vector<std::vector<metrics::Tokens>> references;
    std::int64_t correct = 0;
    std::int64_t counted = 0;

    const auto batch_size = static_cast<std::size_t>(std::max<std::int64_t>(1, options.batch_size));
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        const auto stop = std::min(samples.size(), start + batch_size);
        std::span<const data::BiTemporalSample> chunk(samples.data() + start, stop - start);
        auto batch = data::collate(chunk, max_len);
        auto y = model->representation(batch.images_t1, batch.images_t2);
        auto out = model->heads(y, options.captions ? batch.caption_ids : torch::Tensor{}, batch.images_t1.size(2),
                                batch.images_t1.size(3));
        for (const auto& id : batch.sample_ids) {
            report.sample_ids.push_back(id);
        }

        if (options.segmentation) {
            auto pred = out.cd_log_probs.argmax(1).contiguous();
            auto truth = batch.masks.contiguous();
            confusion.update({pred.data_ptr<std::int64_t>(), static_cast<std::size_t>(pred.numel())},
                             {truth.data_ptr<std::int64_t>(), static_cast<std::size_t>(truth.numel())});
            auto pred_change = pred.gt(0).to(torch::kInt64).contiguous();
            auto truth_change = truth.gt(0).to(torch::kInt64).contiguous();
            binary.update({pred_change.data_ptr<std::int64_t>(), static_cast<std::size_t>(pred_change.numel())},
                          {truth_change.data_ptr<std::int64_t>(), static_cast<std::size_t>(truth_change.numel())});
        }

        if (options.captions) {
            auto targets = batch.caption_ids.index({Slice(), Slice(1, torch::indexing::None)});
            auto valid = targets.ne(data::SpecialTokens::kPad);
            correct += out.cc_log_probs.argmax(-1).eq(targets).logical_and(valid).sum().item<std::int64_t>();
            counted += valid.sum().item<std::int64_t>();

            auto decoded = predictor::greedy_decode(model->cc_head, model->cc_head->project_image(y), max_len);
            for (std::size_t b = 0; b < decoded.ids.size(); ++b) {
                auto words = vocab.decode(decoded.ids[b]);
                const auto& refs = batch.references[b];
                if (std::find(refs.begin(), refs.end(), words) != refs.end()) {
                    ++report.exact_matches;
                }
                report.decoded.push_back(fmt::format("{}", fmt::join(words, " ")));
                candidates.push_back(std::move(words));
                references.push_back(refs);
            }
        }
    }

    report.num_samples = static_cast<std::int64_t>(samples.size());
    if (options.segmentation) {
        report.miou = metrics::miou(confusion);
        for (int c = 0; c < classes; ++c) {
            report.class_iou.push_back(metrics::class_iou(confusion, c));
        }
        report.change = metrics::f1_ciou(binary, 1);
    }
    if (options.captions) {
        report.captions = metrics::evaluate_captions(candidates, references);
        report.teacher_forced_accuracy = counted > 0 ? static_cast<double>(correct) / static_cast<double>(counted) : 0.0;
    }
    return report;
}

} // namespace changeminds::training
