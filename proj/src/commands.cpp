#include "changeminds/commands.hpp"

#include <fstream>

#include <fmt/format.h>
#include <fmt/ostream.h>
#include <fmt/ranges.h>

#include "changeminds/errors.hpp"

namespace changeminds::commands {

namespace F = torch::nn::functional;

void seed_everything(std::uint64_t seed) {
    torch::manual_seed(seed);
    torch::set_num_threads(1);
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) {
        throw DataError(fmt::format("cannot write {}", path.string()));
    }
    out << text;
}

fs::path fresh_run_dir(const config::RunConfig& config) {
    const auto root = config::runs_root(config);
    const auto base = fmt::format("run-{}", config.hash().substr(0, 10));
    auto dir = root / base;
    for (int k = 2; fs::exists(dir) && !fs::is_empty(dir); ++k) {
        dir = root / fmt::format("{}-{}", base, k);
    }
    return dir;
}

std::string epochs_header(const training::EvalReport& report) {
    std::string line = "epoch,step,mean_L_cd,mean_L_cc,mean_L_total";
    for (const auto& [name, value] : report.rows()) {
        line += "," + name;
    }
    return line + "\n";
}

std::optional<double> find_metric(const metrics::MetricRows& rows, const std::string& name) {
    for (const auto& [key, value] : rows) {
        if (key == name) {
            return value;
        }
    }
    return std::nullopt;
}

std::string report_text(const training::EvalReport& report, training::LossMode mode) {
    auto text = metrics::to_table(report.rows());
    if (!report.has_cd) {
        text += fmt::format("change detection metrics: absent (loss mode {})\n", training::to_string(mode));
    }
    if (!report.has_cc) {
        text += fmt::format("captioning metrics: absent (loss mode {})\n", training::to_string(mode));
    }
    return text;
}

void write_report(const fs::path& dir, const training::EvalReport& report, training::LossMode mode) {
    write_text(dir / "report.csv", metrics::to_csv(report.rows()));
    write_text(dir / "report.txt", report_text(report, mode));
    if (report.has_cc) {
        std::string captions = "sample_id,caption\n";
        for (std::size_t i = 0; i < report.decoded.size(); ++i) {
            captions += fmt::format("{},{}\n", report.sample_ids[i], report.decoded[i]);
        }
        write_text(dir / "captions.csv", captions);
    }
}

} // namespace

TrainResult cmd_train(const config::RunConfig& input, std::ostream& log, const std::optional<fs::path>& run_dir) {
    auto config = input;
    config.validate();
    if (config.data_root.empty()) {
        throw ConfigError("no dataset given (set data.root or pass --data)");
    }
    seed_everything(config.train.seed);

    const int classes = static_cast<int>(config.model.decoder.num_classes);
    const auto captions_json = config.data_root / "captions.json";
    auto train_manifest = data::DatasetManifest::scan(config.data_root, config.train_split, classes);
    auto vocab = data::vocabulary_from_captions(captions_json, config.train_split);
    auto train_samples = data::load_levir_mci(train_manifest, vocab, config.workers);

    std::vector<data::BiTemporalSample> val_samples;
    if (fs::exists(config.data_root / config.val_split)) {
        auto val_manifest = data::DatasetManifest::scan(config.data_root, config.val_split, classes);
        val_samples = data::load_levir_mci(val_manifest, vocab, config.workers);
    } else {
        fmt::print(log, "no '{}' split under {}; validating on '{}'\n", config.val_split, config.data_root.string(),
                   config.train_split);
    }
    const auto& eval_samples = val_samples.empty() ? train_samples : val_samples;

    config.model.vocab_size = vocab.size();
    predictor::ChangeMinds model(config.model);

    const auto n = static_cast<std::int64_t>(train_samples.size());
    const auto steps_per_epoch = (n + config.train.batch_size - 1) / config.train.batch_size;
    training::Trainer trainer(model, config.train, config.train.epochs * steps_per_epoch);

    TrainResult result;
    result.run_dir = run_dir ? *run_dir : fresh_run_dir(config);
    fs::create_directories(result.run_dir);
    const auto config_text = config.serialize();
    const auto hash = config.hash();
    write_text(result.run_dir / "config.toml", config_text);
    write_text(result.run_dir / "config.hash", hash + "\n");
    write_text(result.run_dir / "vocab.json", vocab.to_json().dump(1) + "\n");
    const training::CheckpointMeta meta{0, hash, config_text, vocab.to_json().dump()};

    std::ofstream loss_log(result.run_dir / "loss_log.csv");
    loss_log << training::loss_log_header();
    std::ofstream epochs_log;

    const auto mode = config.train.loss_mode;
    const auto eval_options = training::eval_options_for(mode, config.train.batch_size);
    std::optional<double> best_miou;
    std::optional<double> best_bleu4;
    fmt::print(log, "training {} samples, {} steps/epoch, {} total steps, run dir {}\n", n, steps_per_epoch,
               trainer.total_steps(), result.run_dir.string());

    for (std::int64_t epoch = 1; epoch <= config.train.epochs && !trainer.finished(); ++epoch) {
        auto records = trainer.train_epoch(train_samples);
        double sum_cd = 0.0;
        double sum_cc = 0.0;
        double sum_total = 0.0;
        for (const auto& r : records) {
            loss_log << training::loss_log_row(r);
            sum_cd += r.l_cd;
            sum_cc += r.l_cc;
            sum_total += r.total;
        }
        loss_log.flush();
        result.losses.insert(result.losses.end(), records.begin(), records.end());
        const double count = static_cast<double>(std::max<std::size_t>(1, records.size()));

        const bool last = epoch == config.train.epochs || trainer.finished();
        trainer.save_checkpoint(result.run_dir / "last.ckpt", {trainer.step(), hash, config_text, meta.vocabulary_json});
        if (epoch % config.train.eval_interval != 0 && !last) {
            continue;
        }
        auto report = training::evaluate(model, eval_samples, vocab, eval_options);
        const auto rows = report.rows();
        if (!epochs_log.is_open()) {
            epochs_log.open(result.run_dir / "epochs.csv");
            epochs_log << epochs_header(report);
        }
        epochs_log << fmt::format("{},{},{:.9g},{:.9g},{:.9g}", epoch, trainer.step(), sum_cd / count, sum_cc / count,
                                  sum_total / count);
        for (const auto& [name, value] : rows) {
            epochs_log << fmt::format(",{:.9g}", value);
        }
        epochs_log << "\n";
        epochs_log.flush();

        const training::CheckpointMeta snapshot{trainer.step(), hash, config_text, meta.vocabulary_json};
        if (auto v = find_metric(rows, "mIoU"); v && (!best_miou || *v > *best_miou)) {
            best_miou = v;
            trainer.save_checkpoint(result.run_dir / "best_miou.ckpt", snapshot);
        }
        if (auto v = find_metric(rows, "BLEU-4"); v && (!best_bleu4 || *v > *best_bleu4)) {
            best_bleu4 = v;
            trainer.save_checkpoint(result.run_dir / "best_bleu4.ckpt", snapshot);
        }
        fmt::print(log, "epoch {} step {}: L_cd {:.4f} L_cc {:.4f} L {:.4f}", epoch, trainer.step(), sum_cd / count,
                   sum_cc / count, sum_total / count);
        for (const auto& [name, value] : rows) {
            fmt::print(log, " {} {:.4f}", name, value);
        }
        fmt::print(log, "\n");
        if (last) {
            result.final_report = std::move(report);
        }
    }
    write_report(result.run_dir, result.final_report, mode);
    return result;
}

LoadedModel load_for_inference(const fs::path& checkpoint) {
    const auto meta = training::read_checkpoint_meta(checkpoint);
    LoadedModel loaded;
    loaded.config.merge_text(meta.config_text);
    loaded.vocab = data::Vocabulary::from_json(nlohmann::json::parse(meta.vocabulary_json));
    loaded.config.model.vocab_size = loaded.vocab.size();
    seed_everything(loaded.config.train.seed);
    loaded.model = predictor::ChangeMinds(loaded.config.model);
    training::load_model_weights(loaded.model, checkpoint);
    loaded.model->eval();
    return loaded;
}

training::EvalReport cmd_eval(const fs::path& checkpoint, const fs::path& data_root, const std::string& split,
                              const std::optional<fs::path>& out_dir, std::ostream& log) {
    auto loaded = load_for_inference(checkpoint);
    const int classes = static_cast<int>(loaded.config.model.decoder.num_classes);
    auto manifest = data::DatasetManifest::scan(data_root, split, classes);
    // Masks with labels beyond the checkpoint's class count fail validation here.
    auto samples = data::load_levir_mci(manifest, loaded.vocab, loaded.config.workers);
    const auto mode = loaded.config.train.loss_mode;
    auto report =
        training::evaluate(loaded.model, samples, loaded.vocab, training::eval_options_for(mode, loaded.config.train.batch_size));
    fmt::print(log, "{}", report_text(report, mode));
    if (out_dir) {
        fs::create_directories(*out_dir);
        write_report(*out_dir, report, mode);
    }
    return report;
}

torch::Tensor render_overlay(const torch::Tensor& prediction, const std::optional<torch::Tensor>& truth,
                             const torch::Tensor& image_t2) {
    const auto h = prediction.size(0);
    const auto w = prediction.size(1);
    auto out = torch::empty({h, w, 3}, torch::kUInt8);
    const auto paint = [&](const torch::Tensor& where, std::array<int, 3> rgb) {
        for (int c = 0; c < 3; ++c) {
            out.select(2, c).masked_fill_(where, rgb[static_cast<std::size_t>(c)]);
        }
    };
    if (truth) {
        const auto p = prediction.gt(0);
        const auto t = truth->to(torch::kInt64).gt(0);
        paint(p.logical_and(t), {0, 255, 0});                                  // TP
        paint(p.logical_not().logical_and(t.logical_not()), {255, 255, 255}); // TN
        paint(p.logical_and(t.logical_not()), {255, 0, 0});                    // FP
        paint(p.logical_not().logical_and(t), {0, 0, 255});                    // FN
        return out;
    }
    auto base = image_t2.permute({1, 2, 0}).clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8);
    out.copy_(base);
    const std::array<std::array<int, 3>, 3> palette{{{0, 0, 0}, {255, 200, 0}, {0, 160, 255}}};
    for (std::int64_t c = 1; c <= prediction.max().item<std::int64_t>(); ++c) {
        paint(prediction.eq(c), palette[static_cast<std::size_t>(std::min<std::int64_t>(c, 2))]);
    }
    return out;
}

PredictResult cmd_predict(const PredictOptions& options) {
    auto loaded = load_for_inference(options.checkpoint);
    auto t1 = data::read_png_rgb(options.image_t1);
    auto t2 = data::read_png_rgb(options.image_t2);
    if (t1.sizes() != t2.sizes()) {
        throw ShapeError(fmt::format("image sizes differ: {}x{} vs {}x{}", t1.size(1), t1.size(2), t2.size(1),
                                     t2.size(2)));
    }
    std::optional<torch::Tensor> truth;
    if (options.ground_truth) {
        truth = data::read_png_gray(*options.ground_truth).to(torch::kInt64);
        if (truth->size(0) != t1.size(1) || truth->size(1) != t1.size(2)) {
            throw ShapeError("ground-truth mask size differs from the images");
        }
    }

    torch::NoGradGuard guard;
    auto& model = loaded.model;
    auto y = model->representation(t1.unsqueeze(0), t2.unsqueeze(0));
    auto prediction = model->cd_head->logits(y, t1.size(1), t1.size(2)).argmax(1)[0];
    auto decoded = predictor::greedy_decode(model->cc_head, model->cc_head->project_image(y),
                                            loaded.config.model.decoder.max_caption_len, options.attention);
    const auto words = loaded.vocab.decode(decoded.ids[0]);

    PredictResult result;
    fs::create_directories(options.out_dir);
    result.change_map = options.out_dir / "change_map.png";
    result.overlay = options.out_dir / "overlay.png";
    result.caption_file = options.out_dir / "caption.txt";
    result.caption = fmt::format("{}", fmt::join(words, " "));
    data::write_png_gray(result.change_map, prediction);
    data::write_png_rgb_u8(result.overlay, render_overlay(prediction, truth, t2));
    write_text(result.caption_file, result.caption + "\n");

    if (options.attention) {
        const auto dir = options.out_dir / "attention";
        fs::create_directories(dir);
        const auto ah = y.size(2);
        const auto aw = y.size(3);
        const auto& steps = decoded.attention[0];
        // Generated tokens follow START; the last may be END.
        for (std::size_t i = 0; i < steps.size(); ++i) {
            const auto id = decoded.ids[0][i + 1];
            const auto word = id == data::SpecialTokens::kEnd ? std::string("end") : loaded.vocab.token(id);
            auto map = steps[i].view({1, 1, ah, aw});
            map = F::interpolate(map, F::InterpolateFuncOptions()
                                          .size(std::vector<std::int64_t>{t1.size(1), t1.size(2)})
                                          .mode(torch::kBilinear)
                                          .align_corners(false));
            auto lo = map.min();
            auto hi = map.max();
            auto scaled = (map - lo) / torch::clamp_min(hi - lo, 1e-12);
            auto path = dir / fmt::format("{:02d}_{}.png", i, word);
            data::write_png_gray(path, scaled[0][0].mul(255.0).round());
            result.attention_maps.push_back(path);
        }
    }
    return result;
}

void cmd_synth(const SynthOptions& options) {
    if (options.num_samples < 1) {
        throw ConfigError(fmt::format("--n must be at least 1, got {}", options.num_samples));
    }
    data::SynthSpec spec;
    spec.image_size = options.image_size;
    spec.num_samples = options.num_samples;
    spec.references_per_sample = options.references;
    spec.seed = options.seed;
    spec.id_prefix = options.split;
    auto samples = data::generate_synthetic(spec);
    if (fs::exists(options.out_dir) && !fs::is_empty(options.out_dir)) {
        if (!options.force) {
            throw DataError(fmt::format("{} exists and is not empty (use --force to overwrite)",
                                        options.out_dir.string()));
        }
        fs::remove_all(options.out_dir);
    }
    fs::create_directories(options.out_dir);
    data::write_dataset(samples, options.out_dir, options.split);
    if (options.val_samples > 0) {
        spec.num_samples = options.val_samples;
        spec.stream = 1;
        spec.id_prefix = "val";
        data::write_dataset(data::generate_synthetic(spec), options.out_dir, "val");
    }
}

} // namespace changeminds::commands
