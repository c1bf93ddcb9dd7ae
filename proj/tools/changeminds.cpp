// changeminds: train, evaluate and run the joint change detection and
// change captioning model, or generate a synthetic dataset.

#include <iostream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "changeminds/commands.hpp"
#include "changeminds/errors.hpp"

namespace cm = changeminds;
namespace fs = std::filesystem;

namespace {

struct TrainArgs {
    std::string preset = "default";
    std::string config_path;
    std::string data;
    std::string out;
    std::string run_dir;
    std::string loss_mode;
    std::int64_t epochs = 0;
    std::int64_t max_steps = -1;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::vector<std::string> overrides;
};

cm::config::RunConfig build_config(const TrainArgs& args, const CLI::App& cmd) {
    cm::config::RunConfig config;
    if (args.preset == "tiny") {
        config = cm::config::RunConfig::tiny();
    } else if (args.preset != "default") {
        throw cm::ConfigError(fmt::format("unknown preset '{}' (expected default or tiny)", args.preset));
    }
    if (!args.config_path.empty()) {
        config.merge_file(args.config_path);
    }
    for (const auto& item : args.overrides) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) {
            throw cm::ConfigError(fmt::format("--set expects key=value, got '{}'", item));
        }
        config.set(item.substr(0, eq), item.substr(eq + 1));
    }
    if (!args.data.empty()) {
        config.data_root = args.data;
    }
    if (!args.out.empty()) {
        config.output_dir = args.out;
    }
    if (!args.loss_mode.empty()) {
        config.train.loss_mode = cm::training::parse_loss_mode(args.loss_mode);
    }
    if (cmd.count("--epochs") > 0) {
        config.train.epochs = args.epochs;
    }
    if (cmd.count("--max-steps") > 0) {
        config.train.max_steps = args.max_steps;
    }
    if (cmd.count("--seed") > 0) {
        config.train.seed = args.seed;
    }
    config.validate();
    return config;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Joint change detection and change captioning on bi-temporal image pairs"};
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);

    TrainArgs train;
    auto* train_cmd = app.add_subcommand("train", "Train a model and write a run directory");
    train_cmd->add_option("--config", train.config_path, "Config file (key = value, [section] headers)");
    train_cmd->add_option("--preset", train.preset, "Base settings: default or tiny")->capture_default_str();
    train_cmd->add_option("--data", train.data, "Dataset root");
    train_cmd->add_option("--out", train.out, "Run-directory root (default $CHANGEMINDS_RUNS or ./runs)");
    train_cmd->add_option("--run-dir", train.run_dir, "Exact run directory to write");
    train_cmd->add_option("--epochs", train.epochs, "Number of epochs");
    train_cmd->add_option("--max-steps", train.max_steps, "Stop after this many optimizer steps");
    train_cmd->add_option("--seed", train.seed, "Random seed");
    train_cmd->add_option("--loss-mode", train.loss_mode, "cd_only, cc_only or multitask");
    train_cmd->add_option("--set", train.overrides, "Override a config key: --set train.lr=1e-3");

    std::string eval_checkpoint;
    std::string eval_data;
    std::string eval_split = "test";
    std::string eval_out;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
    eval_cmd->add_option("--checkpoint", eval_checkpoint, "Checkpoint file")->required();
    eval_cmd->add_option("--data", eval_data, "Dataset root")->required();
    eval_cmd->add_option("--split", eval_split, "Split to evaluate")->capture_default_str();
    eval_cmd->add_option("--out", eval_out, "Directory for report.csv and report.txt");

    cm::commands::PredictOptions predict;
    std::string predict_truth;
    auto* predict_cmd = app.add_subcommand("predict", "Predict a change map and caption for one image pair");
    predict_cmd->add_option("--checkpoint", predict.checkpoint, "Checkpoint file")->required();
    predict_cmd->add_option("--t1", predict.image_t1, "Pre-change image (PNG)")->required();
    predict_cmd->add_option("--t2", predict.image_t2, "Post-change image (PNG)")->required();
    predict_cmd->add_option("--gt", predict_truth, "Ground-truth mask for a TP/TN/FP/FN overlay");
    predict_cmd->add_option("--out", predict.out_dir, "Output directory")->required();
    predict_cmd->add_flag("--attention", predict.attention, "Write one attention heat map per word");

    cm::commands::SynthOptions synth;
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic dataset");
    synth_cmd->add_option("--out", synth.out_dir, "Output directory")->required();
    synth_cmd->add_option("--n", synth.num_samples, "Number of samples")->capture_default_str();
    synth_cmd->add_option("--val-n", synth.val_samples, "Samples in an extra val split")->capture_default_str();
    synth_cmd->add_option("--seed", synth.seed, "Random seed")->capture_default_str();
    synth_cmd->add_option("--size", synth.image_size, "Image side in pixels")->capture_default_str();
    synth_cmd->add_option("--refs", synth.references, "Reference captions per sample (1-5)")->capture_default_str();
    synth_cmd->add_option("--split", synth.split, "Split name")->capture_default_str();
    synth_cmd->add_flag("--force", synth.force, "Overwrite a non-empty output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*train_cmd) {
            auto config = build_config(train, *train_cmd);
            std::optional<fs::path> run_dir;
            if (!train.run_dir.empty()) {
                run_dir = train.run_dir;
            }
            auto result = cm::commands::cmd_train(config, std::cout, run_dir);
            fmt::print("run directory: {}\n", result.run_dir.string());
        } else if (*eval_cmd) {
            std::optional<fs::path> out;
            if (!eval_out.empty()) {
                out = eval_out;
            }
            cm::commands::cmd_eval(eval_checkpoint, eval_data, eval_split, out, std::cout);
        } else if (*predict_cmd) {
            if (!predict_truth.empty()) {
                predict.ground_truth = predict_truth;
            }
            auto result = cm::commands::cmd_predict(predict);
            fmt::print("caption: {}\nchange map: {}\noverlay: {}\n", result.caption, result.change_map.string(),
                       result.overlay.string());
        } else if (*synth_cmd) {
            cm::commands::cmd_synth(synth);
            fmt::print("wrote {} samples to {}\n", synth.num_samples + synth.val_samples, synth.out_dir.string());
        }
    } catch (const cm::ConfigError& e) {
        fmt::print(stderr, "config error: {}\n", e.what());
        return 1;
    } catch (const cm::NumericError& e) {
        fmt::print(stderr, "numeric error: {}\n", e.what());
        return 3;
    } catch (const cm::DataError& e) {
        fmt::print(stderr, "data error: {}\n", e.what());
        return 2;
    } catch (const cm::ShapeError& e) {
        fmt::print(stderr, "shape error: {}\n", e.what());
        return 2;
    }
    return 0;
}
