#include "changeminds/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <openssl/evp.h>

#include "changeminds/errors.hpp"

namespace changeminds::config {

namespace {

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r");
    return std::string(s.substr(first, last - first + 1));
}

std::string unquote(const std::string& value) {
    if (value.size() >= 2 && (value.front() == '"' || value.front() == '\'') && value.back() == value.front()) {
        return value.substr(1, value.size() - 2);
    }
    return value;
}

std::int64_t to_int(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    try {
        const auto v = std::stoll(value, &used);
        if (used == value.size()) {
            return v;
        }
    } catch (const std::exception&) {
    }
    throw ConfigError(fmt::format("{}: expected an integer, got '{}'", key, value));
}

double to_double(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    try {
        const auto v = std::stod(value, &used);
        if (used == value.size()) {
            return v;
        }
    } catch (const std::exception&) {
    }
    throw ConfigError(fmt::format("{}: expected a number, got '{}'", key, value));
}

bool to_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") {
        return true;
    }
    if (value == "false" || value == "0") {
        return false;
    }
    throw ConfigError(fmt::format("{}: expected true or false, got '{}'", key, value));
}

std::vector<std::int64_t> to_list(const std::string& key, const std::string& value) {
    auto body = value;
    if (!body.empty() && body.front() == '[') {
        if (body.back() != ']') {
            throw ConfigError(fmt::format("{}: unterminated list '{}'", key, value));
        }
        body = body.substr(1, body.size() - 2);
    }
    std::vector<std::int64_t> out;
    std::stringstream in(body);
    std::string item;
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) {
            out.push_back(to_int(key, item));
        }
    }
    return out;
}

std::array<std::int64_t, 4> to_array4(const std::string& key, const std::string& value) {
    const auto list = to_list(key, value);
    if (list.size() != 4) {
        throw ConfigError(fmt::format("{}: expected 4 values, got {}", key, list.size()));
    }
    return {list[0], list[1], list[2], list[3]};
}

template <typename Range>
std::string list_text(const Range& values) {
    return fmt::format("[{}]", fmt::join(values, ", "));
}

std::string quoted(const std::string& s) { return fmt::format("\"{}\"", s); }

struct Entry {
    std::string key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

const std::vector<Entry>& registry() {
    using C = RunConfig;
    using S = const std::string&;
    static const std::vector<Entry> entries{
        {"data.root", [](C& c, S v) { c.data_root = unquote(v); },
         [](const C& c) { return quoted(c.data_root.string()); }},
        {"data.train_split", [](C& c, S v) { c.train_split = unquote(v); },
         [](const C& c) { return quoted(c.train_split); }},
        {"data.val_split", [](C& c, S v) { c.val_split = unquote(v); },
         [](const C& c) { return quoted(c.val_split); }},
        {"data.image_size", [](C& c, S v) { c.model.image_size = to_int("data.image_size", v); },
         [](const C& c) { return std::to_string(c.model.image_size); }},
        {"data.workers", [](C& c, S v) { c.workers = static_cast<int>(to_int("data.workers", v)); },
         [](const C& c) { return std::to_string(c.workers); }},

        {"encoder.patch_size", [](C& c, S v) { c.model.encoder.patch_size = to_int("encoder.patch_size", v); },
         [](const C& c) { return std::to_string(c.model.encoder.patch_size); }},
        {"encoder.dims", [](C& c, S v) { c.model.encoder.dims = to_array4("encoder.dims", v); },
         [](const C& c) { return list_text(c.model.encoder.dims); }},
        {"encoder.depths", [](C& c, S v) { c.model.encoder.depths = to_array4("encoder.depths", v); },
         [](const C& c) { return list_text(c.model.encoder.depths); }},
        {"encoder.heads", [](C& c, S v) { c.model.encoder.heads = to_array4("encoder.heads", v); },
         [](const C& c) { return list_text(c.model.encoder.heads); }},
        {"encoder.window", [](C& c, S v) { c.model.encoder.window = to_int("encoder.window", v); },
         [](const C& c) { return std::to_string(c.model.encoder.window); }},
        {"encoder.mlp_ratio", [](C& c, S v) { c.model.encoder.mlp_ratio = to_int("encoder.mlp_ratio", v); },
         [](const C& c) { return std::to_string(c.model.encoder.mlp_ratio); }},
        {"encoder.pad_to_window",
         [](C& c, S v) { c.model.encoder.pad_to_window = to_bool("encoder.pad_to_window", v); },
         [](const C& c) { return std::string(c.model.encoder.pad_to_window ? "true" : "false"); }},

        {"changelstm.hidden_dim",
         [](C& c, S v) { c.model.changelstm.hidden_dim = to_int("changelstm.hidden_dim", v); },
         [](const C& c) { return std::to_string(c.model.changelstm.hidden_dim); }},
        {"changelstm.depth", [](C& c, S v) { c.model.changelstm.depth = to_int("changelstm.depth", v); },
         [](const C& c) { return std::to_string(c.model.changelstm.depth); }},
        {"changelstm.num_heads", [](C& c, S v) { c.model.changelstm.num_heads = to_int("changelstm.num_heads", v); },
         [](const C& c) { return std::to_string(c.model.changelstm.num_heads); }},
        {"changelstm.conv_kernel",
         [](C& c, S v) { c.model.changelstm.conv_kernel = to_int("changelstm.conv_kernel", v); },
         [](const C& c) { return std::to_string(c.model.changelstm.conv_kernel); }},
        {"changelstm.scan",
         [](C& c, S v) {
             const auto s = unquote(v);
             if (s == "parallel") {
                 c.model.changelstm.scan = changelstm::ScanMode::kParallel;
             } else if (s == "recurrent") {
                 c.model.changelstm.scan = changelstm::ScanMode::kRecurrent;
             } else {
                 throw ConfigError(fmt::format("changelstm.scan: expected parallel or recurrent, got '{}'", s));
             }
         },
         [](const C& c) {
             return quoted(c.model.changelstm.scan == changelstm::ScanMode::kParallel ? "parallel" : "recurrent");
         }},

        {"decoder.hidden_dim", [](C& c, S v) { c.model.decoder.hidden_dim = to_int("decoder.hidden_dim", v); },
         [](const C& c) { return std::to_string(c.model.decoder.hidden_dim); }},
        {"decoder.ppm_scales", [](C& c, S v) { c.model.decoder.ppm_scales = to_list("decoder.ppm_scales", v); },
         [](const C& c) { return list_text(c.model.decoder.ppm_scales); }},
        {"decoder.output_stride",
         [](C& c, S v) { c.model.decoder.output_stride = to_int("decoder.output_stride", v); },
         [](const C& c) { return std::to_string(c.model.decoder.output_stride); }},
        {"decoder.num_classes", [](C& c, S v) { c.model.decoder.num_classes = to_int("decoder.num_classes", v); },
         [](const C& c) { return std::to_string(c.model.decoder.num_classes); }},
        {"decoder.text_heads", [](C& c, S v) { c.model.decoder.text_heads = to_int("decoder.text_heads", v); },
         [](const C& c) { return std::to_string(c.model.decoder.text_heads); }},
        {"decoder.text_layers", [](C& c, S v) { c.model.decoder.text_layers = to_int("decoder.text_layers", v); },
         [](const C& c) { return std::to_string(c.model.decoder.text_layers); }},
        {"decoder.max_caption_len",
         [](C& c, S v) { c.model.decoder.max_caption_len = to_int("decoder.max_caption_len", v); },
         [](const C& c) { return std::to_string(c.model.decoder.max_caption_len); }},
        {"decoder.norm_groups", [](C& c, S v) { c.model.decoder.norm_groups = to_int("decoder.norm_groups", v); },
         [](const C& c) { return std::to_string(c.model.decoder.norm_groups); }},
        {"decoder.detach_caption_input",
         [](C& c, S v) { c.model.decoder.detach_caption_input = to_bool("decoder.detach_caption_input", v); },
         [](const C& c) { return std::string(c.model.decoder.detach_caption_input ? "true" : "false"); }},

        {"train.epochs", [](C& c, S v) { c.train.epochs = to_int("train.epochs", v); },
         [](const C& c) { return std::to_string(c.train.epochs); }},
        {"train.lr", [](C& c, S v) { c.train.base_lr = to_double("train.lr", v); },
         [](const C& c) { return fmt::format("{}", c.train.base_lr); }},
        {"train.min_lr", [](C& c, S v) { c.train.min_lr = to_double("train.min_lr", v); },
         [](const C& c) { return fmt::format("{}", c.train.min_lr); }},
        {"train.batch_size", [](C& c, S v) { c.train.batch_size = to_int("train.batch_size", v); },
         [](const C& c) { return std::to_string(c.train.batch_size); }},
        {"train.seed", [](C& c, S v) { c.train.seed = static_cast<std::uint64_t>(to_int("train.seed", v)); },
         [](const C& c) { return std::to_string(c.train.seed); }},
        {"train.loss_mode", [](C& c, S v) { c.train.loss_mode = training::parse_loss_mode(unquote(v)); },
         [](const C& c) { return quoted(training::to_string(c.train.loss_mode)); }},
        {"train.eval_interval", [](C& c, S v) { c.train.eval_interval = to_int("train.eval_interval", v); },
         [](const C& c) { return std::to_string(c.train.eval_interval); }},
        {"train.max_steps", [](C& c, S v) { c.train.max_steps = to_int("train.max_steps", v); },
         [](const C& c) { return std::to_string(c.train.max_steps); }},

        {"run.output_dir", [](C& c, S v) { c.output_dir = unquote(v); },
         [](const C& c) { return quoted(c.output_dir.string()); }},
    };
    return entries;
}

} // namespace

std::vector<std::string> RunConfig::keys() {
    std::vector<std::string> out;
    for (const auto& e : registry()) {
        out.push_back(e.key);
    }
    return out;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    const auto& entries = registry();
    const auto it = std::find_if(entries.begin(), entries.end(), [&](const Entry& e) { return e.key == key; });
    if (it == entries.end()) {
        throw ConfigError(fmt::format("unknown config key '{}'; valid keys: {}", key, fmt::join(keys(), ", ")));
    }
    it->set(*this, trim(value));
}

void RunConfig::merge_text(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::string section;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        // Comments end the line unless inside a quoted string.
        bool in_quote = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') {
                in_quote = !in_quote;
            } else if (line[i] == '#' && !in_quote) {
                line.resize(i);
                break;
            }
        }
        const auto content = trim(line);
        if (content.empty()) {
            continue;
        }
        if (content.front() == '[' && content.back() == ']' && content.find('=') == std::string::npos) {
            section = trim(content.substr(1, content.size() - 2));
            continue;
        }
        const auto eq = content.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(fmt::format("config line {}: expected 'key = value', got '{}'", number, content));
        }
        auto key = trim(content.substr(0, eq));
        if (!section.empty() && key.find('.') == std::string::npos) {
            key = section + "." + key;
        }
        set(key, content.substr(eq + 1));
    }
}

void RunConfig::merge_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError(fmt::format("cannot open config file {}", path.string()));
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    merge_text(buffer.str());
}

std::string RunConfig::serialize() const {
    std::string out;
    std::string section;
    for (const auto& e : registry()) {
        const auto dot = e.key.find('.');
        const auto sec = e.key.substr(0, dot);
        if (sec != section) {
            out += fmt::format("{}[{}]\n", out.empty() ? "" : "\n", sec);
            section = sec;
        }
        out += fmt::format("{} = {}\n", e.key.substr(dot + 1), e.get(*this));
    }
    return out;
}

std::string RunConfig::hash() const {
    const auto text = serialize();
    const auto blob = fmt::format("blob {}", text.size()) + std::string(1, '\0') + text;
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int length = 0;
    if (EVP_Digest(blob.data(), blob.size(), digest, &length, EVP_sha1(), nullptr) != 1) {
        throw std::runtime_error("SHA-1 digest failed");
    }
    std::string hex;
    for (unsigned int i = 0; i < length; ++i) {
        hex += fmt::format("{:02x}", digest[i]);
    }
    return hex;
}

void RunConfig::validate() const {
    train.validate();
    auto model_copy = model;
    if (model_copy.vocab_size == 0) {
        model_copy.vocab_size = data::SpecialTokens::kUnk + 2;
    }
    model_copy.resolve();
    if (workers < 1) {
        throw ConfigError(fmt::format("data.workers must be >= 1, got {}", workers));
    }
}

RunConfig RunConfig::tiny() {
    RunConfig c;
    c.model.image_size = 64;
    c.model.encoder.dims = {16, 32, 64, 128};
    c.model.encoder.depths = {2, 2, 2, 2};
    c.model.encoder.heads = {1, 2, 4, 8};
    c.model.encoder.window = 4;
    c.model.changelstm.hidden_dim = 64;
    c.model.changelstm.depth = 1;
    c.model.changelstm.num_heads = 4;
    c.model.decoder.hidden_dim = 128;
    c.model.decoder.text_heads = 4;
    c.model.decoder.max_caption_len = 24;
    c.model.decoder.norm_groups = 4;
    c.train.epochs = 150;
    c.train.base_lr = 1e-3;
    c.train.batch_size = 8;
    return c;
}

fs::path runs_root(const RunConfig& config) {
    if (!config.output_dir.empty()) {
        return config.output_dir;
    }
    if (const char* env = std::getenv("CHANGEMINDS_RUNS"); env != nullptr && *env != '\0') {
        return env;
    }
    return "runs";
}

} // namespace changeminds::config
