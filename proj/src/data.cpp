#include "changeminds/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <future>
#include <map>
#include <set>

#include <fmt/format.h>
#include <png.h>

#include "changeminds/errors.hpp"

namespace changeminds::data {

namespace {

const std::vector<std::string> kSpecialSpellings{"<pad>", "<start>", "<end>", "<unk>"};

} // namespace

Vocabulary::Vocabulary() {
    for (const auto& s : kSpecialSpellings) {
        token_to_id_.emplace(s, static_cast<std::int64_t>(id_to_token_.size()));
        id_to_token_.push_back(s);
    }
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& sentences) {
    Vocabulary vocab;
    for (const auto& sentence : sentences) {
        for (const auto& tok : sentence) {
            vocab.add(tok);
        }
    }
    return vocab;
}

std::int64_t Vocabulary::add(const std::string& token) {
    if (std::find(kSpecialSpellings.begin(), kSpecialSpellings.end(), token) != kSpecialSpellings.end()) {
        throw ConfigError(fmt::format("token '{}' is reserved for a special id", token));
    }
    auto [it, inserted] = token_to_id_.emplace(token, size());
    if (inserted) {
        id_to_token_.push_back(token);
    }
    return it->second;
}

std::int64_t Vocabulary::id(std::string_view token) const {
    auto it = token_to_id_.find(std::string(token));
    if (it == token_to_id_.end() || it->second < 4) {
        return SpecialTokens::kUnk;
    }
    return it->second;
}

const std::string& Vocabulary::token(std::int64_t id) const {
    if (id < 0 || id >= size()) {
        throw std::out_of_range(fmt::format("token id {} outside vocabulary of size {}", id, size()));
    }
    return id_to_token_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(std::string_view token) const {
    auto it = token_to_id_.find(std::string(token));
    return it != token_to_id_.end() && it->second >= 4;
}

std::vector<std::string> Vocabulary::decode(std::span<const std::int64_t> ids) const {
    std::vector<std::string> out;
    for (auto id : ids) {
        if (id == SpecialTokens::kEnd) {
            break;
        }
        if (id == SpecialTokens::kStart || id == SpecialTokens::kPad) {
            continue;
        }
        out.push_back(token(id));
    }
    return out;
}

nlohmann::json Vocabulary::to_json() const {
    return nlohmann::json{{"tokens", id_to_token_}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
    const auto tokens = j.at("tokens").get<std::vector<std::string>>();
    if (tokens.size() < 4 || !std::equal(kSpecialSpellings.begin(), kSpecialSpellings.end(), tokens.begin())) {
        throw DataError("vocabulary json does not start with the four special tokens");
    }
    Vocabulary vocab;
    for (std::size_t i = 4; i < tokens.size(); ++i) {
        if (vocab.add(tokens[i]) != static_cast<std::int64_t>(i)) {
            throw DataError(fmt::format("duplicate vocabulary token '{}'", tokens[i]));
        }
    }
    return vocab;
}

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            if (!current.empty()) {
                tokens.push_back(std::move(current));
                current.clear();
            }
        } else if (!std::ispunct(c)) {
            current.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    if (!current.empty()) {
        tokens.push_back(std::move(current));
    }
    return tokens;
}

std::vector<std::int64_t> encode_caption(const std::vector<std::string>& tokens, const Vocabulary& vocab,
                                         std::int64_t max_len) {
    if (max_len < 2) {
        throw ConfigError(fmt::format("caption max_len must be >= 2, got {}", max_len));
    }
    std::vector<std::int64_t> ids;
    ids.reserve(static_cast<std::size_t>(max_len));
    ids.push_back(SpecialTokens::kStart);
    const auto body = std::min<std::int64_t>(static_cast<std::int64_t>(tokens.size()), max_len - 2);
    for (std::int64_t i = 0; i < body; ++i) {
        ids.push_back(vocab.id(tokens[static_cast<std::size_t>(i)]));
    }
    ids.push_back(SpecialTokens::kEnd);
    ids.resize(static_cast<std::size_t>(max_len), SpecialTokens::kPad);
    return ids;
}

void validate_sample(const BiTemporalSample& sample, int num_classes) {
    const auto& id = sample.sample_id;
    if (sample.image_t1.dim() != 3 || sample.image_t1.size(0) != 3) {
        throw DataError(fmt::format("sample {}: image_t1 must be [3, H, W]", id));
    }
    if (!sample.image_t1.sizes().equals(sample.image_t2.sizes())) {
        throw DataError(fmt::format("sample {}: image_t1 and image_t2 differ in shape", id));
    }
    if (sample.mask.dim() != 2 || sample.mask.size(0) != sample.image_t1.size(1) ||
        sample.mask.size(1) != sample.image_t1.size(2)) {
        throw DataError(fmt::format("sample {}: mask shape does not match the images", id));
    }
    if (sample.mask.numel() > 0) {
        const auto max_label = sample.mask.max().item<std::int64_t>();
        const auto min_label = sample.mask.min().item<std::int64_t>();
        if (max_label >= num_classes || min_label < 0) {
            throw DataError(fmt::format("sample {}: mask value {} outside 0..{}", id,
                                        max_label >= num_classes ? max_label : min_label, num_classes - 1));
        }
    }
    for (const auto& caption : sample.captions) {
        if (caption.size() < 2 || caption.front() != SpecialTokens::kStart ||
            caption.back() != SpecialTokens::kEnd) {
            throw DataError(fmt::format("sample {}: caption not delimited by START/END", id));
        }
    }
}

// ---------------------------------------------------------------------------
// PNG

namespace {

std::vector<std::uint8_t> read_png(const fs::path& path, std::uint32_t format, std::int64_t& height,
                                   std::int64_t& width) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (png_image_begin_read_from_file(&image, path.c_str()) == 0) {
        throw DataError(fmt::format("cannot read PNG {}: {}", path.string(), image.message));
    }
    image.format = format;
    std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
    if (png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr) == 0) {
        png_image_free(&image);
        throw DataError(fmt::format("cannot decode PNG {}: {}", path.string(), image.message));
    }
    height = image.height;
    width = image.width;
    return buffer;
}

void write_png(const fs::path& path, std::uint32_t format, std::int64_t height, std::int64_t width,
               const std::uint8_t* pixels) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.format = format;
    image.height = static_cast<png_uint_32>(height);
    image.width = static_cast<png_uint_32>(width);
    if (png_image_write_to_file(&image, path.c_str(), 0, pixels, 0, nullptr) == 0) {
        throw DataError(fmt::format("cannot write PNG {}: {}", path.string(), image.message));
    }
}

} // namespace

torch::Tensor read_png_rgb(const fs::path& path) {
    std::int64_t h = 0;
    std::int64_t w = 0;
    auto buffer = read_png(path, PNG_FORMAT_RGB, h, w);
    auto hwc = torch::from_blob(buffer.data(), {h, w, 3}, torch::kUInt8);
    return hwc.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).contiguous();
}

torch::Tensor read_png_gray(const fs::path& path) {
    std::int64_t h = 0;
    std::int64_t w = 0;
    auto buffer = read_png(path, PNG_FORMAT_GRAY, h, w);
    return torch::from_blob(buffer.data(), {h, w}, torch::kUInt8).clone();
}

void write_png_rgb(const fs::path& path, const torch::Tensor& image) {
    auto u8 = image.detach().to(torch::kFloat32).clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8);
    write_png_rgb_u8(path, u8.permute({1, 2, 0}));
}

void write_png_rgb_u8(const fs::path& path, const torch::Tensor& image_hwc) {
    auto hwc = image_hwc.to(torch::kUInt8).contiguous();
    write_png(path, PNG_FORMAT_RGB, hwc.size(0), hwc.size(1), hwc.data_ptr<std::uint8_t>());
}

void write_png_gray(const fs::path& path, const torch::Tensor& values_u8) {
    auto hw = values_u8.to(torch::kUInt8).contiguous();
    write_png(path, PNG_FORMAT_GRAY, hw.size(0), hw.size(1), hw.data_ptr<std::uint8_t>());
}

// ---------------------------------------------------------------------------
// Dataset directory

DatasetManifest DatasetManifest::scan(const fs::path& root, const std::string& split, int num_classes) {
    DatasetManifest manifest;
    manifest.root = root;
    manifest.split = split;
    manifest.num_classes = num_classes;
    if (num_classes == 2) {
        manifest.class_names = {"unchanged", "changed"};
    } else {
        manifest.class_names.resize(static_cast<std::size_t>(num_classes));
        for (int c = 3; c < num_classes; ++c) {
            manifest.class_names[static_cast<std::size_t>(c)] = fmt::format("class{}", c);
        }
    }

    const auto dir_a = root / split / "A";
    if (!fs::is_directory(dir_a)) {
        throw DataError(fmt::format("split '{}' not found: {} is not a directory", split, dir_a.string()));
    }
    for (const auto& entry : fs::directory_iterator(dir_a)) {
        if (entry.is_regular_file() && entry.path().extension() == ".png") {
            manifest.sample_ids.push_back(entry.path().stem().string());
        }
    }
    std::sort(manifest.sample_ids.begin(), manifest.sample_ids.end());
    for (const auto& id : manifest.sample_ids) {
        for (const char* sub : {"B", "label"}) {
            if (!fs::exists(root / split / sub / (id + ".png"))) {
                throw DataError(fmt::format("sample {}: missing {}/{}/{}.png", id, split, sub, id));
            }
        }
    }
    return manifest;
}

CaptionTable read_captions(const fs::path& captions_json, const std::string& split) {
    std::ifstream in(captions_json);
    if (!in) {
        throw DataError(fmt::format("caption file {} not found", captions_json.string()));
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(fmt::format("caption file {} is not valid JSON: {}", captions_json.string(), e.what()));
    }
    CaptionTable table;
    for (const auto& img : j.at("images")) {
        if (img.at("split").get<std::string>() != split) {
            continue;
        }
        const auto stem = fs::path(img.at("filename").get<std::string>()).stem().string();
        auto& refs = table[stem];
        for (const auto& sentence : img.at("sentences")) {
            refs.push_back(sentence.at("raw").get<std::string>());
        }
    }
    return table;
}

Vocabulary vocabulary_from_captions(const fs::path& captions_json, const std::string& split) {
    const auto table = read_captions(captions_json, split);
    // Deterministic order regardless of hash-map iteration.
    std::map<std::string, std::vector<std::string>> ordered(table.begin(), table.end());
    std::vector<std::vector<std::string>> sentences;
    for (const auto& [stem, refs] : ordered) {
        for (const auto& r : refs) {
            sentences.push_back(tokenize(r));
        }
    }
    return Vocabulary::build(sentences);
}

namespace {

std::vector<std::int64_t> encode_unpadded(const std::string& raw, const Vocabulary& vocab) {
    const auto tokens = tokenize(raw);
    auto ids = encode_caption(tokens, vocab, static_cast<std::int64_t>(tokens.size()) + 2);
    return ids;
}

BiTemporalSample load_one(const DatasetManifest& manifest, const std::string& id, const CaptionTable& captions,
                          const Vocabulary& vocab) {
    const auto base = manifest.root / manifest.split;
    const auto file = id + ".png";
    BiTemporalSample sample;
    sample.sample_id = id;
    for (const char* sub : {"A", "B", "label"}) {
        if (!fs::exists(base / sub / file)) {
            throw DataError(fmt::format("sample {}: missing {}", id, (base / sub / file).string()));
        }
    }
    sample.image_t1 = read_png_rgb(base / "A" / file);
    sample.image_t2 = read_png_rgb(base / "B" / file);

    auto raw = read_png_gray(base / "label" / file).to(torch::kInt64);
    if (manifest.label_values.empty()) {
        sample.mask = raw;
    } else {
        auto mapped = torch::full_like(raw, -1);
        for (std::size_t c = 0; c < manifest.label_values.size(); ++c) {
            mapped.masked_fill_(raw == manifest.label_values[c], static_cast<std::int64_t>(c));
        }
        if ((mapped < 0).any().item<bool>()) {
            const auto bad = raw.masked_select(mapped < 0)[0].item<std::int64_t>();
            throw DataError(fmt::format("sample {}: mask value {} is not a known label", id, bad));
        }
        sample.mask = mapped;
    }

    auto it = captions.find(id);
    if (it == captions.end() || it->second.empty()) {
        throw DataError(fmt::format("sample {}: no captions in captions.json", id));
    }
    sample.raw_captions = it->second;
    for (const auto& r : sample.raw_captions) {
        sample.captions.push_back(encode_unpadded(r, vocab));
    }
    validate_sample(sample, manifest.num_classes);
    return sample;
}

} // namespace

std::vector<BiTemporalSample> load_levir_mci(const DatasetManifest& manifest, const Vocabulary& vocab,
                                             int workers) {
    const auto captions = read_captions(manifest.root / "captions.json", manifest.split);
    const auto& ids = manifest.sample_ids;
    std::vector<BiTemporalSample> samples(ids.size());
    workers = std::max(1, std::min<int>(workers, static_cast<int>(ids.size())));
    if (workers == 1) {
        for (std::size_t i = 0; i < ids.size(); ++i) {
            samples[i] = load_one(manifest, ids[i], captions, vocab);
        }
        return samples;
    }
    std::vector<std::future<void>> jobs;
    for (int w = 0; w < workers; ++w) {
        jobs.push_back(std::async(std::launch::async, [&, w] {
            for (std::size_t i = static_cast<std::size_t>(w); i < ids.size(); i += static_cast<std::size_t>(workers)) {
                samples[i] = load_one(manifest, ids[i], captions, vocab);
            }
        }));
    }
    for (auto& job : jobs) {
        job.get();
    }
    return samples;
}

void write_dataset(const std::vector<BiTemporalSample>& samples, const fs::path& root, const std::string& split) {
    const auto base = root / split;
    for (const char* sub : {"A", "B", "label"}) {
        fs::create_directories(base / sub);
    }
    // (split, filename) -> sentences; std::map keeps the output order stable.
    std::map<std::pair<std::string, std::string>, std::vector<std::string>> entries;
    const auto captions_path = root / "captions.json";
    if (fs::exists(captions_path)) {
        std::ifstream in(captions_path);
        nlohmann::json existing;
        in >> existing;
        for (const auto& img : existing.at("images")) {
            std::vector<std::string> refs;
            for (const auto& s : img.at("sentences")) {
                refs.push_back(s.at("raw").get<std::string>());
            }
            entries[{img.at("split").get<std::string>(), img.at("filename").get<std::string>()}] = refs;
        }
    }
    for (const auto& sample : samples) {
        const auto file = sample.sample_id + ".png";
        write_png_rgb(base / "A" / file, sample.image_t1);
        write_png_rgb(base / "B" / file, sample.image_t2);
        write_png_gray(base / "label" / file, sample.mask);
        entries[{split, file}] = sample.raw_captions;
    }
    nlohmann::json images = nlohmann::json::array();
    for (const auto& [key, refs] : entries) {
        nlohmann::json sentences = nlohmann::json::array();
        for (const auto& r : refs) {
            sentences.push_back({{"raw", r}});
        }
        images.push_back({{"filename", key.second}, {"split", key.first}, {"sentences", sentences}});
    }
    std::ofstream out(captions_path);
    out << nlohmann::json{{"images", images}}.dump(1) << "\n";
}

// ---------------------------------------------------------------------------
// Batching

Batch collate(std::span<const BiTemporalSample> samples, std::int64_t max_len, std::mt19937_64* rng) {
    if (samples.empty()) {
        throw ShapeError("collate of an empty sample list");
    }
    const auto h = samples.front().height();
    const auto w = samples.front().width();
    std::vector<torch::Tensor> t1;
    std::vector<torch::Tensor> t2;
    std::vector<torch::Tensor> masks;
    auto ids = torch::full({static_cast<std::int64_t>(samples.size()), max_len}, SpecialTokens::kPad, torch::kInt64);
    auto lengths = torch::zeros({static_cast<std::int64_t>(samples.size())}, torch::kInt64);
    auto ids_acc = ids.accessor<std::int64_t, 2>();
    auto len_acc = lengths.accessor<std::int64_t, 1>();
    Batch batch;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        if (s.height() != h || s.width() != w) {
            throw ShapeError(fmt::format("collate: sample {} is {}x{}, expected {}x{}", s.sample_id, s.height(),
                                         s.width(), h, w));
        }
        t1.push_back(s.image_t1);
        t2.push_back(s.image_t2);
        masks.push_back(s.mask);
        batch.sample_ids.push_back(s.sample_id);

        std::vector<std::vector<std::string>> refs;
        for (const auto& r : s.raw_captions) {
            refs.push_back(tokenize(r));
        }
        batch.references.push_back(std::move(refs));

        if (s.captions.empty()) {
            continue;
        }
        std::size_t pick = 0;
        if (rng != nullptr) {
            pick = std::uniform_int_distribution<std::size_t>(0, s.captions.size() - 1)(*rng);
        }
        const auto& caption = s.captions[pick];
        // Keep START, truncate the body, always close with END.
        const auto body = std::min<std::int64_t>(static_cast<std::int64_t>(caption.size()) - 2, max_len - 2);
        auto row = ids_acc[static_cast<std::int64_t>(i)];
        row[0] = SpecialTokens::kStart;
        for (std::int64_t k = 0; k < body; ++k) {
            row[k + 1] = caption[static_cast<std::size_t>(k + 1)];
        }
        row[body + 1] = SpecialTokens::kEnd;
        len_acc[static_cast<std::int64_t>(i)] = body + 2;
    }
    batch.images_t1 = torch::stack(t1);
    batch.images_t2 = torch::stack(t2);
    batch.masks = torch::stack(masks);
    batch.caption_ids = ids;
    batch.caption_lengths = lengths;
    return batch;
}

} // namespace changeminds::data
