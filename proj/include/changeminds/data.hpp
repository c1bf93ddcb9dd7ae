#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace changeminds::data {

namespace fs = std::filesystem;

struct SpecialTokens {
    static constexpr std::int64_t kPad = 0;
    static constexpr std::int64_t kStart = 1;
    static constexpr std::int64_t kEnd = 2;
    static constexpr std::int64_t kUnk = 3;
};

/// Token <-> id mapping. Ids 0..3 are PAD, START, END, UNK; corpus tokens
/// start at 4 in order of first appearance.
class Vocabulary {
public:
    Vocabulary();

    /// Builds a vocabulary from tokenized sentences, in order of first appearance.
    static Vocabulary build(const std::vector<std::vector<std::string>>& sentences);

    /// Adds `token` if absent and returns its id. Special spellings are rejected.
    std::int64_t add(const std::string& token);

    std::int64_t id(std::string_view token) const;
    const std::string& token(std::int64_t id) const;
    bool contains(std::string_view token) const;
    std::int64_t size() const { return static_cast<std::int64_t>(id_to_token_.size()); }

    /// Maps ids back to corpus tokens: skips START/PAD, stops at END.
    std::vector<std::string> decode(std::span<const std::int64_t> ids) const;

    nlohmann::json to_json() const;
    static Vocabulary from_json(const nlohmann::json& j);

    bool operator==(const Vocabulary& other) const { return id_to_token_ == other.id_to_token_; }

private:
    std::unordered_map<std::string, std::int64_t> token_to_id_;
    std::vector<std::string> id_to_token_;
};

/// Lowercases, strips punctuation and splits on whitespace.
std::vector<std::string> tokenize(std::string_view text);

/// START + ids (UNK when missing) + END, right-padded with PAD to `max_len`.
/// Bodies longer than max_len - 2 are truncated.
std::vector<std::int64_t> encode_caption(const std::vector<std::string>& tokens,
                                         const Vocabulary& vocab, std::int64_t max_len);

struct BiTemporalSample {
    torch::Tensor image_t1; // float32 [3, H, W] in [0, 1]
    torch::Tensor image_t2; // float32 [3, H, W] in [0, 1]
    torch::Tensor mask;     // int64 [H, W], class ids
    std::vector<std::vector<std::int64_t>> captions; // START ... END, unpadded
    std::vector<std::string> raw_captions;
    std::string sample_id;

    std::int64_t height() const { return mask.size(0); }
    std::int64_t width() const { return mask.size(1); }
};

/// Throws DataError when a sample breaks the BiTemporalSample invariants.
void validate_sample(const BiTemporalSample& sample, int num_classes);

struct DatasetManifest {
    fs::path root;
    std::string split;
    std::vector<std::string> sample_ids; // file names without extension
    int num_classes = 3;
    std::vector<std::string> class_names{"background", "building", "road"};
    // raw mask value -> class id; empty means identity 0..C-1.
    std::vector<int> label_values;

    /// Enumerates `root/split/A/*.png` and checks that every sample has
    /// matching B and label files. Throws DataError on a missing split or file.
    static DatasetManifest scan(const fs::path& root, const std::string& split, int num_classes);
};

/// Reference captions from `root/captions.json`, keyed by file stem.
using CaptionTable = std::unordered_map<std::string, std::vector<std::string>>;

CaptionTable read_captions(const fs::path& captions_json, const std::string& split);

/// Vocabulary built from every caption of one split of `captions.json`.
Vocabulary vocabulary_from_captions(const fs::path& captions_json, const std::string& split);

/// Loads all samples of a manifest; `workers` > 1 decodes images in parallel
/// while preserving manifest order.
std::vector<BiTemporalSample> load_levir_mci(const DatasetManifest& manifest, const Vocabulary& vocab,
                                             int workers = 1);

struct SynthSpec {
    int image_size = 64;
    int num_samples = 16;
    int min_changes = 1;
    int max_changes = 2;
    int min_distractors = 0;
    int max_distractors = 2;
    int references_per_sample = 1;
    std::uint64_t seed = 42;
    // Offsets the per-sample RNG stream so that splits do not share samples.
    std::uint64_t stream = 0;
    std::string id_prefix = "synth";
};

inline constexpr int kSynthClasses = 3; // background, building, road

/// Every word the synthetic caption templates can produce.
Vocabulary synthetic_vocabulary();

/// Procedurally renders bi-temporal pairs with added/removed buildings
/// (rectangles, class 1) and roads (thick polylines, class 2). Deterministic
/// in (seed, stream, sample index).
std::vector<BiTemporalSample> generate_synthetic(const SynthSpec& spec);

/// Writes samples in the dataset layout (`split/A`, `split/B`, `split/label`)
/// and merges their captions into `root/captions.json`.
void write_dataset(const std::vector<BiTemporalSample>& samples, const fs::path& root,
                   const std::string& split);

struct Batch {
    torch::Tensor images_t1;       // [B, 3, H, W]
    torch::Tensor images_t2;       // [B, 3, H, W]
    torch::Tensor masks;           // [B, H, W] int64
    torch::Tensor caption_ids;     // [B, max_len] int64, PAD-filled
    torch::Tensor caption_lengths; // [B] int64, START..END inclusive
    std::vector<std::vector<std::vector<std::string>>> references; // all captions, tokenized
    std::vector<std::string> sample_ids;

    std::int64_t size() const { return images_t1.size(0); }
};

/// Stacks samples into a batch. With an RNG one reference caption is drawn
/// uniformly per sample; without one the first reference is used.
Batch collate(std::span<const BiTemporalSample> samples, std::int64_t max_len,
              std::mt19937_64* rng = nullptr);

// PNG helpers (8-bit). Images are float [C, H, W] in [0, 1].
torch::Tensor read_png_rgb(const fs::path& path);
torch::Tensor read_png_gray(const fs::path& path); // uint8 [H, W]
void write_png_rgb(const fs::path& path, const torch::Tensor& image);
void write_png_rgb_u8(const fs::path& path, const torch::Tensor& image_hwc);
void write_png_gray(const fs::path& path, const torch::Tensor& values_u8);

} // namespace changeminds::data
