#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest_torch.hpp"

#include <fstream>
#include <set>

#include "changeminds/data.hpp"
#include "changeminds/errors.hpp"
#include "oracles/segmentation.hpp"
#include "test_util.hpp"

using namespace changeminds;
using namespace changeminds::data;
using Tok = SpecialTokens;

namespace {

std::vector<std::int64_t> flat(const torch::Tensor& mask) {
    auto m = mask.contiguous();
    return {m.data_ptr<std::int64_t>(), m.data_ptr<std::int64_t>() + m.numel()};
}

Vocabulary small_vocab() {
    return Vocabulary::build({tokenize("the building is removed"), tokenize("a road appears")});
}

BiTemporalSample blank_sample(const std::string& id, std::int64_t size) {
    BiTemporalSample s;
    s.sample_id = id;
    s.image_t1 = torch::zeros({3, size, size});
    s.image_t2 = torch::ones({3, size, size});
    s.mask = torch::zeros({size, size}, torch::kInt64);
    s.raw_captions = {"a road appears"};
    s.captions = {encode_caption(tokenize(s.raw_captions[0]), small_vocab(), 5)};
    return s;
}

} // namespace

TEST_CASE("tokenize normalizes case, punctuation and whitespace") {
    CHECK(tokenize("A Road appears.") == std::vector<std::string>{"a", "road", "appears"});
    CHECK(tokenize("").empty());
    CHECK(tokenize("two  houses,  built") == std::vector<std::string>{"two", "houses", "built"});
    CHECK(tokenize(" \t\n ").empty());
}

TEST_CASE("vocabulary keeps special ids fixed and maps both ways") {
    const auto vocab = small_vocab();
    CHECK(vocab.token(Tok::kPad) == "<pad>");
    CHECK(vocab.token(Tok::kStart) == "<start>");
    CHECK(vocab.token(Tok::kEnd) == "<end>");
    CHECK(vocab.token(Tok::kUnk) == "<unk>");
    CHECK(vocab.size() == 4 + 7);
    for (std::int64_t i = 4; i < vocab.size(); ++i) {
        CHECK(vocab.id(vocab.token(i)) == i);
    }
    // Corpus lookups never return special ids, even for their spellings.
    CHECK(vocab.id("<start>") == Tok::kUnk);
    CHECK(vocab.id("zebra") == Tok::kUnk);
    Vocabulary v;
    CHECK_THROWS_AS(v.add("<end>"), ConfigError);
    CHECK(v.add("x") == 4);
    CHECK(v.add("x") == 4);
    CHECK_THROWS_AS(vocab.token(vocab.size()), std::out_of_range);
}

TEST_CASE("vocabulary json round trip and rejection") {
    const auto vocab = synthetic_vocabulary();
    CHECK(Vocabulary::from_json(vocab.to_json()) == vocab);
    CHECK_THROWS_AS(Vocabulary::from_json(nlohmann::json{{"tokens", {"a", "b"}}}), DataError);
    auto dup = vocab.to_json();
    dup["tokens"].push_back(dup["tokens"].back());
    CHECK_THROWS_AS(Vocabulary::from_json(dup), DataError);
}

TEST_CASE("encode_caption examples") {
    const auto vocab = small_vocab();
    const auto a = vocab.id("a");
    const auto road = vocab.id("road");
    CHECK(encode_caption({"a", "road"}, vocab, 6) ==
          std::vector<std::int64_t>{Tok::kStart, a, road, Tok::kEnd, Tok::kPad, Tok::kPad});
    CHECK(encode_caption({"a", "zebra"}, vocab, 4) == std::vector<std::int64_t>{Tok::kStart, a, Tok::kUnk, Tok::kEnd});

    const auto ids = encode_caption(tokenize("the building is removed"), vocab, 6);
    CHECK(ids == std::vector<std::int64_t>{Tok::kStart, vocab.id("the"), vocab.id("building"), vocab.id("is"),
                                           vocab.id("removed"), Tok::kEnd});

    const std::vector<std::string> body(50, "road");
    const auto truncated = encode_caption(body, vocab, 40);
    CHECK(truncated.size() == 40);
    CHECK(truncated.front() == Tok::kStart);
    CHECK(truncated.back() == Tok::kEnd);
    CHECK(std::count(truncated.begin(), truncated.end(), road) == 38);

    CHECK(encode_caption({}, vocab, 2) == std::vector<std::int64_t>{Tok::kStart, Tok::kEnd});
    CHECK_THROWS_AS(encode_caption({"a"}, vocab, 1), ConfigError);
}

TEST_CASE("decode inverts encode for in-vocabulary sentences") {
    const auto vocab = synthetic_vocabulary();
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<std::int64_t> pick(4, vocab.size() - 1);
    std::uniform_int_distribution<int> len(0, 20);
    for (int trial = 0; trial < 200; ++trial) {
        std::string sentence;
        for (int i = len(rng); i > 0; --i) {
            sentence += vocab.token(pick(rng)) + (i % 3 == 0 ? ",  " : " ");
        }
        const auto tokens = tokenize(sentence);
        const auto ids = encode_caption(tokens, vocab, static_cast<std::int64_t>(tokens.size()) + 5);
        CHECK(vocab.decode(ids) == tokens);
    }
}

TEST_CASE("synthetic generation is bitwise deterministic") {
    SynthSpec spec;
    spec.num_samples = 4;
    spec.seed = 42;
    spec.references_per_sample = 3;
    const auto a = generate_synthetic(spec);
    const auto b = generate_synthetic(spec);
    REQUIRE(a.size() == 4);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(torch::equal(a[i].image_t1, b[i].image_t1));
        CHECK(torch::equal(a[i].image_t2, b[i].image_t2));
        CHECK(torch::equal(a[i].mask, b[i].mask));
        CHECK(a[i].captions == b[i].captions);
        CHECK(a[i].raw_captions == b[i].raw_captions);
        CHECK(a[i].sample_id == b[i].sample_id);
    }
    spec.seed = 43;
    const auto c = generate_synthetic(spec);
    CHECK_FALSE(torch::equal(a[0].image_t1, c[0].image_t1));
    spec.seed = 42;
    spec.stream = 1;
    const auto d = generate_synthetic(spec);
    CHECK_FALSE(torch::equal(a[0].image_t1, d[0].image_t1));
}

TEST_CASE("synthetic samples satisfy the sample invariants") {
    SynthSpec spec;
    spec.num_samples = 40;
    spec.references_per_sample = 5;
    const auto samples = generate_synthetic(spec);
    const auto vocab = synthetic_vocabulary();
    for (const auto& s : samples) {
        CAPTURE(s.sample_id);
        CHECK_NOTHROW(validate_sample(s, kSynthClasses));
        CHECK(s.image_t1.sizes() == std::vector<std::int64_t>{3, 64, 64});
        CHECK(s.image_t1.min().item<float>() >= 0.0f);
        CHECK(s.image_t1.max().item<float>() <= 1.0f);
        CHECK(s.captions.size() == 5);
        for (std::size_t r = 0; r < s.captions.size(); ++r) {
            CHECK(vocab.decode(s.captions[r]) == tokenize(s.raw_captions[r]));
            CHECK(std::count(s.captions[r].begin(), s.captions[r].end(), Tok::kUnk) == 0);
        }
    }
}

TEST_CASE("synthetic images differ exactly where the mask marks a change") {
    SynthSpec spec;
    spec.num_samples = 60;
    spec.max_changes = 3;
    const auto samples = generate_synthetic(spec);
    for (const auto& s : samples) {
        CAPTURE(s.sample_id);
        const auto differs = (s.image_t1 != s.image_t2).any(0);
        const auto changed = s.mask > 0;
        // Outside the mask the pair is identical, distractors included.
        CHECK_FALSE((differs & ~changed).any().item<bool>());
        // Every changed pixel lies in a component that visibly differs.
        const auto m = flat(s.mask);
        const auto d = differs.contiguous();
        const bool* dp = d.data_ptr<bool>();
        for (std::int64_t c = 1; c < kSynthClasses; ++c) {
            const auto comp = oracle::component_labels(m, 64, 64, c);
            const int count = *std::max_element(comp.begin(), comp.end());
            for (int k = 1; k <= count; ++k) {
                bool seen = false;
                for (std::size_t p = 0; p < comp.size(); ++p) {
                    seen = seen || (comp[p] == k && dp[p]);
                }
                CHECK(seen);
            }
        }
    }
}

TEST_CASE("one added building gives one class-1 component") {
    SynthSpec spec;
    spec.num_samples = 80;
    spec.min_changes = 1;
    spec.max_changes = 1;
    int checked = 0;
    for (const auto& s : generate_synthetic(spec)) {
        if (s.raw_captions[0].rfind("a building appears", 0) != 0) {
            continue;
        }
        ++checked;
        CAPTURE(s.sample_id);
        CHECK(oracle::connected_components(flat(s.mask), 64, 64, 1) == 1);
        CHECK(oracle::connected_components(flat(s.mask), 64, 64, 2) == 0);
    }
    CHECK(checked >= 5);
}

TEST_CASE("empty shape range yields unchanged scenes") {
    SynthSpec spec;
    spec.num_samples = 5;
    spec.min_changes = 0;
    spec.max_changes = 0;
    for (const auto& s : generate_synthetic(spec)) {
        CHECK(s.mask.sum().item<std::int64_t>() == 0);
        CHECK(s.raw_captions[0] == "the scene is unchanged");
        CHECK(torch::equal(s.image_t1, s.image_t2));
    }
}

TEST_CASE("invalid synthetic specs are config errors") {
    SynthSpec spec;
    spec.image_size = 0;
    CHECK_THROWS_AS(generate_synthetic(spec), ConfigError);
    spec = SynthSpec{};
    spec.num_samples = 0;
    CHECK_THROWS_AS(generate_synthetic(spec), ConfigError);
    spec = SynthSpec{};
    spec.references_per_sample = 6;
    CHECK_THROWS_AS(generate_synthetic(spec), ConfigError);
}

TEST_CASE("dataset write, scan and load round trip") {
    test_util::TempDir dir("data");
    SynthSpec spec;
    spec.num_samples = 3;
    spec.references_per_sample = 2;
    const auto samples = generate_synthetic(spec);
    write_dataset(samples, dir.path(), "train");
    spec.stream = 1;
    spec.id_prefix = "val";
    write_dataset(generate_synthetic(spec), dir.path(), "val");

    const auto manifest = DatasetManifest::scan(dir.path(), "train", kSynthClasses);
    REQUIRE(manifest.sample_ids.size() == 3);
    const auto vocab = vocabulary_from_captions(dir / "captions.json", "train");
    for (int workers : {1, 3}) {
        const auto loaded = load_levir_mci(manifest, vocab, workers);
        REQUIRE(loaded.size() == 3);
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(loaded[i].sample_id == samples[i].sample_id);
            // Synthetic pixels are already 8-bit quantized, so PNG storage is lossless.
            CHECK(torch::equal(loaded[i].image_t1, samples[i].image_t1));
            CHECK(torch::equal(loaded[i].image_t2, samples[i].image_t2));
            CHECK(torch::equal(loaded[i].mask, samples[i].mask));
            CHECK(loaded[i].raw_captions == samples[i].raw_captions);
        }
    }

    const auto table = read_captions(dir / "captions.json", "val");
    CHECK(table.size() == 3);
    std::set<std::string> train_ids(manifest.sample_ids.begin(), manifest.sample_ids.end());
    for (const auto& [id, refs] : table) {
        CHECK(train_ids.count(id) == 0);
    }
    std::ifstream in(dir / "captions.json");
    const auto j = nlohmann::json::parse(in);
    CHECK(j.at("images").size() == 6);
    CHECK(j["images"][0].contains("filename"));
    CHECK(j["images"][0]["sentences"][0].contains("raw"));
}

TEST_CASE("load errors name the offending sample") {
    test_util::TempDir dir("data-err");
    SynthSpec spec;
    spec.num_samples = 2;
    write_dataset(generate_synthetic(spec), dir.path(), "train");
    const auto vocab = synthetic_vocabulary();

    CHECK_THROWS_AS(DatasetManifest::scan(dir.path(), "test", 3), DataError);

    // Mask value 7 with three classes.
    write_png_gray(dir / "train/label/synth_00001.png", torch::full({64, 64}, 7, torch::kUInt8));
    auto manifest = DatasetManifest::scan(dir.path(), "train", 3);
    try {
        load_levir_mci(manifest, vocab);
        FAIL("expected a DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("synth_00001") != std::string::npos);
    }

    fs::remove(dir / "train/B/synth_00000.png");
    try {
        DatasetManifest::scan(dir.path(), "train", 3);
        FAIL("expected a DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("synth_00000") != std::string::npos);
    }
}

TEST_CASE("label values are remapped to contiguous ids") {
    test_util::TempDir dir("data-remap");
    SynthSpec spec;
    spec.num_samples = 1;
    auto samples = generate_synthetic(spec);
    const auto original = samples[0].mask.clone();
    samples[0].mask = original * 127; // 0, 127, 254 on disk
    write_dataset(samples, dir.path(), "train");
    auto manifest = DatasetManifest::scan(dir.path(), "train", 3);
    manifest.label_values = {0, 127, 254};
    const auto loaded = load_levir_mci(manifest, synthetic_vocabulary());
    CHECK(torch::equal(loaded[0].mask, original));
    manifest.label_values = {0, 127};
    CHECK_THROWS_AS(load_levir_mci(manifest, synthetic_vocabulary()), DataError);
}

TEST_CASE("validate_sample rejects broken samples") {
    auto s = blank_sample("s", 8);
    CHECK_NOTHROW(validate_sample(s, 3));
    auto bad = s;
    bad.mask = bad.mask.clone();
    bad.mask[0][0] = 7;
    CHECK_THROWS_AS(validate_sample(bad, 3), DataError);
    bad = s;
    bad.image_t2 = torch::zeros({3, 8, 9});
    CHECK_THROWS_AS(validate_sample(bad, 3), DataError);
    bad = s;
    bad.captions[0].back() = Tok::kPad;
    CHECK_THROWS_AS(validate_sample(bad, 3), DataError);
}

TEST_CASE("collate stacks samples and keeps every reference") {
    std::vector<BiTemporalSample> samples;
    for (int i = 0; i < 8; ++i) {
        auto s = blank_sample("s" + std::to_string(i), 16);
        s.raw_captions = {"a road appears", "the building is removed", "a road", "road", "the road"};
        s.captions.clear();
        for (const auto& r : s.raw_captions) {
            const auto t = tokenize(r);
            s.captions.push_back(encode_caption(t, small_vocab(), static_cast<std::int64_t>(t.size()) + 2));
        }
        samples.push_back(s);
    }
    const auto batch = collate(samples, 10);
    CHECK(batch.images_t1.sizes() == std::vector<std::int64_t>{8, 3, 16, 16});
    CHECK(batch.images_t2.sizes() == std::vector<std::int64_t>{8, 3, 16, 16});
    CHECK(batch.masks.sizes() == std::vector<std::int64_t>{8, 16, 16});
    CHECK(batch.caption_ids.sizes() == std::vector<std::int64_t>{8, 10});
    CHECK(batch.references.size() == 8);
    CHECK(batch.references[3].size() == 5);
    CHECK(batch.references[3][1] == tokenize("the building is removed"));
    // Without an RNG the first reference is used.
    CHECK(batch.caption_lengths[0].item<std::int64_t>() == 5);
    CHECK(batch.caption_ids[0][0].item<std::int64_t>() == Tok::kStart);
    CHECK(batch.caption_ids[0][4].item<std::int64_t>() == Tok::kEnd);
    CHECK(batch.caption_ids[0][5].item<std::int64_t>() == Tok::kPad);

    // With an RNG every reference gets drawn eventually, reproducibly.
    std::mt19937_64 rng_a(1);
    std::mt19937_64 rng_b(1);
    std::set<std::int64_t> lengths;
    for (int round = 0; round < 20; ++round) {
        const auto a = collate(samples, 10, &rng_a);
        const auto b = collate(samples, 10, &rng_b);
        CHECK(torch::equal(a.caption_ids, b.caption_ids));
        for (int i = 0; i < 8; ++i) {
            lengths.insert(a.caption_lengths[i].item<std::int64_t>());
        }
    }
    CHECK(lengths == std::set<std::int64_t>{3, 4, 5, 6});
}

TEST_CASE("collate rejects mixed sizes and empty input") {
    std::vector<BiTemporalSample> samples{blank_sample("a", 16), blank_sample("b", 8)};
    CHECK_THROWS_AS(collate(samples, 10), ShapeError);
    CHECK_THROWS_AS(collate(std::span<const BiTemporalSample>{}, 10), ShapeError);
}
