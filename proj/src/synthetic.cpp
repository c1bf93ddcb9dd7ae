#include <algorithm>
#include <array>
#include <cmath>
#include <random>

#include <fmt/format.h>

#include "changeminds/data.hpp"
#include "changeminds/errors.hpp"

namespace changeminds::data {

namespace {

enum class ShapeKind { kBuilding = 1, kRoad = 2 };
enum class Edit { kUnchanged, kAdded, kRemoved };

struct Shape {
    ShapeKind kind;
    Edit edit;
    std::vector<std::uint8_t> footprint; // H*W, 1 inside the shape
    std::array<float, 3> color;
    int region = 0;
};

const std::array<std::string, 9> kRegions{"top left",    "top",    "top right",
                                          "left",        "center", "right",
                                          "bottom left", "bottom", "bottom right"};

// Paraphrases per edit type; reference j of a sample uses phrasing j % size.
const std::vector<std::string> kBuildingAdded{"a building appears at the {}", "a new building is built at the {}",
                                              "a house is constructed at the {}"};
const std::vector<std::string> kBuildingRemoved{"a building is removed from the {}",
                                                "a building at the {} is demolished",
                                                "a house disappears from the {}"};
const std::vector<std::string> kRoadAdded{"a road appears at the {}", "a new road is built at the {}",
                                          "a road is constructed at the {}"};
const std::vector<std::string> kRoadRemoved{"a road is removed from the {}", "a road at the {} disappears",
                                            "the road at the {} is gone"};
const std::vector<std::string> kUnchanged{"the scene is unchanged", "there is no change",
                                          "nothing has changed", "the two images are the same",
                                          "no difference between the images"};

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

float uniform_float(std::mt19937_64& rng, float lo, float hi) {
    return std::uniform_real_distribution<float>(lo, hi)(rng);
}

// Region index on a 3x3 grid from the footprint centroid.
int region_of(const std::vector<std::uint8_t>& footprint, int size) {
    double sy = 0.0;
    double sx = 0.0;
    double n = 0.0;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            if (footprint[static_cast<std::size_t>(y * size + x)] != 0) {
                sy += y;
                sx += x;
                n += 1.0;
            }
        }
    }
    const auto band = [size](double v) { return std::clamp(static_cast<int>(v * 3.0 / size), 0, 2); };
    return band(sy / n) * 3 + band(sx / n);
}

void fill_rect(std::vector<std::uint8_t>& fp, int size, int y0, int x0, int y1, int x1) {
    for (int y = std::max(0, y0); y < std::min(size, y1); ++y) {
        for (int x = std::max(0, x0); x < std::min(size, x1); ++x) {
            fp[static_cast<std::size_t>(y * size + x)] = 1;
        }
    }
}

std::vector<std::uint8_t> building_footprint(std::mt19937_64& rng, int size) {
    const int lo = std::max(3, size / 8);
    const int hi = std::max(lo, size / 4);
    const int h = uniform_int(rng, lo, hi);
    const int w = uniform_int(rng, lo, hi);
    const int y = uniform_int(rng, 1, size - h - 1);
    const int x = uniform_int(rng, 1, size - w - 1);
    std::vector<std::uint8_t> fp(static_cast<std::size_t>(size * size), 0);
    fill_rect(fp, size, y, x, y + h, x + w);
    return fp;
}

// Two axis-aligned segments joined at a corner (an "L" polyline).
std::vector<std::uint8_t> road_footprint(std::mt19937_64& rng, int size) {
    const int thick = std::max(2, size / 10);
    const int lo = std::max(thick * 2, size / 4);
    const int hi = std::max(lo, size / 2);
    const int len_h = uniform_int(rng, lo, hi);
    const int len_v = uniform_int(rng, lo, hi);
    const int cy = uniform_int(rng, 1, size - thick - 1);
    const int cx = uniform_int(rng, 1, size - thick - 1);
    const bool go_right = cx + len_h < size - 1 && (cx - len_h < 1 || uniform_int(rng, 0, 1) == 0);
    const bool go_down = cy + len_v < size - 1 && (cy - len_v < 1 || uniform_int(rng, 0, 1) == 0);
    std::vector<std::uint8_t> fp(static_cast<std::size_t>(size * size), 0);
    if (go_right) {
        fill_rect(fp, size, cy, cx, cy + thick, cx + len_h);
    } else {
        fill_rect(fp, size, cy, cx - len_h + thick, cy + thick, cx + thick);
    }
    if (go_down) {
        fill_rect(fp, size, cy, cx, cy + len_v, cx + thick);
    } else {
        fill_rect(fp, size, cy - len_v + thick, cx, cy + thick, cx + thick);
    }
    // Keep a one-pixel border free so that dilation checks stay in range.
    for (int i = 0; i < size; ++i) {
        fp[static_cast<std::size_t>(i)] = 0;
        fp[static_cast<std::size_t>((size - 1) * size + i)] = 0;
        fp[static_cast<std::size_t>(i * size)] = 0;
        fp[static_cast<std::size_t>(i * size + size - 1)] = 0;
    }
    return fp;
}

// True if `fp` comes within `margin` pixels of any occupied pixel.
bool collides(const std::vector<std::uint8_t>& fp, const std::vector<std::uint8_t>& occupied, int size, int margin) {
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            if (fp[static_cast<std::size_t>(y * size + x)] == 0) {
                continue;
            }
            for (int dy = -margin; dy <= margin; ++dy) {
                for (int dx = -margin; dx <= margin; ++dx) {
                    const int yy = y + dy;
                    const int xx = x + dx;
                    if (yy >= 0 && yy < size && xx >= 0 && xx < size &&
                        occupied[static_cast<std::size_t>(yy * size + xx)] != 0) {
                        return true;
                    }
                }
            }
        }
    }
    return false;
}

std::array<float, 3> shape_color(std::mt19937_64& rng, ShapeKind kind) {
    if (kind == ShapeKind::kRoad) {
        const float g = uniform_float(rng, 0.30f, 0.40f);
        return {g, g, g + 0.02f};
    }
    static const std::array<std::array<float, 3>, 3> roofs{{{0.75f, 0.35f, 0.30f},
                                                            {0.85f, 0.85f, 0.80f},
                                                            {0.35f, 0.45f, 0.75f}}};
    return roofs[static_cast<std::size_t>(uniform_int(rng, 0, 2))];
}

float quantize(float v) {
    return std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f;
}

std::string clause(const Shape& s, int phrasing) {
    const auto& templates = s.kind == ShapeKind::kBuilding
                                ? (s.edit == Edit::kAdded ? kBuildingAdded : kBuildingRemoved)
                                : (s.edit == Edit::kAdded ? kRoadAdded : kRoadRemoved);
    const auto& t = templates[static_cast<std::size_t>(phrasing) % templates.size()];
    return fmt::format(fmt::runtime(t), kRegions[static_cast<std::size_t>(s.region)]);
}

BiTemporalSample render_sample(const SynthSpec& spec, std::size_t index, const Vocabulary& vocab) {
    const int size = spec.image_size;
    std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                      static_cast<std::uint32_t>(spec.stream), static_cast<std::uint32_t>(index)};
    std::mt19937_64 rng(seq);

    const int num_changes = uniform_int(rng, spec.min_changes, spec.max_changes);
    const int num_distractors = uniform_int(rng, spec.min_distractors, spec.max_distractors);

    std::vector<Shape> shapes;
    std::vector<std::uint8_t> occupied(static_cast<std::size_t>(size * size), 0);
    for (int i = 0; i < num_changes + num_distractors; ++i) {
        const bool changed = i < num_changes;
        const auto kind = uniform_int(rng, 0, 1) == 0 ? ShapeKind::kBuilding : ShapeKind::kRoad;
        const auto edit = !changed ? Edit::kUnchanged : (uniform_int(rng, 0, 1) == 0 ? Edit::kAdded : Edit::kRemoved);
        for (int attempt = 0; attempt < 200; ++attempt) {
            auto fp = kind == ShapeKind::kBuilding ? building_footprint(rng, size) : road_footprint(rng, size);
            if (collides(fp, occupied, size, 2)) {
                continue;
            }
            for (std::size_t p = 0; p < fp.size(); ++p) {
                occupied[p] |= fp[p];
            }
            Shape s{kind, edit, std::move(fp), shape_color(rng, kind), 0};
            s.region = region_of(s.footprint, size);
            shapes.push_back(std::move(s));
            break;
        }
    }

    // Shared background: a per-sample tint plus per-pixel texture.
    const std::array<float, 3> tint{uniform_float(rng, 0.25f, 0.45f), uniform_float(rng, 0.40f, 0.55f),
                                    uniform_float(rng, 0.20f, 0.35f)};
    const std::size_t plane = static_cast<std::size_t>(size * size);
    std::vector<float> t1(3 * plane);
    for (std::size_t p = 0; p < plane; ++p) {
        const float noise = uniform_float(rng, -0.05f, 0.05f);
        for (std::size_t c = 0; c < 3; ++c) {
            t1[c * plane + p] = quantize(tint[c] + noise);
        }
    }
    std::vector<float> t2 = t1;
    std::vector<std::int64_t> mask(plane, 0);
    for (const auto& s : shapes) {
        for (std::size_t p = 0; p < plane; ++p) {
            if (s.footprint[p] == 0) {
                continue;
            }
            for (std::size_t c = 0; c < 3; ++c) {
                const float v = quantize(s.color[c]);
                if (s.edit != Edit::kAdded) {
                    t1[c * plane + p] = v;
                }
                if (s.edit != Edit::kRemoved) {
                    t2[c * plane + p] = v;
                }
            }
            if (s.edit != Edit::kUnchanged) {
                mask[p] = static_cast<std::int64_t>(s.kind);
            }
        }
    }

    // Canonical clause order: buildings before roads, added before removed, then region.
    std::vector<const Shape*> changed;
    for (const auto& s : shapes) {
        if (s.edit != Edit::kUnchanged) {
            changed.push_back(&s);
        }
    }
    std::sort(changed.begin(), changed.end(), [](const Shape* a, const Shape* b) {
        return std::tuple(static_cast<int>(a->kind), static_cast<int>(a->edit), a->region) <
               std::tuple(static_cast<int>(b->kind), static_cast<int>(b->edit), b->region);
    });

    BiTemporalSample sample;
    sample.sample_id = fmt::format("{}_{:05d}", spec.id_prefix, index);
    for (int r = 0; r < spec.references_per_sample; ++r) {
        std::string caption;
        if (changed.empty()) {
            caption = kUnchanged[static_cast<std::size_t>(r) % kUnchanged.size()];
        } else {
            for (std::size_t k = 0; k < changed.size(); ++k) {
                caption += (k == 0 ? "" : " and ") + clause(*changed[k], r);
            }
        }
        sample.raw_captions.push_back(caption);
        const auto tokens = tokenize(caption);
        sample.captions.push_back(encode_caption(tokens, vocab, static_cast<std::int64_t>(tokens.size()) + 2));
    }
    const auto s64 = static_cast<std::int64_t>(size);
    sample.image_t1 = torch::from_blob(t1.data(), {3, s64, s64}, torch::kFloat32).clone();
    sample.image_t2 = torch::from_blob(t2.data(), {3, s64, s64}, torch::kFloat32).clone();
    sample.mask = torch::from_blob(mask.data(), {s64, s64}, torch::kInt64).clone();
    return sample;
}

} // namespace

Vocabulary synthetic_vocabulary() {
    std::vector<std::vector<std::string>> sentences;
    for (const auto* group : {&kBuildingAdded, &kBuildingRemoved, &kRoadAdded, &kRoadRemoved}) {
        for (const auto& t : *group) {
            for (const auto& region : kRegions) {
                sentences.push_back(tokenize(fmt::format(fmt::runtime(t), region)));
            }
        }
    }
    for (const auto& t : kUnchanged) {
        sentences.push_back(tokenize(t));
    }
    sentences.push_back({"and"});
    return Vocabulary::build(sentences);
}

std::vector<BiTemporalSample> generate_synthetic(const SynthSpec& spec) {
    if (spec.image_size <= 0) {
        throw ConfigError(fmt::format("synthetic image size must be positive, got {}", spec.image_size));
    }
    if (spec.image_size < 16) {
        throw ConfigError(fmt::format("synthetic image size {} is too small to place shapes (min 16)",
                                      spec.image_size));
    }
    if (spec.num_samples <= 0) {
        throw ConfigError(fmt::format("synthetic sample count must be positive, got {}", spec.num_samples));
    }
    if (spec.min_changes < 0 || spec.max_changes < spec.min_changes || spec.min_distractors < 0 ||
        spec.max_distractors < spec.min_distractors) {
        throw ConfigError("synthetic shape count ranges must satisfy 0 <= min <= max");
    }
    if (spec.references_per_sample < 1 || spec.references_per_sample > 5) {
        throw ConfigError("synthetic references per sample must be in 1..5");
    }
    const auto vocab = synthetic_vocabulary();
    std::vector<BiTemporalSample> samples;
    samples.reserve(static_cast<std::size_t>(spec.num_samples));
    for (int i = 0; i < spec.num_samples; ++i) {
        samples.push_back(render_sample(spec, static_cast<std::size_t>(i), vocab));
    }
    return samples;
}

} // namespace changeminds::data
