#include "vare/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include <json.hpp>

namespace vare {

namespace {

// Palette chosen so flat patches sit near the codec's unit sphere
// (|2*(r,g,b)| ~= 1 for patch size 2, RGB).
struct Rgb {
    float r, g, b;
};

Rgb color_rgb(SceneColor c) {
    switch (c) {
        case SceneColor::red: return {0.5f, 0.0f, 0.0f};
        case SceneColor::green: return {0.0f, 0.5f, 0.0f};
        case SceneColor::blue: return {0.0f, 0.0f, 0.5f};
        case SceneColor::yellow: return {0.3536f, 0.3536f, 0.0f};
        case SceneColor::white: return {0.2887f, 0.2887f, 0.2887f};
    }
    return {0, 0, 0};
}

constexpr Rgb kBgBase{0.153f, 0.205f, 0.430f};
constexpr float kShadeMul[kShadeCount] = {0.8f, 1.0f, 1.2f};
constexpr Rgb kStripeTint{0.085f, -0.03f, -0.055f};

struct Center {
    float x, y;
};

Center pos_center(ScenePos p, float n) {
    switch (p) {
        case ScenePos::center: return {0.5f * n, 0.5f * n};
        case ScenePos::top: return {0.5f * n, 0.28f * n};
        case ScenePos::bottom: return {0.5f * n, 0.72f * n};
        case ScenePos::left: return {0.28f * n, 0.5f * n};
        case ScenePos::right: return {0.72f * n, 0.5f * n};
    }
    return {0.5f * n, 0.5f * n};
}

bool inside_shape(ShapeKind s, float dx, float dy, float radius) {
    const float d = std::sqrt(dx * dx + dy * dy);
    switch (s) {
        case ShapeKind::circle:
            return d <= radius;
        case ShapeKind::square:
            return std::max(std::abs(dx), std::abs(dy)) <= radius * 0.82f;
        case ShapeKind::triangle: {
            // upward triangle inscribed in the radius
            const float y = dy / radius, x = dx / radius;
            return y <= 0.75f && y >= -0.85f + 1.6f * std::abs(x) - 0.1f && std::abs(x) <= 0.95f &&
                   (0.75f - y) >= 1.6f * std::abs(x) - 0.05f;
        }
        case ShapeKind::cross:
            return (std::abs(dx) <= radius * 0.32f || std::abs(dy) <= radius * 0.32f) &&
                   std::max(std::abs(dx), std::abs(dy)) <= radius;
        case ShapeKind::ring:
            return d <= radius && d >= radius * 0.55f;
        case ShapeKind::star: {
            if (d > radius) return false;
            const float theta = std::atan2(dy, dx);
            const float lobe = 0.45f + 0.55f * (0.5f + 0.5f * std::cos(5.0f * theta - 1.5707963f));
            return d <= radius * lobe;
        }
        case ShapeKind::none:
            return false;
    }
    return false;
}

}  // namespace

Grid render_scene(const SceneSpec& spec, int resolution) {
    const int n = resolution;
    const int ss = 3;  // supersampling factor for anti-aliasing
    Rng rng = Rng::stream(spec.seed, "scenegen.render");
    const float jx = float(rng.uniform() - 0.5);  // sub-pixel jitter
    const float jy = float(rng.uniform() - 0.5);

    const float mul = kShadeMul[spec.bg_shade];
    const Rgb bg{kBgBase.r * mul, kBgBase.g * mul, kBgBase.b * mul};
    const Rgb fg = color_rgb(spec.color);
    const Center c = pos_center(spec.pos, float(n));
    const float radius = 0.215f * float(n);

    Grid img(n, n, 3);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            float cover = 0.f;
            for (int sy = 0; sy < ss; ++sy)
                for (int sx = 0; sx < ss; ++sx) {
                    const float px = float(x) + (float(sx) + 0.5f) / float(ss) - c.x - jx;
                    const float py = float(y) + (float(sy) + 0.5f) / float(ss) - c.y - jy;
                    if (inside_shape(spec.shape, px, py, radius)) cover += 1.f;
                }
            cover /= float(ss * ss);
            float r = bg.r + (fg.r - bg.r) * cover;
            float g = bg.g + (fg.g - bg.g) * cover;
            float b = bg.b + (fg.b - bg.b) * cover;
            if (spec.striped && ((x + y) / 4) % 2 == 0) {
                r += kStripeTint.r;
                g += kStripeTint.g;
                b += kStripeTint.b;
            }
            img.at(y, x, 0) = std::clamp(r, 0.f, 1.f);
            img.at(y, x, 1) = std::clamp(g, 0.f, 1.f);
            img.at(y, x, 2) = std::clamp(b, 0.f, 1.f);
        }
    return img;
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

const std::array<const char*, kShapeCount>& Vocabulary::shape_words() {
    static const std::array<const char*, kShapeCount> w{"circle", "square", "triangle",
                                                        "cross", "ring", "star"};
    return w;
}

const std::array<const char*, kShapeCount>& Vocabulary::shape_synonyms() {
    static const std::array<const char*, kShapeCount> w{"disc", "box", "wedge",
                                                        "plus", "loop", "burst"};
    return w;
}

const std::array<const char*, kColorCount>& Vocabulary::color_words() {
    static const std::array<const char*, kColorCount> w{"red", "green", "blue", "yellow", "white"};
    return w;
}

const std::array<const char*, kPosCount>& Vocabulary::position_words() {
    static const std::array<const char*, kPosCount> w{"center", "top", "bottom", "left", "right"};
    return w;
}

Vocabulary::Vocabulary() {
    words_.push_back("<pad>");
    words_.push_back("a");
    words_.push_back("at");
    for (auto* w : shape_words()) words_.push_back(w);
    for (auto* w : shape_synonyms()) words_.push_back(w);
    for (auto* w : color_words()) words_.push_back(w);
    for (auto* w : position_words()) words_.push_back(w);
    words_.push_back("striped");
    words_.push_back("banded");  // held-out synonym of striped
    words_.push_back("plain");
    words_.push_back("scene");
}

int Vocabulary::id(const std::string& word) const {
    for (size_t i = 0; i < words_.size(); ++i)
        if (words_[i] == word) return int(i);
    throw ShapeError("vocabulary: unknown word '" + word + "'");
}

const std::string& Vocabulary::word(int id) const {
    if (id < 0 || id >= size()) throw ShapeError("vocabulary: id out of range " + std::to_string(id));
    return words_[size_t(id)];
}

bool Vocabulary::contains(const std::string& word) const {
    for (const auto& w : words_)
        if (w == word) return true;
    return false;
}

std::optional<ShapeKind> Vocabulary::shape_of(int id) const {
    const std::string& w = word(id);
    for (int i = 0; i < kShapeCount; ++i) {
        if (w == shape_words()[size_t(i)]) return ShapeKind(i);
        if (w == shape_synonyms()[size_t(i)]) return ShapeKind(i);
    }
    return std::nullopt;
}

int Vocabulary::synonym_of(const std::string& concept_word) const {
    for (int i = 0; i < kShapeCount; ++i)
        if (concept_word == shape_words()[size_t(i)]) return id(shape_synonyms()[size_t(i)]);
    if (concept_word == "striped") return id("banded");
    throw ShapeError("no held-out synonym registered for concept '" + concept_word + "'");
}

std::string Vocabulary::to_json() const {
    nlohmann::json j;
    for (size_t i = 0; i < words_.size(); ++i) j[words_[i]] = i;
    return j.dump(2);
}

const Vocabulary& vocab() {
    static const Vocabulary v;
    return v;
}

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

std::string PromptTokenSeq::text() const {
    std::ostringstream os;
    bool first = true;
    for (int id : ids) {
        if (id == vocab().pad_id()) continue;
        os << (first ? "" : " ") << vocab().word(id);
        first = false;
    }
    return os.str();
}

PromptTokenSeq make_prompt(const std::string& shape_word, SceneColor color, ScenePos pos,
                           bool striped, const std::string& span_word) {
    const auto& v = vocab();
    PromptTokenSeq p;
    p.ids.fill(v.pad_id());
    int i = 0;
    p.ids[size_t(i++)] = v.id("a");
    if (striped) p.ids[size_t(i++)] = v.id("striped");
    p.ids[size_t(i++)] = v.id(Vocabulary::color_words()[size_t(int(color))]);
    p.ids[size_t(i++)] = v.id(shape_word);
    p.ids[size_t(i++)] = v.id("at");
    p.ids[size_t(i++)] = v.id(Vocabulary::position_words()[size_t(int(pos))]);
    const int span_id = v.id(span_word);
    for (int k = 0; k < kPromptLen; ++k)
        if (p.ids[size_t(k)] == span_id) {
            p.span_begin = k;
            p.span_end = k + 1;
            break;
        }
    return p;
}

namespace {

struct TemplateSlot {
    SceneColor color;
    ScenePos pos;
    bool striped;
};

// All 5*5*2 = 50 distinct template instantiations in a seed-shuffled order.
std::vector<TemplateSlot> shuffled_slots(uint64_t seed, std::string_view purpose) {
    std::vector<TemplateSlot> slots;
    for (int c = 0; c < kColorCount; ++c)
        for (int p = 0; p < kPosCount; ++p)
            for (int t = 0; t < 2; ++t) slots.push_back({SceneColor(c), ScenePos(p), t == 1});
    Rng rng = Rng::stream(seed, purpose);
    for (int i = int(slots.size()) - 1; i > 0; --i)
        std::swap(slots[size_t(i)], slots[size_t(rng.uniform_int(0, i))]);
    return slots;
}

void check_concept_word(const std::string& concept_word) {
    const auto& v = vocab();
    if (!v.contains(concept_word)) throw ShapeError("unknown concept word '" + concept_word + "'");
    bool canonical = concept_word == "striped";
    for (auto* w : Vocabulary::shape_words()) canonical = canonical || concept_word == w;
    if (!canonical)
        throw ShapeError("concept '" + concept_word + "' is not a canonical lexical form (synonyms are evaluation-only)");
}

}  // namespace

std::vector<PromptPair> build_prompt_pairs(const std::string& concept_word, const std::string& replacement,
                                           int n, uint64_t seed) {
    check_concept_word(concept_word);
    check_concept_word(replacement);
    if (concept_word == replacement) throw ShapeError("build_prompt_pairs: concept equals replacement");
    auto slots = shuffled_slots(seed, "prompt_pairs");
    if (n < 1 || n > int(slots.size()))
        throw ShapeError("build_prompt_pairs: n must be in [1," + std::to_string(slots.size()) +
                         "] to keep pairs unique, got " + std::to_string(n));
    std::vector<PromptPair> pairs;
    const bool texture_concept = (concept_word == "striped" || replacement == "striped");
    for (int i = 0; i < n; ++i) {
        const auto& s = slots[size_t(i)];
        PromptPair pair;
        if (texture_concept) {
            // texture erasure: concept prompt is striped, neutral drops the word
            pair.concept_prompt = make_prompt("scene", s.color, s.pos, true, "striped");
            pair.neutral_prompt = make_prompt("scene", s.color, s.pos, false, "scene");
            pair.neutral_prompt.span_begin = pair.neutral_prompt.span_end = -1;
        } else {
            pair.concept_prompt = make_prompt(concept_word, s.color, s.pos, s.striped, concept_word);
            pair.neutral_prompt = make_prompt(replacement, s.color, s.pos, s.striped, replacement);
        }
        pairs.push_back(pair);
    }
    return pairs;
}

std::vector<PromptTokenSeq> synonym_prompts(const std::string& concept_word, int n, uint64_t seed) {
    check_concept_word(concept_word);
    const std::string syn = vocab().word(vocab().synonym_of(concept_word));
    auto slots = shuffled_slots(seed, "synonym_prompts");
    if (n < 1 || n > int(slots.size()))
        throw ShapeError("synonym_prompts: n must be in [1," + std::to_string(slots.size()) + "]");
    std::vector<PromptTokenSeq> out;
    for (int i = 0; i < n; ++i) {
        const auto& s = slots[size_t(i)];
        out.push_back(make_prompt(syn, s.color, s.pos, s.striped, syn));
    }
    return out;
}

std::vector<PromptTokenSeq> concept_prompts(const std::string& concept_word, int n, uint64_t seed) {
    check_concept_word(concept_word);
    auto slots = shuffled_slots(seed, "concept_prompts");
    std::vector<PromptTokenSeq> out;
    for (int i = 0; i < n; ++i) {
        const auto& s = slots[size_t(i % slots.size())];
        out.push_back(make_prompt(concept_word, s.color, s.pos, s.striped, concept_word));
    }
    return out;
}

SceneSpec scene_for_prompt(const PromptTokenSeq& prompt, int bg_shade, uint64_t seed) {
    const auto& v = vocab();
    SceneSpec spec;
    spec.shape = ShapeKind::none;
    spec.bg_shade = bg_shade;
    spec.seed = seed;
    for (int id : prompt.ids) {
        if (auto sh = v.shape_of(id)) spec.shape = *sh;
        const std::string& w = v.word(id);
        for (int i = 0; i < kColorCount; ++i)
            if (w == Vocabulary::color_words()[size_t(i)]) spec.color = SceneColor(i);
        for (int i = 0; i < kPosCount; ++i)
            if (w == Vocabulary::position_words()[size_t(i)]) spec.pos = ScenePos(i);
        if (w == "striped" || w == "banded") spec.striped = true;
    }
    return spec;
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

uint64_t Dataset::manifest_hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](uint64_t x) {
        h ^= x;
        h *= 0x100000001b3ULL;
    };
    mix(uint64_t(resolution));
    mix(seed);
    for (const auto& e : entries) {
        mix(e.image_hash);
        for (int id : e.prompt.ids) mix(uint64_t(id) + 1);
    }
    return h;
}

std::string Dataset::manifest_json() const {
    nlohmann::json j;
    j["resolution"] = resolution;
    j["seed"] = seed;
    j["manifest_hash"] = manifest_hash();
    auto& arr = j["entries"];
    for (const auto& e : entries) {
        nlohmann::json je;
        je["shape"] = int(e.spec.shape);
        je["color"] = int(e.spec.color);
        je["pos"] = int(e.spec.pos);
        je["bg_shade"] = e.spec.bg_shade;
        je["striped"] = e.spec.striped;
        je["render_seed"] = e.spec.seed;
        je["prompt_ids"] = e.prompt.ids;
        je["prompt"] = e.prompt.text();
        je["image_file"] = e.image_file;
        je["image_hash"] = e.image_hash;
        arr.push_back(je);
    }
    return j.dump(2);
}

Dataset gen_dataset(int size, int resolution, uint64_t seed, double synonym_fraction,
                    double striped_fraction) {
    if (size < 1) throw ShapeError("gen_dataset: size must be >= 1");
    Dataset ds;
    ds.resolution = resolution;
    ds.seed = seed;
    Rng rng = Rng::stream(seed, "dataset");
    for (int i = 0; i < size; ++i) {
        SceneSpec spec;
        spec.shape = ShapeKind(i % kShapeCount);  // exact stratification over shapes
        // color stratified within shape strata, rest drawn from the stream
        spec.color = SceneColor((i / kShapeCount) % kColorCount);
        spec.pos = ScenePos(rng.uniform_int(0, kPosCount - 1));
        spec.bg_shade = int(rng.uniform_int(0, kShadeCount - 1));
        spec.striped = rng.uniform() < striped_fraction;
        spec.seed = rng.next();

        const bool use_synonym = rng.uniform() < synonym_fraction;
        const int shape_idx = int(spec.shape);
        const std::string shape_word = use_synonym
                                           ? Vocabulary::shape_synonyms()[size_t(shape_idx)]
                                           : Vocabulary::shape_words()[size_t(shape_idx)];
        DatasetEntry e;
        e.spec = spec;
        e.prompt = make_prompt(shape_word, spec.color, spec.pos, spec.striped, shape_word);
        Grid img = render_scene(spec, resolution);
        e.image_hash = grid_hash(img);
        ds.entries.push_back(e);
        ds.images.push_back(std::move(img));
    }
    return ds;
}

}  // namespace vare
