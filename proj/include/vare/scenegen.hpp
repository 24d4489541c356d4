#pragma once

// Procedural labeled scenes plus templated prompt pairs. Shapes stand in for
// erasable concepts; a scene-wide stripe texture is the style-type analog.
// Every render is a pure function of (spec, seed, resolution).

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vare/grid.hpp"

namespace vare {

enum class ShapeKind { circle, square, triangle, cross, ring, star, none };
enum class SceneColor { red, green, blue, yellow, white };
enum class ScenePos { center, top, bottom, left, right };

constexpr int kShapeCount = 6;  // "none" renders background only and is not a class
constexpr int kColorCount = 5;
constexpr int kPosCount = 5;
constexpr int kShadeCount = 3;

struct SceneSpec {
    ShapeKind shape = ShapeKind::circle;
    SceneColor color = SceneColor::red;
    ScenePos pos = ScenePos::center;
    int bg_shade = 1;  // 0..2
    bool striped = false;
    uint64_t seed = 0;  // sub-pixel jitter stream
};

Grid render_scene(const SceneSpec& spec, int resolution);

// ---------------------------------------------------------------------------
// Closed prompt vocabulary. Canonical shape words are the fixed lexical form
// used in training pairs; synonyms are held out for evaluation.
// ---------------------------------------------------------------------------

class Vocabulary {
public:
    Vocabulary();

    int size() const { return int(words_.size()); }
    int id(const std::string& word) const;         // throws on unknown word
    const std::string& word(int id) const;
    bool contains(const std::string& word) const;

    int pad_id() const { return 0; }

    // canonical shape word <-> enum
    static const std::array<const char*, kShapeCount>& shape_words();
    static const std::array<const char*, kShapeCount>& shape_synonyms();
    static const std::array<const char*, kColorCount>& color_words();
    static const std::array<const char*, kPosCount>& position_words();

    // Returns the shape an id renders as (canonical or synonym), if any.
    std::optional<ShapeKind> shape_of(int id) const;
    // Held-out synonym id for a canonical concept word ("circle" -> "disc",
    // "striped" -> "banded"). Throws if none registered.
    int synonym_of(const std::string& concept_word) const;

    std::string to_json() const;

private:
    std::vector<std::string> words_;
};

const Vocabulary& vocab();  // process-wide singleton (immutable)

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

constexpr int kPromptLen = 8;

struct PromptTokenSeq {
    std::array<int, kPromptLen> ids{};  // pad-filled
    int span_begin = -1, span_end = -1;  // concept word range [begin, end)

    bool has_span() const { return span_begin >= 0 && span_end > span_begin; }
    friend bool operator==(const PromptTokenSeq& a, const PromptTokenSeq& b) {
        return a.ids == b.ids && a.span_begin == b.span_begin && a.span_end == b.span_end;
    }
    std::string text() const;
};

struct PromptPair {
    PromptTokenSeq concept_prompt;  // contains the target word
    PromptTokenSeq neutral_prompt;  // same template, concept word replaced
};

// Template instantiation: "a [striped] {color} {shape} at {position}".
// view_word: the lexical form used for the shape slot (canonical or synonym).
PromptTokenSeq make_prompt(const std::string& shape_word, SceneColor color, ScenePos pos,
                           bool striped, const std::string& span_word);

// n unique pairs varying color/position/texture; concept_word and replacement must
// differ and use one fixed lexical form each.
std::vector<PromptPair> build_prompt_pairs(const std::string& concept_word, const std::string& replacement,
                                           int n, uint64_t seed);

// n prompts using only the held-out synonym form of the concept.
std::vector<PromptTokenSeq> synonym_prompts(const std::string& concept_word, int n, uint64_t seed);

// Evaluation prompts in the canonical form (same template family).
std::vector<PromptTokenSeq> concept_prompts(const std::string& concept_word, int n, uint64_t seed);

// The scene a prompt describes (for rendering prompt-consistent targets).
SceneSpec scene_for_prompt(const PromptTokenSeq& prompt, int bg_shade, uint64_t seed);

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

struct DatasetEntry {
    SceneSpec spec;
    PromptTokenSeq prompt;
    std::string image_file;  // relative path, empty if in-memory only
    uint64_t image_hash = 0;
};

struct Dataset {
    int resolution = 32;
    uint64_t seed = 0;
    std::vector<DatasetEntry> entries;
    std::vector<Grid> images;  // parallel to entries

    uint64_t manifest_hash() const;
    std::string manifest_json() const;
};

// Stratified over all shape x color combinations; a synonym_fraction of the
// prompts use the held-out lexical form so the base model learns it.
Dataset gen_dataset(int size, int resolution, uint64_t seed, double synonym_fraction = 0.3,
                    double striped_fraction = 0.25);

}  // namespace vare
