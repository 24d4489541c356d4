#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "vare/ppm.hpp"
#include "vare/scenegen.hpp"

using namespace vare;

TEST_CASE("rendering is a pure function of (spec, seed, resolution)") {
    SceneSpec s{ShapeKind::triangle, SceneColor::green, ScenePos::top, 2, true, 77};
    auto a = render_scene(s, 32);
    auto b = render_scene(s, 32);
    CHECK(a.v == b.v);

    s.seed = 78;
    auto c = render_scene(s, 32);
    CHECK(a.v != c.v);  // jitter stream moves with the seed
}

TEST_CASE("shape changes stay near the shape footprint") {
    SceneSpec circ{ShapeKind::circle, SceneColor::red, ScenePos::center, 1, false, 5};
    SceneSpec sq = circ;
    sq.shape = ShapeKind::square;
    auto a = render_scene(circ, 32);
    auto b = render_scene(sq, 32);
    int diff_outside = 0;
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            const bool near = std::abs(x - 16) <= 9 && std::abs(y - 16) <= 9;
            bool differs = false;
            for (int k = 0; k < 3; ++k) differs = differs || a.at(y, x, k) != b.at(y, x, k);
            if (differs && !near) ++diff_outside;
        }
    CHECK(diff_outside == 0);
}

TEST_CASE("background-only spec renders flat") {
    SceneSpec s{ShapeKind::none, SceneColor::red, ScenePos::center, 0, false, 1};
    auto img = render_scene(s, 32);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
            for (int k = 0; k < 3; ++k) CHECK(img.at(y, x, k) == img.at(0, 0, k));
}

TEST_CASE("prompt pair template instantiation") {
    auto pairs = build_prompt_pairs("circle", "square", 1, 4);
    REQUIRE(pairs.size() == 1);
    const auto& p = pairs[0];
    const auto& v = vocab();
    CHECK(p.concept_prompt.has_span());
    CHECK(p.concept_prompt.ids[size_t(p.concept_prompt.span_begin)] == v.id("circle"));
    CHECK(p.neutral_prompt.ids[size_t(p.concept_prompt.span_begin)] == v.id("square"));
    // the two sequences differ only inside the concept span
    for (int k = 0; k < kPromptLen; ++k) {
        if (k >= p.concept_prompt.span_begin && k < p.concept_prompt.span_end) continue;
        CHECK(p.concept_prompt.ids[size_t(k)] == p.neutral_prompt.ids[size_t(k)]);
    }
    CHECK(p.concept_prompt.text().find("circle") != std::string::npos);
}

TEST_CASE("prompt pairs: uniqueness, span correctness, vocabulary closure") {
    auto pairs = build_prompt_pairs("ring", "cross", 50, 9);
    std::set<std::array<int, kPromptLen>> seen;
    for (const auto& p : pairs) {
        seen.insert(p.concept_prompt.ids);
        REQUIRE(p.concept_prompt.has_span());
        CHECK(vocab().word(p.concept_prompt.ids[size_t(p.concept_prompt.span_begin)]) == "ring");
        for (int id : p.concept_prompt.ids) {
            CHECK(id >= 0);
            CHECK(id < vocab().size());
        }
    }
    CHECK(seen.size() == 50);  // all pairs differ in a non-concept slot

    CHECK_THROWS_AS(build_prompt_pairs("circle", "circle", 5, 1), ShapeError);
    CHECK_THROWS_AS(build_prompt_pairs("circle", "square", 51, 1), ShapeError);
    CHECK_THROWS_AS(build_prompt_pairs("disc", "square", 5, 1), ShapeError);  // synonyms are eval-only
}

TEST_CASE("synonym prompts are held out from training pairs") {
    auto syn = synonym_prompts("circle", 3, 11);
    REQUIRE(syn.size() == 3);
    const int disc = vocab().id("disc");
    const int circle = vocab().id("circle");
    for (const auto& s : syn) {
        bool has_disc = false;
        for (int id : s.ids) {
            has_disc = has_disc || id == disc;
            CHECK(id != circle);
        }
        CHECK(has_disc);
    }
    // synonym token id never appears in any training pair
    for (const auto& shape : Vocabulary::shape_words()) {
        for (const auto& other : Vocabulary::shape_words()) {
            if (std::string(shape) == other) continue;
            for (const auto& pair : build_prompt_pairs(shape, other, 50, 3)) {
                for (int id : pair.concept_prompt.ids) CHECK(id != vocab().synonym_of(shape));
                for (int id : pair.neutral_prompt.ids) CHECK(id != vocab().synonym_of(shape));
            }
        }
    }
    CHECK_THROWS_AS(synonym_prompts("plain", 2, 1), ShapeError);
}

TEST_CASE("dataset: exact stratification, determinism, roundtrip") {
    auto ds = gen_dataset(600, 32, 42);
    REQUIRE(ds.entries.size() == 600);
    std::array<int, kShapeCount> counts{};
    for (const auto& e : ds.entries) ++counts[size_t(int(e.spec.shape))];
    for (int c : counts) CHECK(c == 100);

    // regeneration with the same seed reproduces the manifest hash
    auto ds2 = gen_dataset(600, 32, 42);
    CHECK(ds.manifest_hash() == ds2.manifest_hash());
    auto ds3 = gen_dataset(600, 32, 43);
    CHECK(ds.manifest_hash() != ds3.manifest_hash());

    // every entry re-renders to identical pixels
    for (size_t i = 0; i < 25; ++i) {
        auto img = render_scene(ds.entries[i].spec, ds.resolution);
        CHECK(img.v == ds.images[i].v);
        CHECK(grid_hash(img) == ds.entries[i].image_hash);
    }

    // prompts use only vocabulary ids and describe the rendered scene
    for (const auto& e : ds.entries) {
        for (int id : e.prompt.ids) CHECK(id < vocab().size());
        auto spec = scene_for_prompt(e.prompt, e.spec.bg_shade, e.spec.seed);
        CHECK(int(spec.shape) == int(e.spec.shape));
        CHECK(int(spec.color) == int(e.spec.color));
        CHECK(int(spec.pos) == int(e.spec.pos));
        CHECK(spec.striped == e.spec.striped);
    }
}

TEST_CASE("ppm roundtrip and mosaic layout") {
    auto img = render_scene({ShapeKind::star, SceneColor::blue, ScenePos::right, 0, false, 3}, 32);
    write_ppm(img, "/tmp/vare_test.ppm");
    auto back = read_ppm("/tmp/vare_test.ppm");
    REQUIRE(back.h == 32);
    REQUIRE(back.w == 32);
    double max_err = 0;
    for (size_t i = 0; i < img.v.size(); ++i)
        max_err = std::max(max_err, std::abs(double(img.v[i]) - back.v[i]));
    CHECK(max_err <= 0.5 / 255.0 + 1e-6);  // 8-bit quantization only

    std::vector<Grid> four(4, img);
    auto mosaic = make_mosaic(four, 2);
    CHECK(mosaic.h == 64);
    CHECK(mosaic.w == 64);
    CHECK(mosaic.at(0, 0, 0) == img.at(0, 0, 0));
    CHECK(mosaic.at(32, 32, 2) == img.at(0, 0, 2));

    auto single = make_mosaic({img}, 1);
    CHECK(single.v == img.v);

    Grid other(16, 16, 3);
    CHECK_THROWS_AS(make_mosaic({img, other}, 2), ShapeError);
}
