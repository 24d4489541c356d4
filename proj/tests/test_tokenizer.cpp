#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "vare/scenegen.hpp"
#include "vare/tokenizer.hpp"

using namespace vare;

namespace {

TokenizerConfig default_cfg() {
    TokenizerConfig cfg;
    cfg.patch = 2;
    cfg.image_h = cfg.image_w = 32;
    cfg.channels = 3;
    cfg.projection_seed = 7;
    cfg.schedule = ScaleSchedule::square({1, 2, 4, 8, 16});
    return cfg;
}

std::vector<Grid> scene_set(int n, uint64_t seed) {
    auto ds = gen_dataset(n, 32, seed);
    return ds.images;
}

double mean_abs_err(const Grid& a, const Grid& b) {
    double e = 0;
    for (size_t i = 0; i < a.v.size(); ++i) e += std::abs(double(a.v[i]) - b.v[i]);
    return e / double(a.v.size());
}

}  // namespace

TEST_CASE("bsq: sign then 1/sqrt(d) scaling, idempotent on codewords") {
    float z[2] = {3.f, -4.f};
    uint8_t bits[2];
    float q[2];
    bsq_quantize(z, 2, bits, q);
    CHECK(q[0] == doctest::Approx(0.70710678).epsilon(1e-7));
    CHECK(q[1] == doctest::Approx(-0.70710678).epsilon(1e-7));
    CHECK(bits[0] == 1);
    CHECK(bits[1] == 0);

    // idempotence: quantizing a codeword returns it
    uint8_t bits2[2];
    float q2[2];
    bsq_quantize(q, 2, bits2, q2);
    CHECK(q2[0] == q[0]);
    CHECK(q2[1] == q[1]);

    // sign(0) := +1
    float zz[2] = {0.f, -0.f};
    bsq_quantize(zz, 2, bits, q);
    CHECK(bits[0] == 1);
    CHECK(bits[1] == 1);
}

TEST_CASE("bsq returns the inner-product-maximizing codeword (exhaustive, d<=10)") {
    Rng rng(5);
    for (int d = 2; d <= 10; ++d) {
        for (int trial = 0; trial < 60; ++trial) {
            std::vector<float> z(static_cast<size_t>(d));
            for (auto& x : z) x = float(rng.normal());
            std::vector<uint8_t> bits(static_cast<size_t>(d));
            std::vector<float> q(static_cast<size_t>(d));
            bsq_quantize(z.data(), d, bits.data(), q.data());

            double norm = 0, dot = 0;
            for (int i = 0; i < d; ++i) {
                norm += double(q[size_t(i)]) * q[size_t(i)];
                dot += double(z[size_t(i)]) * q[size_t(i)];
            }
            CHECK(norm == doctest::Approx(1.0).epsilon(1e-5));

            double best = -1e30;
            const float mag = 1.f / std::sqrt(float(d));
            for (int code = 0; code < (1 << d); ++code) {
                double cand = 0;
                for (int i = 0; i < d; ++i)
                    cand += double(z[size_t(i)]) * ((code >> i) & 1 ? mag : -mag);
                best = std::max(best, cand);
            }
            CHECK(dot == doctest::Approx(best).epsilon(1e-6));
        }
    }
}

TEST_CASE("bit pattern <-> codeword is a bijection") {
    const int d = 6;
    const float mag = 1.f / std::sqrt(float(d));
    for (int code = 0; code < (1 << d); ++code) {
        std::vector<float> q(static_cast<size_t>(d));
        for (int i = 0; i < d; ++i) q[size_t(i)] = (code >> i) & 1 ? mag : -mag;
        std::vector<uint8_t> bits(static_cast<size_t>(d));
        bsq_quantize(q.data(), d, bits.data(), nullptr);
        int back = 0;
        for (int i = 0; i < d; ++i) back |= int(bits[size_t(i)]) << i;
        CHECK(back == code);
    }
}

TEST_CASE("patch_encode: zero image maps to the fallback direction") {
    Tokenizer tok(default_cfg());
    Grid zero(32, 32, 3);
    auto f = tok.patch_encode(zero);
    for (int r = 0; r < f.h; ++r)
        for (int c = 0; c < f.w; ++c) {
            CHECK(f.at(r, c, 0) == 1.0f);
            for (int k = 1; k < f.c; ++k) CHECK(f.at(r, c, k) == 0.0f);
        }
}

TEST_CASE("patch_encode/decode: orthonormal roundtrip with retained norms") {
    Tokenizer tok(default_cfg());
    auto img = render_scene({ShapeKind::star, SceneColor::yellow, ScenePos::left, 1, false, 9}, 32);
    std::vector<float> norms;
    auto f = tok.patch_encode(img, &norms);
    auto back = tok.patch_decode(f, &norms);
    CHECK(mean_abs_err(img, back) < 1e-6);
}

TEST_CASE("patching is local: one-patch difference moves one feature location") {
    Tokenizer tok(default_cfg());
    Grid a(32, 32, 3, 0.3f);
    Grid b = a;
    b.at(5, 7, 1) += 0.2f;  // inside patch (2,3)
    auto fa = tok.patch_encode(a);
    auto fb = tok.patch_encode(b);
    for (int r = 0; r < fa.h; ++r)
        for (int c = 0; c < fa.w; ++c) {
            bool differs = false;
            for (int k = 0; k < fa.c; ++k) differs = differs || fa.at(r, c, k) != fb.at(r, c, k);
            CHECK(differs == (r == 2 && c == 3));
        }
}

TEST_CASE("encode without calibration fails with direction to calibrate") {
    Tokenizer tok(default_cfg());
    Grid img(32, 32, 3, 0.4f);
    CHECK_THROWS_WITH_AS(tok.encode_multiscale(tok.patch_encode(img)),
                         doctest::Contains("calibrate_gains"), ShapeError);
}

TEST_CASE("single-scale reduction and exact constant-codeword roundtrip") {
    // K=1 at full resolution: tokens are the direct BSQ of f
    TokenizerConfig cfg = default_cfg();
    cfg.schedule = ScaleSchedule::square({16});
    cfg.schedule.gains = {1.0f};
    Tokenizer tok(cfg);
    auto img = render_scene({ShapeKind::cross, SceneColor::red, ScenePos::center, 1, false, 3}, 32);
    auto f = tok.patch_encode(img);
    auto maps = tok.encode_multiscale(f);
    REQUIRE(maps.size() == 1);
    for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 16; ++c) {
            std::vector<uint8_t> bits(static_cast<size_t>(f.c));
            bsq_quantize(f.loc(r, c), f.c, bits.data(), nullptr);
            for (int k = 0; k < f.c; ++k) CHECK(maps[0].loc(r, c)[k] == bits[size_t(k)]);
        }

    // constant feature map equal to g1 * codeword: scale-1 residual is exactly zero
    TokenizerConfig cfg2 = default_cfg();
    cfg2.schedule = ScaleSchedule::square({1, 16});
    cfg2.schedule.gains = {1.0f, 1.0f};
    Tokenizer tok2(cfg2);
    const int d = cfg2.bit_depth();
    Grid cw(16, 16, d);
    for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 16; ++c)
            for (int k = 0; k < d; ++k) cw.at(r, c, k) = bit_to_code(k % 3 != 0, d);
    auto maps2 = tok2.encode_multiscale(cw);
    auto dec1 = tok2.decode_multiscale({maps2[0]});
    for (size_t i = 0; i < cw.v.size(); ++i) CHECK(dec1.v[i] == doctest::Approx(cw.v[i]).epsilon(1e-6));
    // zero residual quantizes to all-ones bits at the next scale (sign(0) = +1)
    for (uint8_t b : maps2[1].bits) CHECK(b == 1);
}

TEST_CASE("calibration: codeword inputs give unit gains; determinism; ordering") {
    TokenizerConfig cfg = default_cfg();
    cfg.schedule = ScaleSchedule::square({16});
    Tokenizer tok(cfg);
    // images whose z (= unit-normalized features) are already codewords:
    // pixels proportional to patch_decode of codeword fields
    std::vector<Grid> images;
    Rng rng(21);
    const int d = cfg.bit_depth();
    for (int n = 0; n < 32; ++n) {
        Grid cw(16, 16, d);
        for (int r = 0; r < 16; ++r)
            for (int c = 0; c < 16; ++c)
                for (int k = 0; k < d; ++k) cw.at(r, c, k) = bit_to_code(rng.bernoulli(0.5), d);
        Grid img = tok.patch_decode(cw);
        for (auto& v : img.v) v *= 0.35f;  // scale away from unit norm; direction unchanged
        images.push_back(std::move(img));
    }
    Tokenizer t1(cfg);
    REQUIRE(t1.calibrate_gains(images));
    CHECK(t1.schedule().gains[0] == doctest::Approx(1.0).epsilon(1e-5));

    // determinism: same set, fresh tokenizer -> bit-identical gains
    Tokenizer t2(cfg);
    t2.calibrate_gains(images);
    CHECK(t1.schedule().gains == t2.schedule().gains);

    // ordering invariance of the mean
    std::vector<Grid> reversed(images.rbegin(), images.rend());
    Tokenizer t3(cfg);
    t3.calibrate_gains(reversed);
    CHECK(t3.schedule().gains[0] == doctest::Approx(t1.schedule().gains[0]).epsilon(1e-6));

    // degenerate all-identical set falls back to unit gains with a warning
    std::vector<Grid> same(40, images[0]);
    Tokenizer t4(cfg);
    CHECK_FALSE(t4.calibrate_gains(same));
    CHECK(t4.schedule().gains[0] == 1.0f);

    CHECK_THROWS_AS(Tokenizer(cfg).calibrate_gains(std::vector<Grid>(10, images[0])), ShapeError);
}

TEST_CASE("multi-scale codec on rendered scenes") {
    TokenizerConfig cfg = default_cfg();
    Tokenizer tok(cfg);
    auto calib = scene_set(50, 100);
    REQUIRE(tok.calibrate_gains(calib));
    for (float g : tok.schedule().gains) CHECK(g > 0.f);

    auto test_imgs = scene_set(40, 200);
    int k5_better = 0;
    int64_t reencode_agree = 0, reencode_total = 0, coarse_agree = 0, coarse_total = 0;
    std::vector<double> err_by_prefix(6, 0.0);
    for (const auto& img : test_imgs) {
        auto f = tok.patch_encode(img);
        auto maps = tok.encode_multiscale(f);
        REQUIRE(maps.size() == 5);

        // prefix decode linearity: decode(k+1) == decode(k) + single-scale decode, bitwise
        Grid acc(16, 16, cfg.bit_depth());
        for (int k = 0; k < 5; ++k) {
            Grid single = tok.decode_single(maps[size_t(k)]);
            for (size_t i = 0; i < acc.v.size(); ++i) acc.v[i] += single.v[i];
            Grid prefix = tok.decode_multiscale({maps.begin(), maps.begin() + k + 1});
            CHECK(prefix.v == acc.v);
        }

        // reconstruction error per prefix length
        double prev = 1e30;
        for (int k = 1; k <= 5; ++k) {
            Grid dec = tok.decode_multiscale({maps.begin(), maps.begin() + k});
            double e = 0;
            for (size_t i = 0; i < dec.v.size(); ++i) {
                const double di = double(dec.v[i]) - f.v[i];
                e += di * di;
            }
            e = std::sqrt(e / double(dec.v.size()));
            err_by_prefix[size_t(k)] += e;
            if (k == 1) prev = e;
        }
        Grid d5 = tok.decode_multiscale(maps);
        double e5 = 0, e1 = 0;
        Grid d1 = tok.decode_multiscale({maps[0]});
        for (size_t i = 0; i < d5.v.size(); ++i) {
            e5 += (double(d5.v[i]) - f.v[i]) * (double(d5.v[i]) - f.v[i]);
            e1 += (double(d1.v[i]) - f.v[i]) * (double(d1.v[i]) - f.v[i]);
        }
        if (e5 <= e1) ++k5_better;

        // re-encode stability: decoding the re-encoded maps does not drift
        // further from the original features than the quantization error
        auto maps2 = tok.encode_multiscale(d5);
        for (size_t s = 0; s < maps.size(); ++s)
            for (size_t i = 0; i < maps[s].bits.size(); ++i) {
                reencode_agree += maps[s].bits[i] == maps2[s].bits[i];
                ++reencode_total;
                if (s == 0) {
                    coarse_agree += maps[s].bits[i] == maps2[s].bits[i];
                    ++coarse_total;
                }
            }
        Grid d5b = tok.decode_multiscale(maps2);
        double drift = 0, base_err = 0;
        for (size_t i = 0; i < d5.v.size(); ++i) {
            drift += (double(d5b.v[i]) - d5.v[i]) * (double(d5b.v[i]) - d5.v[i]);
            base_err += (double(d5.v[i]) - f.v[i]) * (double(d5.v[i]) - f.v[i]);
        }
        CHECK(drift <= base_err + 1e-9);
    }
    CHECK(double(reencode_agree) / double(reencode_total) > 0.8);
    CHECK(double(coarse_agree) / double(coarse_total) > 0.99);
    CHECK(k5_better >= int(test_imgs.size() * 95) / 100);
    // mean error non-increasing in the number of scales used
    for (int k = 2; k <= 5; ++k) CHECK(err_by_prefix[size_t(k)] <= err_by_prefix[size_t(k - 1)] + 1e-9);

    // empty prefix decodes to the zero feature map
    Grid empty = tok.decode_multiscale({});
    for (float v : empty.v) CHECK(v == 0.f);

    // end-to-end pixel error within 10% of range
    double pix_err = 0;
    int64_t count = 0;
    for (const auto& img : test_imgs) {
        auto rec = tok.patch_decode(tok.decode_multiscale(tok.encode_multiscale(tok.patch_encode(img))));
        pix_err += mean_abs_err(img, rec) * double(img.v.size());
        count += img.v.size();
    }
    pix_err /= double(count);
    MESSAGE("mean pixel reconstruction error: " << pix_err);
    CHECK(pix_err <= 0.10);
}

TEST_CASE("single-scale codec is an exact fixed point on its own range") {
    TokenizerConfig cfg = default_cfg();
    cfg.schedule = ScaleSchedule::square({16});
    cfg.schedule.gains = {0.8f};
    Tokenizer tok(cfg);
    Rng rng(31);
    const int d = cfg.bit_depth();
    for (int trial = 0; trial < 10; ++trial) {
        BitTokenMap m(0, 16, 16, d);
        for (auto& b : m.bits) b = rng.bernoulli(0.5) ? 1 : 0;
        auto f = tok.decode_multiscale({m});
        auto re = tok.encode_multiscale(f);
        REQUIRE(re.size() == 1);
        CHECK(re[0].bits == m.bits);
    }
}

TEST_CASE("tokenizer config json roundtrip") {
    TokenizerConfig cfg = default_cfg();
    cfg.schedule.gains = {0.5f, 0.25f, 0.2f, 0.15f, 0.1f};
    auto text = cfg.to_json();
    auto back = TokenizerConfig::from_json(text);
    CHECK(back.patch == cfg.patch);
    CHECK(back.projection_seed == cfg.projection_seed);
    CHECK(back.schedule.resolutions == cfg.schedule.resolutions);
    CHECK(back.schedule.gains == cfg.schedule.gains);
}
