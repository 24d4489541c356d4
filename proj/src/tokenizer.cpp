#include "vare/tokenizer.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>

#include <json.hpp>

#include "vare/array.hpp"

namespace vare {

uint64_t grid_hash(const Grid& g) {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](uint64_t x) {
        h ^= x;
        h *= 0x100000001b3ULL;
    };
    mix(uint64_t(g.h));
    mix(uint64_t(g.w));
    mix(uint64_t(g.c));
    for (float f : g.v) {
        uint32_t bits;
        static_assert(sizeof(bits) == sizeof(f));
        std::memcpy(&bits, &f, sizeof(bits));
        mix(bits);
    }
    return h;
}

void ScaleSchedule::validate(int latent_h, int latent_w) const {
    if (resolutions.empty()) throw ShapeError("schedule: needs at least one scale");
    for (size_t i = 0; i < resolutions.size(); ++i) {
        auto [h, w] = resolutions[i];
        if (h <= 0 || w <= 0) throw ShapeError("schedule: non-positive resolution");
        if (i > 0) {
            auto [ph, pw] = resolutions[i - 1];
            if (h <= ph || w <= pw || h % ph != 0 || w % pw != 0)
                throw ShapeError("schedule: resolutions must be strictly increasing and each must divide the next");
        }
    }
    if (resolutions.back() != std::make_pair(latent_h, latent_w))
        throw ShapeError("schedule: finest scale " + std::to_string(resolutions.back().first) + "x" +
                         std::to_string(resolutions.back().second) + " must equal the latent grid " +
                         std::to_string(latent_h) + "x" + std::to_string(latent_w));
    for (float g : gains)
        if (!(g > 0)) throw ShapeError("schedule: gains must be positive");
}

ScaleSchedule ScaleSchedule::square(std::vector<int> sides) {
    ScaleSchedule s;
    for (int side : sides) s.resolutions.emplace_back(side, side);
    return s;
}

void TokenizerConfig::validate() const {
    if (patch <= 0 || image_h % patch != 0 || image_w % patch != 0)
        throw ShapeError("tokenizer: patch size must divide image dimensions");
    if (channels <= 0) throw ShapeError("tokenizer: channels must be positive");
    schedule.validate(latent_h(), latent_w());
}

std::string TokenizerConfig::to_json() const {
    nlohmann::json j;
    j["patch"] = patch;
    j["image_h"] = image_h;
    j["image_w"] = image_w;
    j["channels"] = channels;
    j["projection_seed"] = projection_seed;
    j["bit_depth"] = bit_depth();
    auto& res = j["schedule"]["resolutions"];
    for (auto [h, w] : schedule.resolutions) res.push_back({h, w});
    j["schedule"]["gains"] = schedule.gains;
    return j.dump(2);
}

TokenizerConfig TokenizerConfig::from_json(const std::string& text) {
    auto j = nlohmann::json::parse(text);
    TokenizerConfig c;
    c.patch = j.at("patch").get<int>();
    c.image_h = j.at("image_h").get<int>();
    c.image_w = j.at("image_w").get<int>();
    c.channels = j.at("channels").get<int>();
    c.projection_seed = j.at("projection_seed").get<uint64_t>();
    for (const auto& r : j.at("schedule").at("resolutions"))
        c.schedule.resolutions.emplace_back(r.at(0).get<int>(), r.at(1).get<int>());
    c.schedule.gains = j.at("schedule").at("gains").get<std::vector<float>>();
    return c;
}

void bsq_quantize(const float* z, int d, uint8_t* out_bits, float* out_codeword) {
    const float mag = 1.0f / std::sqrt(float(d));
    for (int i = 0; i < d; ++i) {
        const uint8_t bit = z[i] >= 0.0f ? 1 : 0;  // sign(0) := +1
        out_bits[i] = bit;
        if (out_codeword) out_codeword[i] = bit ? mag : -mag;
    }
}

namespace {

// Seeded random orthonormal matrix: Gaussian entries then modified
// Gram-Schmidt in double, with one re-orthogonalization pass.
std::vector<float> orthonormal(int d, uint64_t seed) {
    Rng rng = Rng::stream(seed, "tokenizer.projection");
    std::vector<double> q(size_t(d) * d);
    for (auto& x : q) x = rng.normal();
    for (int i = 0; i < d; ++i) {
        double* qi = q.data() + size_t(i) * d;
        for (int pass = 0; pass < 2; ++pass)
            for (int j = 0; j < i; ++j) {
                const double* qj = q.data() + size_t(j) * d;
                double dot = 0;
                for (int k = 0; k < d; ++k) dot += qi[k] * qj[k];
                for (int k = 0; k < d; ++k) qi[k] -= dot * qj[k];
            }
        double norm = 0;
        for (int k = 0; k < d; ++k) norm += qi[k] * qi[k];
        norm = std::sqrt(norm);
        for (int k = 0; k < d; ++k) qi[k] /= norm;
    }
    std::vector<float> out(q.size());
    for (size_t i = 0; i < q.size(); ++i) out[i] = float(q[i]);
    return out;
}

}  // namespace

Tokenizer::Tokenizer(TokenizerConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.patch <= 0 || cfg_.image_h % cfg_.patch != 0 || cfg_.image_w % cfg_.patch != 0)
        throw ShapeError("tokenizer: patch size must divide image dimensions");
    cfg_.schedule.validate(cfg_.latent_h(), cfg_.latent_w());
    proj_ = orthonormal(cfg_.bit_depth(), cfg_.projection_seed);
}

Grid Tokenizer::project(const Grid& image) const {
    if (image.h != cfg_.image_h || image.w != cfg_.image_w || image.c != cfg_.channels)
        throw ShapeError("patch_encode: image " + std::to_string(image.h) + "x" + std::to_string(image.w) +
                         "x" + std::to_string(image.c) + " does not match config " +
                         std::to_string(cfg_.image_h) + "x" + std::to_string(cfg_.image_w) + "x" +
                         std::to_string(cfg_.channels));
    const int p = cfg_.patch, d = cfg_.bit_depth();
    Grid f(cfg_.latent_h(), cfg_.latent_w(), d);
    std::vector<float> x(static_cast<size_t>(d));
    for (int r = 0; r < f.h; ++r)
        for (int c = 0; c < f.w; ++c) {
            int idx = 0;
            for (int dy = 0; dy < p; ++dy)
                for (int dx = 0; dx < p; ++dx)
                    for (int k = 0; k < cfg_.channels; ++k)
                        x[size_t(idx++)] = image.at(r * p + dy, c * p + dx, k);
            float* y = f.loc(r, c);
            for (int i = 0; i < d; ++i) {
                const float* row = proj_.data() + size_t(i) * d;
                double acc = 0;
                for (int k = 0; k < d; ++k) acc += double(row[k]) * x[size_t(k)];
                y[i] = float(acc);
            }
        }
    return f;
}

Grid Tokenizer::patch_encode(const Grid& image, std::vector<float>* norms) const {
    Grid f = project(image);
    const int d = f.c;
    if (norms) norms->assign(size_t(f.h) * f.w, 0.f);
    for (int r = 0; r < f.h; ++r)
        for (int c = 0; c < f.w; ++c) {
            float* y = f.loc(r, c);
            double n2 = 0;
            for (int i = 0; i < d; ++i) n2 += double(y[i]) * y[i];
            const float norm = float(std::sqrt(n2));
            if (norms) (*norms)[size_t(r) * f.w + c] = norm;
            if (norm < 1e-8f) {
                y[0] = 1.0f;
                for (int i = 1; i < d; ++i) y[i] = 0.0f;
            } else {
                for (int i = 0; i < d; ++i) y[i] /= norm;
            }
        }
    return f;
}

Grid Tokenizer::patch_decode(const Grid& features, const std::vector<float>* norms) const {
    const int p = cfg_.patch, d = cfg_.bit_depth();
    if (features.h != cfg_.latent_h() || features.w != cfg_.latent_w() || features.c != d)
        throw ShapeError("patch_decode: feature map does not match config latent grid");
    Grid img(cfg_.image_h, cfg_.image_w, cfg_.channels);
    std::vector<float> x(static_cast<size_t>(d));
    for (int r = 0; r < features.h; ++r)
        for (int c = 0; c < features.w; ++c) {
            const float* y = features.loc(r, c);
            const float scale = norms ? (*norms)[size_t(r) * features.w + c] : 1.0f;
            for (int k = 0; k < d; ++k) {
                double acc = 0;  // Q^T y: column k of Q dotted with y
                for (int i = 0; i < d; ++i) acc += double(proj_[size_t(i) * d + k]) * y[i];
                x[size_t(k)] = float(acc) * scale;
            }
            int idx = 0;
            for (int dy = 0; dy < p; ++dy)
                for (int dx = 0; dx < p; ++dx)
                    for (int k = 0; k < cfg_.channels; ++k)
                        img.at(r * p + dy, c * p + dx, k) = x[size_t(idx++)];
        }
    return img;
}

Grid avg_pool(const Grid& g, int h, int w) {
    if (h <= 0 || w <= 0 || g.h % h != 0 || g.w % w != 0)
        throw ShapeError("avg_pool: target " + std::to_string(h) + "x" + std::to_string(w) +
                         " must divide " + std::to_string(g.h) + "x" + std::to_string(g.w));
    const int fh = g.h / h, fw = g.w / w;
    Grid out(h, w, g.c);
    const double inv = 1.0 / (double(fh) * fw);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            for (int k = 0; k < g.c; ++k) {
                double acc = 0;
                for (int dy = 0; dy < fh; ++dy)
                    for (int dx = 0; dx < fw; ++dx) acc += g.at(r * fh + dy, c * fw + dx, k);
                out.at(r, c, k) = float(acc * inv);
            }
    return out;
}

Grid bilinear_resize(const Grid& g, int h, int w) {
    Grid out(h, w, g.c);
    std::vector<detail::LinTap> rt(static_cast<size_t>(h));
    std::vector<detail::LinTap> ct(static_cast<size_t>(w));
    for (int r = 0; r < h; ++r) rt[size_t(r)] = detail::bilinear_tap(r, g.h, h);
    for (int c = 0; c < w; ++c) ct[size_t(c)] = detail::bilinear_tap(c, g.w, w);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const auto& tr = rt[size_t(r)];
            const auto& tc = ct[size_t(c)];
            const float* p00 = g.loc(tr.i0, tc.i0);
            const float* p01 = g.loc(tr.i0, tc.i1);
            const float* p10 = g.loc(tr.i1, tc.i0);
            const float* p11 = g.loc(tr.i1, tc.i1);
            float* y = out.loc(r, c);
            for (int k = 0; k < g.c; ++k)
                y[k] = float(tr.w0 * (tc.w0 * p00[k] + tc.w1 * p01[k]) +
                             tr.w1 * (tc.w0 * p10[k] + tc.w1 * p11[k]));
        }
    return out;
}

std::vector<BitTokenMap> Tokenizer::encode_multiscale(const Grid& features) const {
    if (!cfg_.schedule.calibrated())
        throw ShapeError("encode_multiscale: gains not calibrated; run calibrate_gains first");
    if (features.h != cfg_.latent_h() || features.w != cfg_.latent_w() || features.c != cfg_.bit_depth())
        throw ShapeError("encode_multiscale: feature map does not match finest scale");
    const int d = cfg_.bit_depth();
    Grid residual = features;
    std::vector<BitTokenMap> maps;
    maps.reserve(size_t(cfg_.schedule.levels()));
    for (int i = 0; i < cfg_.schedule.levels(); ++i) {
        auto [h, w] = cfg_.schedule.resolutions[size_t(i)];
        Grid z = avg_pool(residual, h, w);
        BitTokenMap map(i, h, w, d);
        Grid code(h, w, d);
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) bsq_quantize(z.loc(r, c), d, map.loc(r, c), code.loc(r, c));
        const float gain = cfg_.schedule.gains[size_t(i)];
        for (auto& x : code.v) x *= gain;
        Grid up = bilinear_resize(code, residual.h, residual.w);
        for (size_t j = 0; j < residual.v.size(); ++j) residual.v[j] -= up.v[j];
        maps.push_back(std::move(map));
    }
    return maps;
}

Grid Tokenizer::decode_single(const BitTokenMap& map) const {
    const int d = cfg_.bit_depth();
    if (map.d != d) throw ShapeError("decode: bit depth mismatch");
    if (map.scale_index < 0 || map.scale_index >= cfg_.schedule.levels())
        throw ShapeError("decode: scale index out of schedule");
    auto [h, w] = cfg_.schedule.resolutions[size_t(map.scale_index)];
    if (map.h != h || map.w != w)
        throw ShapeError("decode: map " + std::to_string(map.h) + "x" + std::to_string(map.w) +
                         " does not match schedule entry " + std::to_string(h) + "x" + std::to_string(w));
    if (!cfg_.schedule.calibrated()) throw ShapeError("decode: gains not calibrated");
    const float gain = cfg_.schedule.gains[size_t(map.scale_index)];
    Grid code(h, w, d);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const uint8_t* b = map.loc(r, c);
            float* y = code.loc(r, c);
            for (int i = 0; i < d; ++i) y[i] = bit_to_code(b[i], d) * gain;
        }
    return bilinear_resize(code, cfg_.latent_h(), cfg_.latent_w());
}

Grid Tokenizer::decode_multiscale(const std::vector<BitTokenMap>& maps) const {
    Grid acc(cfg_.latent_h(), cfg_.latent_w(), cfg_.bit_depth());
    for (size_t i = 0; i < maps.size(); ++i) {
        if (maps[i].scale_index != int(i))
            throw ShapeError("decode_multiscale: maps must be a schedule prefix in order");
        Grid up = decode_single(maps[i]);
        for (size_t j = 0; j < acc.v.size(); ++j) acc.v[j] += up.v[j];
    }
    return acc;
}

bool Tokenizer::calibrate_gains(const std::vector<Grid>& images) {
    if (images.size() < 32)
        throw ShapeError("calibrate_gains: need at least 32 calibration images, got " +
                         std::to_string(images.size()));
    bool identical = true;
    for (size_t i = 1; i < images.size() && identical; ++i) identical = images[i] == images[0];
    if (identical) {
        std::fprintf(stderr, "warning: degenerate all-identical calibration set; gains fall back to 1.0\n");
        cfg_.schedule.gains.assign(size_t(cfg_.schedule.levels()), 1.0f);
        return false;
    }

    const int d = cfg_.bit_depth();
    std::vector<Grid> residuals;
    residuals.reserve(images.size());
    for (const auto& img : images) residuals.push_back(patch_encode(img));

    cfg_.schedule.gains.clear();
    for (int i = 0; i < cfg_.schedule.levels(); ++i) {
        auto [h, w] = cfg_.schedule.resolutions[size_t(i)];
        double dot_sum = 0;
        int64_t count = 0;
        std::vector<Grid> codes;
        codes.reserve(residuals.size());
        for (auto& res : residuals) {
            Grid z = avg_pool(res, h, w);
            Grid code(h, w, d);
            std::vector<uint8_t> bits(static_cast<size_t>(d));
            for (int r = 0; r < h; ++r)
                for (int c = 0; c < w; ++c) {
                    bsq_quantize(z.loc(r, c), d, bits.data(), code.loc(r, c));
                    const float* zp = z.loc(r, c);
                    const float* qp = code.loc(r, c);
                    double dot = 0;
                    for (int k = 0; k < d; ++k) dot += double(zp[k]) * qp[k];
                    dot_sum += dot;
                    ++count;
                }
            codes.push_back(std::move(code));
        }
        float gain = float(dot_sum / double(count));
        if (!(gain > 1e-6f)) gain = 1e-6f;  // keep the positivity invariant on degenerate residuals
        cfg_.schedule.gains.push_back(gain);
        for (size_t n = 0; n < residuals.size(); ++n) {
            for (auto& x : codes[n].v) x *= gain;
            Grid up = bilinear_resize(codes[n], residuals[n].h, residuals[n].w);
            for (size_t j = 0; j < residuals[n].v.size(); ++j) residuals[n].v[j] -= up.v[j];
        }
    }
    return true;
}

}  // namespace vare
