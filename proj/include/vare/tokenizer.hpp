#pragma once

// Deterministic image <-> token codec: seeded orthonormal patch projection,
// K-level residual decomposition over a scale schedule, binary spherical
// quantization per token, per-scale gain calibration.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vare/grid.hpp"

namespace vare {

struct ScaleSchedule {
    std::vector<std::pair<int, int>> resolutions;  // strictly increasing, each divides the next
    std::vector<float> gains;                      // per scale, positive; empty until calibrated

    int levels() const { return int(resolutions.size()); }
    bool calibrated() const { return gains.size() == resolutions.size(); }
    void validate(int latent_h, int latent_w) const;

    static ScaleSchedule square(std::vector<int> sides);  // e.g. {1,2,4,8,16}
};

struct TokenizerConfig {
    int patch = 2;
    int image_h = 32, image_w = 32, channels = 3;
    uint64_t projection_seed = 1;
    ScaleSchedule schedule;

    int bit_depth() const { return patch * patch * channels; }  // d, square projection
    int latent_h() const { return image_h / patch; }
    int latent_w() const { return image_w / patch; }
    void validate() const;

    std::string to_json() const;
    static TokenizerConfig from_json(const std::string& text);
};

struct BitTokenMap {
    int scale_index = 0;  // position in the schedule
    int h = 0, w = 0, d = 0;
    std::vector<uint8_t> bits;  // h*w*d, values in {0,1}

    BitTokenMap() = default;
    BitTokenMap(int scale, int h_, int w_, int d_)
        : scale_index(scale), h(h_), w(w_), d(d_), bits(size_t(h_) * w_ * d_, 0) {}
    uint8_t* loc(int r, int c) { return bits.data() + (size_t(r) * w + c) * d; }
    const uint8_t* loc(int r, int c) const { return bits.data() + (size_t(r) * w + c) * d; }
    friend bool operator==(const BitTokenMap& a, const BitTokenMap& b) {
        return a.scale_index == b.scale_index && a.h == b.h && a.w == b.w && a.d == b.d && a.bits == b.bits;
    }
};

// q = (1/sqrt(d)) * sign(z), sign(0) := +1. Returns bits into out_bits and,
// when non-null, the codeword into out_codeword. Total function.
void bsq_quantize(const float* z, int d, uint8_t* out_bits, float* out_codeword);

// bit pattern -> codeword entry
inline float bit_to_code(uint8_t bit, int d) {
    return (bit ? 1.0f : -1.0f) / std::sqrt(float(d));
}

class Tokenizer {
public:
    explicit Tokenizer(TokenizerConfig cfg);

    const TokenizerConfig& config() const { return cfg_; }
    ScaleSchedule& schedule() { return cfg_.schedule; }
    const ScaleSchedule& schedule() const { return cfg_.schedule; }

    // Patch projection + per-location unit normalization (norm discarded).
    // Zero-norm locations map to the fixed fallback direction (+1,0,...,0).
    // When norms is non-null the discarded norms are written there
    // (test side channel, one per location).
    Grid patch_encode(const Grid& image, std::vector<float>* norms = nullptr) const;

    // Inverse projection; exact inverse of the pre-normalization features.
    // When norms is non-null each location is rescaled by its entry.
    Grid patch_decode(const Grid& features, const std::vector<float>* norms = nullptr) const;

    // Residual encode over the full schedule. Requires calibrated gains.
    std::vector<BitTokenMap> encode_multiscale(const Grid& features) const;

    // Cumulative decode of a schedule prefix (fewer maps = coarser prefix).
    // Empty prefix decodes to the zero feature map.
    Grid decode_multiscale(const std::vector<BitTokenMap>& maps) const;

    // Single-scale decode contribution g_i * upsample(codewords).
    Grid decode_single(const BitTokenMap& map) const;

    // g_i = mean <z_i, q_i> collected scale-by-scale over the set; stores the
    // gains in the config. Returns false (with gains = 1) for an
    // all-identical degenerate set.
    bool calibrate_gains(const std::vector<Grid>& images);

private:
    TokenizerConfig cfg_;
    std::vector<float> proj_;  // d x d orthonormal, row major

    Grid project(const Grid& image) const;  // raw Q x per patch (no normalization)
};

// Block average pooling; (h,w) must divide (g.h,g.w).
Grid avg_pool(const Grid& g, int h, int w);

// Bilinear resize with half-pixel centers (matches the autodiff op).
Grid bilinear_resize(const Grid& g, int h, int w);

}  // namespace vare
