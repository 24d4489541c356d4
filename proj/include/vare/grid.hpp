#pragma once

// Plain dense [H,W,C] float grid for images, feature maps and codeword
// fields. No autodiff; the model boundary converts to Array as needed.

#include <cstdint>
#include <vector>

#include "vare/common.hpp"

namespace vare {

struct Grid {
    int h = 0, w = 0, c = 0;
    std::vector<float> v;

    Grid() = default;
    Grid(int h_, int w_, int c_, float fill = 0.f)
        : h(h_), w(w_), c(c_), v(size_t(h_) * w_ * c_, fill) {}

    float& at(int r, int col, int k) { return v[(size_t(r) * w + col) * c + k]; }
    float at(int r, int col, int k) const { return v[(size_t(r) * w + col) * c + k]; }
    const float* loc(int r, int col) const { return v.data() + (size_t(r) * w + col) * c; }
    float* loc(int r, int col) { return v.data() + (size_t(r) * w + col) * c; }
    int64_t size() const { return int64_t(v.size()); }

    bool same_shape(const Grid& o) const { return h == o.h && w == o.w && c == o.c; }
    friend bool operator==(const Grid& a, const Grid& b) {
        return a.h == b.h && a.w == b.w && a.c == b.c && a.v == b.v;
    }
};

// Content hash for manifests (FNV-1a over raw bytes).
uint64_t grid_hash(const Grid& g);

}  // namespace vare
