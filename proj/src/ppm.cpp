#include "vare/ppm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace vare {

void write_ppm(const Grid& image, const std::string& path) {
    if (image.c != 3) throw IoError("write_ppm: expected 3 channels for " + path);
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw IoError("write_ppm: cannot open " + path);
    std::fprintf(f, "P6\n%d %d\n255\n", image.w, image.h);
    std::vector<unsigned char> row(size_t(image.w) * 3);
    for (int y = 0; y < image.h; ++y) {
        for (int x = 0; x < image.w; ++x)
            for (int k = 0; k < 3; ++k) {
                const float v = std::clamp(image.at(y, x, k), 0.f, 1.f);
                row[size_t(x) * 3 + size_t(k)] = (unsigned char)std::lround(v * 255.f);
            }
        if (std::fwrite(row.data(), 1, row.size(), f) != row.size()) {
            std::fclose(f);
            throw IoError("write_ppm: short write to " + path);
        }
    }
    std::fclose(f);
}

Grid read_ppm(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw IoError("read_ppm: cannot open " + path);
    char magic[3] = {};
    int w = 0, h = 0, maxval = 0;
    if (std::fscanf(f, "%2s %d %d %d", magic, &w, &h, &maxval) != 4 || std::string(magic) != "P6" ||
        maxval != 255 || w <= 0 || h <= 0) {
        std::fclose(f);
        throw IoError("read_ppm: not a P6/255 file: " + path);
    }
    std::fgetc(f);  // single whitespace after header
    Grid img(h, w, 3);
    std::vector<unsigned char> row(size_t(w) * 3);
    for (int y = 0; y < h; ++y) {
        if (std::fread(row.data(), 1, row.size(), f) != row.size()) {
            std::fclose(f);
            throw IoError("read_ppm: truncated pixel data in " + path);
        }
        for (int x = 0; x < w; ++x)
            for (int k = 0; k < 3; ++k) img.at(y, x, k) = float(row[size_t(x) * 3 + size_t(k)]) / 255.f;
    }
    std::fclose(f);
    return img;
}

Grid make_mosaic(const std::vector<Grid>& images, int cols) {
    if (images.empty()) throw ShapeError("make_mosaic: no images");
    if (cols < 1) throw ShapeError("make_mosaic: cols must be >= 1");
    const int h = images[0].h, w = images[0].w, c = images[0].c;
    for (const auto& im : images)
        if (!im.same_shape(images[0]))
            throw ShapeError("make_mosaic: images must share one size");
    const int rows = (int(images.size()) + cols - 1) / cols;
    Grid out(rows * h, cols * w, c);
    for (size_t i = 0; i < images.size(); ++i) {
        const int r0 = (int(i) / cols) * h;
        const int c0 = (int(i) % cols) * w;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int k = 0; k < c; ++k) out.at(r0 + y, c0 + x, k) = images[i].at(y, x, k);
    }
    return out;
}

}  // namespace vare
