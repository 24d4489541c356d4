#pragma once

// Binary PPM (P6) image io and row-major mosaics.

#include <string>
#include <vector>

#include "vare/grid.hpp"

namespace vare {

void write_ppm(const Grid& image, const std::string& path);  // clamps [0,1] -> [0,255]
Grid read_ppm(const std::string& path);

// Row-major mosaic of equally sized images.
Grid make_mosaic(const std::vector<Grid>& images, int cols);

}  // namespace vare
