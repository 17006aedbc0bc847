#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pabn/tensor.hpp"

namespace pabn {

// Interleaved 8-bit RGB raster.
struct Image {
    int w = 0;
    int h = 0;
    std::vector<std::uint8_t> rgb;
};

// Binary PPM (P6), maxval 255 only. Header comments are tolerated.
// Malformed header, wrong maxval or short payload throw DataError
// naming the path.
Image read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Image& img);

// Header-only probe: (width, height). Also verifies the file is large
// enough to hold the payload, so truncation surfaces at indexing time.
std::pair<int, int> read_ppm_header(const std::string& path);

// One plane, align-corners=false: src coordinate (dst+0.5)*scale-0.5,
// clamped. Interpolation in lerp form, so constants and identity
// resizes are exact.
void resize_bilinear_plane(const float* src, int sw, int sh, float* dst, int dw, int dh);

// [3, out_size, out_size] in [0,1].
TensorPtr<float> decode_to_tensor(const Image& img, int out_size);

}  // namespace pabn
