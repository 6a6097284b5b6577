#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "hvqa/tensor.hpp"

namespace hvqa {

inline constexpr float kDarkenFactor = 0.3f;

/// Multiplies the pixels of every grid cell not in `selected` by `factor`.
/// Cell c covers rows [r*s, (r+1)*s) and columns [q*s, (q+1)*s) with r = c / grid_w, q = c % grid_w.
Array<float> darken_unselected(const Array<float>& image, const std::vector<std::size_t>& selected,
                               std::size_t grid_w, std::size_t grid_h, std::size_t cell_stride,
                               float factor = kDarkenFactor);

/// Binary PPM (P6, maxval 255) of an [H,W,3] image in [0,1].
std::vector<std::uint8_t> encode_ppm(const Array<float>& image);

struct PpmImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;
};

/// Parses the P6 files written by encode_ppm; FormatError otherwise.
PpmImage decode_ppm(const std::vector<std::uint8_t>& bytes);

}  // namespace hvqa
