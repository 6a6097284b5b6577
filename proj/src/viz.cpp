#include "hvqa/viz.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <string>

#include "hvqa/errors.hpp"

namespace hvqa {

Array<float> darken_unselected(const Array<float>& image, const std::vector<std::size_t>& selected,
                               std::size_t grid_w, std::size_t grid_h, std::size_t cell_stride, float factor) {
  if (image.rank() != 3) throw ShapeError("darken: expected [H,W,C], got " + shape_str(image.shape()));
  const std::size_t height = image.dim(0), width = image.dim(1), channels = image.dim(2);
  std::vector<bool> keep(grid_w * grid_h, false);
  for (auto c : selected) {
    if (c >= keep.size()) throw ArgumentError("darken: cell " + std::to_string(c) + " outside the grid");
    keep[c] = true;
  }
  Array<float> out = image;
  for (std::size_t cell = 0; cell < keep.size(); ++cell) {
    if (keep[cell]) continue;
    const std::size_t r0 = (cell / grid_w) * cell_stride, c0 = (cell % grid_w) * cell_stride;
    for (std::size_t r = r0; r < std::min(height, r0 + cell_stride); ++r)
      for (std::size_t c = c0; c < std::min(width, c0 + cell_stride); ++c)
        for (std::size_t ch = 0; ch < channels; ++ch) out[(r * width + c) * channels + ch] *= factor;
  }
  return out;
}

std::vector<std::uint8_t> encode_ppm(const Array<float>& image) {
  if (image.rank() != 3 || image.dim(2) != 3) throw ShapeError("ppm: expected [H,W,3], got " + shape_str(image.shape()));
  const std::string header = "P6 " + std::to_string(image.dim(1)) + " " + std::to_string(image.dim(0)) + " 255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + image.size());
  for (float v : image.data())
    out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  return out;
}

PpmImage decode_ppm(const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) ++pos;
    if (start == pos) throw FormatError("ppm: truncated header", start);
    return std::string(bytes.begin() + static_cast<std::ptrdiff_t>(start), bytes.begin() + static_cast<std::ptrdiff_t>(pos));
  };
  if (token() != "P6") throw FormatError("ppm: missing P6 magic", 0);
  PpmImage img;
  try {
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    if (token() != "255") throw FormatError("ppm: maxval must be 255", pos);
  } catch (const std::logic_error&) {
    throw FormatError("ppm: malformed header", pos);
  }
  ++pos;  // single whitespace byte before the raster
  const std::size_t expected = img.width * img.height * 3;
  if (bytes.size() < pos || bytes.size() - pos != expected)
    throw FormatError("ppm: raster holds " + std::to_string(bytes.size() > pos ? bytes.size() - pos : 0) +
                          " bytes, header implies " + std::to_string(expected),
                      pos);
  img.rgb.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return img;
}

}  // namespace hvqa
