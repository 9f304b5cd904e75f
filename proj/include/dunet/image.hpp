#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dunet/tensor.hpp"

namespace dunet {

// Interleaved 8-bit RGB image.
struct Image {
  int width = 0, height = 0;
  std::vector<uint8_t> rgb;  // size = 3 * width * height

  Image() = default;
  Image(int w, int h, uint8_t fill = 0) : width(w), height(h), rgb(3u * w * h, fill) {}

  uint8_t* px(int x, int y) { return rgb.data() + 3 * (static_cast<size_t>(y) * width + x); }
  const uint8_t* px(int x, int y) const {
    return rgb.data() + 3 * (static_cast<size_t>(y) * width + x);
  }
  bool operator==(const Image& o) const = default;
};

// Binary PPM (P6), the bit-exact on-disk format.
void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);

// Reads PPM always; PNG when built with libpng support. Dispatches on the
// file's magic bytes, not the extension.
Image read_image(const std::string& path);

// Nearest-neighbor resize.
Image resize_nearest(const Image& img, int out_w, int out_h);

// Aspect-preserving fit into a square of side `size`, gray padding.
// The returned transform maps normalized square coords back to normalized
// source coords: src = (dst - offset) / scale per axis.
struct Letterbox {
  Image image;
  double scale_x = 1, scale_y = 1, offset_x = 0, offset_y = 0;
};
Letterbox letterbox(const Image& img, int size);

// [0,255] u8 -> [0,1] double, NCHW with N=1.
Tensor image_to_tensor(const Image& img);

}  // namespace dunet
