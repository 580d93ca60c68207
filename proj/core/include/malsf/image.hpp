#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace malsf {

// 8-bit RGB image, row-major, channels interleaved. The model consumes
// values scaled to [0,1] by /255.
struct Image {
  int h = 0, w = 0;
  std::vector<uint8_t> rgb;  // h*w*3 bytes

  static Image filled(int h, int w, uint8_t r, uint8_t g, uint8_t b);
  uint8_t& at(int y, int x, int c) { return rgb[(static_cast<size_t>(y) * w + x) * 3 + c]; }
  uint8_t at(int y, int x, int c) const { return rgb[(static_cast<size_t>(y) * w + x) * 3 + c]; }
  bool operator==(const Image&) const = default;
};

// Binary pixel mask aligned with an Image.
struct MaskBitmap {
  int h = 0, w = 0;
  std::vector<uint8_t> bits;  // h*w entries in {0,1}

  static MaskBitmap zeros(int h, int w);
  uint8_t& at(int y, int x) { return bits[static_cast<size_t>(y) * w + x]; }
  uint8_t at(int y, int x) const { return bits[static_cast<size_t>(y) * w + x]; }
  int popcount() const;
  bool operator==(const MaskBitmap&) const = default;
};

// Tight pixel bounding box of the set pixels, normalized to [0,1] as
// (x1, y1, x2, y2) with exclusive lower-right pixel edges. All-zero mask
// yields the all-zero box.
std::array<double, 4> mask_bbox_normalized(const MaskBitmap& m);

}  // namespace malsf
