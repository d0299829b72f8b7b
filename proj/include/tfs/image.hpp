// SPDX-License-Identifier: Apache-2.0
//
// 8-bit RGB images with PNG serialization.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tfs {

struct Image {
  int width = 0;
  int height = 0;
  std::vector<unsigned char> data;  // RGB, row-major

  Image() = default;
  Image(int w, int h) : width(w), height(h), data(static_cast<size_t>(w) * h * 3, 0) {}

  unsigned char& at(int x, int y, int c) {
    return data[3 * (static_cast<size_t>(y) * width + x) + static_cast<size_t>(c)];
  }
  unsigned char at(int x, int y, int c) const {
    return data[3 * (static_cast<size_t>(y) * width + x) + static_cast<size_t>(c)];
  }
};

void write_png(const Image& img, const std::string& path);
Image read_png(const std::string& path);

}  // namespace tfs
