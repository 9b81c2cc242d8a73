/*=========================================================================
 *
 *  Copyright The LMC Authors
 *
 *  Licensed under the Apache License, Version 2.0 (the "License");
 *  you may not use this file except in compliance with the License.
 *  You may obtain a copy of the License at
 *
 *         http://www.apache.org/licenses/LICENSE-2.0.txt
 *
 *  Unless required by applicable law or agreed to in writing, software
 *  distributed under the License is distributed on an "AS IS" BASIS,
 *  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 *  See the License for the specific language governing permissions and
 *  limitations under the License.
 *
 *=========================================================================*/

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lmc/error.hpp"

namespace lmc {

/// 8-bit interleaved RGB image patch, row-major.
class RgbPatch {
public:
  RgbPatch() = default;

  RgbPatch(int width, int height, std::uint8_t fill = 255)
      : width_(width), height_(height) {
    require(width > 0 && height > 0, ErrorCode::InvalidArgument,
            "patch dimensions must be positive, got " + std::to_string(width) + "x" +
                std::to_string(height));
    data_.assign(static_cast<std::size_t>(width) * height * 3, fill);
  }

  RgbPatch(int width, int height, std::vector<std::uint8_t> data)
      : width_(width), height_(height), data_(std::move(data)) {
    require(width > 0 && height > 0, ErrorCode::InvalidArgument,
            "patch dimensions must be positive");
    require(data_.size() == static_cast<std::size_t>(width) * height * 3,
            ErrorCode::ShapeMismatch, "pixel buffer length does not match 3*width*height");
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  std::size_t pixel_count() const noexcept {
    return static_cast<std::size_t>(width_) * static_cast<std::size_t>(height_);
  }
  bool empty() const noexcept { return data_.empty(); }

  std::uint8_t &at(std::size_t pixel, int channel) { return data_[pixel * 3 + channel]; }
  std::uint8_t at(std::size_t pixel, int channel) const { return data_[pixel * 3 + channel]; }
  std::uint8_t &at(int x, int y, int channel) {
    return at(static_cast<std::size_t>(y) * width_ + x, channel);
  }
  std::uint8_t at(int x, int y, int channel) const {
    return at(static_cast<std::size_t>(y) * width_ + x, channel);
  }

  const std::vector<std::uint8_t> &data() const noexcept { return data_; }
  std::vector<std::uint8_t> &data() noexcept { return data_; }

  bool same_shape(const RgbPatch &other) const noexcept {
    return width_ == other.width_ && height_ == other.height_;
  }

  friend bool operator==(const RgbPatch &, const RgbPatch &) = default;

private:
  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> data_;
};

using OdMatrix = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

/// Optical-density image: one row of three nonnegative densities per pixel.
struct OdPatch {
  int width = 0;
  int height = 0;
  OdMatrix od;
  double background_intensity = 255.0;

  std::size_t pixel_count() const noexcept { return static_cast<std::size_t>(od.rows()); }
};

/// Mean absolute per-channel difference of two equally sized patches, in
/// units of intensity levels (divide by 255 for a [0,1] scale).
inline double mean_abs_error(const RgbPatch &a, const RgbPatch &b) {
  require(a.same_shape(b), ErrorCode::ShapeMismatch, "mean_abs_error: patch shapes differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i)
    acc += std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]));
  return acc / static_cast<double>(a.data().size());
}

/// Fraction of pixels whose RGB triple differs.
inline double fraction_pixels_differing(const RgbPatch &a, const RgbPatch &b) {
  require(a.same_shape(b), ErrorCode::ShapeMismatch, "patch shapes differ");
  std::size_t differing = 0;
  for (std::size_t p = 0; p < a.pixel_count(); ++p)
    for (int c = 0; c < 3; ++c)
      if (a.at(p, c) != b.at(p, c)) {
        ++differing;
        break;
      }
  return static_cast<double>(differing) / static_cast<double>(a.pixel_count());
}

} // namespace lmc
