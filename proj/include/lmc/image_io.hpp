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

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <png.h>

#include "lmc/error.hpp"
#include "lmc/image.hpp"

namespace lmc::io {

namespace fs = std::filesystem;

inline std::string lower_extension(const fs::path &path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext;
}

inline bool is_image_path(const fs::path &path) {
  const std::string ext = lower_extension(path);
  return ext == ".png" || ext == ".ppm";
}

// ---------------------------------------------------------------- PPM (P6)

namespace detail {

inline void skip_ppm_whitespace(std::istream &in) {
  while (true) {
    const int c = in.peek();
    if (c == '#') {
      std::string comment;
      std::getline(in, comment);
    } else if (c != EOF && std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

inline int read_ppm_int(std::istream &in, const fs::path &path) {
  skip_ppm_whitespace(in);
  int v = -1;
  in >> v;
  require(static_cast<bool>(in) && v >= 0, ErrorCode::Format,
          "malformed PPM header in " + path.string());
  return v;
}

} // namespace detail

inline RgbPatch read_ppm(const fs::path &path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + path.string());
  char magic[2] = {};
  in.read(magic, 2);
  require(in && magic[0] == 'P' && magic[1] == '6', ErrorCode::Format,
          "not a binary PPM (P6): " + path.string());
  const int w = detail::read_ppm_int(in, path);
  const int h = detail::read_ppm_int(in, path);
  const int maxval = detail::read_ppm_int(in, path);
  require(maxval == 255, ErrorCode::Format, "only 8-bit PPM supported: " + path.string());
  require(w > 0 && h > 0, ErrorCode::Format, "empty PPM image: " + path.string());
  in.get(); // single whitespace byte after maxval
  std::vector<std::uint8_t> data(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char *>(data.data()), static_cast<std::streamsize>(data.size()));
  require(in.gcount() == static_cast<std::streamsize>(data.size()), ErrorCode::Format,
          "truncated PPM pixel data: " + path.string());
  return RgbPatch(w, h, std::move(data));
}

inline void write_ppm(const fs::path &path, const RgbPatch &patch) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  out << "P6\n" << patch.width() << ' ' << patch.height() << "\n255\n";
  out.write(reinterpret_cast<const char *>(patch.data().data()),
            static_cast<std::streamsize>(patch.data().size()));
  require(static_cast<bool>(out), ErrorCode::Io, "write failed: " + path.string());
}

// ---------------------------------------------------------------- PNG

namespace detail {

struct FileCloser {
  void operator()(std::FILE *f) const noexcept {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

} // namespace detail

inline RgbPatch read_png(const fs::path &path) {
  detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  require(fp != nullptr, ErrorCode::Io, "cannot open " + path.string());

  png_byte sig[8];
  require(std::fread(sig, 1, 8, fp.get()) == 8 && png_sig_cmp(sig, 0, 8) == 0, ErrorCode::Format,
          "not a PNG file: " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(png != nullptr, ErrorCode::Io, "png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw Error(ErrorCode::Io, "png_create_info_struct failed");
  }

  // Declared ahead of setjmp so a longjmp never skips their construction.
  std::vector<std::uint8_t> data;
  std::vector<png_bytep> rows;
  int width = 0;
  int height = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCode::Format, "corrupt PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);

  // Normalize everything to 8-bit RGB.
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  const std::size_t rowbytes = png_get_rowbytes(png, info);
  if (rowbytes != static_cast<std::size_t>(width) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCode::Format, "unsupported PNG layout: " + path.string());
  }
  data.resize(rowbytes * height);
  rows.resize(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) rows[y] = data.data() + static_cast<std::size_t>(y) * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return RgbPatch(width, height, std::move(data));
}

inline void write_png(const fs::path &path, const RgbPatch &patch) {
  detail::FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  require(fp != nullptr, ErrorCode::Io, "cannot write " + path.string());

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(png != nullptr, ErrorCode::Io, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_write_struct(&png, nullptr);
    throw Error(ErrorCode::Io, "png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorCode::Io, "PNG encoding failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(patch.width()),
               static_cast<png_uint_32>(patch.height()), 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t rowbytes = static_cast<std::size_t>(patch.width()) * 3;
  for (int y = 0; y < patch.height(); ++y)
    png_write_row(png, const_cast<png_bytep>(patch.data().data() + static_cast<std::size_t>(y) * rowbytes));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// ---------------------------------------------------------------- dispatch

inline RgbPatch read_image(const fs::path &path) {
  const std::string ext = lower_extension(path);
  if (ext == ".png") return read_png(path);
  if (ext == ".ppm") return read_ppm(path);
  throw Error(ErrorCode::Format, "unsupported image extension: " + path.string());
}

inline void write_image(const fs::path &path, const RgbPatch &patch) {
  const std::string ext = lower_extension(path);
  if (ext == ".png") return write_png(path, patch);
  if (ext == ".ppm") return write_ppm(path, patch);
  throw Error(ErrorCode::Format, "unsupported image extension: " + path.string());
}

} // namespace lmc::io
