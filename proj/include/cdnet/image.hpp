#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "cdnet/errors.hpp"

namespace cdnet {

/// 8-bit interleaved RGB raster, row-major.
class Image {
 public:
  Image() = default;
  Image(std::size_t height, std::size_t width, std::uint8_t fill = 255)
      : height_(height), width_(width), pixels_(height * width * 3, fill) {}

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  bool empty() const { return pixels_.empty(); }

  std::uint8_t& at(std::size_t r, std::size_t c, std::size_t ch) { return pixels_[(r * width_ + c) * 3 + ch]; }
  std::uint8_t at(std::size_t r, std::size_t c, std::size_t ch) const { return pixels_[(r * width_ + c) * 3 + ch]; }

  std::vector<std::uint8_t>& pixels() { return pixels_; }
  const std::vector<std::uint8_t>& pixels() const { return pixels_; }

  bool operator==(const Image&) const = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<std::uint8_t> pixels_;
};

/// Mean over factor x factor blocks, rounded half up. Dimensions must be divisible.
inline Image box_downsample(const Image& img, std::size_t factor) {
  if (factor == 0 || img.height() % factor || img.width() % factor) {
    throw DimensionError("box_downsample: " + std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                         " not divisible by " + std::to_string(factor));
  }
  Image out(img.height() / factor, img.width() / factor);
  const std::size_t area = factor * factor;
  for (std::size_t r = 0; r < out.height(); ++r)
    for (std::size_t c = 0; c < out.width(); ++c)
      for (std::size_t ch = 0; ch < 3; ++ch) {
        std::size_t sum = 0;
        for (std::size_t dr = 0; dr < factor; ++dr)
          for (std::size_t dc = 0; dc < factor; ++dc) sum += img.at(r * factor + dr, c * factor + dc, ch);
        out.at(r, c, ch) = static_cast<std::uint8_t>((2 * sum + area) / (2 * area));
      }
  return out;
}

inline Image crop(const Image& img, std::size_t row, std::size_t col, std::size_t h, std::size_t w) {
  if (row + h > img.height() || col + w > img.width()) {
    throw RangeError("crop: region exceeds image bounds");
  }
  Image out(h, w);
  for (std::size_t r = 0; r < h; ++r)
    std::copy_n(img.pixels().begin() + ((row + r) * img.width() + col) * 3, w * 3, out.pixels().begin() + r * w * 3);
  return out;
}

/// Extends to the next multiple of `multiple` on both axes, filling with white.
inline Image pad_to_multiple(const Image& img, std::size_t multiple) {
  const std::size_t h = (img.height() + multiple - 1) / multiple * multiple;
  const std::size_t w = (img.width() + multiple - 1) / multiple * multiple;
  if (h == img.height() && w == img.width()) return img;
  Image out(h, w, 255);
  for (std::size_t r = 0; r < img.height(); ++r)
    std::copy_n(img.pixels().begin() + r * img.width() * 3, img.width() * 3, out.pixels().begin() + r * w * 3);
  return out;
}

inline Image flip_horizontal(const Image& img) {
  Image out(img.height(), img.width());
  for (std::size_t r = 0; r < img.height(); ++r)
    for (std::size_t c = 0; c < img.width(); ++c)
      for (std::size_t ch = 0; ch < 3; ++ch) out.at(r, img.width() - 1 - c, ch) = img.at(r, c, ch);
  return out;
}

// ---------------------------------------------------------------------------
// Netpbm IO

namespace detail {

inline std::size_t read_pnm_int(std::istream& in) {
  char ch = 0;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (!std::isspace(static_cast<unsigned char>(ch))) {
      break;
    }
  }
  std::string digits(1, ch);
  while (in.get(ch) && std::isdigit(static_cast<unsigned char>(ch))) digits += ch;
  try {
    return std::stoul(digits);
  } catch (const std::logic_error&) {
    throw IoError("malformed netpbm header");
  }
}

inline void write_pnm(const std::string& path, const char* magic, std::size_t h, std::size_t w,
                      const std::vector<std::uint8_t>& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << magic << '\n' << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace detail

/// Binary P6, maxval 255.
inline void write_ppm(const std::string& path, const Image& img) {
  detail::write_pnm(path, "P6", img.height(), img.width(), img.pixels());
}

inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  if (magic != "P6") throw IoError(path + ": not a binary PPM (P6)");
  const auto w = detail::read_pnm_int(in);
  const auto h = detail::read_pnm_int(in);
  const auto maxval = detail::read_pnm_int(in);
  if (maxval != 255 || w == 0 || h == 0) throw IoError(path + ": unsupported PPM header");
  Image img(h, w);
  in.read(reinterpret_cast<char*>(img.pixels().data()), static_cast<std::streamsize>(img.pixels().size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels().size())) throw IoError(path + ": truncated pixel data");
  return img;
}

/// Binary P5 grayscale, maxval 255.
inline void write_pgm(const std::string& path, std::size_t height, std::size_t width,
                      const std::vector<std::uint8_t>& gray) {
  if (gray.size() != height * width) throw DimensionError("write_pgm: buffer size mismatch");
  detail::write_pnm(path, "P5", height, width, gray);
}

struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;
};

inline GrayImage read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  if (magic != "P5") throw IoError(path + ": not a binary PGM (P5)");
  GrayImage g;
  g.width = detail::read_pnm_int(in);
  g.height = detail::read_pnm_int(in);
  if (detail::read_pnm_int(in) != 255) throw IoError(path + ": unsupported maxval");
  g.pixels.resize(g.width * g.height);
  in.read(reinterpret_cast<char*>(g.pixels.data()), static_cast<std::streamsize>(g.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(g.pixels.size())) throw IoError(path + ": truncated pixel data");
  return g;
}

}  // namespace cdnet
