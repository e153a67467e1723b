#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "protoseg/tensor.hpp"

namespace protoseg {

// Single-channel gray image, values in [0, 1], stored H x W.
class Image {
 public:
  Image() = default;
  Image(std::size_t height, std::size_t width, double fill = 0.0) : pixels_({height, width}, fill) {}
  explicit Image(Tensor pixels) : pixels_(std::move(pixels)) {
    if (pixels_.rank() != 2) throw std::invalid_argument("image must be H x W");
  }

  std::size_t height() const { return pixels_.rows(); }
  std::size_t width() const { return pixels_.cols(); }
  double& at(std::size_t y, std::size_t x) { return pixels_.at(y, x); }
  double at(std::size_t y, std::size_t x) const { return pixels_.at(y, x); }
  const Tensor& pixels() const { return pixels_; }
  bool operator==(const Image&) const = default;

 private:
  Tensor pixels_;
};

// H x W weights in [0, 1]; binary at image scale, fractional after pooling.
class Mask {
 public:
  Mask() = default;
  Mask(std::size_t height, std::size_t width, double fill = 0.0) : values_({height, width}, fill) {}
  explicit Mask(Tensor values) : values_(std::move(values)) {
    if (values_.rank() != 2) throw std::invalid_argument("mask must be H x W");
  }

  std::size_t height() const { return values_.rows(); }
  std::size_t width() const { return values_.cols(); }
  std::size_t size() const { return values_.size(); }
  double& at(std::size_t y, std::size_t x) { return values_.at(y, x); }
  double at(std::size_t y, std::size_t x) const { return values_.at(y, x); }
  double operator[](std::size_t i) const { return values_[i]; }
  const Tensor& values() const { return values_; }

  double total() const {
    double s = 0.0;
    for (double v : values_.values()) s += v;
    return s;
  }
  std::size_t count_positive() const {
    std::size_t n = 0;
    for (double v : values_.values()) n += v > 0.0;
    return n;
  }
  bool operator==(const Mask&) const = default;

 private:
  Tensor values_;
};

// Area-average a mask down by an integer factor per axis.
inline Mask downsample_mask(const Mask& m, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0 || m.height() % out_h || m.width() % out_w)
    throw std::invalid_argument("downsample_mask: " + std::to_string(m.height()) + "x" + std::to_string(m.width()) +
                                " is not an integer multiple of " + std::to_string(out_h) + "x" + std::to_string(out_w));
  const std::size_t fy = m.height() / out_h, fx = m.width() / out_w;
  Mask out(out_h, out_w);
  const double inv = 1.0 / static_cast<double>(fy * fx);
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x) {
      double s = 0.0;
      for (std::size_t dy = 0; dy < fy; ++dy)
        for (std::size_t dx = 0; dx < fx; ++dx) s += m.at(y * fy + dy, x * fx + dx);
      out.at(y, x) = s * inv;
    }
  return out;
}

// Half-pixel-centred linear interpolation weights, out_len x in_len. Rows sum to 1.
inline Tensor linear_upsample_matrix(std::size_t in_len, std::size_t out_len) {
  Tensor u({out_len, in_len}, 0.0);
  const double ratio = static_cast<double>(in_len) / static_cast<double>(out_len);
  for (std::size_t o = 0; o < out_len; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in_len - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in_len - 1);
    const double frac = src - static_cast<double>(i0);
    u.at(o, i0) += 1.0 - frac;
    u.at(o, i1) += frac;
  }
  return u;
}

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string pgm_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

}  // namespace detail

// Binary PGM (P5), 8- or 16-bit. Returns samples scaled to [0, 1].
inline Tensor read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  if (detail::pgm_token(in) != "P5") throw FormatError(path + ": not a binary PGM (P5)");
  std::size_t w = 0, h = 0;
  unsigned maxval = 0;
  try {
    w = std::stoul(detail::pgm_token(in));
    h = std::stoul(detail::pgm_token(in));
    maxval = static_cast<unsigned>(std::stoul(detail::pgm_token(in)));
  } catch (const std::logic_error&) {
    throw FormatError(path + ": malformed PGM header");
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw FormatError(path + ": bad PGM header values");
  const std::size_t bytes = maxval < 256 ? 1 : 2;
  std::vector<unsigned char> raw(w * h * bytes);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw FormatError(path + ": truncated PGM payload");
  Tensor out({h, w});
  for (std::size_t i = 0; i < w * h; ++i) {
    const unsigned v = bytes == 1 ? raw[i] : (static_cast<unsigned>(raw[2 * i]) << 8) | raw[2 * i + 1];
    out[i] = static_cast<double>(v) / maxval;
  }
  return out;
}

inline void write_pgm(const std::string& path, const Tensor& values) {
  if (values.rank() != 2) throw std::invalid_argument("write_pgm expects an H x W tensor");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "P5\n" << values.cols() << ' ' << values.rows() << "\n255\n";
  for (double v : values.values()) {
    const auto b = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    out.put(static_cast<char>(b));
  }
  if (!out) throw std::runtime_error("failed writing " + path);
}

inline Image read_image(const std::string& path) { return Image(read_pgm(path)); }

// Samples above half scale are foreground.
inline Mask read_mask(const std::string& path) {
  Tensor t = read_pgm(path);
  for (double& v : t.values()) v = v > 0.5 ? 1.0 : 0.0;
  return Mask(std::move(t));
}

inline void write_image(const std::string& path, const Image& img) { write_pgm(path, img.pixels()); }
inline void write_mask(const std::string& path, const Mask& m) { write_pgm(path, m.values()); }

}  // namespace protoseg
