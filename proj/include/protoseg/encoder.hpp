#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>

#include "protoseg/binary_io.hpp"
#include "protoseg/image.hpp"
#include "protoseg/rng.hpp"
#include "protoseg/tape.hpp"

namespace protoseg {

// D x (H*W) channel-major feature matrix on a tape plus its spatial extents.
// Column p is the feature vector of pixel (p / width, p % width).
struct FeatureMap {
  Var values;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t channels() const { return values.value().rows(); }
  std::size_t pixels() const { return height * width; }
};

inline FeatureMap feature_constant(Tape& tape, const Tensor& dhw) {
  if (dhw.rank() != 3) throw std::invalid_argument("feature tensor must be D x H x W");
  return {tape.constant(dhw.reshaped({dhw.dim(0), dhw.dim(1) * dhw.dim(2)})), dhw.dim(1), dhw.dim(2)};
}

inline Tensor feature_tensor(const FeatureMap& f) {
  return f.values.value().reshaped({f.channels(), f.height, f.width});
}

// Spatial reduction of the encoder stack.
inline constexpr std::size_t kEncoderStride = 4;

struct EncoderConfig {
  std::size_t channels = 32;
  std::uint64_t seed = 7;
};

namespace encoder_names {
inline const std::string kConv[3] = {"encoder.conv1", "encoder.conv2", "encoder.conv3"};
}

// Three 3x3 convolutions 1 -> 16 -> 32 -> D, uniform init in +-sqrt(1/fan_in).
inline void init_encoder(ParamStore& store, const EncoderConfig& cfg) {
  if (cfg.channels < 2) throw std::invalid_argument("encoder needs at least 2 output channels");
  const std::size_t widths[4] = {1, 16, 32, cfg.channels};
  Rng rng = Rng::derive(cfg.seed, 0xE4C0);
  for (int l = 0; l < 3; ++l) {
    const std::size_t c_in = widths[l], c_out = widths[l + 1];
    const double bound = std::sqrt(1.0 / static_cast<double>(c_in * 9));
    Tensor w({c_out, c_in, 3, 3});
    for (double& v : w.values()) v = rng.uniform(-bound, bound);
    Tensor b({c_out});
    for (double& v : b.values()) v = rng.uniform(-bound, bound);
    store.set(encoder_names::kConv[l] + ".weight", std::move(w));
    store.set(encoder_names::kConv[l] + ".bias", std::move(b));
  }
}

inline void check_encodable(std::size_t height, std::size_t width) {
  if (height == 0 || width == 0 || height % kEncoderStride || width % kEncoderStride)
    throw std::invalid_argument("image extents " + std::to_string(height) + "x" + std::to_string(width) +
                                " must be positive multiples of " + std::to_string(kEncoderStride));
}

// Rectifier patterns of one encoder pass, replayable like other
// non-differentiable decisions.
struct EncoderGates {
  bool recorded = false;
  std::vector<char> layer1;
  std::vector<char> layer2;
};

inline FeatureMap encode(Tape& tape, const Image& img, const ParamStore& params, bool trainable = true,
                         EncoderGates* gates = nullptr) {
  check_encodable(img.height(), img.width());
  Var x = tape.constant(img.pixels().reshaped({1, img.height(), img.width()}));
  auto layer = [&](const Var& in, int l, std::size_t stride) {
    return conv2d(in, tape.parameter(params, encoder_names::kConv[l] + ".weight", trainable),
                  tape.parameter(params, encoder_names::kConv[l] + ".bias", trainable), {stride, 1});
  };
  const bool replay = gates && gates->recorded;
  Var h = relu(layer(x, 0, 2), gates ? &gates->layer1 : nullptr, replay);
  h = relu(layer(h, 1, 2), gates ? &gates->layer2 : nullptr, replay);
  h = layer(h, 2, 1);
  if (gates) gates->recorded = true;
  const std::size_t d = h.value().dim(0), fh = h.value().dim(1), fw = h.value().dim(2);
  return {reshape(h, {d, fh * fw}), fh, fw};
}

// DSPF feature files: "DSPF", u32 LE D, H, W, then D*H*W f64 LE values,
// channel-major then row-major.
class FeatureFileError : public std::runtime_error {
 public:
  enum class Code { Io, BadMagic, Truncated, NonFinite, BadShape };
  FeatureFileError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

inline void save_features(const std::string& path, const Tensor& dhw) {
  if (dhw.rank() != 3) throw std::invalid_argument("save_features expects a D x H x W tensor");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FeatureFileError(FeatureFileError::Code::Io, "cannot write " + path);
  out.write("DSPF", 4);
  for (std::size_t a = 0; a < 3; ++a) detail::put_u32(out, static_cast<std::uint32_t>(dhw.dim(a)));
  for (double v : dhw.values()) detail::put_f64(out, v);
  if (!out) throw FeatureFileError(FeatureFileError::Code::Io, "failed writing " + path);
}

inline Tensor load_features(const std::string& path) {
  using Code = FeatureFileError::Code;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FeatureFileError(Code::Io, "cannot open " + path);
  char magic[4] = {};
  if (!in.read(magic, 4) || std::string(magic, 4) != "DSPF")
    throw FeatureFileError(Code::BadMagic, path + ": missing DSPF magic");
  std::uint32_t ext[3];
  for (auto& e : ext)
    if (!detail::get_u32(in, e)) throw FeatureFileError(Code::Truncated, path + ": truncated header");
  if (ext[0] == 0 || ext[1] == 0 || ext[2] == 0)
    throw FeatureFileError(Code::BadShape, path + ": zero extent in header");
  const std::size_t n = std::size_t{ext[0]} * ext[1] * ext[2];
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!detail::get_f64(in, data[i]))
      throw FeatureFileError(Code::Truncated, path + ": expected " + std::to_string(n) + " values, found " + std::to_string(i));
    if (!std::isfinite(data[i])) throw FeatureFileError(Code::NonFinite, path + ": non-finite value at index " + std::to_string(i));
  }
  return Tensor({ext[0], ext[1], ext[2]}, std::move(data));
}

}  // namespace protoseg
