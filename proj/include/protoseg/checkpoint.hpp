#pragma once

#include <cmath>
#include <fstream>
#include <string>

#include "protoseg/binary_io.hpp"
#include "protoseg/tape.hpp"

namespace protoseg {

// Parameter checkpoints: "DSPC", u32 version, u32 entry count, then per
// entry u32 name length, name bytes, u32 rank, u32 extents, f64 values.
// All integers and floats little-endian; entries in name order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void save_checkpoint(const std::string& path, const ParamStore& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path);
  out.write("DSPC", 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params.all()) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(e));
    for (double v : t.values()) detail::put_f64(out, v);
  }
  if (!out) throw CheckpointError("failed writing " + path);
}

inline ParamStore load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path);
  char magic[4] = {};
  if (!in.read(magic, 4) || std::string(magic, 4) != "DSPC") throw CheckpointError(path + ": missing DSPC magic");
  std::uint32_t version = 0, count = 0;
  if (!detail::get_u32(in, version) || !detail::get_u32(in, count)) throw CheckpointError(path + ": truncated header");
  if (version != kCheckpointVersion)
    throw CheckpointError(path + ": unsupported checkpoint version " + std::to_string(version));
  ParamStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t len = 0, rank = 0;
    if (!detail::get_u32(in, len) || len == 0 || len > 4096) throw CheckpointError(path + ": bad entry name");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw CheckpointError(path + ": truncated entry name");
    if (!detail::get_u32(in, rank) || rank == 0 || rank > 8) throw CheckpointError(path + ": bad rank for " + name);
    Shape shape(rank);
    for (auto& e : shape) {
      std::uint32_t v = 0;
      if (!detail::get_u32(in, v) || v == 0) throw CheckpointError(path + ": bad extent for " + name);
      e = v;
    }
    std::vector<double> data(shape_size(shape));
    for (double& v : data) {
      if (!detail::get_f64(in, v)) throw CheckpointError(path + ": truncated values for " + name);
      if (!std::isfinite(v)) throw CheckpointError(path + ": non-finite value in " + name);
    }
    store.set(name, Tensor(std::move(shape), std::move(data)));
  }
  return store;
}

}  // namespace protoseg
