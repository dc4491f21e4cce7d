#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mixsize/data.hpp"
#include "mixsize/error.hpp"
#include "mixsize/model.hpp"

// Binary checkpoint; the byte layout is described in docs/checkpoint_format.md.
namespace mixsize {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'M', 'I', 'X', 'S', 'Z', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using Metadata = std::map<std::string, std::string>;

template <class T>
struct Checkpoint {
  ResNet<T> model;
  data::Normalization norm;
  Metadata meta;
};

namespace detail {

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}

  template <class V>
  void pod(const V& v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof(V));
  }
  void bytes(const void* p, std::size_t n) { os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  Reader(std::istream& is, std::string origin) : is_(is), origin_(std::move(origin)) {}

  template <class V>
  V pod() {
    V v{};
    bytes(&v, sizeof(V));
    return v;
  }
  void bytes(void* p, std::size_t n) {
    is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) {
      throw DataError(origin_ + ": truncated checkpoint at byte " + std::to_string(offset_));
    }
    offset_ += n;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    if (n > (1u << 24)) throw DataError(origin_ + ": implausible string length in checkpoint");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw DataError(origin_ + ": " + what + " (byte " + std::to_string(offset_) + ")");
  }

 private:
  std::istream& is_;
  std::string origin_;
  std::size_t offset_ = 0;
};

template <class Src, class Dst>
void read_values(Reader& r, std::span<Dst> out) {
  if constexpr (std::is_same_v<Src, Dst>) {
    r.bytes(out.data(), out.size_bytes());
  } else {
    std::vector<Src> tmp(out.size());
    r.bytes(tmp.data(), tmp.size() * sizeof(Src));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<Dst>(tmp[i]);
  }
}

template <class Src, class T>
Checkpoint<T> read_body(Reader& r, const ResNetConfig& cfg) {
  Checkpoint<T> ck{ResNet<T>(cfg, 0), {}, {}};
  for (auto& m : ck.norm.mean) m = r.pod<double>();
  for (auto& s : ck.norm.std) s = r.pod<double>();
  const auto n_meta = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    auto k = r.str();
    ck.meta[k] = r.str();
  }

  auto& params = ck.model.parameters();
  const auto n_params = r.pod<std::uint32_t>();
  if (n_params != params.size()) r.fail("parameter count does not match the recorded architecture");
  for (auto& p : params) {
    const auto name = r.str();
    if (name != p.name) r.fail("expected parameter " + p.name + ", found " + name);
    const auto rank = r.pod<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.pod<std::int64_t>();
    if (shape != p.tensor.shape()) r.fail("shape mismatch for " + name);
    read_values<Src, T>(r, p.tensor.data());
  }

  const auto& bns = ck.model.bn_layers();
  const auto n_bn = r.pod<std::uint32_t>();
  if (n_bn != bns.size()) r.fail("batch-norm count does not match the recorded architecture");
  for (const auto& bn : bns) {
    const auto name = r.str();
    if (name != bn->name) r.fail("expected batch-norm " + bn->name + ", found " + name);
    const auto channels = r.pod<std::int64_t>();
    if (channels != bn->stats.channels()) r.fail("channel mismatch for " + name);
    bn->stats.initialized = r.pod<std::uint8_t>() != 0;
    read_values<Src, T>(r, std::span<T>(bn->stats.mean));
    read_values<Src, T>(r, std::span<T>(bn->stats.var));
    r.bytes(bn->stats.count.data(), bn->stats.count.size() * sizeof(double));
  }
  return ck;
}

}  // namespace detail

/// Writes atomically: the file appears under `path` only once complete.
template <class T>
void save_checkpoint(const std::filesystem::path& path, const ResNet<T>& model, const data::Normalization& norm,
                     const Metadata& meta = {}) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw DataError("cannot write checkpoint " + tmp.string());
    detail::Writer w(os);
    w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
    w.pod(kCheckpointVersion);
    w.pod(static_cast<std::uint32_t>(sizeof(T)));
    const auto& cfg = model.config();
    w.pod(static_cast<std::int32_t>(cfg.depth));
    w.pod(static_cast<std::int32_t>(cfg.base_width));
    w.pod(static_cast<std::int32_t>(cfg.num_classes));
    w.pod(static_cast<std::int32_t>(cfg.in_channels));
    for (double m : norm.mean) w.pod(m);
    for (double s : norm.std) w.pod(s);
    w.pod(static_cast<std::uint32_t>(meta.size()));
    for (const auto& [k, v] : meta) {
      w.str(k);
      w.str(v);
    }
    const auto& params = model.parameters();
    w.pod(static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
      w.str(p.name);
      w.pod(static_cast<std::uint32_t>(p.tensor.rank()));
      for (auto d : p.tensor.shape()) w.pod(static_cast<std::int64_t>(d));
      w.bytes(p.tensor.data().data(), p.tensor.data().size_bytes());
    }
    const auto& bns = model.bn_layers();
    w.pod(static_cast<std::uint32_t>(bns.size()));
    for (const auto& bn : bns) {
      w.str(bn->name);
      w.pod(static_cast<std::int64_t>(bn->stats.channels()));
      w.pod(static_cast<std::uint8_t>(bn->stats.initialized ? 1 : 0));
      w.bytes(bn->stats.mean.data(), bn->stats.mean.size() * sizeof(T));
      w.bytes(bn->stats.var.data(), bn->stats.var.size() * sizeof(T));
      w.bytes(bn->stats.count.data(), bn->stats.count.size() * sizeof(double));
    }
    if (!os) throw DataError("write failed for checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

/// Rebuilds the model recorded in `path`. Stored 32/64-bit values are
/// converted to T when the precisions differ.
template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  detail::Reader r(is, path.string());
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) r.fail("not a mixsize checkpoint");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
  const auto dtype = r.pod<std::uint32_t>();
  ResNetConfig cfg;
  cfg.depth = r.pod<std::int32_t>();
  cfg.base_width = r.pod<std::int32_t>();
  cfg.num_classes = r.pod<std::int32_t>();
  cfg.in_channels = r.pod<std::int32_t>();
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    r.fail(std::string("invalid architecture: ") + e.what());
  }
  if (dtype == 4) return detail::read_body<float, T>(r, cfg);
  if (dtype == 8) return detail::read_body<double, T>(r, cfg);
  r.fail("unknown value width " + std::to_string(dtype));
}

/// "<dir>/<stem>_calib<S>.ckpt" next to the source checkpoint.
inline std::filesystem::path calibrated_path(const std::filesystem::path& src, int size) {
  auto out = src;
  out.replace_filename(src.stem().string() + "_calib" + std::to_string(size) + ".ckpt");
  return out;
}

}  // namespace mixsize
