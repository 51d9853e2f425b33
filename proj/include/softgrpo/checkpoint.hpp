#pragma once

// Binary checkpoint, all integers and doubles little-endian:
//
//   "SGRPOCKP"            8-byte magic
//   u32 version           currently 1
//   u64 vocab, embed_dim, num_layers, num_heads, max_seq_len; f64 hidden_mult
//   u64 step, u64 seed
//   u32 tensor count, then per tensor: u32 name length, name bytes,
//                                      u32 rank, rank x u64 extents
//   u64 value count, then the values as f64 in manifest order
//   u64 FNV-1a-64 of every preceding byte

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "softgrpo/errors.hpp"
#include "softgrpo/model.hpp"

namespace softgrpo::checkpoint {

inline constexpr char kMagic[8] = {'S', 'G', 'R', 'P', 'O', 'C', 'K', 'P'};
inline constexpr std::uint32_t kVersion = 1;

struct Meta {
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
};

struct Loaded {
  model::PolicyParams params;
  Meta meta;
};

inline std::uint64_t fnv1a64(const std::vector<std::uint8_t>& bytes, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {

class Writer {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void raw(const char* p, std::size_t n) { buf.insert(buf.end(), p, p + n); }
  std::vector<std::uint8_t> buf;

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, std::size_t end) : buf_(b), end_(end) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(buf_.begin() + static_cast<std::ptrdiff_t>(pos_), buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw IntegrityError("checkpoint: truncated");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(buf_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::vector<std::uint8_t>& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize(const model::PolicyParams& params, const Meta& meta) {
  detail::Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.u32(kVersion);
  const auto& c = params.config;
  w.u64(c.vocab_size);
  w.u64(c.embed_dim);
  w.u64(c.num_layers);
  w.u64(c.num_heads);
  w.u64(c.max_seq_len);
  w.f64(c.hidden_mult);
  w.u64(meta.step);
  w.u64(meta.seed);
  const auto manifest = params.manifest();
  w.u32(static_cast<std::uint32_t>(manifest.size()));
  for (const auto& [name, shape] : manifest) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.raw(name.data(), name.size());
    w.u32(static_cast<std::uint32_t>(shape.size()));
    for (std::size_t e : shape) w.u64(e);
  }
  const auto flat = params.flatten();
  w.u64(flat.size());
  for (double v : flat) w.f64(v);
  w.u64(fnv1a64(w.buf, w.buf.size()));
  return std::move(w.buf);
}

// Parses and validates; when `expected` is given the stored config must match it.
inline Loaded deserialize(const std::vector<std::uint8_t>& bytes, const model::ModelConfig* expected = nullptr) {
  if (bytes.size() < sizeof kMagic + 4 + 8) throw IntegrityError("checkpoint: file too short");
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(bytes[body + static_cast<std::size_t>(i)]) << (8 * i);
  if (stored != fnv1a64(bytes, body)) throw IntegrityError("checkpoint: checksum mismatch");

  detail::Reader r(bytes, body);
  if (r.str(sizeof kMagic) != std::string(kMagic, sizeof kMagic)) throw IntegrityError("checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kVersion) throw IntegrityError("checkpoint: unsupported version " + std::to_string(version));
  model::ModelConfig c;
  c.vocab_size = r.u64();
  c.embed_dim = r.u64();
  c.num_layers = r.u64();
  c.num_heads = r.u64();
  c.max_seq_len = r.u64();
  c.hidden_mult = r.f64();
  Loaded out;
  out.meta.step = r.u64();
  out.meta.seed = r.u64();
  if (expected && !(*expected == c)) throw IntegrityError("checkpoint: model config does not match the run config");
  try {
    c.validate();
  } catch (const std::exception& e) {
    throw IntegrityError(std::string("checkpoint: stored model config invalid: ") + e.what());
  }

  out.params = model::init_params(c, 0);
  const auto manifest = out.params.manifest();
  const std::uint32_t count = r.u32();
  if (count != manifest.size()) throw IntegrityError("checkpoint: manifest has " + std::to_string(count) + " tensors, expected " + std::to_string(manifest.size()));
  for (const auto& [name, shape] : manifest) {
    const std::string got = r.str(r.u32());
    if (got != name) throw IntegrityError("checkpoint: manifest entry '" + got + "', expected '" + name + "'");
    const std::uint32_t rank = r.u32();
    autodiff::Shape s(rank);
    for (auto& e : s) e = r.u64();
    if (s != shape) throw IntegrityError("checkpoint: shape mismatch for '" + name + "'");
  }
  const std::uint64_t n = r.u64();
  if (n != out.params.num_parameters()) throw IntegrityError("checkpoint: payload length mismatch");
  std::vector<double> flat(n);
  for (auto& v : flat) v = r.f64();
  if (r.pos() != body) throw IntegrityError("checkpoint: trailing bytes");
  out.params.assign_flat(flat);
  return out;
}

inline void save(const model::PolicyParams& params, const Meta& meta, const std::string& path) {
  const auto bytes = serialize(params, meta);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IntegrityError("checkpoint: cannot write '" + path + "'");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IntegrityError("checkpoint: write failed for '" + path + "'");
}

inline std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IntegrityError("checkpoint: cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline Loaded load(const std::string& path, const model::ModelConfig* expected = nullptr) {
  return deserialize(read_bytes(path), expected);
}

}  // namespace softgrpo::checkpoint
