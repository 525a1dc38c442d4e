#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "gentle/errors.hpp"
#include "gentle/numkit/mlp.hpp"

namespace gentle::nk {

// Binary layout, little-endian:
//   "GNTL" | u32 version | u32 layer_count
//   per layer: u32 in | u32 out | u32 activation | f64[in*out] weight (row-major) | f64[out] bias
inline constexpr char kSnapshotMagic[4] = {'G', 'N', 'T', 'L'};
inline constexpr std::uint32_t kSnapshotVersion = 1;

namespace detail {

template <class T>
void put_le(std::vector<unsigned char>& buf, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  buf.insert(buf.end(), bytes, bytes + sizeof(T));
}

template <class T>
T get_le(const std::vector<unsigned char>& buf, std::size_t& pos, const std::string& what) {
  if (pos + sizeof(T) > buf.size()) throw FormatError(what + ": truncated snapshot");
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, buf.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  pos += sizeof(T);
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace detail

inline std::vector<unsigned char> encode_snapshot(const MlpParams& p) {
  std::vector<unsigned char> buf(kSnapshotMagic, kSnapshotMagic + 4);
  detail::put_le<std::uint32_t>(buf, kSnapshotVersion);
  detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(p.layers.size()));
  for (const auto& l : p.layers) {
    detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(l.weight.rows()));
    detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(l.weight.cols()));
    detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(l.activation));
    for (Index i = 0; i < l.weight.size(); ++i) detail::put_le<double>(buf, l.weight.data()[i]);
    for (Index i = 0; i < l.bias.size(); ++i) detail::put_le<double>(buf, l.bias.data()[i]);
  }
  return buf;
}

inline MlpParams decode_snapshot(const std::vector<unsigned char>& buf, const std::string& what = "snapshot") {
  if (buf.size() < 4 || std::memcmp(buf.data(), kSnapshotMagic, 4) != 0)
    throw FormatError(what + ": bad magic (expected GNTL)");
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint32_t>(buf, pos, what);
  if (version != kSnapshotVersion)
    throw FormatError(what + ": unsupported snapshot version " + std::to_string(version));
  const auto count = detail::get_le<std::uint32_t>(buf, pos, what);
  MlpParams p;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto in = detail::get_le<std::uint32_t>(buf, pos, what);
    const auto out = detail::get_le<std::uint32_t>(buf, pos, what);
    const auto act = detail::get_le<std::uint32_t>(buf, pos, what);
    if (act > static_cast<std::uint32_t>(Activation::tanh)) throw FormatError(what + ": unknown activation");
    Layer l;
    l.weight.resize(in, out);
    l.bias.resize(out);
    l.activation = static_cast<Activation>(act);
    for (Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = detail::get_le<double>(buf, pos, what);
    for (Index i = 0; i < l.bias.size(); ++i) l.bias.data()[i] = detail::get_le<double>(buf, pos, what);
    p.layers.push_back(std::move(l));
  }
  if (pos != buf.size()) throw FormatError(what + ": trailing bytes after last layer");
  p.validate();
  return p;
}

inline void save_snapshot(const MlpParams& p, const std::filesystem::path& path) {
  const auto buf = encode_snapshot(p);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline MlpParams load_snapshot(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInputError("missing snapshot: " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_snapshot(buf, path.string());
}

}  // namespace gentle::nk
