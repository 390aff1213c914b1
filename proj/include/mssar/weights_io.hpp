#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "mssar/parameters.hpp"

// Weights file layout (all integers little-endian):
//   "MSSARWT" 0x00, u32 version
//   u64 tensor count
//   per tensor: u32 name length, name bytes, u64 n, c, h, w
//   per tensor, in manifest order: n*c*h*w IEEE-754 binary64 values

namespace mssar {

inline constexpr char kWeightsMagic[8] = {'M', 'S', 'S', 'A', 'R', 'W', 'T', '\0'};
inline constexpr std::uint32_t kWeightsVersion = 1;

namespace detail {

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& bytes, std::string source)
      : bytes_(bytes), source_(std::move(source)) {}

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n)
      throw std::runtime_error(source_ + ": truncated weights file at byte offset " + std::to_string(pos_));
  }
  const std::vector<std::uint8_t>& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> encode_weights(const ParameterRegistry<T>& reg) {
  std::vector<std::uint8_t> out(std::begin(kWeightsMagic), std::end(kWeightsMagic));
  detail::put_u32(out, kWeightsVersion);
  detail::put_u64(out, reg.size());
  for (const auto& e : reg.entries()) {
    detail::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    const Shape s = e.tensor->shape();
    for (std::size_t d : {s.n, s.c, s.h, s.w}) detail::put_u64(out, d);
  }
  for (const auto& e : reg.entries())
    for (T v : e.tensor->data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(static_cast<double>(v)));
  return out;
}

template <typename T>
void save_weights(const std::string& path, const ParameterRegistry<T>& reg) {
  const auto bytes = encode_weights(reg);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write weights '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for weights '" + path + "'");
}

/// Validates the manifest against `reg` and loads every tensor. The first
/// mismatch (name, shape or count) is reported by parameter name.
template <typename T>
void decode_weights(const std::vector<std::uint8_t>& bytes, ParameterRegistry<T>& reg,
                    const std::string& source = "<memory>") {
  detail::ByteReader rd(bytes, source);
  if (rd.str(sizeof kWeightsMagic) != std::string(kWeightsMagic, sizeof kWeightsMagic))
    throw std::runtime_error(source + ": not a weights file (bad magic)");
  const std::uint32_t version = rd.u32();
  if (version != kWeightsVersion)
    throw std::runtime_error(source + ": unsupported weights version " + std::to_string(version));
  const std::uint64_t count = rd.u64();
  const auto& entries = reg.entries();
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t len = rd.u32();
    const std::string name = rd.str(len);
    Shape s;
    s.n = rd.u64();
    s.c = rd.u64();
    s.h = rd.u64();
    s.w = rd.u64();
    if (i >= entries.size())
      throw std::runtime_error(source + ": unexpected parameter '" + name + "' (model has " +
                               std::to_string(entries.size()) + " tensors)");
    const auto& e = entries[i];
    if (e.name != name)
      throw std::runtime_error(source + ": parameter mismatch at '" + e.name + "': file has '" + name + "'");
    if (!(e.tensor->shape() == s))
      throw std::runtime_error(source + ": parameter '" + e.name + "' has shape " + e.tensor->shape().str() +
                               " but file has " + s.str());
  }
  if (count < entries.size())
    throw std::runtime_error(source + ": parameter '" + entries[count].name + "' missing from file");
  std::size_t expected = 0;
  for (const auto& e : entries) expected += e.tensor->size();
  if (rd.remaining() != expected * 8)
    throw std::runtime_error(source + ": data section holds " + std::to_string(rd.remaining()) +
                             " bytes, expected " + std::to_string(expected * 8));
  for (const auto& e : entries)
    for (T& v : e.tensor->data()) v = static_cast<T>(std::bit_cast<double>(rd.u64()));
}

template <typename T>
void load_weights(const std::string& path, ParameterRegistry<T>& reg) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read weights '" + path + "'");
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  decode_weights(bytes, reg, path);
}

}  // namespace mssar
