#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "svrec/error.hpp"

namespace svrec {

// Container shared by every binary file the project writes:
//   8-byte ASCII magic | uint64 LE header length | JSON header | payload
// Payload numbers are little-endian IEEE-754.
struct Blob {
  nlohmann::json header;
  std::vector<std::uint8_t> payload;
};

namespace detail {

template <typename T>
void append_le(std::vector<std::uint8_t>& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::uint8_t bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big)
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  out.insert(out.end(), bytes, bytes + sizeof(T));
}

template <typename T>
T read_le(const std::uint8_t* in) {
  std::uint8_t bytes[sizeof(T)];
  std::memcpy(bytes, in, sizeof(T));
  if constexpr (std::endian::native == std::endian::big)
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace detail

template <typename T, typename Range>
void append_numbers(std::vector<std::uint8_t>& out, const Range& values) {
  out.reserve(out.size() + std::size(values) * sizeof(T));
  for (const auto& v : values) detail::append_le<T>(out, static_cast<T>(v));
}

template <typename T>
std::vector<T> read_numbers(const std::vector<std::uint8_t>& payload, std::size_t offset, std::size_t count) {
  if (offset + count * sizeof(T) > payload.size()) throw FormatError("payload shorter than declared");
  std::vector<T> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = detail::read_le<T>(payload.data() + offset + i * sizeof(T));
  return out;
}

inline void write_blob(const std::string& path, std::string_view magic, const Blob& blob) {
  if (magic.size() != 8) throw ContractError("blob magic must be 8 bytes");
  const std::string header = blob.header.dump();
  std::vector<std::uint8_t> prefix(magic.begin(), magic.end());
  detail::append_le<std::uint64_t>(prefix, header.size());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open for writing: " + path);
  out.write(reinterpret_cast<const char*>(prefix.data()), static_cast<std::streamsize>(prefix.size()));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(blob.payload.data()), static_cast<std::streamsize>(blob.payload.size()));
  if (!out) throw FormatError("write failed: " + path);
}

inline Blob read_blob(const std::string& path, std::string_view magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::string_view(reinterpret_cast<const char*>(bytes.data()), 8) != magic)
    throw FormatError(path + ": not a " + std::string(magic) + " file");
  const auto header_len = detail::read_le<std::uint64_t>(bytes.data() + 8);
  if (16 + header_len > bytes.size()) throw FormatError(path + ": truncated header");
  Blob blob;
  try {
    blob.header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": malformed header: " + e.what());
  }
  blob.payload.assign(bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len), bytes.end());
  return blob;
}

}  // namespace svrec
