#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "poroperm/error.hpp"

namespace poroperm::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// Append-only little-endian byte sink.
class ByteWriter {
 public:
  template <typename V>
    requires std::is_arithmetic_v<V>
  void put(V v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(V));
  }

  template <typename V>
    requires std::is_arithmetic_v<V>
  void put_array(std::span<const V> values) {
    const auto* p = reinterpret_cast<const char*>(values.data());
    bytes_.insert(bytes_.end(), p, p + values.size_bytes());
  }

  void put_bytes(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

  /// u32 length followed by the bytes.
  void put_string(std::string_view s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_bytes(s);
  }

  const std::vector<char>& bytes() const noexcept { return bytes_; }

 private:
  std::vector<char> bytes_;
};

/// Bounds-checked reader; running past the end raises `truncated`.
class ByteReader {
 public:
  ByteReader(std::span<const char> bytes, ErrorCode truncated) : bytes_(bytes), truncated_(truncated) {}

  template <typename V>
    requires std::is_arithmetic_v<V>
  V get() {
    V v;
    std::memcpy(&v, take(sizeof(V)).data(), sizeof(V));
    return v;
  }

  template <typename V>
    requires std::is_arithmetic_v<V>
  void get_array(std::span<V> out) {
    const auto src = take(out.size_bytes());
    std::memcpy(out.data(), src.data(), out.size_bytes());
  }

  std::string get_bytes(std::size_t n) {
    const auto src = take(n);
    return {src.begin(), src.end()};
  }

  std::string get_string() { return get_bytes(get<std::uint32_t>()); }

  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  std::span<const char> take(std::size_t n) {
    if (n > remaining()) fail(truncated_, "unexpected end of data");
    const auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::span<const char> bytes_;
  ErrorCode truncated_;
  std::size_t pos_ = 0;
};

std::vector<char> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const char> bytes);

}  // namespace poroperm::io
