// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

// Little-endian length-prefixed records shared by the dataset and checkpoint
// containers. Readers throw FormatError on truncation.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "vidplug/errors.hpp"

namespace vidplug::binio {

static_assert(std::endian::native == std::endian::little, "containers are little-endian raw");

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void f64(double v) { bytes(&v, 8); }
  void str(std::string_view s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  void f64s(const std::vector<double>& v) {
    u64(v.size());
    bytes(v.data(), v.size() * sizeof(double));
  }
  const std::string& buffer() const { return buf_; }

  // Writes a sibling temp file and renames it over `path`; a failed write
  // leaves any previous file intact.
  void save(const std::filesystem::path& path) const {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw DataError("cannot open for writing: " + tmp.string());
      out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
      out.close();
      if (!out) {
        std::error_code ec;
        std::filesystem::remove(tmp, ec);
        throw DataError("write failed: " + path.string());
      }
    }
    std::filesystem::rename(tmp, path);
  }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  static Reader load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path.string());
    return Reader(std::string(std::istreambuf_iterator<char>(in), {}));
  }

  void bytes(void* p, std::size_t n) {
    if (n > data_.size() - pos_) throw FormatError("truncated container");
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() { return get<std::uint8_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  double f64() { return get<double>(); }
  std::string str() {
    const std::uint64_t n = count(1);
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  std::vector<double> f64s() {
    std::vector<double> v(count(sizeof(double)));
    bytes(v.data(), v.size() * sizeof(double));
    return v;
  }
  bool done() const { return pos_ == data_.size(); }
  std::size_t size() const { return data_.size(); }

 private:
  template <class T>
  T get() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  // Length prefix checked against the remaining bytes before allocating.
  std::uint64_t count(std::size_t elem) {
    const std::uint64_t n = u64();
    if (n > (data_.size() - pos_) / elem) throw FormatError("truncated container");
    return n;
  }

  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace vidplug::binio
