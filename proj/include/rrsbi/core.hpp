// Copyright 2026 The rrsbi Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <functional>
#include <istream>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace rrsbi {

// Error categories. The CLI maps them onto process exit codes.
enum class ErrorKind {
  Config,         // bad configuration or arguments
  InvalidInput,   // data violates a precondition (negative counts, bad params)
  Shape,          // tensor/curve dimensions disagree
  Usage,          // API misuse (unnormalized input, missing cache, ...)
  StaleArtifact,  // checksum mismatch between pipeline artifacts
  Numerical,      // non-finite loss/gradient, divergence
  Io,             // file could not be read or written
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::StaleArtifact:
      return 3;
    case ErrorKind::Numerical:
      return 4;
    default:
      return 2;
  }
}

// ---------------------------------------------------------------------------
// Random streams
//
// Every stochastic component draws from a stream keyed by (seed, a, b), so
// results never depend on worker count or scheduling order. The engine is
// mt19937_64, whose output sequence is fixed by the standard; distributions
// come from Boost.Random, which is header-only and identical on every
// platform (unlike the std:: distributions).
// ---------------------------------------------------------------------------

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t stream_key(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0) {
  return splitmix64(splitmix64(splitmix64(seed) ^ a) ^ (b * 0xd1342543de82ef95ULL + 1));
}

using Engine = std::mt19937_64;

inline Engine make_engine(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0) {
  return Engine(stream_key(seed, a, b));
}

// ---------------------------------------------------------------------------
// 64-bit FNV-1a, used for artifact staleness detection.
// ---------------------------------------------------------------------------

class Fnv1a {
 public:
  static constexpr std::uint64_t kOffset = 0xcbf29ce484222325ULL;
  static constexpr std::uint64_t kPrime = 0x100000001b3ULL;

  void update(std::span<const std::byte> bytes) {
    for (auto b : bytes) {
      hash_ ^= static_cast<std::uint8_t>(b);
      hash_ *= kPrime;
    }
  }
  void update(std::string_view s) { update(std::as_bytes(std::span(s.data(), s.size()))); }
  std::uint64_t digest() const { return hash_; }

 private:
  std::uint64_t hash_ = kOffset;
};

std::uint64_t fnv1a_file(const std::filesystem::path& path);
std::uint64_t fnv1a_bytes(std::span<const std::byte> bytes);
std::string hex64(std::uint64_t v);

// ---------------------------------------------------------------------------
// Little-endian binary helpers for the on-disk formats.
// ---------------------------------------------------------------------------

namespace le {

template <typename T>
T to_le(T v) {
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    auto bytes = std::bit_cast<std::array<std::byte, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

template <typename T>
void put(std::ostream& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  v = to_le(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  static_assert(std::is_trivially_copyable_v<T>);
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) fail(ErrorKind::Io, "unexpected end of file");
  return to_le(v);
}

template <typename T>
void put_array(std::ostream& out, std::span<const T> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (const T& v : values) put(out, v);
  }
}

template <typename T>
void get_array(std::istream& in, std::span<T> values) {
  if constexpr (std::endian::native == std::endian::little) {
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
    if (!in) fail(ErrorKind::Io, "unexpected end of file");
  } else {
    for (T& v : values) v = get<T>(in);
  }
}

inline void put_string(std::ostream& out, std::string_view s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& in, std::uint32_t max_len = 1u << 20) {
  auto n = get<std::uint32_t>(in);
  if (n > max_len) fail(ErrorKind::Io, "string field too long (corrupt file?)");
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) fail(ErrorKind::Io, "unexpected end of file");
  return s;
}

inline void put_magic(std::ostream& out, std::string_view magic) { out.write(magic.data(), 4); }

inline void expect_magic(std::istream& in, std::string_view magic) {
  char buf[4]{};
  in.read(buf, 4);
  if (!in || std::string_view(buf, 4) != magic)
    fail(ErrorKind::Io, "bad magic, expected \"" + std::string(magic) + "\"");
}

}  // namespace le

// ---------------------------------------------------------------------------
// Diagnostics sink. Warnings go to stderr unless a handler is installed.
// ---------------------------------------------------------------------------

using WarningHandler = void (*)(const std::string&);
void set_warning_handler(WarningHandler handler);
void warn(const std::string& message);

// ---------------------------------------------------------------------------
// Threading
// ---------------------------------------------------------------------------

inline void set_max_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

inline int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace rrsbi
