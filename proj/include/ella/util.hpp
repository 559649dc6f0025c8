#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ella {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 64-bit FNV-1a, used wherever a hash has to be stable across runs and hosts.
class StableHash {
 public:
  StableHash& bytes(const void* data, size_t n);
  StableHash& str(std::string_view s);  // length-prefixed
  StableHash& u64(uint64_t v);
  StableHash& f64(double v);
  uint64_t value() const { return h_; }

 private:
  uint64_t h_ = 0xcbf29ce484222325ULL;
};

uint64_t splitmix64(uint64_t x);

// Uniform double in [0, 1) from the top 53 bits; identical on every platform,
// unlike std::uniform_real_distribution.
inline double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}
inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * unit_uniform(rng);
}
// Box-Muller on unit_uniform draws.
double normal(std::mt19937_64& rng);
// Uniform integer in [0, n) by rejection.
uint64_t uniform_index(std::mt19937_64& rng, uint64_t n);

template <typename T>
void shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (size_t i = v.size(); i > 1; --i) {
    size_t j = uniform_index(rng, i);
    std::swap(v[i - 1], v[j]);
  }
}

std::string hex64(uint64_t v);
std::string format_fixed(double v, int decimals);

// Writes `content` to `path`, throwing on failure.
void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

std::string csv_escape(std::string_view field);

}  // namespace ella

namespace ella {

// Little-endian binary encoding for the on-disk containers (cache, tokens, checkpoints).
class BinaryWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(uint32_t v);
  void u64(uint64_t v);
  void f64(double v);
  void str(std::string_view s);
  void raw(std::string_view s) { buf_.append(s); }
  void f64s(std::span<const double> v);
  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::string data) : buf_(std::move(data)) {}
  uint8_t u8();
  uint32_t u32();
  uint64_t u64();
  double f64();
  std::string str();
  std::string raw(size_t n);
  std::vector<double> f64s(size_t n);
  bool eof() const { return pos_ >= buf_.size(); }
  size_t remaining() const { return buf_.size() - pos_; }

 private:
  void need(size_t n) const;
  std::string buf_;
  size_t pos_ = 0;
};

}  // namespace ella
