#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "errors.hpp"

namespace subnet_unlearn {

// Fixed-length bit set over the flat parameter index space.
class BitMask {
 public:
  BitMask() = default;
  explicit BitMask(std::size_t size, bool value = false)
      : size_(size), words_((size + 63) / 64, value ? ~std::uint64_t{0} : 0) {
    trim();
  }

  static BitMask from_string(const std::string& bits) {
    BitMask m(bits.size());
    for (std::size_t i = 0; i < bits.size(); ++i)
      if (bits[i] == '1') m.set(i);
    return m;
  }

  std::string to_string() const {
    std::string s(size_, '0');
    for (std::size_t i = 0; i < size_; ++i)
      if (test(i)) s[i] = '1';
    return s;
  }

  std::size_t size() const noexcept { return size_; }

  bool test(std::size_t i) const noexcept { return (words_[i >> 6] >> (i & 63)) & 1U; }
  bool operator[](std::size_t i) const noexcept { return test(i); }

  void set(std::size_t i) noexcept { words_[i >> 6] |= std::uint64_t{1} << (i & 63); }
  void reset(std::size_t i) noexcept { words_[i >> 6] &= ~(std::uint64_t{1} << (i & 63)); }
  void assign(std::size_t i, bool v) noexcept { v ? set(i) : reset(i); }

  void set_range(std::size_t begin, std::size_t end) noexcept {
    for (std::size_t i = begin; i < end; ++i) set(i);
  }

  void clear() noexcept {
    for (auto& w : words_) w = 0;
  }

  std::size_t count() const noexcept {
    std::size_t n = 0;
    for (auto w : words_) n += static_cast<std::size_t>(std::popcount(w));
    return n;
  }

  std::size_t count_range(std::size_t begin, std::size_t end) const noexcept {
    std::size_t n = 0;
    for (std::size_t i = begin; i < end; ++i) n += test(i);
    return n;
  }

  bool none() const noexcept {
    for (auto w : words_)
      if (w) return false;
    return true;
  }
  bool any() const noexcept { return !none(); }

  BitMask& operator|=(const BitMask& o) {
    check(o);
    for (std::size_t k = 0; k < words_.size(); ++k) words_[k] |= o.words_[k];
    return *this;
  }
  BitMask& operator&=(const BitMask& o) {
    check(o);
    for (std::size_t k = 0; k < words_.size(); ++k) words_[k] &= o.words_[k];
    return *this;
  }
  // this & ~o
  BitMask& subtract(const BitMask& o) {
    check(o);
    for (std::size_t k = 0; k < words_.size(); ++k) words_[k] &= ~o.words_[k];
    return *this;
  }

  BitMask operator~() const {
    BitMask r = *this;
    for (auto& w : r.words_) w = ~w;
    r.trim();
    return r;
  }

  friend BitMask operator|(BitMask a, const BitMask& b) { return a |= b; }
  friend BitMask operator&(BitMask a, const BitMask& b) { return a &= b; }
  friend BitMask and_not(BitMask a, const BitMask& b) { return a.subtract(b); }

  bool is_subset_of(const BitMask& o) const {
    check(o);
    for (std::size_t k = 0; k < words_.size(); ++k)
      if (words_[k] & ~o.words_[k]) return false;
    return true;
  }
  bool intersects(const BitMask& o) const {
    check(o);
    for (std::size_t k = 0; k < words_.size(); ++k)
      if (words_[k] & o.words_[k]) return true;
    return false;
  }

  template <typename F>
  void for_each_set(F&& f) const {
    for (std::size_t k = 0; k < words_.size(); ++k) {
      std::uint64_t w = words_[k];
      while (w) {
        const int b = std::countr_zero(w);
        f(k * 64 + static_cast<std::size_t>(b));
        w &= w - 1;
      }
    }
  }

  friend bool operator==(const BitMask&, const BitMask&) = default;

  // Serialized form: uint64 bit count (little-endian), then ceil(n/8) bytes,
  // bit i stored at byte i/8, position i%8.
  void write(std::ostream& os) const {
    std::uint64_t n = size_;
    for (int b = 0; b < 8; ++b) os.put(static_cast<char>((n >> (8 * b)) & 0xff));
    for (std::size_t byte = 0; byte < (size_ + 7) / 8; ++byte) {
      const std::uint64_t w = words_[byte / 8];
      os.put(static_cast<char>((w >> (8 * (byte % 8))) & 0xff));
    }
  }

  static BitMask read(std::istream& is) {
    std::uint64_t n = 0;
    for (int b = 0; b < 8; ++b) {
      const int c = is.get();
      if (c == std::char_traits<char>::eof()) throw FormatError("BitMask: truncated length");
      n |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * b);
    }
    BitMask m(static_cast<std::size_t>(n));
    for (std::size_t byte = 0; byte < (m.size_ + 7) / 8; ++byte) {
      const int c = is.get();
      if (c == std::char_traits<char>::eof()) throw FormatError("BitMask: truncated payload");
      m.words_[byte / 8] |= static_cast<std::uint64_t>(static_cast<unsigned char>(c))
                           << (8 * (byte % 8));
    }
    m.trim();
    return m;
  }

 private:
  void check(const BitMask& o) const {
    if (o.size_ != size_) throw DimensionMismatch("BitMask size mismatch");
  }
  void trim() noexcept {
    if (size_ % 64 && !words_.empty()) words_.back() &= (std::uint64_t{1} << (size_ % 64)) - 1;
  }

  std::size_t size_ = 0;
  std::vector<std::uint64_t> words_;
};

}  // namespace subnet_unlearn
