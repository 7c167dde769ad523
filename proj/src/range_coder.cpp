#include "segpic/range_coder.hpp"

#include <algorithm>

namespace segpic {

namespace {

constexpr std::uint64_t kWord = 1ull << 32;
constexpr std::uint64_t kBottom = 1ull << kCdfBits;

bool top_settled(std::uint64_t low, std::uint64_t range) { return ((low ^ (low + (range - 1))) >> 32) == 0; }

std::uint64_t shifted_range(std::uint64_t range) { return range >= kWord ? ~0ull : range << 32; }

void check_interval(std::uint32_t cum, std::uint32_t freq) {
  if (freq == 0 || cum + static_cast<std::uint64_t>(freq) > kCdfTotal) {
    throw ConsistencyError("range coder: invalid interval");
  }
}

}  // namespace

void RangeEncoder::emit_word(std::uint32_t w) {
  for (int i = 3; i >= 0; --i) out_.push_back(static_cast<std::uint8_t>(w >> (8 * i)));
}

void RangeEncoder::normalize() {
  for (;;) {
    if (!top_settled(low_, range_)) {
      if (range_ >= kBottom) return;
      // Too narrow to code another symbol while straddling a word boundary:
      // shrink to the part below the next 2^16 boundary, which settles it.
      range_ = (0 - low_) & (kBottom - 1);
    }
    emit_word(static_cast<std::uint32_t>(low_ >> 32));
    low_ <<= 32;
    range_ = shifted_range(range_);
  }
}

void RangeEncoder::encode(std::uint32_t cum, std::uint32_t freq) {
  check_interval(cum, freq);
  const std::uint64_t r = range_ >> kCdfBits;
  low_ += r * cum;
  range_ = r * freq;
  normalize();
}

void RangeEncoder::encode_symbol(const CdfTable& table, std::int32_t value) {
  const std::ptrdiff_t idx = table.index_of(value);
  if (idx < 0) throw ConsistencyError("range coder: symbol outside table without escape");
  const auto i = static_cast<std::size_t>(idx);
  encode(table.cdf[i], table.freq(i));
  if (table.has_escape && i == table.escape_index()) {
    const auto raw = static_cast<std::uint32_t>(value);
    encode(raw & 0xFFFF, 1);
    encode(raw >> 16, 1);
  }
}

std::vector<std::uint8_t> RangeEncoder::finish() {
  // The interval straddles a word boundary, so it holds a multiple of 2^32;
  // take the one with the most trailing zero bits. The decoder reads zeros
  // past the end, so trailing zero bytes need not be stored.
  const std::uint64_t high = low_ + (range_ - 1);
  std::uint64_t v = (low_ + (kWord - 1)) & ~(kWord - 1);
  for (int k = 63; k > 32; --k) {
    const std::uint64_t m = 1ull << k;
    const std::uint64_t c = (low_ + (m - 1)) & ~(m - 1);
    if (c >= low_ && c <= high) {
      v = c;
      break;
    }
  }
  emit_word(static_cast<std::uint32_t>(v >> 32));
  while (!out_.empty() && out_.back() == 0) out_.pop_back();
  low_ = 0;
  range_ = ~0ull;
  return std::move(out_);
}

RangeDecoder::RangeDecoder(std::span<const std::uint8_t> bytes) : in_(bytes) {
  code_ = static_cast<std::uint64_t>(next_word()) << 32;
  code_ |= next_word();
}

std::uint32_t RangeDecoder::next_word() {
  std::uint32_t w = 0;
  for (int i = 0; i < 4; ++i, ++pos_) {
    if (pos_ < in_.size()) w |= static_cast<std::uint32_t>(in_[pos_]) << (8 * (3 - i));
  }
  return w;
}

std::uint32_t RangeDecoder::target() const {
  const std::uint64_t r = range_ >> kCdfBits;
  return static_cast<std::uint32_t>(std::min<std::uint64_t>((code_ - low_) / r, kCdfTotal - 1));
}

void RangeDecoder::normalize() {
  for (;;) {
    if (!top_settled(low_, range_)) {
      if (range_ >= kBottom) return;
      range_ = (0 - low_) & (kBottom - 1);
    }
    low_ <<= 32;
    code_ = (code_ << 32) | next_word();
    range_ = shifted_range(range_);
  }
}

void RangeDecoder::consume(std::uint32_t cum, std::uint32_t freq) {
  check_interval(cum, freq);
  const std::uint64_t r = range_ >> kCdfBits;
  low_ += r * cum;
  range_ = r * freq;
  normalize();
}

std::int32_t RangeDecoder::decode_symbol(const CdfTable& table) {
  const std::uint32_t t = target();
  // Last index whose cumulative start is <= t.
  const auto it = std::upper_bound(table.cdf.begin(), table.cdf.end() - 1, t);
  const auto i = static_cast<std::size_t>(it - table.cdf.begin()) - 1;
  consume(table.cdf[i], table.freq(i));
  if (table.has_escape && i == table.escape_index()) {
    const std::uint32_t lo = target();
    consume(lo, 1);
    const std::uint32_t hi = target();
    consume(hi, 1);
    return static_cast<std::int32_t>(lo | (hi << 16));
  }
  return table.offset + static_cast<std::int32_t>(i);
}

}  // namespace segpic
