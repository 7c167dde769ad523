#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "segpic/entropy.hpp"

namespace segpic {

// Carry-less range coder over 16-bit frequency tables. The state is a
// 64-bit interval [low, low + range) that never wraps; output is emitted in
// 32-bit big-endian words once the top word of the interval is settled.
// finish() appends one word and drops trailing zero bytes, so an empty
// message is empty.
class RangeEncoder {
 public:
  // Codes the sub-interval [cum, cum + freq) of kCdfTotal.
  void encode(std::uint32_t cum, std::uint32_t freq);
  // Codes value with table; out-of-range values go through the escape
  // symbol followed by the raw 32-bit value in two 16-bit chunks.
  void encode_symbol(const CdfTable& table, std::int32_t value);
  std::vector<std::uint8_t> finish();

 private:
  void normalize();
  void emit_word(std::uint32_t w);

  std::uint64_t low_ = 0;
  std::uint64_t range_ = ~0ull;
  std::vector<std::uint8_t> out_;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(std::span<const std::uint8_t> bytes);

  // Position of the next symbol within kCdfTotal.
  std::uint32_t target() const;
  void consume(std::uint32_t cum, std::uint32_t freq);
  std::int32_t decode_symbol(const CdfTable& table);

 private:
  void normalize();
  std::uint32_t next_word();

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
  std::uint64_t low_ = 0;
  std::uint64_t range_ = ~0ull;
  std::uint64_t code_ = 0;
};

}  // namespace segpic
