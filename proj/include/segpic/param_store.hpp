#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "segpic/rng.hpp"
#include "segpic/tensor.hpp"

namespace segpic {

// One decoded record of a weight file.
struct ParamRecord {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

// Flat binary weight format: "SPW1", u32 count, then per parameter
// u16 name length, name bytes, u8 rank, u32 dims, f32 payload. Little-endian.
std::vector<std::uint8_t> write_spw(const std::vector<ParamRecord>& records);
std::vector<ParamRecord> read_spw(const std::vector<std::uint8_t>& bytes);

std::uint64_t fnv1a64(const std::vector<std::uint8_t>& bytes);

/// Named parameters of a model. Shapes are fixed once added; iteration
/// order is by name, which makes serialization and optimizer sweeps
/// deterministic.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    Tensor<T> tensor;
    bool trainable = true;
  };

  // Registers a zero-filled parameter. Throws ConfigError on duplicates.
  Tensor<T>& add(const std::string& name, Shape shape, bool trainable = true);

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  Tensor<T>& get(const std::string& name);
  const Tensor<T>& get(const std::string& name) const;
  const std::map<std::string, Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t parameter_count() const;

  void zero_grad();

  std::vector<ParamRecord> records() const;
  // Copies values in; names and shapes must match exactly.
  void assign(const std::vector<ParamRecord>& records);
  std::vector<std::uint8_t> serialize() const { return write_spw(records()); }
  void deserialize(const std::vector<std::uint8_t>& bytes) { assign(read_spw(bytes)); }

  template <typename U>
  void copy_values_from(const ParamStore<U>& other);

 private:
  std::map<std::string, Entry> entries_;
};

// Fills with U(-bound, bound).
template <typename T>
void init_uniform(Tensor<T>& t, double bound, Rng& rng);

}  // namespace segpic
