#include "segpic/param_store.hpp"

#include <fstream>
#include <iterator>

#include "segpic/bytes.hpp"

namespace segpic {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::string& path, std::span<const std::uint8_t> data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw ParseError("short write to " + path);
}

std::vector<std::uint8_t> write_spw(const std::vector<ParamRecord>& records) {
  ByteWriter w;
  w.text("SPW1");
  w.u32(static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    if (r.name.size() > 0xFFFF) throw ConfigError("parameter name too long: " + r.name);
    if (r.shape.size() > 0xFF) throw ConfigError("parameter rank too large: " + r.name);
    w.u16(static_cast<std::uint16_t>(r.name.size()));
    w.text(r.name);
    w.u8(static_cast<std::uint8_t>(r.shape.size()));
    for (auto d : r.shape) w.u32(static_cast<std::uint32_t>(d));
    for (float v : r.values) w.f32(v);
  }
  return w.take();
}

std::vector<ParamRecord> read_spw(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes, "weights");
  if (r.text(4) != "SPW1") throw ParseError("weights: bad magic");
  const std::uint32_t count = r.u32();
  std::vector<ParamRecord> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    ParamRecord rec;
    rec.name = r.text(r.u16());
    const std::uint8_t rank = r.u8();
    for (std::uint8_t d = 0; d < rank; ++d) rec.shape.push_back(r.u32());
    const std::size_t n = shape_numel(rec.shape);
    if (n > r.remaining() / 4) throw ParseError("weights: truncated payload for " + rec.name);
    rec.values.resize(n);
    for (auto& v : rec.values) v = r.f32();
    out.push_back(std::move(rec));
  }
  if (r.remaining() != 0) throw ParseError("weights: trailing bytes");
  return out;
}

std::uint64_t fnv1a64(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

template <typename T>
Tensor<T>& ParamStore<T>::add(const std::string& name, Shape shape, bool trainable) {
  auto [it, inserted] = entries_.try_emplace(name);
  if (!inserted) throw ConfigError("duplicate parameter name: " + name);
  it->second.tensor = Tensor<T>(std::move(shape), T(0));
  it->second.tensor.set_requires_grad(trainable);
  it->second.trainable = trainable;
  return it->second.tensor;
}

template <typename T>
Tensor<T>& ParamStore<T>::get(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second.tensor;
}

template <typename T>
const Tensor<T>& ParamStore<T>::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second.tensor;
}

template <typename T>
std::size_t ParamStore<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) n += e.tensor.numel();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& [_, e] : entries_) e.tensor.zero_grad();
}

template <typename T>
std::vector<ParamRecord> ParamStore<T>::records() const {
  std::vector<ParamRecord> out;
  out.reserve(entries_.size());
  for (const auto& [name, e] : entries_) {
    ParamRecord r{name, e.tensor.shape(), {}};
    r.values.reserve(e.tensor.numel());
    for (T v : e.tensor.values()) r.values.push_back(static_cast<float>(v));
    out.push_back(std::move(r));
  }
  return out;
}

template <typename T>
void ParamStore<T>::assign(const std::vector<ParamRecord>& records) {
  if (records.size() != entries_.size()) {
    throw ConfigError("weights hold " + std::to_string(records.size()) + " parameters, model has " +
                      std::to_string(entries_.size()));
  }
  for (const auto& r : records) {
    auto it = entries_.find(r.name);
    if (it == entries_.end()) throw ConfigError("weights contain unknown parameter " + r.name);
    auto& t = it->second.tensor;
    if (t.shape() != r.shape) {
      throw ConfigError("parameter " + r.name + " has shape " + shape_string(r.shape) +
                        ", model expects " + shape_string(t.shape()));
    }
    auto dst = t.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(r.values[i]);
  }
}

template <typename T>
template <typename U>
void ParamStore<T>::copy_values_from(const ParamStore<U>& other) {
  for (auto& [name, e] : entries_) {
    const auto& src = other.get(name);
    if (src.shape() != e.tensor.shape()) throw ConfigError("copy_values_from: shape mismatch at " + name);
    auto dst = e.tensor.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src.values()[i]);
  }
}

template <typename T>
void init_uniform(Tensor<T>& t, double bound, Rng& rng) {
  for (auto& v : t.mutable_values()) v = static_cast<T>(rng.uniform(-bound, bound));
}

template class ParamStore<float>;
template class ParamStore<double>;
template void ParamStore<float>::copy_values_from(const ParamStore<double>&);
template void ParamStore<double>::copy_values_from(const ParamStore<float>&);
template void ParamStore<float>::copy_values_from(const ParamStore<float>&);
template void ParamStore<double>::copy_values_from(const ParamStore<double>&);
template void init_uniform(Tensor<float>&, double, Rng&);
template void init_uniform(Tensor<double>&, double, Rng&);

}  // namespace segpic
