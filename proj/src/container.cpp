#include "segpic/container.hpp"

#include <algorithm>

#include <zlib.h>

#include "segpic/bytes.hpp"

namespace segpic {

namespace {
constexpr char kMagic[4] = {'S', 'P', 'I', 'C'};
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in chunks.
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
    crc = ::crc32(crc, bytes.data() + pos, n);
    pos += n;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> write_container(const Container& c) {
  ByteWriter w;
  w.text(std::string_view(kMagic, 4));
  w.u8(kContainerVersion);
  w.u32(c.width);
  w.u32(c.height);
  w.u8(c.region_mode);
  w.u8(c.region_count);
  w.u64(c.model_hash);
  for (const auto& s : c.streams.bytes) {
    if (s.size() > 0xFFFFFFFFu) throw ConfigError("container: substream too large");
    w.u32(static_cast<std::uint32_t>(s.size()));
    w.bytes(s);
  }
  w.u32(crc32(w.buffer()));
  return w.take();
}

Container read_container(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kContainerOverhead) throw ParseError("container: truncated data");
  // Integrity first, so a flipped bit anywhere reports as corruption.
  const std::size_t body = bytes.size() - 4;
  ByteReader tail(bytes.subspan(body), "container");
  if (crc32(bytes.first(body)) != tail.u32()) throw ConsistencyError("container: CRC mismatch");

  ByteReader r(bytes.first(body), "container");
  if (r.text(4) != std::string_view(kMagic, 4)) throw ParseError("container: bad magic");
  const std::uint8_t version = r.u8();
  if (version != kContainerVersion) throw ParseError("container: unsupported version " + std::to_string(version));
  Container c;
  c.width = r.u32();
  c.height = r.u32();
  c.region_mode = r.u8();
  c.region_count = r.u8();
  c.model_hash = r.u64();
  for (auto& s : c.streams.bytes) {
    const std::uint32_t n = r.u32();
    const auto b = r.bytes(n);
    s.assign(b.begin(), b.end());
  }
  if (r.remaining() != 0) throw ParseError("container: trailing bytes");
  if (c.width == 0 || c.height == 0) throw ParseError("container: zero image size");
  if (c.region_count == 0 || c.region_count > kMaxRegions) throw ParseError("container: bad region count");
  return c;
}

}  // namespace segpic
