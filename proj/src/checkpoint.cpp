#include "avflow/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

namespace avflow {

namespace {

constexpr char kMagic[4] = {'A', 'V', 'F', 'L'};
constexpr uint32_t kVersion = 1;

void put_u16(std::ostream& os, uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void write_checkpoint(const std::string& path,
                      const std::vector<std::pair<std::string, Tensor>>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrKind::Io, "cannot open " + path + " for write");
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_u32(os, static_cast<uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    if (name.size() > 0xffff) fail(ErrKind::Io, "tensor name too long: " + name);
    put_u16(os, static_cast<uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    os.put(static_cast<char>(t.rank()));
    for (size_t i = 0; i < t.rank(); ++i) put_u32(os, static_cast<uint32_t>(t.dim(i)));
    // float payload is IEEE-754; this writer assumes a little-endian host
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel()) * 4);
  }
  if (!os) fail(ErrKind::Io, "write failed for " + path);
}

std::vector<std::pair<std::string, Tensor>> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrKind::Io, "cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    fail(ErrKind::CorruptRecord, path + " is not a checkpoint container");
  uint32_t version = get_u32(is);
  if (version != kVersion)
    fail(ErrKind::CorruptRecord, "unsupported container version " + std::to_string(version));
  uint32_t count = get_u32(is);
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t name_len = get_u16(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    int rank = is.get();
    if (rank < 0) fail(ErrKind::CorruptRecord, "truncated container " + path);
    Shape shape(static_cast<size_t>(rank));
    for (int d = 0; d < rank; ++d) shape[static_cast<size_t>(d)] = get_u32(is);
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.mutable_data()),
            static_cast<std::streamsize>(t.numel()) * 4);
    if (!is) fail(ErrKind::CorruptRecord, "truncated container " + path);
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

void write_checkpoint_atomic(const std::string& path,
                             const std::vector<std::pair<std::string, Tensor>>& entries) {
  std::string tmp = path + ".tmp";
  write_checkpoint(tmp, entries);
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    fail(ErrKind::Io, "rename " + tmp + " -> " + path + " failed");
}

}  // namespace avflow
