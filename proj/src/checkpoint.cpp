// SPDX-License-Identifier: Apache-2.0
#include "capctl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <zlib.h>

namespace capctl::checkpoint {

namespace {

constexpr char kMagic[7] = {'C', 'A', 'P', 'C', 'T', 'L', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename U>
void put_raw(std::vector<std::uint8_t>& out, U v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(U));
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  void read(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw FormatError("checkpoint: truncated");
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint32_t crc32(const std::uint8_t* data, std::size_t size) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

void Checkpoint::put(std::string name, std::vector<std::uint32_t> shape, std::vector<float> data) {
  if (name.empty() || name.size() > 0xFFFF) throw ContractError("checkpoint: bad entry name");
  if (shape.size() > 0xFF) throw ContractError("checkpoint: rank too large for '" + name + "'");
  std::size_t numel = 1;
  for (auto e : shape) numel *= e;
  if (numel != data.size()) throw ContractError("checkpoint: shape does not match data for '" + name + "'");
  for (auto& e : entries_) {
    if (e.name == name) {
      e.shape = std::move(shape);
      e.data = std::move(data);
      return;
    }
  }
  entries_.push_back({std::move(name), std::move(shape), std::move(data)});
}

void Checkpoint::put_vector(const std::string& name, std::vector<float> values) {
  const auto n = static_cast<std::uint32_t>(values.size());
  put(name, {n}, std::move(values));
}

const Entry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

const Entry& Checkpoint::at(const std::string& name) const {
  if (const auto* e = find(name)) return *e;
  throw FormatError("checkpoint: missing entry '" + name + "'");
}

float Checkpoint::scalar(const std::string& name) const {
  const auto& e = at(name);
  if (e.data.size() != 1) throw FormatError("checkpoint: '" + name + "' is not a scalar");
  return e.data[0];
}

std::vector<std::uint8_t> Checkpoint::to_bytes() const {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  out.push_back(kFormatVersion);
  put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    put_raw<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(static_cast<std::uint8_t>(e.shape.size()));
    for (auto x : e.shape) put_raw<std::uint32_t>(out, x);
    const auto* p = reinterpret_cast<const std::uint8_t*>(e.data.data());
    out.insert(out.end(), p, p + e.data.size() * sizeof(float));
  }
  put_raw<std::uint32_t>(out, crc32(out.data(), out.size()));
  return out;
}

Checkpoint Checkpoint::from_bytes(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < sizeof(kMagic) + 1 + 4 + 4) throw FormatError("checkpoint: file too short");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) throw FormatError("checkpoint: bad magic");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body, 4);
  if (stored != crc32(bytes.data(), body)) throw FormatError("checkpoint: CRC mismatch");

  Reader in(bytes, body);
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  const auto version = in.get<std::uint8_t>();
  if (version != kFormatVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = in.get<std::uint32_t>();
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name.resize(in.get<std::uint16_t>());
    in.read(e.name.data(), e.name.size());
    const auto rank = in.get<std::uint8_t>();
    std::size_t numel = 1;
    for (std::uint8_t r = 0; r < rank; ++r) {
      e.shape.push_back(in.get<std::uint32_t>());
      numel *= e.shape.back();
    }
    if (numel > (body - in.pos()) / sizeof(float)) throw FormatError("checkpoint: truncated");
    e.data.resize(numel);
    in.read(e.data.data(), numel * sizeof(float));
    if (ck.contains(e.name)) throw FormatError("checkpoint: duplicate entry '" + e.name + "'");
    ck.entries_.push_back(std::move(e));
  }
  if (in.pos() != body) throw FormatError("checkpoint: trailing bytes before footer");
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const auto bytes = to_bytes();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("checkpoint: write failed for " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_bytes(bytes);
}

}  // namespace capctl::checkpoint
