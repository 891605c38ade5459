// SPDX-License-Identifier: Apache-2.0
//
// CAPCTL1 tensor container:
//   "CAPCTL1" | u8 version | u32 count |
//   count x (u16 name length | name | u8 rank | u32 extents[rank] | f32 data) |
//   u32 CRC32 of everything before it.
// All integers and floats little-endian.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "capctl/errors.hpp"

namespace capctl::checkpoint {

constexpr std::uint8_t kFormatVersion = 1;

struct Entry {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<float> data;
};

class Checkpoint {
 public:
  /// Replaces an existing entry of the same name.
  void put(std::string name, std::vector<std::uint32_t> shape, std::vector<float> data);
  void put_scalar(const std::string& name, float value) { put(name, {1}, {value}); }
  void put_vector(const std::string& name, std::vector<float> values);

  bool contains(const std::string& name) const { return find(name) != nullptr; }
  const Entry* find(const std::string& name) const;
  /// Throws FormatError when missing.
  const Entry& at(const std::string& name) const;
  float scalar(const std::string& name) const;
  const std::vector<Entry>& entries() const { return entries_; }

  std::vector<std::uint8_t> to_bytes() const;
  static Checkpoint from_bytes(const std::vector<std::uint8_t>& bytes);
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::vector<Entry> entries_;
};

std::uint32_t crc32(const std::uint8_t* data, std::size_t size);

}  // namespace capctl::checkpoint
