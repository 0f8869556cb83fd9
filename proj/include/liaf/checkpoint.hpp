#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace liaf {

// Versioned binary container:
//   "LIAFCKPT" | u32 version | u64 meta length | meta JSON |
//   u32 array count | per array: u32 name length, name, u32 rank,
//   i64 dims[rank], f64 data[prod(dims)]
// All integers and floats little-endian.
struct NamedArray {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<double> data;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedArray> arrays;

  const NamedArray& array(const std::string& name) const;
  bool has(const std::string& name) const;
};

// Writes to a temporary sibling and renames over the target.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Writes text atomically (temp file + rename).
void write_file_atomic(const std::string& path, const std::string& contents);

}  // namespace liaf
