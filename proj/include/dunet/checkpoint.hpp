#pragma once

#include <map>
#include <string>

#include "dunet/tensor.hpp"

namespace dunet {

// Single-file parameter checkpoint. Layout, little-endian throughout:
//   magic "DUNETCKP", u32 version (1), u64 entry count,
//   per entry: u32 name length, name bytes, u32 rank, i64 dims, f64 values.
// Round-trips bit-exactly.
void save_checkpoint(const std::string& path, const std::map<std::string, Tensor*>& state);

// Loads into the given state map; every checkpoint entry must match an
// existing name and shape. Throws std::runtime_error on format or shape errors.
void load_checkpoint(const std::string& path, std::map<std::string, Tensor*>& state);

// Reads just the entry names and shapes (for compatibility checks).
std::map<std::string, std::vector<int64_t>> read_checkpoint_index(const std::string& path);

}  // namespace dunet
