#pragma once

// Named-tensor checkpoint archive.
//
// Layout: magic "BYBT", format version u32, entry count u32, then per entry
// u16 name length + UTF-8 name, u8 rank, u64 dims, raw little-endian f64
// payload. Integers are little-endian.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "byb/tensor.hpp"

namespace byb {

constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void save_checkpoint(const std::string& path, const NamedTensors& entries);
NamedTensors load_checkpoint(const std::string& path);

// Lookup helper; throws IoError when the name is absent.
const Tensor& checkpoint_get(const NamedTensors& entries, const std::string& name);
bool checkpoint_has(const NamedTensors& entries, const std::string& name);

}  // namespace byb
