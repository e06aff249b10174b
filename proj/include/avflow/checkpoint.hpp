#pragma once

#include <string>
#include <utility>
#include <vector>

#include "avflow/tensor.hpp"

namespace avflow {

// Flat binary tensor container.
// Layout: magic "AVFL", version u32, tensor count u32, then per tensor:
// name length u16, name bytes, rank u8, dims u32 each, raw little-endian
// float32 payload.
void write_checkpoint(const std::string& path,
                      const std::vector<std::pair<std::string, Tensor>>& entries);

std::vector<std::pair<std::string, Tensor>> read_checkpoint(const std::string& path);

// write-temp-then-rename
void write_checkpoint_atomic(const std::string& path,
                             const std::vector<std::pair<std::string, Tensor>>& entries);

}  // namespace avflow
