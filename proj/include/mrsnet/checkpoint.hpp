#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mrsnet/nn.hpp"

namespace mrsnet {

/// Single-file archive: "MRSNCKPT", u32 version, u64 header size, JSON header
/// (caller metadata plus a tensor index), then little-endian float64 payload.
/// Parameters and buffers are stored under their dotted module paths.
struct Checkpoint {
  nlohmann::json header;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const Module& module, nlohmann::json header);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Copies values into module; names and shapes must match exactly.
void load_state(Module& module, const std::vector<std::pair<std::string, Tensor>>& tensors);

}  // namespace mrsnet
