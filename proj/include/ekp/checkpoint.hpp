#pragma once
#include <filesystem>

#include "ekp/netcore.hpp"

namespace ekp::net {

// Checkpoint directory layout:
//   manifest.txt    human-readable structure, input spec and unit masks
//   weights/*.npy   one array per named weight tensor
void save_checkpoint(const PrunableNetwork& net, const std::filesystem::path& dir);
PrunableNetwork load_checkpoint(const std::filesystem::path& dir);

}  // namespace ekp::net
