#pragma once

#include <filesystem>

#include "json.hpp"
#include "foley/nn.hpp"

namespace foley {

/// Checkpoint directory layout: meta.json (architecture config, step count,
/// seed, extras) plus one tensor blob per parameter under params/.
void save_checkpoint(const std::filesystem::path& dir, const nn::ParamStore& params, const nlohmann::json& meta);

struct Checkpoint {
  nn::ParamStore params;
  nlohmann::json meta;
};

Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Guard against architecture drift: after rebuilding layers over a loaded
/// store, no parameter may have been created or left unclaimed.
void check_params_match(const nn::ParamStore& params, size_t loaded_count, const std::filesystem::path& dir);

}  // namespace foley
