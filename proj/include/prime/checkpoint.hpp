#pragma once

// Versioned binary container of named tensors:
//   "PRIMECK1", u32 version, u32+bytes fingerprint, u32+bytes metadata JSON,
//   u32 count, then per tensor u32+bytes name, u32 rank, u32 dims..., f64 payload.

#include "prime/nn.hpp"

#include <filesystem>
#include <string>

namespace prime {

struct CheckpointInfo {
    std::string fingerprint;
    std::string metadata; // JSON text
};

void save_checkpoint(const std::filesystem::path& path, const nn::ParamList& params, const CheckpointInfo& info);

/// Loads values into params by name. Every listed parameter must be present
/// with a matching shape; extra tensors in the file are rejected too.
CheckpointInfo load_checkpoint(const std::filesystem::path& path, const nn::ParamList& params);

/// Reads the header and tensor names without touching any parameter.
CheckpointInfo peek_checkpoint(const std::filesystem::path& path, std::vector<std::string>* names = nullptr);

} // namespace prime
