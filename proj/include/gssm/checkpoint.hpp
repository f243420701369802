#pragma once

// Checkpoint layout: a directory holding
//   manifest.json  {"format": "GSSM-CKPT-1", "blob": "params.bin", "blob_bytes": N,
//                   "tensors": [{"name", "rows", "cols", "offset"}...], "meta": {...}}
//   params.bin     little-endian IEEE-754 doubles, tensors in manifest order,
//                  each tensor row-major.

#include "gssm/autodiff.hpp"

#include <json.hpp>

#include <filesystem>
#include <stdexcept>
#include <vector>

namespace gssm {

inline constexpr const char* kCheckpointFormat = "GSSM-CKPT-1";

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const std::filesystem::path& dir, const std::vector<ad::Param*>& params,
                     const nlohmann::json& meta = nlohmann::json::object());

/// Loads every tensor in `params` by name, checking shapes, format header and
/// blob size. Returns the manifest's "meta" object.
nlohmann::json load_checkpoint(const std::filesystem::path& dir, const std::vector<ad::Param*>& params);

/// Reads only the manifest (format-checked).
nlohmann::json read_manifest(const std::filesystem::path& dir);

}  // namespace gssm
