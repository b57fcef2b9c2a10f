#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dscm/config.hpp"
#include "dscm/scm.hpp"
#include "dscm/train.hpp"

namespace dscm {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointInfo {
  std::string role = "last";
  std::int64_t step = 0;
  std::size_t epoch = 0;
  std::vector<EpochRecord> history;
  std::map<std::string, double> best_validation;
};

// A checkpoint is a directory holding manifest.json and params.f32. The
// manifest embeds the graph config and its hash, lists parameters (shape and
// offset into the blob, in order) and stores fixed buffers as exact decimals.
// Parameters are little-endian float32.
void save_checkpoint(const std::filesystem::path& dir, const config::GraphConfig& config, const Scm& scm,
                     const CheckpointInfo& info);

struct LoadedCheckpoint {
  config::GraphConfig config;
  Scm scm;
  CheckpointInfo info;
};

/// Rebuilds the model from the embedded config and loads its values. Refuses
/// when the manifest hash does not match its config or `expected_hash`.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_hash = "");

/// A checkpoint directory, or a training output directory holding best/ and last/.
std::filesystem::path resolve_checkpoint(const std::filesystem::path& path, const std::string& role = "best");

}  // namespace dscm
