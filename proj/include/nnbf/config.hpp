#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nnbf/channel.hpp"
#include "nnbf/linkeval.hpp"
#include "nnbf/model.hpp"
#include "nnbf/trainer.hpp"

namespace nnbf::cli {

// Raised with line/field identification on any config defect.
struct ParseError : ConfigError {
  using ConfigError::ConfigError;
};

struct EvalSection {
  std::vector<double> snr_db = {-10, -5, 0, 5, 10, 15, 20};
  std::int64_t trials = 1000;
  int modulation = 4;
  bool coded = true;
  linkeval::CodeRate rate = linkeval::CodeRate::Half;
  std::vector<linkeval::BeamformerKind> beamformers = {
      linkeval::BeamformerKind::Zf, linkeval::BeamformerKind::Mmse};
  std::int64_t pilot_len = 8;
  std::int64_t sum_rate_channels = 500;  // held-out ensemble for sum-rate eval
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "runs/default";
  channel::ScenarioConfig scenario;
  model::ModelConfig model;
  train::TrainConfig training;
  std::int64_t steps_per_stage = 500;
  EvalSection eval;
  std::vector<std::string> applied_defaults;  // echoed to the log

  void validate() const;
  // Canonical resolved key-value dump; stable across runs, hash input.
  std::string to_text() const;
};

// Key = value tree with [section] headers, '#' comments, strict key set,
// duplicate keys rejected. Errors carry file:line and the field name.
ExperimentConfig parse_config_text(const std::string& text,
                                   const std::string& source_name);
ExperimentConfig parse_config(const std::string& path);

// Run manifest: everything needed to reproduce a run byte-identically.
std::string manifest_json(const std::string& command, const ExperimentConfig& cfg,
                          const std::vector<std::string>& outputs);
// Extracts the embedded resolved config from a manifest file.
ExperimentConfig config_from_manifest(const std::string& manifest_path,
                                      std::string* command_out);

inline constexpr const char* kArtifactVersion = "1.0.0";

// Documented process exit codes.
enum ExitCode : int {
  kExitOk = 0,
  kExitSelftestFailed = 1,
  kExitIo = 2,
  kExitDiverged = 3,
  kExitCheckpointMismatch = 4,
  kExitConfig = 5,
};

}  // namespace nnbf::cli
