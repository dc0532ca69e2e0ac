#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "carfollow/common.hpp"

namespace carfollow::cli {

enum class ModelKind { idm, bc_mlp, bc_rnn, aida, aida_mpc };

ModelKind model_kind(const std::string& name);  // UsageError on unknown names
std::string model_name(ModelKind k);

// Every knob a run can turn. Serialized as flat key=value lines; the key set
// is closed, so typos fail loudly instead of silently using a default.
struct RunConfig {
  // paths
  std::string tracks;       // raw track CSV (ingest input)
  std::string centerlines;  // comma-separated centerline CSVs (ingest input)
  std::string data;         // dataset directory produced by ingest/synth
  std::string out = "out";  // output directory of the current command
  std::string checkpoints;  // where evaluate/diagnose look for checkpoints; "" = out
  std::string checkpoint;   // explicit checkpoint file for diagnose; "" = per-seed default

  std::string model = "aida";

  // shared hyperparameters
  double lambda1 = 1.0, lambda2 = 0.1;
  long S = 20, A = 15, H_max = 30, K_codebook = 15;
  std::vector<long> seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14};
  double split_ratio = 0.7;
  long cap_same_lane = 100, cap_new_lane = 75;
  double accel_min = kAccelMin, accel_max = kAccelMax;  // fixed; changing them is rejected

  // training
  long bc_epochs = 200, bc_batch = 32, bc_patience = 10;
  double bc_lr = 1e-3;
  long aida_epochs = 40, aida_batch = 8;
  double aida_lr = 0.01;

  // dataset generation (synth) and split shuffling (both pipelines)
  long synth_episodes = 200;
  double synth_noise = 0.05;
  uint64_t data_seed = 0;

  // evaluation
  std::string suite = "both";  // offline | online | both

  // diagnostics
  long diag_samples = 200;
  long diag_episodes = 5;
};

std::vector<std::string> config_keys();

// key=value lines, # comments, blank lines; duplicate or unknown keys and
// unparseable values raise UsageError
RunConfig load_config(const std::filesystem::path& path);

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);

// consistency checks shared by every command (model name, ranges, fixed bounds)
void validate_config(const RunConfig& cfg);

// all keys in declaration order; load_config(resolved_text output) round-trips
std::string resolved_text(const RunConfig& cfg);

// writes <dir>/config.resolved, creating dir if needed
void write_resolved(const RunConfig& cfg, const std::filesystem::path& dir);

}  // namespace carfollow::cli
