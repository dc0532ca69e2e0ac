#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "carfollow/codebook.hpp"
#include "carfollow/config.hpp"
#include "carfollow/eval.hpp"
#include "carfollow/features.hpp"
#include "carfollow/split.hpp"

namespace carfollow::cli {

// Dataset directory layout written by synth/ingest:
//   episodes/       one CSV + sidecar per episode plus an id manifest
//   codebook.json   action mixture fitted on the training split
//   split.json      train / same-lane test / new-lane test ids
//   manifest.txt    counts, key = value lines
//   generator.idm   synthetic runs only: the generating car-following params
struct Dataset {
  std::vector<data::Episode> episodes;
  data::DatasetSplit split;
  data::ActionCodebook codebook;
};

Dataset load_dataset(const std::filesystem::path& dir);

// episodes matching ids, in id order; unknown ids raise DataError
std::vector<data::Episode> select_episodes(const std::vector<data::Episode>& eps,
                                           const std::vector<std::string>& ids);

// "aida-mpc" shares the "aida" checkpoint: the planner is a deployment mode,
// not a separate trained model
std::filesystem::path checkpoint_path(const std::filesystem::path& dir,
                                      const std::string& model, long seed);

// Welch comparisons for every model pair sharing a (metric, condition) cell
// with at least two seeds per side; pairs whose samples are both constant are
// skipped (the test statistic is undefined there).
std::vector<eval::WelchRow> model_comparisons(const std::vector<eval::MetricRow>& rows);

// Generates the synthetic benchmark dataset into cfg.out: default-parameter
// car-following rollouts behind randomized lead profiles, split, codebook,
// labels. All episodes are same-lane.
void run_synth(const RunConfig& cfg);

// tracks + centerlines -> episodes -> split -> codebook -> labels, into
// cfg.out. Episodes cut from the first centerline form the same-lane pool;
// all other lanes are the new-lane test pool.
void run_ingest(const RunConfig& cfg);

// Trains cfg.model on the training split once per seed; writes
// <model>_seed<k>.ckpt and <model>_seed<k>_loss.csv into cfg.out.
void run_train(const RunConfig& cfg);

// Offline and/or online suites over all seeds and both test conditions.
// Appends/replaces this model's rows in <out>/metrics.csv (per-seed central
// values), rewrites <out>/welch.csv over all models present, and writes
// per-trajectory CSVs per seed and condition.
void run_evaluate(const RunConfig& cfg);

// Belief traces and per-state observation samples for a trained model with
// latent states, into <out>/diagnostics.
void run_diagnose(const RunConfig& cfg);

// Aggregates <out>/metrics.csv into summary.csv (per model/condition/metric:
// n, mean, and the interquartile mean when n >= 4, the mean otherwise),
// rewrites welch.csv, and renders SVG plots from the CSVs.
void run_report(const RunConfig& cfg);

// Full command-line front end: subcommands ingest, synth, train, evaluate,
// diagnose, report; --config <file> plus one flag per config key. Returns the
// process exit code: 0 success, 1 usage, 2 data, 3 training.
int cli_main(int argc, const char* const* argv);

}  // namespace carfollow::cli
