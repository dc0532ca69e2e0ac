#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "carfollow/codebook.hpp"
#include "carfollow/features.hpp"

namespace carfollow::bc {

// policy inputs are {d, dv, tau_inv}; ego speed is deliberately excluded
inline std::array<double, 3> obs3(const data::FeatureFrame& f) {
  return {f.d, f.dv, f.tau_inv};
}

struct NormStats {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> std{1.0, 1.0, 1.0};
};

// per-feature mean/std over all frames; stds floored at 1e-9
NormStats compute_norm_stats(const std::vector<data::Episode>& eps);

// 3 -> 40 -> 40 -> K, rectifier hidden layers, log-softmax output
struct MlpPolicy {
  static constexpr long kHidden = 40;
  int n_actions = 15;
  NormStats norm;
  std::vector<double> w;
  data::ActionCodebook codebook;

  long param_count() const;
  void init_weights(uint64_t seed);          // Xavier-uniform, zero biases
  std::vector<double> log_probs(const std::array<double, 3>& o) const;
};

// single gated recurrent cell (input 3, hidden 30) + head 30 -> 30 -> K;
// conditions on past observations only, never on past actions
struct GruPolicy {
  static constexpr long kHidden = 30;
  int n_actions = 15;
  NormStats norm;
  std::vector<double> w;
  data::ActionCodebook codebook;

  long param_count() const;
  void init_weights(uint64_t seed);

  struct State {
    std::vector<double> h;
  };
  State init_state() const { return {std::vector<double>(kHidden, 0.0)}; }
  std::vector<double> step(State& st, const std::array<double, 3>& o) const;
  std::vector<std::vector<double>> log_probs_seq(
      const std::vector<std::array<double, 3>>& seq) const;
};

// discrete id from the policy output, then the matching Gaussian component,
// clamped to the global accel bounds
double predict_sample(const std::vector<double>& log_probs,
                      const data::ActionCodebook& cb, Rng& rng);

struct TrainOptions {
  int max_epochs = 200;
  int batch_episodes = 32;
  double lr = 1e-3;
  int patience = 10;          // epochs without val improvement before stopping
  double val_fraction = 0.1;  // episodes held out for early stopping
  uint64_t seed = 0;
};

struct TrainReport {
  std::vector<double> train_nll;  // per epoch, mean per-step
  std::vector<double> val_nll;
  int best_epoch = -1;
};

// Mini-batch likelihood training with Adam. Episodes must carry action ids.
// A non-finite loss halves the step size once and restores the best weights;
// a second failure raises TrainError.
TrainReport train_mlp(MlpPolicy& p, const std::vector<data::Episode>& eps,
                      const TrainOptions& opts);
TrainReport train_gru(GruPolicy& p, const std::vector<data::Episode>& eps,
                      const TrainOptions& opts);

void save_mlp(const std::filesystem::path& path, const MlpPolicy& p);
MlpPolicy load_mlp(const std::filesystem::path& path);
void save_gru(const std::filesystem::path& path, const GruPolicy& p);
GruPolicy load_gru(const std::filesystem::path& path);

}  // namespace carfollow::bc
