#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "carfollow/codebook.hpp"
#include "carfollow/features.hpp"

namespace carfollow::aida {

// Discrete-state generative driver model. Unconstrained parameters; the
// distributions are realized through row softmaxes and exponentials.
struct AidaParams {
  int S = 20, A = 15, H_max = 30;
  std::vector<double> trans_logits;  // S*A*S, [s][a][s'], softmax over s'
  std::vector<double> pref_logits;   // S, softmax -> preferred state prior
  std::vector<double> obs_mean;      // S*3, diagonal Gaussian centers
  std::vector<double> obs_logstd;    // S*3
  double horizon_lograte = std::log(10.0);  // truncated-Poisson horizon rate

  long param_count() const {
    long s = S, a = A;
    return s * a * s + s + 3 * s + 3 * s + 1;
  }
  // sizes consistent with S/A, all entries finite
  void validate() const;
};

// Materialized distributions and the planning tables for every horizon.
// Index layout: q/g/log_pi are (h-1)*S*A + s*A + a, v is (h-1)*S + s.
struct AidaTables {
  int S = 0, A = 0, H = 0;
  std::vector<double> trans;      // probabilities, S*A*S
  std::vector<double> log_trans;  // S*A*S
  std::vector<double> log_pref;   // S
  std::vector<double> entropy;    // S, observation entropy per state
  std::vector<double> efe;        // S*A, expected free energy
  std::vector<double> q;          // H*S*A, efe + expected value-to-go
  std::vector<double> log_pi;     // H*S*A, per-horizon soft policy
  std::vector<double> g;          // H*S*A, q + log_pi
  std::vector<double> v;          // H*S, soft state values
  std::vector<double> horizon_w;  // H, truncated-Poisson horizon weights
};

double obs_loglik(const AidaParams& p, const std::array<double, 3>& o, int s);
// all states at once, same accumulation order as the training graph
std::vector<double> obs_loglik_all(const AidaParams& p, const std::array<double, 3>& o);

// sum_s P(s'|s,a) b(s)
std::vector<double> prior_predictive(const std::vector<double>& b, int a,
                                     const AidaParams& p);

struct BeliefResult {
  std::vector<double> b;
  bool shock = false;  // evidence underflowed, posterior fell back to the prior
};
// posterior from a uniform prior over states (start of an episode)
BeliefResult initial_belief(const std::array<double, 3>& o, const AidaParams& p);
// Bayes step through the prior predictive; total evidence below e^-700
// falls back to the prior predictive and flags a shock
BeliefResult belief_update(const std::vector<double>& b_prev, int a_prev,
                           const std::array<double, 3>& o, const AidaParams& p);

// KL(P(.|s,a) || preference) + expected next-state observation entropy
double efe_state(int s, int a, const AidaParams& p);

// Backward soft value recursion up to `horizon` (0 means p.H_max) with the
// per-state policy solved to self-consistency by damped fixed-point sweeps
// (at most 50, tolerance 1e-10).
AidaTables build_tables(const AidaParams& p, int horizon = 0);

// softmax_a(-sum_s b(s) g_h(s,a)), the belief-weighted soft policy
std::vector<double> policy_at_horizon(const AidaTables& t,
                                      const std::vector<double>& b, int h);
// horizon mixture under the truncated-Poisson weights
std::vector<double> policy(const AidaTables& t, const std::vector<double>& b);

// Negative of [mean action log-likelihood + l1 * mean one-step observation
// log-likelihood] + l2 * sum of squared observation variances. Beliefs are
// filtered from scratch on every call. Episodes must carry action ids.
double map_objective(const AidaParams& p, const std::vector<data::Episode>& eps,
                     double l1, double l2);
// same loss via the autodiff graph, plus d loss / d params flattened as
// [trans_logits, pref_logits, obs_mean, obs_logstd, horizon_lograte]
std::pair<double, std::vector<double>> map_gradient(
    const AidaParams& p, const std::vector<data::Episode>& eps, double l1,
    double l2);

struct AidaTrainOptions {
  int S = 20, A = 15, H_max = 30;
  double lambda1 = 1.0, lambda2 = 0.1;
  int max_epochs = 40;
  int batch_episodes = 8;
  double lr = 0.01;
  uint64_t seed = 0;
};
struct AidaTrainResult {
  AidaParams params;
  std::vector<double> loss_curve;  // per-epoch mean over minibatch losses
  int restarts = 0;
};

// seeded init: logits ~ N(0, 0.1^2), observation means from k-means over the
// training observations, log-stds at the per-feature data log-std
AidaParams init_params(const std::vector<data::Episode>& eps,
                       const AidaTrainOptions& o);
// Adam on map_objective over episode minibatches; a non-finite loss or
// gradient restarts training from init with the step size halved, twice at
// most, after which TrainError propagates
AidaTrainResult train_aida(const std::vector<data::Episode>& eps,
                           const AidaTrainOptions& o);

struct ObsSample {
  int state = 0;
  std::array<double, 3> o{};
  double pref_loglik = 0.0;  // log sum_s pref(s) P(o|s)
  int action = 0;            // greedy policy action from a uniform-prior belief
};
// n draws from P(o|s) for every state, state-major order
std::vector<ObsSample> sample_observations(const AidaParams& p,
                                           const AidaTables& t, int n_per_state,
                                           uint64_t seed);

struct AidaModel {
  AidaParams params;
  data::ActionCodebook codebook;  // action id -> acceleration component
  double lambda1 = 1.0, lambda2 = 0.1;
};
void save_aida(const std::filesystem::path& path, const AidaModel& m);
AidaModel load_aida(const std::filesystem::path& path);

}  // namespace carfollow::aida
