#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "carfollow/aida.hpp"
#include "carfollow/bc.hpp"
#include "carfollow/common.hpp"
#include "carfollow/features.hpp"
#include "carfollow/idm.hpp"
#include "carfollow/sim.hpp"

namespace carfollow::eval {

// open-loop per-step action samples conditioned on the recorded history
using Predictor =
    std::function<std::vector<double>(const data::Episode&, Rng&)>;

Predictor idm_predictor(const idm::IdmParams& p);
Predictor mlp_predictor(const bc::MlpPolicy& p);
Predictor gru_predictor(const bc::GruPolicy& p);
// samples actions from the belief-conditioned policy; the belief is filtered
// with the recorded action ids, so episodes must be labeled
Predictor aida_predictor(const aida::AidaModel& m);

// mean |sampled - recorded| per episode; episode index seeds an independent
// stream, so results do not depend on evaluation order
std::vector<double> offline_mae(const Predictor& pred,
                                const std::vector<data::Episode>& eps,
                                uint64_t seed);

struct OnlineMetrics {
  std::vector<double> ade;  // per trace, pre-collision steps only
  int collisions = 0;
  double collision_rate = 0.0;  // plain mean, never trimmed
};
OnlineMetrics online_metrics(const std::vector<sim::SimTrace>& traces,
                             const std::vector<data::Episode>& eps);

// mean of the middle half: sort, drop floor(n/4) from each end
double iqm(std::vector<double> values);

struct WelchResult {
  double t = 0.0;
  double df = 0.0;  // fractional Welch-Satterthwaite value
  double p = 1.0;   // two-sided
};
WelchResult welch(const std::vector<double>& a, const std::vector<double>& b);

// regularized incomplete beta I_x(a, b) by continued fraction
double reg_inc_beta(double a, double b, double x);

// ---- diagnostics ----

struct DiagTrace {
  std::vector<data::FeatureFrame> frames;   // features + recorded action ids
  std::vector<std::vector<double>> pred;    // policy distribution per step
  std::vector<std::vector<double>> belief;  // posterior per step
};

// state,d,dv,tau_inv,pref_loglik,action rows, n per state in state order
void export_state_samples(const aida::AidaModel& m, const aida::AidaTables& t,
                          const std::filesystem::path& path, int n_per_state,
                          uint64_t seed);

// t,d,dv,tau_inv, one-hot recorded action, policy distribution, belief.
// Action columns are ordered by codebook mean, state columns by the state's
// mean tau_inv; headers carry the original indices (act_a3, belief_s7, ...)
void export_belief_trace(const aida::AidaModel& m, const aida::AidaTables& t,
                         const data::Episode& ep,
                         const std::filesystem::path& path);
DiagTrace load_belief_trace(const std::filesystem::path& path);

// state_samples.csv plus trace_<episode>.csv for every episode
void export_diagnostics(const aida::AidaModel& m,
                        const std::vector<data::Episode>& eps,
                        const std::filesystem::path& out_dir,
                        int n_per_state = 200, uint64_t seed = 0);

// ---- report primitives ----

struct MetricRow {
  std::string model, condition;
  int seed = 0;
  std::string metric;
  double value = 0.0;
};
// header model,condition,seed,metric,value
void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<MetricRow>& rows);
std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path);

struct WelchRow {
  std::string metric, condition, model_a, model_b;
  WelchResult r;
  long df_whole = 0;  // integer df as printed in the reference tables
};
void write_welch_csv(const std::filesystem::path& path,
                     const std::vector<WelchRow>& rows);

std::string svg_scatter(const std::vector<std::array<double, 2>>& pts,
                        const std::string& label_x, const std::string& label_y);
// values in [0,1] rendered as a grayscale grid, one row per vector
std::string svg_heatmap(const std::vector<std::vector<double>>& rows);

}  // namespace carfollow::eval
