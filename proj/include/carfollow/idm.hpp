#pragma once

#include <algorithm>
#include <filesystem>
#include <vector>

#include "carfollow/common.hpp"
#include "carfollow/features.hpp"

namespace carfollow::idm {

struct IdmParams {
  double v_des = 15.0;  // desired speed, m/s
  double d0 = 2.0;      // jam distance, m
  double tau = 1.5;     // time headway, s
  double a_max = 1.5;   // max accel, m/s^2
  double b = 2.0;       // comfortable braking, m/s^2
  double sigma = 0.3;   // policy noise std, m/s^2
};

inline double clamp_accel(double a) { return std::clamp(a, kAccelMin, kAccelMax); }

// dv = v_lead - v_ego throughout, the same convention as the dataset feature.
// Closing traffic has dv < 0, which grows the desired gap and forces braking.
double desired_gap(const IdmParams& p, double v, double dv);
double accel_mean(const IdmParams& p, double d, double dv, double v);

// gap at which accel is zero for steady following at speed v (< v_des)
double equilibrium_gap(const IdmParams& p, double v);

double sample_action(const IdmParams& p, double d, double dv, double v, Rng& rng);

struct FitOptions {
  int max_iters = 1500;
  double tol = 1e-12;   // relative loss-change stop
  double init_step = 0.2;
};

struct FitResult {
  IdmParams params;
  std::vector<double> nll_curve;  // per-step Gaussian NLL with profiled sigma
  bool rank_deficient = false;
};

// Monotone (Armijo backtracking) gradient descent on log-parameters against
// mean squared acceleration error; deterministic, no RNG. sigma is set to the
// residual std at the optimum. rank_deficient flags a Gauss-Newton spectrum
// with condition below 1e-9 (unidentifiable data).
FitResult fit_idm(const std::vector<data::Episode>& eps, const FitOptions& opts = {});

// flat key=value file with keys v_des,d0,tau,a_max,b,sigma
void save_idm(const std::filesystem::path& path, const IdmParams& p);
IdmParams load_idm(const std::filesystem::path& path);

}  // namespace carfollow::idm
