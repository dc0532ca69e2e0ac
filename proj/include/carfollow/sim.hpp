#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "carfollow/aida.hpp"
#include "carfollow/bc.hpp"
#include "carfollow/common.hpp"
#include "carfollow/features.hpp"
#include "carfollow/idm.hpp"

namespace carfollow::sim {

constexpr double kSimDt = 0.1;

// centre positions; the lead is advanced from playback, never integrated
struct SimState {
  double s_ego = 0.0, v_ego = 0.0;
  double s_lead = 0.0, v_lead = 0.0;
  double ego_len = 4.5, lead_len = 4.5;
};

// lead rear bumper minus ego front bumper
double bumper_gap(const SimState& st);
// 1-D bounding-box overlap, boundary inclusive
bool collision_check(const SimState& st);
// semi-implicit Euler: v' = max(0, v + a dt); s' = s + v' dt
void step_ego(SimState& st, double a);

struct TraceRow {
  double t = 0.0;
  double s_ego = 0.0, v_ego = 0.0, a_ego = 0.0;
  double s_lead = 0.0, v_lead = 0.0;
  double d = 0.0, dv = 0.0, tau_inv = 0.0;
  int collision_flag = 0;
};

struct SimTrace {
  std::string episode_id;
  std::vector<TraceRow> rows;
  bool collided = false;
  bool error = false;  // the controller produced a non-finite action
  std::string error_what;
};

// a controller maps the current feature frame to an acceleration and may
// keep state between steps; one controller instance drives one episode
class Controller {
 public:
  virtual ~Controller() = default;
  virtual void reset() {}
  virtual double act(const data::FeatureFrame& f) = 0;
};

class ReplayController : public Controller {
 public:
  explicit ReplayController(std::vector<double> accels)
      : accels_(std::move(accels)) {}
  void reset() override { k_ = 0; }
  double act(const data::FeatureFrame&) override {
    return k_ < accels_.size() ? accels_[k_++] : 0.0;
  }

 private:
  std::vector<double> accels_;
  size_t k_ = 0;
};

class IdmController : public Controller {
 public:
  explicit IdmController(const idm::IdmParams& p) : p_(p) {}
  double act(const data::FeatureFrame& f) override {
    return idm::accel_mean(p_, f.d, f.dv, f.v);
  }

 private:
  idm::IdmParams p_;
};

class MlpController : public Controller {
 public:
  MlpController(const bc::MlpPolicy& p, uint64_t seed) : p_(p), seed_(seed), rng_(seed) {}
  void reset() override { rng_ = Rng(seed_); }
  double act(const data::FeatureFrame& f) override;

 private:
  const bc::MlpPolicy& p_;
  uint64_t seed_;
  Rng rng_;
};

class GruController : public Controller {
 public:
  GruController(const bc::GruPolicy& p, uint64_t seed)
      : p_(p), seed_(seed), rng_(seed), st_(p.init_state()) {}
  void reset() override {
    rng_ = Rng(seed_);
    st_ = p_.init_state();
  }
  double act(const data::FeatureFrame& f) override;

 private:
  const bc::GruPolicy& p_;
  uint64_t seed_;
  Rng rng_;
  bc::GruPolicy::State st_;
};

// samples a discrete action from the belief-conditioned policy, executes its
// codebook component, and filters the belief with the executed action id
class AidaController : public Controller {
 public:
  AidaController(const aida::AidaModel& m, uint64_t seed);
  void reset() override;
  double act(const data::FeatureFrame& f) override;

 private:
  const aida::AidaModel& m_;
  aida::AidaTables tables_;
  uint64_t seed_;
  Rng rng_;
  std::vector<double> belief_;  // empty until the first observation
  int last_action_ = -1;
};

struct CemConfig {
  int horizon = 6;
  int samples = 50;  // N
  int elites = 5;    // K
  int iters = 20;
  double init_mean = 0.0;
  double init_std = 2.0;
  double std_floor = 1e-3;
};

struct CemResult {
  double action = 0.0;               // first entry of the final mean, clamped
  std::vector<double> mean;          // final sequence mean
  std::vector<double> elite_reward;  // best candidate per iteration
};

// summed reward of one candidate action sequence
using SeqReward = std::function<double(const std::vector<double>&)>;

// Gaussian cross-entropy search over action sequences. Elites from the
// previous iteration stay in the candidate pool, so the best reward never
// decreases on a deterministic objective.
CemResult cem_plan(const SeqReward& reward, const CemConfig& cfg, Rng& rng);

// preference log-evidence summed over a constant-lead-velocity rollout
// d' = d + dt (dv - dt a), dv' = dv - dt a, observed as (d, dv, dv/d)
SeqReward aida_rollout_reward(const aida::AidaParams& p, double d0, double dv0);

class AidaMpcController : public Controller {
 public:
  AidaMpcController(const aida::AidaModel& m, const CemConfig& cfg, uint64_t seed)
      : m_(m), cfg_(cfg), seed_(seed), rng_(seed) {}
  void reset() override { rng_ = Rng(seed_); }
  double act(const data::FeatureFrame& f) override {
    return cem_plan(aida_rollout_reward(m_.params, f.d, f.dv), cfg_, rng_).action;
  }

 private:
  const aida::AidaModel& m_;
  CemConfig cfg_;
  uint64_t seed_;
  Rng rng_;
};

// Steps the ego against the episode's lead playback until the episode ends,
// a collision occurs, or the controller fails. Features are recomputed from
// the simulated state each step; actions are clamped to the global bounds.
SimTrace run_closed_loop(Controller& ctrl, const data::Episode& ep);

// t,s_ego,v_ego,a_ego,s_lead,v_lead,d,dv,tau_inv,collision_flag
void save_trace(const std::filesystem::path& path, const SimTrace& trace);
SimTrace load_trace(const std::filesystem::path& path);

}  // namespace carfollow::sim
