#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "carfollow/common.hpp"

namespace carfollow::data {

struct FeatureFrame {
  double d = 0;        // bumper-to-bumper gap, m
  double dv = 0;       // v_lead - v_ego, m/s
  double tau_inv = 0;  // inverse time-to-collision proxy, 1/s
  double v = 0;        // ego longitudinal speed, m/s
  double a = 0;        // ego accel by forward difference, m/s^2
  int action_id = -1;  // codebook id, -1 until assigned
};

struct Episode {
  std::string id;
  long ego_id = -1, lead_id = -1;
  double dt = 0.1;
  double ego_len = 4.5, lead_len = 4.5, lead_width = 1.8;
  double s0_ego = 0.0;  // initial ego centre arclength
  std::string source;   // "synth" or "ingest"
  std::vector<FeatureFrame> frames;
};

// dv/d scaled by the relative rate of change of the visual angle the lead's
// rear subtends; equals -theta_dot / (w/d) for theta = 2*atan(w/2d).
// Written singularity-free so the d=0 contact boundary maps to 0, not NaN.
inline double tau_inv_feature(double d, double dv, double w) {
  return 4.0 * d * dv / (4.0 * d * d + w * w);
}

// Builds feature frames from aligned centre positions and speeds. The last
// input frame is consumed by the forward difference and not emitted. Gaps are
// bumper-to-bumper and must stay positive.
std::vector<FeatureFrame> compute_features(std::span<const double> s_ego,
                                           std::span<const double> v_ego,
                                           std::span<const double> s_lead,
                                           std::span<const double> v_lead,
                                           double ego_len, double lead_len,
                                           double lead_width, double dt);

// throws DataError on an invariant violation (gap, duration, consistency of a
// with the stored speeds)
void validate_episode(const Episode& ep);

// Ego centre positions re-integrated from stored speeds with the simulator's
// update (position advances with the new speed), anchored at s0_ego.
std::vector<double> ego_positions(const Episode& ep);

struct LeadPlayback {
  std::vector<double> s;  // centre positions per frame
  std::vector<double> v;
};
LeadPlayback lead_playback(const Episode& ep);

// One CSV (t,d,dv,tau_inv,v,a,action_id) plus a JSON sidecar per episode, and
// a manifest listing episode ids. Loading without the sidecar is an error.
void save_episodes(const std::filesystem::path& dir, const std::vector<Episode>& eps);
std::vector<Episode> load_episodes(const std::filesystem::path& dir);

}  // namespace carfollow::data
