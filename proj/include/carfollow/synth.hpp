#pragma once

#include <cstdint>
#include <vector>

#include "carfollow/features.hpp"
#include "carfollow/idm.hpp"
#include "carfollow/tracks.hpp"

namespace carfollow::data {

// lead speed v(t) = max(0, v0 + amp*sin(2*pi*t/period_s + phase))
struct LeadProfile {
  double v0 = 10.0;
  double amp = 0.0;
  double period_s = 10.0;
  double phase = 0.0;
  double duration_s = 12.0;
  double gap_factor = 1.0;  // initial gap as a multiple of the equilibrium gap
};

double profile_speed(const LeadProfile& p, double t);

// Randomized sinusoidal profiles for benchmark datasets. Speeds stay in
// [3, 13] m/s: wide enough to identify the headway parameters, low enough
// for a default-parameter ego to track.
std::vector<LeadProfile> mixed_profiles(int n, uint64_t seed);

struct SynthResult {
  std::vector<Episode> episodes;
  idm::IdmParams generator;
};

// Simulates an IDM ego behind each lead profile at 10 Hz with Gaussian
// acceleration noise (clamped to the global accel bounds). Episode i uses
// profiles[i % profiles.size()]. A collision during rollout restarts the
// episode with a 1.5x larger initial gap, up to 5 attempts.
SynthResult synth_generate(const idm::IdmParams& params,
                           const std::vector<LeadProfile>& profiles,
                           double noise_std, int n_episodes, uint64_t seed);

// Straight-road raw tracks for the ingest pipeline: each episode becomes an
// ego/lead pair driving along +x at y=0, staggered in time so pairs never
// coexist. Track ids are 2*i and 2*i+1.
std::vector<RawTrack> render_tracks(const std::vector<Episode>& eps);

}  // namespace carfollow::data
