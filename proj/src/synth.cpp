#include "carfollow/synth.hpp"

#include <cmath>
#include <cstdio>
#include <string>

namespace carfollow::data {

double profile_speed(const LeadProfile& p, double t) {
  return std::max(0.0, p.v0 + p.amp * std::sin(2.0 * kPi * t / p.period_s + p.phase));
}

std::vector<LeadProfile> mixed_profiles(int n, uint64_t seed) {
  std::vector<LeadProfile> out;
  out.reserve(static_cast<size_t>(n));
  Rng rng(derive_seed(seed, 0x9e1f));
  for (int i = 0; i < n; ++i) {
    LeadProfile p;
    p.amp = rng.uniform(0.3, 1.5);
    p.v0 = rng.uniform(3.0 + p.amp, 13.0 - p.amp);
    p.period_s = rng.uniform(6.0, 14.0);
    p.phase = rng.uniform(0.0, 2.0 * kPi);
    p.duration_s = 12.0;
    p.gap_factor = rng.uniform(0.9, 1.25);
    out.push_back(p);
  }
  return out;
}

namespace {

// one rollout attempt; returns false on collision (bumper gap <= 0)
bool rollout(const idm::IdmParams& params, const LeadProfile& prof, double gap0,
             double noise_std, Rng& rng, Episode& ep) {
  const double dt = 0.1;
  const double half_sum = 0.5 * (ep.ego_len + ep.lead_len);
  long n_raw = std::lround(prof.duration_s / dt) + 1;

  std::vector<double> se(static_cast<size_t>(n_raw)), ve(static_cast<size_t>(n_raw));
  std::vector<double> sl(static_cast<size_t>(n_raw)), vl(static_cast<size_t>(n_raw));
  se[0] = 0.0;
  ve[0] = profile_speed(prof, 0.0);
  sl[0] = half_sum + gap0;
  vl[0] = ve[0];
  for (long k = 0; k + 1 < n_raw; ++k) {
    size_t i = static_cast<size_t>(k);
    double d = sl[i] - se[i] - half_sum;
    if (d <= 0.0) return false;
    double dv = vl[i] - ve[i];
    double a = idm::accel_mean(params, d, dv, ve[i]);
    if (noise_std > 0.0) a += noise_std * rng.normal();
    a = idm::clamp_accel(a);
    ve[i + 1] = std::max(0.0, ve[i] + dt * a);
    se[i + 1] = se[i] + dt * ve[i + 1];
    vl[i + 1] = profile_speed(prof, dt * static_cast<double>(k + 1));
    sl[i + 1] = sl[i] + dt * vl[i + 1];
  }
  if (sl[static_cast<size_t>(n_raw - 1)] - se[static_cast<size_t>(n_raw - 1)] - half_sum <= 0.0)
    return false;
  ep.frames = compute_features(se, ve, sl, vl, ep.ego_len, ep.lead_len,
                               ep.lead_width, dt);
  ep.s0_ego = 0.0;
  return true;
}

}  // namespace

SynthResult synth_generate(const idm::IdmParams& params,
                           const std::vector<LeadProfile>& profiles,
                           double noise_std, int n_episodes, uint64_t seed) {
  if (profiles.empty()) throw DataError("no lead profiles given");
  for (const LeadProfile& p : profiles) {
    if (p.duration_s < 10.0) throw DataError("lead profile shorter than 10 s");
    if (p.period_s <= 0.0) throw DataError("lead profile needs a positive period");
  }
  SynthResult out;
  out.generator = params;
  out.episodes.reserve(static_cast<size_t>(n_episodes));
  for (int i = 0; i < n_episodes; ++i) {
    const LeadProfile& prof = profiles[static_cast<size_t>(i) % profiles.size()];
    Episode ep;
    char buf[32];
    std::snprintf(buf, sizeof buf, "synth_%04d", i);
    ep.id = buf;
    ep.ego_id = 2 * i;
    ep.lead_id = 2 * i + 1;
    ep.source = "synth";
    double base_gap = prof.gap_factor * idm::equilibrium_gap(params, profile_speed(prof, 0.0));
    bool ok = false;
    for (int attempt = 0; attempt < 5 && !ok; ++attempt) {
      Rng rng(derive_seed(seed, static_cast<uint64_t>(i) * 16 + static_cast<uint64_t>(attempt)));
      double gap0 = base_gap * std::pow(1.5, attempt);
      ok = rollout(params, prof, gap0, noise_std, rng, ep);
    }
    if (!ok)
      throw DataError("episode " + ep.id + " collided on all 5 attempts");
    validate_episode(ep);
    out.episodes.push_back(std::move(ep));
  }
  return out;
}

std::vector<RawTrack> render_tracks(const std::vector<Episode>& eps) {
  std::vector<RawTrack> out;
  out.reserve(2 * eps.size());
  for (size_t k = 0; k < eps.size(); ++k) {
    const Episode& ep = eps[k];
    std::vector<double> se = ego_positions(ep);
    LeadPlayback lp = lead_playback(ep);
    long t0 = static_cast<long>(k) * 100000;

    RawTrack ego, lead;
    ego.id = 2 * static_cast<long>(k);
    ego.length = ep.ego_len;
    ego.width = 1.8;
    lead.id = ego.id + 1;
    lead.length = ep.lead_len;
    lead.width = ep.lead_width;
    for (size_t j = 0; j < ep.frames.size(); ++j) {
      long t = t0 + 100 * static_cast<long>(j);
      ego.frames.push_back({t, se[j], 0.0, ep.frames[j].v, 0.0, 0.0});
      lead.frames.push_back({t, lp.s[j], 0.0, lp.v[j], 0.0, 0.0});
    }
    out.push_back(std::move(ego));
    out.push_back(std::move(lead));
  }
  return out;
}

}  // namespace carfollow::data
