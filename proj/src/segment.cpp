#include "carfollow/segment.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace carfollow::data {

namespace {

struct FramePose {
  int lane = -1;  // -1: no lane covers this frame
  double s = 0.0, l = 0.0, vs = 0.0;
};

struct LeadPick {
  size_t track = 0;
  bool found = false;
};

}  // namespace

SegmentResult segment_episodes(const std::vector<RawTrack>& tracks,
                               const std::vector<Centerline>& lanes,
                               const SegmentConfig& cfg) {
  if (lanes.empty()) throw DataError("no lane centerlines given");
  SegmentResult out;

  // lane assignment per track frame
  std::vector<std::vector<FramePose>> pose(tracks.size());
  std::vector<bool> covered(tracks.size(), false);
  for (size_t i = 0; i < tracks.size(); ++i) {
    pose[i].resize(tracks[i].frames.size());
    for (size_t j = 0; j < tracks[i].frames.size(); ++j) {
      const TrackFrame& f = tracks[i].frames[j];
      FramePose best;
      double best_abs_l = cfg.max_projection_dist;
      for (size_t k = 0; k < lanes.size(); ++k) {
        auto pr = lanes[k].project({f.x, f.y});
        if (pr.clamped || pr.dist > cfg.max_projection_dist) continue;
        if (std::abs(pr.l) < best_abs_l) {
          best_abs_l = std::abs(pr.l);
          best.lane = static_cast<int>(k);
          best.s = pr.s;
          best.l = pr.l;
          best.vs = lanes[k].velocity(pr.s, {f.vx, f.vy}).first;
        }
      }
      pose[i][j] = best;
      if (best.lane >= 0) covered[i] = true;
    }
  }
  for (size_t i = 0; i < tracks.size(); ++i)
    if (!covered[i])
      out.warnings.push_back("track " + std::to_string(tracks[i].id) +
                             " skipped: no centerline coverage");

  // who is where at each timestamp
  std::map<long, std::vector<std::pair<size_t, size_t>>> at_time;
  for (size_t i = 0; i < tracks.size(); ++i)
    for (size_t j = 0; j < tracks[i].frames.size(); ++j)
      if (pose[i][j].lane >= 0) at_time[tracks[i].frames[j].t_ms].push_back({i, j});

  long min_run = std::lround(cfg.min_duration_s / 0.1) + 1;  // raw frames per episode

  for (size_t i = 0; i < tracks.size(); ++i) {
    if (!covered[i]) continue;
    const RawTrack& ego = tracks[i];
    size_t n = ego.frames.size();

    // per-frame lead pick under the frame-usability rules
    std::vector<LeadPick> lead(n);
    for (size_t j = 0; j < n; ++j) {
      const FramePose& ep = pose[i][j];
      if (ep.lane < 0 || std::abs(ep.l) >= 0.5 * cfg.lane_width) continue;
      double best_d = 0.0;
      auto it = at_time.find(ego.frames[j].t_ms);
      if (it == at_time.end()) continue;
      for (auto [oi, oj] : it->second) {
        if (oi == i) continue;
        const FramePose& op = pose[oi][oj];
        if (op.lane != ep.lane) continue;
        double d = op.s - ep.s - 0.5 * (ego.length + tracks[oi].length);
        if (d <= 0.0 || d > cfg.max_gap) continue;
        if (lead[j].found && d >= best_d) continue;  // ties keep the first pick
        best_d = d;
        lead[j] = {oi, true};
      }
    }

    // maximal runs with an unchanged lead
    size_t j = 0;
    while (j < n) {
      if (!lead[j].found) {
        ++j;
        continue;
      }
      size_t k = j + 1;
      while (k < n && lead[k].found && lead[k].track == lead[j].track) ++k;
      if (static_cast<long>(k - j) >= min_run) {
        const RawTrack& lt = tracks[lead[j].track];
        std::vector<double> se, ve, sl, vl;
        for (size_t m = j; m < k; ++m) {
          const FramePose& ep = pose[i][m];
          se.push_back(ep.s);
          ve.push_back(ep.vs);
          // the lead's own frame index at this timestamp
          long off = (ego.frames[m].t_ms - lt.frames[0].t_ms) / 100;
          const FramePose& lp = pose[lead[j].track][static_cast<size_t>(off)];
          sl.push_back(lp.s);
          vl.push_back(lp.vs);
        }
        Episode e;
        e.id = "ep_" + std::to_string(ego.id) + "_" + std::to_string(lt.id) + "_" +
               std::to_string(ego.frames[j].t_ms);
        e.ego_id = ego.id;
        e.lead_id = lt.id;
        e.ego_len = ego.length;
        e.lead_len = lt.length;
        e.lead_width = lt.width;
        e.s0_ego = se[0];
        e.source = "ingest";
        e.frames = compute_features(se, ve, sl, vl, e.ego_len, e.lead_len,
                                    e.lead_width, e.dt);
        validate_episode(e);
        out.episodes.push_back(std::move(e));
        out.lanes.push_back(pose[i][j].lane);
      }
      j = k;
    }
  }
  return out;
}

}  // namespace carfollow::data
