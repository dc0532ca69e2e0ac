#pragma once

#include <string>
#include <vector>

#include "carfollow/features.hpp"
#include "carfollow/geometry.hpp"
#include "carfollow/tracks.hpp"

namespace carfollow::data {

struct SegmentConfig {
  double lane_width = 3.5;
  double max_gap = 60.0;          // episodes end when the headway exceeds this
  double min_duration_s = 5.0;
  double max_projection_dist = 10.0;  // lane assignment validity gate
};

struct SegmentResult {
  std::vector<Episode> episodes;
  std::vector<int> lanes;  // centerline index each episode was cut from
  std::vector<std::string> warnings;
};

// Cuts car-following episodes out of raw tracks. Every frame of every track
// is projected onto each lane centerline and assigned to the lane with the
// smallest |l| (within the projection gate). An ego frame is usable when the
// ego sits inside its lane (|l| < lane_width/2) and the nearest same-lane
// vehicle ahead leaves a bumper gap in (0, max_gap]. Maximal runs of usable
// frames with an unchanged lead become episodes; runs shorter than
// min_duration_s are dropped. Tracks no lane covers are skipped with a
// warning.
SegmentResult segment_episodes(const std::vector<RawTrack>& tracks,
                               const std::vector<Centerline>& lanes,
                               const SegmentConfig& cfg = {});

}  // namespace carfollow::data
