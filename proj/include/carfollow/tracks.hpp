#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "carfollow/common.hpp"

namespace carfollow::data {

struct TrackFrame {
  long t_ms = 0;
  double x = 0, y = 0, vx = 0, vy = 0, psi = 0;
};

struct RawTrack {
  long id = -1;
  double length = 4.5, width = 1.8;
  std::vector<TrackFrame> frames;
};

struct TrackLoad {
  std::vector<RawTrack> tracks;
  std::vector<std::string> warnings;
};

// CSV with header track_id,frame_ms,x,y,vx,vy,psi,length,width.
// Tracks with a NaN in any coordinate are dropped with a warning; structural
// problems (bad header, ragged rows, duplicate frames, inconsistent dims)
// raise DataError.
TrackLoad load_tracks(const std::filesystem::path& path);
void save_tracks(const std::filesystem::path& path, const std::vector<RawTrack>& tracks);

}  // namespace carfollow::data
