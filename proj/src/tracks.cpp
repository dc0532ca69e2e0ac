#include "carfollow/tracks.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace carfollow::data {

static const char* kHeader = "track_id,frame_ms,x,y,vx,vy,psi,length,width";

TrackLoad load_tracks(const std::filesystem::path& path) {
  auto lines = read_lines(path);
  if (lines.empty()) throw DataError("empty track file " + path.string());
  if (trim(lines[0]) != kHeader)
    throw DataError("track file header mismatch in " + path.string());

  std::map<long, RawTrack> by_id;
  std::map<long, bool> has_nan;
  for (size_t i = 1; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    auto cols = split(lines[i], ',');
    if (cols.size() != 9)
      throw DataError("track row " + std::to_string(i + 1) + " has " +
                      std::to_string(cols.size()) + " columns in " + path.string());
    long id = parse_long(cols[0], "track_id");
    TrackFrame f;
    f.t_ms = parse_long(cols[1], "frame_ms");
    f.x = parse_double(cols[2], "x");
    f.y = parse_double(cols[3], "y");
    f.vx = parse_double(cols[4], "vx");
    f.vy = parse_double(cols[5], "vy");
    f.psi = parse_double(cols[6], "psi");
    double len = parse_double(cols[7], "length");
    double wid = parse_double(cols[8], "width");

    auto [it, inserted] = by_id.try_emplace(id);
    RawTrack& tr = it->second;
    if (inserted) {
      tr.id = id;
      tr.length = len;
      tr.width = wid;
    } else if (tr.length != len || tr.width != wid) {
      throw DataError("track " + std::to_string(id) +
                      " has inconsistent length/width in " + path.string());
    }
    if (!std::isfinite(f.x) || !std::isfinite(f.y) || !std::isfinite(f.vx) ||
        !std::isfinite(f.vy) || !std::isfinite(f.psi) || !std::isfinite(len) ||
        !std::isfinite(wid))
      has_nan[id] = true;
    tr.frames.push_back(f);
  }

  TrackLoad out;
  for (auto& [id, tr] : by_id) {
    if (has_nan.count(id)) {
      out.warnings.push_back("track " + std::to_string(id) +
                             " dropped: non-finite coordinate");
      continue;
    }
    std::stable_sort(tr.frames.begin(), tr.frames.end(),
                     [](const TrackFrame& a, const TrackFrame& b) { return a.t_ms < b.t_ms; });
    for (size_t k = 1; k < tr.frames.size(); ++k) {
      if (tr.frames[k].t_ms == tr.frames[k - 1].t_ms)
        throw DataError("track " + std::to_string(id) + " has duplicate frame " +
                        std::to_string(tr.frames[k].t_ms) + " ms");
      if (tr.frames[k].t_ms != tr.frames[k - 1].t_ms + 100)
        throw DataError("track " + std::to_string(id) + " breaks the 100 ms frame spacing at " +
                        std::to_string(tr.frames[k].t_ms) + " ms");
    }
    out.tracks.push_back(std::move(tr));
  }
  return out;
}

void save_tracks(const std::filesystem::path& path, const std::vector<RawTrack>& tracks) {
  std::ostringstream out;
  out << kHeader << "\n";
  for (const RawTrack& tr : tracks)
    for (const TrackFrame& f : tr.frames)
      out << tr.id << "," << f.t_ms << "," << fmt_double(f.x) << "," << fmt_double(f.y)
          << "," << fmt_double(f.vx) << "," << fmt_double(f.vy) << ","
          << fmt_double(f.psi) << "," << fmt_double(tr.length) << ","
          << fmt_double(tr.width) << "\n";
  write_text(path, out.str());
}

}  // namespace carfollow::data
