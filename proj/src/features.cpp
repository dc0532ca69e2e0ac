#include "carfollow/features.hpp"

#include <cmath>
#include <json.hpp>
#include <sstream>

namespace carfollow::data {

using nlohmann::json;

std::vector<FeatureFrame> compute_features(std::span<const double> s_ego,
                                           std::span<const double> v_ego,
                                           std::span<const double> s_lead,
                                           std::span<const double> v_lead,
                                           double ego_len, double lead_len,
                                           double lead_width, double dt) {
  size_t n = s_ego.size();
  if (v_ego.size() != n || s_lead.size() != n || v_lead.size() != n)
    throw DataError("feature input series have mismatched lengths");
  if (n < 2) throw DataError("need at least 2 frames to difference acceleration");
  std::vector<FeatureFrame> out(n - 1);
  for (size_t k = 0; k + 1 < n; ++k) {
    FeatureFrame& f = out[k];
    f.d = (s_lead[k] - 0.5 * lead_len) - (s_ego[k] + 0.5 * ego_len);
    if (f.d <= 0.0)
      throw DataError("non-positive gap at frame " + std::to_string(k));
    f.dv = v_lead[k] - v_ego[k];
    f.tau_inv = tau_inv_feature(f.d, f.dv, lead_width);
    f.v = v_ego[k];
    f.a = (v_ego[k + 1] - v_ego[k]) / dt;
  }
  return out;
}

void validate_episode(const Episode& ep) {
  if (ep.frames.size() < 50)
    throw DataError("episode " + ep.id + " shorter than 5 s");
  for (size_t k = 0; k < ep.frames.size(); ++k) {
    const FeatureFrame& f = ep.frames[k];
    if (!(f.d > 0.0))
      throw DataError("episode " + ep.id + " has non-positive gap at frame " +
                      std::to_string(k));
    for (double v : {f.d, f.dv, f.tau_inv, f.v, f.a})
      if (!std::isfinite(v))
        throw DataError("episode " + ep.id + " has non-finite feature at frame " +
                        std::to_string(k));
    if (k + 1 < ep.frames.size()) {
      double v_next = f.v + f.a * ep.dt;
      if (std::abs(v_next - ep.frames[k + 1].v) > 1e-6)
        throw DataError("episode " + ep.id +
                        " acceleration inconsistent with speeds at frame " +
                        std::to_string(k));
    }
  }
}

std::vector<double> ego_positions(const Episode& ep) {
  std::vector<double> s(ep.frames.size());
  s[0] = ep.s0_ego;
  for (size_t k = 1; k < s.size(); ++k)
    s[k] = s[k - 1] + ep.frames[k].v * ep.dt;
  return s;
}

LeadPlayback lead_playback(const Episode& ep) {
  std::vector<double> se = ego_positions(ep);
  LeadPlayback lp;
  lp.s.resize(se.size());
  lp.v.resize(se.size());
  for (size_t k = 0; k < se.size(); ++k) {
    lp.s[k] = se[k] + 0.5 * ep.ego_len + ep.frames[k].d + 0.5 * ep.lead_len;
    lp.v[k] = ep.frames[k].v + ep.frames[k].dv;
  }
  return lp;
}

namespace {

std::string time_label(size_t k, double dt) {
  // divide instead of multiply so 10 Hz stamps print as 0.1, 0.2, ...
  double t = std::abs(dt - 0.1) < 1e-12 ? static_cast<double>(k) / 10.0
                                        : static_cast<double>(k) * dt;
  return fmt_double(t);
}

}  // namespace

void save_episodes(const std::filesystem::path& dir, const std::vector<Episode>& eps) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["format_version"] = 1;
  manifest["episodes"] = json::array();
  for (const Episode& ep : eps) {
    manifest["episodes"].push_back(ep.id);
    std::ostringstream csv;
    csv << "t,d,dv,tau_inv,v,a,action_id\n";
    for (size_t k = 0; k < ep.frames.size(); ++k) {
      const FeatureFrame& f = ep.frames[k];
      csv << time_label(k, ep.dt) << "," << fmt_double(f.d) << "," << fmt_double(f.dv)
          << "," << fmt_double(f.tau_inv) << "," << fmt_double(f.v) << ","
          << fmt_double(f.a) << "," << f.action_id << "\n";
    }
    write_text(dir / (ep.id + ".csv"), csv.str());

    json side;
    side["id"] = ep.id;
    side["ego_id"] = ep.ego_id;
    side["lead_id"] = ep.lead_id;
    side["dt"] = ep.dt;
    side["ego_len"] = ep.ego_len;
    side["lead_len"] = ep.lead_len;
    side["lead_width"] = ep.lead_width;
    side["s0_ego"] = ep.s0_ego;
    side["source"] = ep.source;
    side["n_frames"] = ep.frames.size();
    write_text(dir / (ep.id + ".json"), side.dump(2) + "\n");
  }
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

std::vector<Episode> load_episodes(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_text(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw DataError("bad manifest in " + dir.string() + ": " + e.what());
  }
  std::vector<Episode> eps;
  for (const auto& id_json : manifest.at("episodes")) {
    std::string id = id_json.get<std::string>();
    Episode ep;
    ep.id = id;

    auto side_path = dir / (id + ".json");
    if (!std::filesystem::exists(side_path))
      throw DataError("episode " + id + " is missing its metadata sidecar");
    json side;
    try {
      side = json::parse(read_text(side_path));
    } catch (const json::exception& e) {
      throw DataError("bad sidecar for " + id + ": " + e.what());
    }
    try {
      ep.ego_id = side.at("ego_id").get<long>();
      ep.lead_id = side.at("lead_id").get<long>();
      ep.dt = side.at("dt").get<double>();
      ep.ego_len = side.at("ego_len").get<double>();
      ep.lead_len = side.at("lead_len").get<double>();
      ep.lead_width = side.at("lead_width").get<double>();
      ep.s0_ego = side.at("s0_ego").get<double>();
      ep.source = side.at("source").get<std::string>();
    } catch (const json::exception& e) {
      throw DataError("sidecar for " + id + " misses a field: " + e.what());
    }

    auto lines = read_lines(dir / (id + ".csv"));
    if (lines.empty() || trim(lines[0]) != "t,d,dv,tau_inv,v,a,action_id")
      throw DataError("episode csv header mismatch for " + id);
    for (size_t i = 1; i < lines.size(); ++i) {
      if (trim(lines[i]).empty()) continue;
      auto cols = split(lines[i], ',');
      if (cols.size() != 7)
        throw DataError("episode " + id + " row " + std::to_string(i + 1) +
                        " has " + std::to_string(cols.size()) + " columns");
      FeatureFrame f;
      f.d = parse_double(cols[1], "d");
      f.dv = parse_double(cols[2], "dv");
      f.tau_inv = parse_double(cols[3], "tau_inv");
      f.v = parse_double(cols[4], "v");
      f.a = parse_double(cols[5], "a");
      f.action_id = static_cast<int>(parse_long(cols[6], "action_id"));
      ep.frames.push_back(f);
    }
    if (side.at("n_frames").get<size_t>() != ep.frames.size())
      throw DataError("episode " + id + " frame count disagrees with sidecar");
    eps.push_back(std::move(ep));
  }
  return eps;
}

}  // namespace carfollow::data
