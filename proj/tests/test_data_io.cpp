#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "carfollow/common.hpp"
#include "carfollow/features.hpp"
#include "carfollow/tracks.hpp"

using carfollow::DataError;
using carfollow::Rng;
using namespace carfollow::data;

namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<RawTrack> sample_tracks() {
  Rng rng(99);
  std::vector<RawTrack> tracks;
  for (long id : {3L, 7L}) {
    RawTrack tr;
    tr.id = id;
    tr.length = 4.0 + rng.uniform();
    tr.width = 1.7 + 0.2 * rng.uniform();
    for (long k = 0; k < 20; ++k) {
      TrackFrame f;
      f.t_ms = 100 * k;
      f.x = rng.normal(50.0, 20.0);
      f.y = rng.normal(0.0, 2.0);
      f.vx = rng.normal(10.0, 1.0);
      f.vy = rng.normal(0.0, 0.1);
      f.psi = rng.normal(0.0, 0.05);
      tr.frames.push_back(f);
    }
    tracks.push_back(tr);
  }
  return tracks;
}

}  // namespace

TEST_CASE("track csv round trip is lossless") {
  auto dir = temp_dir("cf_tracks_rt");
  auto tracks = sample_tracks();
  save_tracks(dir / "tracks.csv", tracks);
  auto loaded = load_tracks(dir / "tracks.csv");
  CHECK(loaded.warnings.empty());
  REQUIRE(loaded.tracks.size() == tracks.size());
  for (size_t i = 0; i < tracks.size(); ++i) {
    CHECK(loaded.tracks[i].id == tracks[i].id);
    CHECK(loaded.tracks[i].length == tracks[i].length);
    CHECK(loaded.tracks[i].width == tracks[i].width);
    REQUIRE(loaded.tracks[i].frames.size() == tracks[i].frames.size());
    for (size_t k = 0; k < tracks[i].frames.size(); ++k) {
      const auto& a = loaded.tracks[i].frames[k];
      const auto& b = tracks[i].frames[k];
      CHECK(a.t_ms == b.t_ms);
      CHECK(a.x == b.x);
      CHECK(a.y == b.y);
      CHECK(a.vx == b.vx);
      CHECK(a.vy == b.vy);
      CHECK(a.psi == b.psi);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("tracks with NaN are dropped with a warning") {
  auto dir = temp_dir("cf_tracks_nan");
  auto tracks = sample_tracks();
  tracks[0].frames[5].y = std::nan("");
  save_tracks(dir / "tracks.csv", tracks);
  auto loaded = load_tracks(dir / "tracks.csv");
  REQUIRE(loaded.tracks.size() == 1);
  CHECK(loaded.tracks[0].id == 7);
  REQUIRE(loaded.warnings.size() == 1);
  CHECK(loaded.warnings[0].find("track 3") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("track csv structural errors") {
  auto dir = temp_dir("cf_tracks_bad");
  carfollow::write_text(dir / "bad_header.csv", "id,frame\n1,0\n");
  CHECK_THROWS_AS(load_tracks(dir / "bad_header.csv"), DataError);

  carfollow::write_text(dir / "ragged.csv",
                        "track_id,frame_ms,x,y,vx,vy,psi,length,width\n"
                        "1,0,0,0,1,0,0,4.5\n");
  CHECK_THROWS_AS(load_tracks(dir / "ragged.csv"), DataError);

  carfollow::write_text(dir / "dup.csv",
                        "track_id,frame_ms,x,y,vx,vy,psi,length,width\n"
                        "1,0,0,0,1,0,0,4.5,1.8\n"
                        "1,0,1,0,1,0,0,4.5,1.8\n");
  CHECK_THROWS_AS(load_tracks(dir / "dup.csv"), DataError);

  carfollow::write_text(dir / "gap.csv",
                        "track_id,frame_ms,x,y,vx,vy,psi,length,width\n"
                        "1,0,0,0,1,0,0,4.5,1.8\n"
                        "1,100,1,0,1,0,0,4.5,1.8\n"
                        "1,300,2,0,1,0,0,4.5,1.8\n");
  CHECK_THROWS_AS(load_tracks(dir / "gap.csv"), DataError);
  fs::remove_all(dir);
}

TEST_CASE("tau_inv matches its frozen value and the angle-rate oracle") {
  CHECK(tau_inv_feature(10.0, -1.0, 2.0) ==
        doctest::Approx(-0.09900990099009901).epsilon(1e-15));

  // oracle: theta(t) = 2 atan(w / 2d(t)) with d-dot = dv; tau_inv is
  // -theta_dot normalized by the small-angle size w/d
  double d = 10.0, dv = -1.0, w = 2.0, h = 1e-6;
  auto theta = [&](double t) { return 2.0 * std::atan(w / (2.0 * (d + dv * t))); };
  double theta_dot = (theta(h) - theta(-h)) / (2.0 * h);
  CHECK(tau_inv_feature(d, dv, w) == doctest::Approx(-theta_dot / (w / d)).epsilon(1e-9));
}

TEST_CASE("tau_inv sign follows dv") {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    double d = rng.uniform(0.5, 80.0);
    double dv = rng.uniform(-8.0, 8.0);
    double w = rng.uniform(1.5, 2.5);
    double ti = tau_inv_feature(d, dv, w);
    if (dv > 0) CHECK(ti > 0);
    if (dv < 0) CHECK(ti < 0);
    if (dv == 0) CHECK(ti == 0);
  }
}

TEST_CASE("compute_features differences acceleration and drops the last frame") {
  std::vector<double> s_ego = {0.0, 1.0, 2.1};
  std::vector<double> v_ego = {10.0, 10.5, 11.0};
  std::vector<double> s_lead = {20.0, 21.0, 22.0};
  std::vector<double> v_lead = {10.0, 10.0, 10.0};
  auto ff = compute_features(s_ego, v_ego, s_lead, v_lead, 5.0, 4.0, 1.8, 0.1);
  REQUIRE(ff.size() == 2);
  CHECK(ff[0].d == doctest::Approx(15.5));
  CHECK(ff[0].dv == doctest::Approx(0.0));
  CHECK(ff[0].v == 10.0);
  CHECK(ff[0].a == doctest::Approx(5.0));
  CHECK(ff[1].a == doctest::Approx(5.0));

  std::vector<double> close = {19.0, 19.0, 19.0};
  std::vector<double> ego_far = {15.0, 15.0, 15.0};
  CHECK_THROWS_AS(
      compute_features(ego_far, v_ego, close, v_lead, 5.0, 4.0, 1.8, 0.1),
      DataError);
}

namespace {

Episode make_episode(uint64_t seed, size_t n = 60) {
  Rng rng(seed);
  std::vector<double> s_ego(n + 1), v_ego(n + 1), s_lead(n + 1), v_lead(n + 1);
  double se = 0.0, sl = 25.0, ve = 10.0, vl = 10.0;
  for (size_t k = 0; k <= n; ++k) {
    s_ego[k] = se;
    v_ego[k] = ve;
    s_lead[k] = sl;
    v_lead[k] = vl;
    double a = rng.normal(0.0, 0.4);
    ve = std::max(0.0, ve + a * 0.1);
    se += ve * 0.1;
    vl = std::max(0.0, vl + rng.normal(0.0, 0.2) * 0.1);
    sl += vl * 0.1;
  }
  Episode ep;
  ep.id = "ep_0000";
  ep.ego_id = 1;
  ep.lead_id = 2;
  ep.ego_len = 4.2;
  ep.lead_len = 4.8;
  ep.lead_width = 1.9;
  ep.s0_ego = s_ego[0];
  ep.source = "synth";
  ep.frames = compute_features(s_ego, v_ego, s_lead, v_lead, ep.ego_len,
                               ep.lead_len, ep.lead_width, ep.dt);
  return ep;
}

}  // namespace

TEST_CASE("episode archive round trip") {
  auto dir = temp_dir("cf_episodes_rt");
  std::vector<Episode> eps = {make_episode(11)};
  eps[0].frames[3].action_id = 7;
  save_episodes(dir, eps);
  auto loaded = load_episodes(dir);
  REQUIRE(loaded.size() == 1);
  const Episode& a = loaded[0];
  const Episode& b = eps[0];
  CHECK(a.id == b.id);
  CHECK(a.ego_id == b.ego_id);
  CHECK(a.lead_id == b.lead_id);
  CHECK(a.ego_len == b.ego_len);
  CHECK(a.lead_len == b.lead_len);
  CHECK(a.lead_width == b.lead_width);
  CHECK(a.s0_ego == b.s0_ego);
  REQUIRE(a.frames.size() == b.frames.size());
  for (size_t k = 0; k < a.frames.size(); ++k) {
    CHECK(a.frames[k].d == b.frames[k].d);
    CHECK(a.frames[k].dv == b.frames[k].dv);
    CHECK(a.frames[k].tau_inv == b.frames[k].tau_inv);
    CHECK(a.frames[k].v == b.frames[k].v);
    CHECK(a.frames[k].a == b.frames[k].a);
    CHECK(a.frames[k].action_id == b.frames[k].action_id);
  }
  fs::remove_all(dir);
}

TEST_CASE("loading an episode without its sidecar fails") {
  auto dir = temp_dir("cf_episodes_nosidecar");
  save_episodes(dir, {make_episode(12)});
  fs::remove(dir / "ep_0000.json");
  CHECK_THROWS_AS(load_episodes(dir), DataError);
  fs::remove_all(dir);
}

TEST_CASE("episode validation") {
  Episode ok = make_episode(13);
  CHECK_NOTHROW(validate_episode(ok));

  Episode short_ep = ok;
  short_ep.frames.resize(40);
  CHECK_THROWS_AS(validate_episode(short_ep), DataError);

  Episode bad_a = ok;
  bad_a.frames[10].a += 0.5;
  CHECK_THROWS_AS(validate_episode(bad_a), DataError);
}

TEST_CASE("lead playback is consistent with stored gaps") {
  Episode ep = make_episode(14);
  auto se = ego_positions(ep);
  auto lp = lead_playback(ep);
  for (size_t k = 0; k < ep.frames.size(); ++k) {
    double gap = (lp.s[k] - 0.5 * ep.lead_len) - (se[k] + 0.5 * ep.ego_len);
    CHECK(gap == doctest::Approx(ep.frames[k].d).epsilon(1e-12));
    CHECK(lp.v[k] == doctest::Approx(ep.frames[k].v + ep.frames[k].dv));
  }
}
