#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "carfollow/idm.hpp"
#include "carfollow/synth.hpp"

using namespace carfollow;
using idm::IdmParams;

namespace {
IdmParams ref_params() {
  IdmParams p;
  p.v_des = 30.0;
  p.d0 = 2.0;
  p.tau = 1.5;
  p.a_max = 1.5;
  p.b = 2.0;
  return p;
}
}  // namespace

TEST_CASE("idm desired gap closed form") {
  IdmParams p = ref_params();
  // v=20, lead pulling away at 2: 32 - 40/(2*sqrt(3))
  CHECK(idm::desired_gap(p, 20.0, 2.0) == doctest::Approx(20.45299461620748).epsilon(1e-12));
  // closing traffic wants more room than steady state, opening traffic less
  CHECK(idm::desired_gap(p, 20.0, -2.0) > idm::desired_gap(p, 20.0, 0.0));
  CHECK(idm::desired_gap(p, 20.0, 2.0) < idm::desired_gap(p, 20.0, 0.0));
  CHECK(idm::desired_gap(p, 0.0, 5.0) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(idm::desired_gap(p, 0.0, -3.0) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(idm::desired_gap(p, 20.0, 0.0) == doctest::Approx(32.0).epsilon(1e-12));
}

TEST_CASE("idm acceleration closed form") {
  IdmParams p = ref_params();
  CHECK(idm::accel_mean(p, 30.0, 2.0, 20.0) ==
        doctest::Approx(0.5064953890860164).epsilon(1e-12));
  // standstill at the jam distance
  CHECK(idm::accel_mean(p, 2.0, 0.0, 0.0) == doctest::Approx(0.0).epsilon(1e-15));
  // at desired speed with a far-away lead the accel vanishes from below
  double a_far = idm::accel_mean(p, 1e9, 0.0, 30.0);
  CHECK(a_far < 0.0);
  CHECK(a_far > -1e-10);
  CHECK_THROWS_AS(idm::accel_mean(p, 0.0, 0.0, 10.0), DataError);
  CHECK_THROWS_AS(idm::accel_mean(p, -2.0, 0.0, 10.0), DataError);
}

TEST_CASE("idm feature convention flips the relative speed sign") {
  IdmParams p = ref_params();
  // dv = v_lead - v_ego = -2 means closing at 2
  CHECK(idm::accel_from_features(p, 30.0, -2.0, 20.0) ==
        doctest::Approx(idm::accel_mean(p, 30.0, 2.0, 20.0)).epsilon(1e-15));
}

TEST_CASE("idm equilibrium gap zeroes the acceleration") {
  IdmParams p;  // defaults
  for (double v : {0.5, 4.0, 8.0, 12.0, 14.0}) {
    double d = idm::equilibrium_gap(p, v);
    CHECK(std::abs(idm::accel_mean(p, d, 0.0, v)) < 1e-12);
  }
  CHECK_THROWS_AS(idm::equilibrium_gap(p, p.v_des), DataError);
  CHECK_THROWS_AS(idm::equilibrium_gap(p, p.v_des + 1.0), DataError);
}

TEST_CASE("idm accel is monotone in gap and speed where it should be") {
  IdmParams p;
  // larger gap, same speeds: accel must not decrease
  double prev = -1e9;
  for (double d = 5.0; d <= 60.0; d += 5.0) {
    double a = idm::accel_from_features(p, d, 0.0, 10.0);
    CHECK(a >= prev);
    prev = a;
  }
  // faster ego at fixed gap brakes harder
  prev = 1e9;
  for (double v = 2.0; v <= 14.0; v += 2.0) {
    double a = idm::accel_from_features(p, 20.0, 0.0, v);
    CHECK(a <= prev);
    prev = a;
  }
}

TEST_CASE("idm sampled actions stay inside the accel bounds") {
  IdmParams p;
  p.sigma = 50.0;  // force the clamp
  Rng rng(7);
  double lo = 1e9, hi = -1e9;
  for (int i = 0; i < 1000; ++i) {
    double a = idm::sample_action(p, 20.0, 0.0, 10.0, rng);
    CHECK(a >= -8.0);
    CHECK(a <= 5.0);
    lo = std::min(lo, a);
    hi = std::max(hi, a);
  }
  CHECK(lo == -8.0);  // both bounds are actually hit at this noise level
  CHECK(hi == 5.0);
}

TEST_CASE("idm parameter file round trip and validation") {
  auto dir = std::filesystem::temp_directory_path() / "cf_idm_io";
  std::filesystem::create_directories(dir);
  IdmParams p;
  p.v_des = 17.25;
  p.sigma = 0.0732421875;
  idm::save_idm(dir / "p.txt", p);
  IdmParams q = idm::load_idm(dir / "p.txt");
  CHECK(q.v_des == p.v_des);
  CHECK(q.d0 == p.d0);
  CHECK(q.tau == p.tau);
  CHECK(q.a_max == p.a_max);
  CHECK(q.b == p.b);
  CHECK(q.sigma == p.sigma);

  write_text(dir / "unknown.txt",
             "v_des=15\nd0=2\ntau=1.5\na_max=1.5\nb=2\nsigma=0.3\nextra=1\n");
  CHECK_THROWS_AS(idm::load_idm(dir / "unknown.txt"), DataError);
  write_text(dir / "missing.txt", "v_des=15\nd0=2\ntau=1.5\na_max=1.5\nb=2\n");
  CHECK_THROWS_AS(idm::load_idm(dir / "missing.txt"), DataError);
  write_text(dir / "dup.txt",
             "v_des=15\nv_des=16\nd0=2\ntau=1.5\na_max=1.5\nb=2\nsigma=0.3\n");
  CHECK_THROWS_AS(idm::load_idm(dir / "dup.txt"), DataError);
  write_text(dir / "noeq.txt", "v_des 15\n");
  CHECK_THROWS_AS(idm::load_idm(dir / "noeq.txt"), DataError);
}

TEST_CASE("idm fit recovers generating parameters from noisy rollouts") {
  IdmParams truth;  // defaults: 15, 2, 1.5, 1.5, 2, sigma overridden below
  auto profiles = data::mixed_profiles(6, 51);
  auto synth = data::synth_generate(truth, profiles, 0.05, 12, 51);

  idm::FitResult fit = idm::fit_idm(synth.episodes);
  CHECK(std::abs(fit.params.v_des - truth.v_des) / truth.v_des < 0.10);
  CHECK(std::abs(fit.params.d0 - truth.d0) / truth.d0 < 0.10);
  CHECK(std::abs(fit.params.tau - truth.tau) / truth.tau < 0.10);
  CHECK(fit.params.sigma == doctest::Approx(0.05).epsilon(0.25));
  CHECK_FALSE(fit.rank_deficient);

  // profiled-sigma NLL is non-increasing along the accepted steps
  REQUIRE(fit.nll_curve.size() >= 2);
  for (size_t i = 1; i < fit.nll_curve.size(); ++i)
    CHECK(fit.nll_curve[i] <= fit.nll_curve[i - 1] + 1e-9);

  // the fit is a deterministic function of the data
  idm::FitResult again = idm::fit_idm(synth.episodes);
  CHECK(again.params.v_des == fit.params.v_des);
  CHECK(again.params.d0 == fit.params.d0);
  CHECK(again.params.tau == fit.params.tau);
  CHECK(again.params.a_max == fit.params.a_max);
  CHECK(again.params.b == fit.params.b);
  CHECK(again.params.sigma == fit.params.sigma);
  CHECK(again.nll_curve == fit.nll_curve);
}

TEST_CASE("idm fit flags unidentifiable data") {
  data::Episode ep;
  ep.id = "const";
  for (int i = 0; i < 80; ++i) ep.frames.push_back({20.0, 0.0, 0.0, 10.0, 0.0, -1});
  idm::FitResult fit = idm::fit_idm({ep});
  CHECK(fit.rank_deficient);
}

TEST_CASE("idm fit rejects too little data") {
  data::Episode ep;
  for (int i = 0; i < 10; ++i) ep.frames.push_back({20.0, 0.0, 0.0, 10.0, 0.0, -1});
  CHECK_THROWS_AS(idm::fit_idm({ep}), DataError);
}
