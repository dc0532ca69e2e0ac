#include <array>
#include <cmath>
#include <doctest.h>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <vector>

#include "carfollow/aida.hpp"
#include "carfollow/codebook.hpp"
#include "carfollow/features.hpp"

using namespace carfollow;
using namespace carfollow::aida;

namespace {

constexpr double kLn2Pi = 1.8378770664093453;

AidaParams random_params(int S, int A, int H, uint64_t seed) {
  AidaParams p;
  p.S = S;
  p.A = A;
  p.H_max = H;
  Rng rng(seed);
  p.trans_logits.resize(static_cast<size_t>(S) * static_cast<size_t>(A) * static_cast<size_t>(S));
  for (double& x : p.trans_logits) x = rng.normal();
  p.pref_logits.resize(static_cast<size_t>(S));
  for (double& x : p.pref_logits) x = rng.normal();
  p.obs_mean.resize(3 * static_cast<size_t>(S));
  for (double& x : p.obs_mean) x = rng.uniform(-3.0, 3.0);
  p.obs_logstd.resize(3 * static_cast<size_t>(S));
  for (double& x : p.obs_logstd) x = rng.uniform(-0.5, 0.5);
  p.horizon_lograte = std::log(rng.uniform(1.0, 6.0));
  return p;
}

AidaParams flat_params(int S, int A, int H) {
  AidaParams p;
  p.S = S;
  p.A = A;
  p.H_max = H;
  p.trans_logits.assign(static_cast<size_t>(S) * static_cast<size_t>(A) * static_cast<size_t>(S), 0.0);
  p.pref_logits.assign(static_cast<size_t>(S), 0.0);
  p.obs_mean.assign(3 * static_cast<size_t>(S), 0.0);
  for (int s = 0; s < S; ++s)
    for (int k = 0; k < 3; ++k) p.obs_mean[static_cast<size_t>(3 * s + k)] = s + 0.1 * k;
  p.obs_logstd.assign(3 * static_cast<size_t>(S), 0.0);
  p.horizon_lograte = std::log(10.0);
  return p;
}

// means near the feature ranges and spreads wide enough to keep every
// state plausible: the loss stays O(10) so finite differences are clean
AidaParams scaled_params(int S, int A, int H, uint64_t seed) {
  AidaParams p = random_params(S, A, H, seed);
  Rng rng(seed ^ 0x5ca1ed);
  const double lo[3] = {15.0, -3.0, -0.5}, hi[3] = {30.0, 3.0, 0.5};
  const double base[3] = {std::log(2.5), std::log(1.5), std::log(0.5)};
  for (int s = 0; s < S; ++s)
    for (int k = 0; k < 3; ++k) {
      p.obs_mean[static_cast<size_t>(3 * s + k)] = rng.uniform(lo[k], hi[k]);
      p.obs_logstd[static_cast<size_t>(3 * s + k)] = base[k] + rng.uniform(-0.3, 0.3);
    }
  return p;
}

std::vector<double> random_belief(int S, Rng& rng) {
  std::vector<double> b(static_cast<size_t>(S));
  double tot = 0.0;
  for (double& x : b) {
    x = rng.uniform(0.05, 1.0);
    tot += x;
  }
  for (double& x : b) x /= tot;
  return b;
}

std::vector<data::Episode> labeled_episodes(int n_eps, int n_frames, int n_actions,
                                            uint64_t seed, double d_lo = 5.0,
                                            double d_hi = 50.0) {
  std::vector<data::Episode> eps;
  Rng rng(seed);
  for (int e = 0; e < n_eps; ++e) {
    data::Episode ep;
    ep.id = "a" + std::to_string(e);
    for (int i = 0; i < n_frames; ++i) {
      data::FeatureFrame f;
      f.d = rng.uniform(d_lo, d_hi);
      f.dv = rng.uniform(-3.0, 3.0);
      f.tau_inv = data::tau_inv_feature(f.d, f.dv, 1.8);
      f.v = rng.uniform(5.0, 15.0);
      f.a = rng.uniform(-2.0, 2.0);
      f.action_id = static_cast<int>(rng.index(n_actions));
      ep.frames.push_back(f);
    }
    eps.push_back(std::move(ep));
  }
  return eps;
}

// independent dense oracle: distributions, free energy, closed-form policy
struct Oracle {
  int S, A;
  std::vector<std::vector<double>> trans;  // [s*A+a][s']
  std::vector<double> pref;
  std::vector<double> ent;
  std::vector<double> efe;  // [s*A+a]

  explicit Oracle(const AidaParams& p) : S(p.S), A(p.A) {
    auto soft = [](const std::vector<double>& x) {
      double m = *std::max_element(x.begin(), x.end());
      double z = 0.0;
      for (double v : x) z += std::exp(v - m);
      std::vector<double> out(x.size());
      for (size_t i = 0; i < x.size(); ++i) out[i] = std::exp(x[i] - m) / z;
      return out;
    };
    for (int s = 0; s < S; ++s)
      for (int a = 0; a < A; ++a) {
        std::vector<double> row(p.trans_logits.begin() + (static_cast<long>(s) * A + a) * S,
                                p.trans_logits.begin() + (static_cast<long>(s) * A + a + 1) * S);
        trans.push_back(soft(row));
      }
    pref = soft(p.pref_logits);
    for (int s = 0; s < S; ++s) {
      double e = 1.5 * (1.0 + kLn2Pi);
      for (int k = 0; k < 3; ++k) e += p.obs_logstd[static_cast<size_t>(3 * s + k)];
      ent.push_back(e);
    }
    for (int s = 0; s < S; ++s)
      for (int a = 0; a < A; ++a) {
        const auto& row = trans[static_cast<size_t>(s * A + a)];
        double v = 0.0;
        for (int t = 0; t < S; ++t)
          v += row[static_cast<size_t>(t)] *
               (std::log(row[static_cast<size_t>(t)] / pref[static_cast<size_t>(t)]) +
                ent[static_cast<size_t>(t)]);
        efe.push_back(v);
      }
  }

  // closed-form self-consistent policy: pi_h = softmax(-q_h / 2)
  void solve(int H, std::vector<std::vector<double>>& pi,
             std::vector<std::vector<double>>& vv) const {
    std::vector<double> v(static_cast<size_t>(S), 0.0);
    for (int h = 1; h <= H; ++h) {
      std::vector<double> piH(static_cast<size_t>(S * A)), vH(static_cast<size_t>(S));
      for (int s = 0; s < S; ++s) {
        std::vector<double> q(static_cast<size_t>(A));
        for (int a = 0; a < A; ++a) {
          double acc = efe[static_cast<size_t>(s * A + a)];
          const auto& row = trans[static_cast<size_t>(s * A + a)];
          for (int t = 0; t < S; ++t) acc += row[static_cast<size_t>(t)] * v[static_cast<size_t>(t)];
          q[static_cast<size_t>(a)] = acc;
        }
        double m = -q[0] / 2.0;
        for (int a = 1; a < A; ++a) m = std::max(m, -q[static_cast<size_t>(a)] / 2.0);
        double z = 0.0;
        for (int a = 0; a < A; ++a) z += std::exp(-q[static_cast<size_t>(a)] / 2.0 - m);
        for (int a = 0; a < A; ++a)
          piH[static_cast<size_t>(s * A + a)] = std::exp(-q[static_cast<size_t>(a)] / 2.0 - m) / z;
        vH[static_cast<size_t>(s)] = -2.0 * (m + std::log(z));
      }
      pi.push_back(piH);
      vv.push_back(vH);
      v = vH;
    }
  }

  // literal expectation over every action/state path of the cumulative
  // free energy plus twice the policy log-probability
  double enumerate_value(int s0, int H, const std::vector<std::vector<double>>& pi) const {
    if (H == 0) return 0.0;
    const auto& pH = pi[static_cast<size_t>(H - 1)];
    double total = 0.0;
    for (int a = 0; a < A; ++a) {
      double pa = pH[static_cast<size_t>(s0 * A + a)];
      double inner = efe[static_cast<size_t>(s0 * A + a)] + 2.0 * std::log(pa);
      double cont = 0.0;
      const auto& row = trans[static_cast<size_t>(s0 * A + a)];
      for (int t = 0; t < S; ++t)
        cont += row[static_cast<size_t>(t)] * enumerate_value(t, H - 1, pi);
      total += pa * (inner + cont);
    }
    return total;
  }
};

}  // namespace

TEST_CASE("observation log-likelihood matches the Gaussian density") {
  AidaParams p = flat_params(4, 2, 3);
  std::array<double, 3> o{1.0, 1.1, 1.2};  // the means of state 1
  CHECK(obs_loglik(p, o, 1) == doctest::Approx(-1.5 * kLn2Pi).epsilon(1e-14));
  CHECK(obs_loglik(p, o, 1) == doctest::Approx(-2.756815599614018).epsilon(1e-12));

  AidaParams wide = p;
  for (double& x : wide.obs_logstd) x = std::log(2.0);
  CHECK(obs_loglik(p, o, 1) - obs_loglik(wide, o, 1) ==
        doctest::Approx(3.0 * std::log(2.0)).epsilon(1e-12));

  AidaParams r = random_params(5, 2, 3, 91);
  Rng rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    std::array<double, 3> obs{rng.uniform(-4.0, 4.0), rng.uniform(-4.0, 4.0),
                              rng.uniform(-4.0, 4.0)};
    int s = static_cast<int>(rng.index(5));
    double want = 0.0;
    for (int k = 0; k < 3; ++k) {
      double mu = r.obs_mean[static_cast<size_t>(3 * s + k)];
      double sd = std::exp(r.obs_logstd[static_cast<size_t>(3 * s + k)]);
      double d = obs[static_cast<size_t>(k)] - mu;
      want += -0.5 * kLn2Pi - std::log(sd) - d * d / (2.0 * sd * sd);
    }
    CHECK(obs_loglik(r, obs, s) == doctest::Approx(want).epsilon(1e-12));
  }
  auto all = obs_loglik_all(r, {0.0, 0.0, 0.0});
  for (int s = 0; s < 5; ++s)
    CHECK(all[static_cast<size_t>(s)] == obs_loglik(r, {0.0, 0.0, 0.0}, s));
}

TEST_CASE("prior predictive pushes the belief through the dynamics") {
  AidaParams p = flat_params(4, 2, 3);
  // +800 diagonal logits underflow the off-diagonal mass to exactly zero
  for (int s = 0; s < 4; ++s)
    for (int a = 0; a < 2; ++a)
      p.trans_logits[static_cast<size_t>((s * 2 + a) * 4 + s)] = 800.0;
  std::vector<double> b{0.4, 0.3, 0.2, 0.1};
  CHECK(prior_predictive(b, 0, p) == b);

  AidaParams u = flat_params(4, 2, 3);  // uniform rows
  for (double x : prior_predictive(b, 1, u))
    CHECK(x == doctest::Approx(0.25).epsilon(1e-15));

  AidaParams r = random_params(3, 2, 3, 5);
  Oracle ora(r);
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> bb = random_belief(3, rng);
    int a = static_cast<int>(rng.index(2));
    auto got = prior_predictive(bb, a, r);
    for (int t = 0; t < 3; ++t) {
      double want = 0.0;
      for (int s = 0; s < 3; ++s)
        want += bb[static_cast<size_t>(s)] * ora.trans[static_cast<size_t>(s * 2 + a)][static_cast<size_t>(t)];
      CHECK(got[static_cast<size_t>(t)] == doctest::Approx(want).epsilon(1e-13));
    }
    double mass = std::accumulate(got.begin(), got.end(), 0.0);
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(prior_predictive({0.5, 0.5}, 0, r), DataError);
  CHECK_THROWS_AS(prior_predictive(b, 5, r), DataError);
}

TEST_CASE("belief update follows Bayes rule") {
  // constant likelihood across states: posterior equals the prior predictive
  AidaParams c = random_params(4, 2, 3, 17);
  for (int s = 0; s < 4; ++s)
    for (int k = 0; k < 3; ++k) {
      c.obs_mean[static_cast<size_t>(3 * s + k)] = 0.5 * k;
      c.obs_logstd[static_cast<size_t>(3 * s + k)] = 0.1;
    }
  Rng rng(8);
  std::vector<double> b = random_belief(4, rng);
  auto prior = prior_predictive(b, 1, c);
  auto post = belief_update(b, 1, {1.0, -0.5, 2.0}, c);
  CHECK_FALSE(post.shock);
  for (int s = 0; s < 4; ++s)
    CHECK(post.b[static_cast<size_t>(s)] == doctest::Approx(prior[static_cast<size_t>(s)]).epsilon(1e-12));

  // decisive evidence: one state explains the observation, the rest cannot
  AidaParams d = flat_params(3, 2, 2);
  for (int k = 0; k < 3; ++k) {
    d.obs_mean[static_cast<size_t>(0 + k)] = 0.0;
    d.obs_mean[static_cast<size_t>(3 + k)] = 50.0;
    d.obs_mean[static_cast<size_t>(6 + k)] = -50.0;
    for (int s = 0; s < 3; ++s) d.obs_logstd[static_cast<size_t>(3 * s + k)] = 0.0;
  }
  auto point = belief_update({1.0 / 3, 1.0 / 3, 1.0 / 3}, 0, {0.0, 0.0, 0.0}, d);
  CHECK(point.b[0] > 1.0 - 1e-9);
  CHECK_FALSE(point.shock);

  // random two-state instance against brute-force Bayes
  AidaParams r = random_params(2, 2, 2, 33);
  Oracle ora(r);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> bb = random_belief(2, rng);
    int a = static_cast<int>(rng.index(2));
    std::array<double, 3> o{rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0),
                            rng.uniform(-2.0, 2.0)};
    double pri0 = bb[0] * ora.trans[static_cast<size_t>(a)][0] +
                  bb[1] * ora.trans[static_cast<size_t>(2 + a)][0];
    double pri1 = bb[0] * ora.trans[static_cast<size_t>(a)][1] +
                  bb[1] * ora.trans[static_cast<size_t>(2 + a)][1];
    double l0 = std::exp(obs_loglik(r, o, 0)), l1 = std::exp(obs_loglik(r, o, 1));
    double w0 = l0 * pri0, w1 = l1 * pri1;
    auto got = belief_update(bb, a, o, r);
    CHECK(got.b[0] == doctest::Approx(w0 / (w0 + w1)).epsilon(1e-12));
    CHECK(got.b[1] == doctest::Approx(w1 / (w0 + w1)).epsilon(1e-12));
  }

  // evidence underflow falls back to the prior predictive and flags a shock
  AidaParams far = flat_params(3, 2, 2);
  for (int s = 0; s < 3; ++s)
    for (int k = 0; k < 3; ++k) {
      far.obs_mean[static_cast<size_t>(3 * s + k)] = 1000.0;
      far.obs_logstd[static_cast<size_t>(3 * s + k)] = std::log(0.01);
    }
  std::vector<double> b3{0.2, 0.5, 0.3};
  auto shocked = belief_update(b3, 0, {0.0, 0.0, 0.0}, far);
  CHECK(shocked.shock);
  CHECK(shocked.b == prior_predictive(b3, 0, far));
  auto init_shocked = initial_belief({0.0, 0.0, 0.0}, far);
  CHECK(init_shocked.shock);
  for (double x : init_shocked.b) CHECK(x == doctest::Approx(1.0 / 3).epsilon(1e-15));

  auto init = initial_belief({1.0, 0.0, 0.5}, r);
  CHECK_FALSE(init.shock);
  double e0 = std::exp(obs_loglik(r, {1.0, 0.0, 0.5}, 0));
  double e1 = std::exp(obs_loglik(r, {1.0, 0.0, 0.5}, 1));
  CHECK(init.b[0] == doctest::Approx(e0 / (e0 + e1)).epsilon(1e-12));
}

TEST_CASE("belief chains stay normalized over long random runs") {
  AidaParams p = random_params(5, 3, 2, 77);
  Rng rng(101);
  for (int chain = 0; chain < 200; ++chain) {
    std::array<double, 3> o{rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0),
                            rng.uniform(-3.0, 3.0)};
    std::vector<double> b = initial_belief(o, p).b;
    for (int t = 0; t < 50; ++t) {
      for (double& x : o) x = rng.uniform(-6.0, 6.0);
      b = belief_update(b, static_cast<int>(rng.index(3)), o, p).b;
      double mass = std::accumulate(b.begin(), b.end(), 0.0);
      REQUIRE(std::fabs(mass - 1.0) < 1e-9);
      REQUIRE(*std::min_element(b.begin(), b.end()) >= 0.0);
    }
  }
}

TEST_CASE("expected free energy matches its definition") {
  // transition rows equal to the preference and unit stds: pure entropy
  AidaParams u = flat_params(3, 2, 2);
  for (int s = 0; s < 3; ++s)
    for (int a = 0; a < 2; ++a)
      CHECK(efe_state(s, a, u) == doctest::Approx(4.256815599614018).epsilon(1e-12));

  AidaParams shrunk = u;
  for (double& x : shrunk.obs_logstd) x = -1.0;
  CHECK(efe_state(0, 0, u) - efe_state(0, 0, shrunk) == doctest::Approx(3.0).epsilon(1e-12));

  AidaParams r = random_params(3, 2, 2, 55);
  Oracle ora(r);
  for (int s = 0; s < 3; ++s)
    for (int a = 0; a < 2; ++a)
      CHECK(efe_state(s, a, r) ==
            doctest::Approx(ora.efe[static_cast<size_t>(s * 2 + a)]).epsilon(1e-12));

  AidaTables t = build_tables(r);
  for (int s = 0; s < 3; ++s)
    for (int a = 0; a < 2; ++a)
      CHECK(t.efe[static_cast<size_t>(s * 2 + a)] ==
            doctest::Approx(efe_state(s, a, r)).epsilon(1e-14));
}

TEST_CASE("a single available action collapses the soft planner") {
  AidaParams p = random_params(4, 1, 5, 21);
  AidaTables t = build_tables(p);
  std::vector<double> v_prev(4, 0.0);
  for (int h = 1; h <= 5; ++h) {
    std::vector<double> v_now(4);
    for (int s = 0; s < 4; ++s) {
      CHECK(t.log_pi[static_cast<size_t>((h - 1) * 4 + s)] == 0.0);
      double want = efe_state(s, 0, p);
      auto row = prior_predictive([&] {
        std::vector<double> onehot(4, 0.0);
        onehot[static_cast<size_t>(s)] = 1.0;
        return onehot;
      }(), 0, p);
      for (int s2 = 0; s2 < 4; ++s2) want += row[static_cast<size_t>(s2)] * v_prev[static_cast<size_t>(s2)];
      CHECK(t.v[static_cast<size_t>((h - 1) * 4 + s)] == doctest::Approx(want).epsilon(1e-12));
      v_now[static_cast<size_t>(s)] = t.v[static_cast<size_t>((h - 1) * 4 + s)];
    }
    v_prev = v_now;
  }
}

TEST_CASE("constant free energy yields uniform policies and a linear value chain") {
  AidaParams p = flat_params(4, 3, 6);  // EFE identical everywhere
  double c = efe_state(0, 0, p);
  AidaTables t = build_tables(p);
  for (int h = 1; h <= 6; ++h) {
    for (int s = 0; s < 4; ++s)
      for (int a = 0; a < 3; ++a)
        CHECK(std::exp(t.log_pi[static_cast<size_t>(((h - 1) * 4 + s) * 3 + a)]) ==
              doctest::Approx(1.0 / 3).epsilon(1e-12));
    // per-step value satisfies v_h = c + v_{h-1} - 2 ln A
    for (int s = 0; s < 4; ++s)
      CHECK(t.v[static_cast<size_t>((h - 1) * 4 + s)] ==
            doctest::Approx(h * (c - 2.0 * std::log(3.0))).epsilon(1e-10));
  }
}

TEST_CASE("soft planning matches exhaustive policy-tree enumeration") {
  Rng seeds(2024);
  for (int inst = 0; inst < 6; ++inst) {
    int S = 2 + static_cast<int>(seeds.index(3));
    int A = 2 + static_cast<int>(seeds.index(2));
    int H = 1 + static_cast<int>(seeds.index(3));
    AidaParams p = random_params(S, A, H, seeds.raw());
    AidaTables t = build_tables(p);
    Oracle ora(p);
    std::vector<std::vector<double>> pi, vv;
    ora.solve(H, pi, vv);

    for (int h = 1; h <= H; ++h)
      for (int s = 0; s < S; ++s) {
        // library policy against the closed form
        for (int a = 0; a < A; ++a)
          CHECK(std::exp(t.log_pi[static_cast<size_t>(((h - 1) * S + s) * A + a)]) ==
                doctest::Approx(pi[static_cast<size_t>(h - 1)][static_cast<size_t>(s * A + a)])
                    .epsilon(1e-9));
        // soft value against the literal path expectation
        double want = ora.enumerate_value(s, h, pi);
        CHECK(t.v[static_cast<size_t>((h - 1) * S + s)] == doctest::Approx(want).epsilon(1e-8));
      }

    // table self-consistency: log pi is the fixed point of its own backup
    for (int h = 1; h <= H; ++h)
      for (int s = 0; s < S; ++s) {
        std::vector<double> y(static_cast<size_t>(A));
        double m = -std::numeric_limits<double>::infinity();
        for (int a = 0; a < A; ++a) {
          size_t i = static_cast<size_t>(((h - 1) * S + s) * A + a);
          y[static_cast<size_t>(a)] = -(t.q[i] + t.log_pi[i]);
          m = std::max(m, y[static_cast<size_t>(a)]);
        }
        double z = 0.0;
        for (double x : y) z += std::exp(x - m);
        double lse = m + std::log(z);
        for (int a = 0; a < A; ++a) {
          size_t i = static_cast<size_t>(((h - 1) * S + s) * A + a);
          CHECK(std::fabs(y[static_cast<size_t>(a)] - lse - t.log_pi[i]) < 1e-9);
        }
        // g assembles q plus the policy log-probability
        for (int a = 0; a < A; ++a) {
          size_t i = static_cast<size_t>(((h - 1) * S + s) * A + a);
          CHECK(t.g[i] == doctest::Approx(t.q[i] + t.log_pi[i]).epsilon(1e-14));
        }
      }
  }
  AidaParams p = random_params(3, 2, 4, 9);
  CHECK_THROWS_AS(build_tables(p, 9), DataError);
  CHECK_THROWS_AS(build_tables(p, -1), DataError);
}

TEST_CASE("shifting every free energy by a constant leaves policies unchanged") {
  AidaParams p = random_params(4, 3, 5, 71);
  AidaParams shifted = p;
  // one third of the shift per feature: state entropy rises by c everywhere
  for (double& x : shifted.obs_logstd) x += 0.7 / 3.0;
  AidaTables t1 = build_tables(p);
  AidaTables t2 = build_tables(shifted);
  Rng rng(12);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> b = random_belief(4, rng);
    for (int h = 1; h <= 5; ++h) {
      auto p1 = policy_at_horizon(t1, b, h);
      auto p2 = policy_at_horizon(t2, b, h);
      for (int a = 0; a < 3; ++a)
        CHECK(p1[static_cast<size_t>(a)] ==
              doctest::Approx(p2[static_cast<size_t>(a)]).epsilon(1e-10));
    }
    auto m1 = policy(t1, b);
    auto m2 = policy(t2, b);
    for (int a = 0; a < 3; ++a)
      CHECK(m1[static_cast<size_t>(a)] == doctest::Approx(m2[static_cast<size_t>(a)]).epsilon(1e-10));
  }
}

TEST_CASE("the policy mixes horizons with truncated Poisson weights") {
  AidaParams p = random_params(3, 3, 7, 41);
  AidaTables t = build_tables(p);

  // weights against the direct factorial form
  double lambda = std::exp(p.horizon_lograte);
  std::vector<double> want(7);
  double tot = 0.0;
  for (int h = 1; h <= 7; ++h) {
    want[static_cast<size_t>(h - 1)] = std::pow(lambda, h) / std::tgamma(h + 1.0);
    tot += want[static_cast<size_t>(h - 1)];
  }
  for (int h = 1; h <= 7; ++h)
    CHECK(t.horizon_w[static_cast<size_t>(h - 1)] ==
          doctest::Approx(want[static_cast<size_t>(h - 1)] / tot).epsilon(1e-12));

  // point-mass belief reproduces the state-conditioned softmax exactly
  for (int s = 0; s < 3; ++s) {
    std::vector<double> b(3, 0.0);
    b[static_cast<size_t>(s)] = 1.0;
    for (int h = 1; h <= 7; ++h) {
      auto ph = policy_at_horizon(t, b, h);
      std::vector<double> neg(3);
      for (int a = 0; a < 3; ++a)
        neg[static_cast<size_t>(a)] = -t.g[static_cast<size_t>(((h - 1) * 3 + s) * 3 + a)];
      double m = *std::max_element(neg.begin(), neg.end());
      double z = 0.0;
      for (double x : neg) z += std::exp(x - m);
      for (int a = 0; a < 3; ++a)
        CHECK(ph[static_cast<size_t>(a)] ==
              doctest::Approx(std::exp(neg[static_cast<size_t>(a)] - m) / z).epsilon(1e-13));
    }
  }

  // flat tables: uniform mixture no matter the belief
  AidaParams u = flat_params(3, 4, 5);
  AidaTables ut = build_tables(u);
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    auto mix = policy(ut, random_belief(3, rng));
    for (double x : mix) CHECK(x == doctest::Approx(0.25).epsilon(1e-12));
  }

  // random instance against an independent composition of the three steps
  Rng brng(44);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> b = random_belief(3, brng);
    auto got = policy(t, b);
    std::vector<double> acc(3, 0.0);
    for (int h = 1; h <= 7; ++h) {
      std::vector<double> score(3, 0.0);
      for (int s = 0; s < 3; ++s)
        for (int a = 0; a < 3; ++a)
          score[static_cast<size_t>(a)] -=
              b[static_cast<size_t>(s)] * t.g[static_cast<size_t>(((h - 1) * 3 + s) * 3 + a)];
      double m = *std::max_element(score.begin(), score.end());
      double z = 0.0;
      for (double x : score) z += std::exp(x - m);
      for (int a = 0; a < 3; ++a)
        acc[static_cast<size_t>(a)] += t.horizon_w[static_cast<size_t>(h - 1)] *
                                       std::exp(score[static_cast<size_t>(a)] - m) / z;
    }
    double mass = 0.0;
    for (int a = 0; a < 3; ++a) {
      CHECK(got[static_cast<size_t>(a)] == doctest::Approx(acc[static_cast<size_t>(a)]).epsilon(1e-12));
      mass += got[static_cast<size_t>(a)];
    }
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("an indifferent untrained model scores actions at log action count") {
  AidaParams p = flat_params(6, 15, 5);
  auto eps = labeled_episodes(3, 12, 15, 60);
  double loss = map_objective(p, eps, 0.0, 0.0);
  CHECK(loss == doctest::Approx(std::log(15.0)).epsilon(1e-12));
  CHECK(loss == doctest::Approx(2.708050201102210066).epsilon(1e-12));

  // covariance penalty slope: unit stds make the penalty 3 S exactly
  double with_pen = map_objective(p, eps, 0.0, 0.7);
  CHECK(with_pen - loss == doctest::Approx(0.7 * 3.0 * 6.0).epsilon(1e-12));
}

TEST_CASE("the observation term matches an independently filtered evidence sum") {
  AidaParams p = random_params(3, 4, 4, 83);
  auto eps = labeled_episodes(2, 6, 4, 13);
  double base = map_objective(p, eps, 0.0, 0.0);
  double with_obs = map_objective(p, eps, 1.0, 0.0);

  Oracle ora(p);
  double obs_sum = 0.0;
  long n_obs = 0;
  for (const auto& ep : eps) {
    std::vector<double> b;
    int a_prev = -1;
    for (const auto& f : ep.frames) {
      std::array<double, 3> o{f.d, f.dv, f.tau_inv};
      std::vector<double> lik(3);
      for (int s = 0; s < 3; ++s) lik[static_cast<size_t>(s)] = std::exp(obs_loglik(p, o, s));
      if (a_prev < 0) {
        b.assign(3, 1.0 / 3.0);
        double z = 0.0;
        for (int s = 0; s < 3; ++s) z += lik[static_cast<size_t>(s)] * b[static_cast<size_t>(s)];
        for (int s = 0; s < 3; ++s) b[static_cast<size_t>(s)] = lik[static_cast<size_t>(s)] * b[static_cast<size_t>(s)] / z;
      } else {
        std::vector<double> prior(3, 0.0);
        for (int s = 0; s < 3; ++s)
          for (int t = 0; t < 3; ++t)
            prior[static_cast<size_t>(t)] += b[static_cast<size_t>(s)] *
                                             ora.trans[static_cast<size_t>(s * 4 + a_prev)][static_cast<size_t>(t)];
        double z = 0.0;
        for (int s = 0; s < 3; ++s) z += lik[static_cast<size_t>(s)] * prior[static_cast<size_t>(s)];
        obs_sum += std::log(z);
        ++n_obs;
        for (int s = 0; s < 3; ++s) b[static_cast<size_t>(s)] = lik[static_cast<size_t>(s)] * prior[static_cast<size_t>(s)] / z;
      }
      a_prev = f.action_id;
    }
  }
  CHECK(base - with_obs == doctest::Approx(obs_sum / static_cast<double>(n_obs)).epsilon(1e-10));
}

TEST_CASE("graph and plain objective evaluations agree") {
  AidaParams p = random_params(3, 2, 4, 29);
  auto eps = labeled_episodes(2, 5, 2, 31);
  for (auto [l1, l2] : {std::pair{0.0, 0.0}, {1.0, 0.1}, {0.3, 0.9}}) {
    double plain = map_objective(p, eps, l1, l2);
    auto [graph, grad] = map_gradient(p, eps, l1, l2);
    CHECK(graph == doctest::Approx(plain).epsilon(1e-12));
    CHECK(grad.size() == static_cast<size_t>(p.param_count()));
  }
  auto bad = eps;
  bad[0].frames[2].action_id = -1;
  CHECK_THROWS_AS(map_objective(p, bad, 1.0, 0.1), DataError);
  CHECK_THROWS_AS(map_gradient(p, bad, 1.0, 0.1), DataError);
  CHECK_THROWS_AS(map_objective(p, {}, 1.0, 0.1), DataError);
}

TEST_CASE("the loss gradient matches central finite differences") {
  AidaParams p = scaled_params(3, 2, 4, 47);
  auto eps = labeled_episodes(2, 5, 2, 53, 18.0, 28.0);
  const double l1 = 1.0, l2 = 0.1, h = 1e-5;
  auto [loss, grad] = map_gradient(p, eps, l1, l2);
  CHECK(std::isfinite(loss));

  auto entry = [&](AidaParams& q, long i) -> double& {
    long nt = static_cast<long>(q.trans_logits.size());
    long np = static_cast<long>(q.pref_logits.size());
    long nm = static_cast<long>(q.obs_mean.size());
    long nl = static_cast<long>(q.obs_logstd.size());
    if (i < nt) return q.trans_logits[static_cast<size_t>(i)];
    i -= nt;
    if (i < np) return q.pref_logits[static_cast<size_t>(i)];
    i -= np;
    if (i < nm) return q.obs_mean[static_cast<size_t>(i)];
    i -= nm;
    if (i < nl) return q.obs_logstd[static_cast<size_t>(i)];
    return q.horizon_lograte;
  };

  double num2 = 0.0, den2 = 0.0;
  for (long i = 0; i < p.param_count(); ++i) {
    AidaParams up = p, dn = p;
    entry(up, i) += h;
    entry(dn, i) -= h;
    double fd = (map_objective(up, eps, l1, l2) - map_objective(dn, eps, l1, l2)) / (2.0 * h);
    double an = grad[static_cast<size_t>(i)];
    double denom = std::max({1e-6, std::fabs(fd), std::fabs(an)});
    CHECK(std::fabs(fd - an) / denom < 1e-4);
    num2 += (fd - an) * (fd - an);
    den2 += fd * fd;
  }
  CHECK(std::sqrt(num2 / den2) < 1e-8);
}

TEST_CASE("parameter counts follow the closed formula") {
  AidaParams dflt;
  CHECK(dflt.param_count() == 6141);  // 20*15*20 + 20 + 60 + 60 + 1
  AidaParams small = flat_params(3, 2, 4);
  CHECK(small.param_count() == 40);
  small.validate();
  small.trans_logits.pop_back();
  CHECK_THROWS_AS(small.validate(), DataError);
  AidaParams nan = flat_params(3, 2, 4);
  nan.obs_mean[0] = std::nan("");
  CHECK_THROWS_AS(nan.validate(), DataError);
}

TEST_CASE("training lowers the objective and is deterministic in the seed") {
  auto eps = labeled_episodes(12, 20, 4, 90);
  AidaTrainOptions o;
  o.S = 5;
  o.A = 4;
  o.H_max = 6;
  o.max_epochs = 6;
  o.batch_episodes = 4;
  o.lr = 0.02;
  o.seed = 3;

  AidaParams init = init_params(eps, o);
  CHECK(init.param_count() == 5 * 4 * 5 + 5 + 15 + 15 + 1);
  CHECK(init.horizon_lograte == doctest::Approx(std::log(10.0)).epsilon(1e-15));
  // log-stds start at the per-feature data spread, identical across states
  for (int s = 1; s < 5; ++s)
    for (int k = 0; k < 3; ++k)
      CHECK(init.obs_logstd[static_cast<size_t>(3 * s + k)] ==
            init.obs_logstd[static_cast<size_t>(k)]);

  AidaTrainResult r1 = train_aida(eps, o);
  CHECK(r1.restarts == 0);
  CHECK(r1.loss_curve.size() == 6);
  double before = map_objective(init, eps, o.lambda1, o.lambda2);
  double after = map_objective(r1.params, eps, o.lambda1, o.lambda2);
  CHECK(after < before);

  AidaTrainResult r2 = train_aida(eps, o);
  CHECK(r1.params.trans_logits == r2.params.trans_logits);
  CHECK(r1.params.obs_mean == r2.params.obs_mean);
  CHECK(r1.params.horizon_lograte == r2.params.horizon_lograte);
  CHECK(r1.loss_curve == r2.loss_curve);

  AidaTrainOptions other = o;
  other.seed = 4;
  AidaTrainResult r3 = train_aida(eps, other);
  CHECK(r3.params.trans_logits != r1.params.trans_logits);
}

TEST_CASE("an absurd step size exhausts the restart budget") {
  auto eps = labeled_episodes(4, 10, 3, 7);
  AidaTrainOptions o;
  o.S = 3;
  o.A = 3;
  o.H_max = 3;
  o.max_epochs = 4;
  o.batch_episodes = 2;
  o.lr = 1e9;
  CHECK_THROWS_AS(train_aida(eps, o), TrainError);
}

TEST_CASE("state-conditioned samples follow the observation model") {
  AidaParams p = random_params(4, 3, 4, 65);
  AidaTables t = build_tables(p);
  auto samples = sample_observations(p, t, 5, 11);
  REQUIRE(samples.size() == 20);
  for (int s = 0; s < 4; ++s)
    for (int i = 0; i < 5; ++i) CHECK(samples[static_cast<size_t>(5 * s + i)].state == s);

  // the preference column recomputes from the preference prior and density
  Oracle ora(p);
  for (const auto& smp : samples) {
    double acc = 0.0;
    for (int s = 0; s < 4; ++s)
      acc += ora.pref[static_cast<size_t>(s)] * std::exp(obs_loglik(p, smp.o, s));
    CHECK(smp.pref_loglik == doctest::Approx(std::log(acc)).epsilon(1e-12));
    auto pi = policy(t, initial_belief(smp.o, p).b);
    int best = 0;
    for (int a = 1; a < 3; ++a)
      if (pi[static_cast<size_t>(a)] > pi[static_cast<size_t>(best)]) best = a;
    CHECK(smp.action == best);
  }

  // near-zero variance pins every sample to its state mean
  AidaParams tight = p;
  for (double& x : tight.obs_logstd) x = -30.0;
  auto pinned = sample_observations(tight, build_tables(tight), 3, 5);
  for (const auto& smp : pinned)
    for (int k = 0; k < 3; ++k)
      CHECK(std::fabs(smp.o[static_cast<size_t>(k)] -
                      tight.obs_mean[static_cast<size_t>(3 * smp.state + k)]) < 1e-10);

  auto again = sample_observations(p, t, 5, 11);
  for (size_t i = 0; i < samples.size(); ++i) CHECK(samples[i].o == again[i].o);
  CHECK_THROWS_AS(sample_observations(p, t, 0, 1), DataError);
}

TEST_CASE("model checkpoints round trip and validate") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "aida_ckpt_test";
  fs::create_directories(dir);

  AidaModel m;
  m.params = random_params(4, 3, 5, 19);
  m.codebook.w = {0.2, 0.5, 0.3};
  m.codebook.mu = {-1.0, 0.0, 1.0};
  m.codebook.sigma = {0.3, 0.2, 0.4};
  m.lambda1 = 1.0;
  m.lambda2 = 0.1;
  save_aida(dir / "m.json", m);
  AidaModel r = load_aida(dir / "m.json");
  CHECK(r.params.trans_logits == m.params.trans_logits);
  CHECK(r.params.pref_logits == m.params.pref_logits);
  CHECK(r.params.obs_mean == m.params.obs_mean);
  CHECK(r.params.obs_logstd == m.params.obs_logstd);
  CHECK(r.params.horizon_lograte == m.params.horizon_lograte);
  CHECK(r.params.S == 4);
  CHECK(r.params.A == 3);
  CHECK(r.params.H_max == 5);
  CHECK(r.lambda1 == 1.0);
  CHECK(r.lambda2 == 0.1);
  CHECK(r.codebook.mu == m.codebook.mu);

  std::ofstream(dir / "junk.json") << "]{";
  CHECK_THROWS_AS(load_aida(dir / "junk.json"), DataError);

  AidaModel wrong = m;
  wrong.codebook.w.pop_back();
  wrong.codebook.mu.pop_back();
  wrong.codebook.sigma.pop_back();
  CHECK_THROWS_AS(save_aida(dir / "w.json", wrong), std::exception);
  // a mismatched codebook is caught on load even if written by hand
  nlohmann::json j = nlohmann::json::parse(read_text(dir / "m.json"));
  j["codebook"]["weights"] = std::vector<double>{1.0};
  j["codebook"]["means"] = std::vector<double>{0.0};
  j["codebook"]["stds"] = std::vector<double>{0.1};
  write_text(dir / "mismatch.json", j.dump());
  CHECK_THROWS_AS(load_aida(dir / "mismatch.json"), DataError);

  j = nlohmann::json::parse(read_text(dir / "m.json"));
  j["kind"] = "bc-mlp";
  write_text(dir / "kind.json", j.dump());
  CHECK_THROWS_AS(load_aida(dir / "kind.json"), DataError);

  fs::remove_all(dir);
}
