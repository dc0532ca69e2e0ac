#include "carfollow/codebook.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <limits>
#include <numeric>

#include "carfollow/features.hpp"

namespace carfollow::data {

using nlohmann::json;

namespace {

constexpr double kLog2Pi = 1.8378770664093453;
constexpr double kSigmaFloor = 1e-4;
constexpr double kWeightFloor = 1e-6;

struct EmResult {
  bool ok = false;
  double loglik = -std::numeric_limits<double>::infinity();
  std::vector<double> w, mu, sigma;
  std::vector<double> curve;
};

EmResult run_em(std::span<const double> x, int k, Rng& rng) {
  size_t n = x.size();
  EmResult res;
  res.w.assign(static_cast<size_t>(k), 1.0 / k);
  res.mu.resize(static_cast<size_t>(k));
  res.sigma.resize(static_cast<size_t>(k));

  std::vector<double> sorted(x.begin(), x.end());
  std::sort(sorted.begin(), sorted.end());
  double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  double sd = std::max(std::sqrt(var / static_cast<double>(n)), 1e-3);
  for (int c = 0; c < k; ++c) {
    size_t q = static_cast<size_t>((c + 0.5) / k * static_cast<double>(n));
    res.mu[static_cast<size_t>(c)] = sorted[std::min(q, n - 1)];
    res.sigma[static_cast<size_t>(c)] = std::max(sd / k, kSigmaFloor);
  }

  std::vector<double> resp(n * static_cast<size_t>(k));
  std::vector<int> reinits(static_cast<size_t>(k), 0);
  double prev_ll = -std::numeric_limits<double>::infinity();

  for (int iter = 0; iter < 100; ++iter) {
    // E step
    double ll = 0.0;
    for (size_t i = 0; i < n; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        double z = (x[i] - res.mu[static_cast<size_t>(c)]) / res.sigma[static_cast<size_t>(c)];
        double lp = std::log(res.w[static_cast<size_t>(c)]) -
                    std::log(res.sigma[static_cast<size_t>(c)]) - 0.5 * (z * z + kLog2Pi);
        resp[i * static_cast<size_t>(k) + static_cast<size_t>(c)] = lp;
        m = std::max(m, lp);
      }
      double s = 0.0;
      for (int c = 0; c < k; ++c)
        s += std::exp(resp[i * static_cast<size_t>(k) + static_cast<size_t>(c)] - m);
      double lse = m + std::log(s);
      ll += lse;
      for (int c = 0; c < k; ++c) {
        auto& r = resp[i * static_cast<size_t>(k) + static_cast<size_t>(c)];
        r = std::exp(r - lse);
      }
    }
    res.curve.push_back(ll);

    // M step
    bool reseeded = false;
    for (int c = 0; c < k; ++c) {
      double nk = 0.0, sx = 0.0;
      for (size_t i = 0; i < n; ++i) {
        double r = resp[i * static_cast<size_t>(k) + static_cast<size_t>(c)];
        nk += r;
        sx += r * x[i];
      }
      double wk = nk / static_cast<double>(n);
      if (wk < kWeightFloor) {
        if (++reinits[static_cast<size_t>(c)] > 5) return res;  // ok stays false
        res.mu[static_cast<size_t>(c)] = x[static_cast<size_t>(rng.index(static_cast<long>(n)))];
        res.sigma[static_cast<size_t>(c)] = sd;
        res.w[static_cast<size_t>(c)] = 1.0 / k;
        double tot = std::accumulate(res.w.begin(), res.w.end(), 0.0);
        for (double& wv : res.w) wv /= tot;
        reseeded = true;
        continue;
      }
      double mu_c = sx / nk;
      double sv = 0.0;
      for (size_t i = 0; i < n; ++i) {
        double r = resp[i * static_cast<size_t>(k) + static_cast<size_t>(c)];
        sv += r * (x[i] - mu_c) * (x[i] - mu_c);
      }
      res.w[static_cast<size_t>(c)] = wk;
      res.mu[static_cast<size_t>(c)] = mu_c;
      res.sigma[static_cast<size_t>(c)] = std::max(std::sqrt(sv / nk), kSigmaFloor);
    }
    if (reseeded) {
      // restart the likelihood climb from the reseeded state
      prev_ll = -std::numeric_limits<double>::infinity();
      res.curve.clear();
      continue;
    }
    if (std::abs(ll - prev_ll) < 1e-6) break;
    prev_ll = ll;
  }

  // final log-likelihood of the fitted parameters
  double ll = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) {
      double z = (x[i] - res.mu[static_cast<size_t>(c)]) / res.sigma[static_cast<size_t>(c)];
      m = std::max(m, std::log(res.w[static_cast<size_t>(c)]) -
                          std::log(res.sigma[static_cast<size_t>(c)]) -
                          0.5 * (z * z + kLog2Pi));
    }
    double s = 0.0;
    for (int c = 0; c < k; ++c) {
      double z = (x[i] - res.mu[static_cast<size_t>(c)]) / res.sigma[static_cast<size_t>(c)];
      s += std::exp(std::log(res.w[static_cast<size_t>(c)]) -
                    std::log(res.sigma[static_cast<size_t>(c)]) -
                    0.5 * (z * z + kLog2Pi) - m);
    }
    ll += m + std::log(s);
  }
  res.loglik = ll;
  res.ok = true;
  return res;
}

}  // namespace

CodebookFit fit_action_codebook(std::span<const double> samples, int k_max, uint64_t seed) {
  size_t n = samples.size();
  if (k_max < 1) throw DataError("k_max must be positive");
  if (n < static_cast<size_t>(10 * k_max))
    throw DataError("codebook fit needs at least " + std::to_string(10 * k_max) +
                    " samples, got " + std::to_string(n));

  CodebookFit fit;
  fit.bic.assign(static_cast<size_t>(k_max), std::numeric_limits<double>::infinity());
  double best_bic = std::numeric_limits<double>::infinity();
  EmResult best;
  int any_ok = 0;

  for (int k = 1; k <= k_max; ++k) {
    Rng rng(derive_seed(seed, static_cast<uint64_t>(k)));
    EmResult r = run_em(samples, k, rng);
    if (!r.ok) continue;
    ++any_ok;
    double bic = -2.0 * r.loglik + (3.0 * k - 1.0) * std::log(static_cast<double>(n));
    fit.bic[static_cast<size_t>(k - 1)] = bic;
    if (bic < best_bic) {
      best_bic = bic;
      best = std::move(r);
      fit.k_selected = k;
    }
  }
  if (any_ok == 0) throw TrainError("EM failed for every candidate K");

  // sort components by mean
  std::vector<size_t> order(best.w.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return best.mu[a] < best.mu[b]; });
  for (size_t i : order) {
    fit.codebook.w.push_back(best.w[i]);
    fit.codebook.mu.push_back(best.mu[i]);
    fit.codebook.sigma.push_back(best.sigma[i]);
  }
  fit.loglik_curve = std::move(best.curve);
  return fit;
}

int discretize(const ActionCodebook& cb, double a) {
  int best = 0;
  double best_lp = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < cb.K(); ++c) {
    double z = (a - cb.mu[static_cast<size_t>(c)]) / cb.sigma[static_cast<size_t>(c)];
    double lp = std::log(cb.w[static_cast<size_t>(c)]) -
                std::log(cb.sigma[static_cast<size_t>(c)]) - 0.5 * z * z;
    if (lp > best_lp) {
      best_lp = lp;
      best = c;
    }
  }
  return best;
}

double component_sample(const ActionCodebook& cb, int id, Rng& rng) {
  return rng.normal(cb.mu[static_cast<size_t>(id)], cb.sigma[static_cast<size_t>(id)]);
}

void save_codebook(const std::filesystem::path& path, const CodebookFit& fit) {
  json j;
  j["format_version"] = 1;
  j["k_selected"] = fit.k_selected;
  j["weights"] = fit.codebook.w;
  j["means"] = fit.codebook.mu;
  j["stds"] = fit.codebook.sigma;
  j["bic"] = fit.bic;
  write_text(path, j.dump(2) + "\n");
}

ActionCodebook load_codebook(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw DataError("bad codebook file " + path.string() + ": " + e.what());
  }
  ActionCodebook cb;
  try {
    cb.w = j.at("weights").get<std::vector<double>>();
    cb.mu = j.at("means").get<std::vector<double>>();
    cb.sigma = j.at("stds").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw DataError("codebook file " + path.string() + " misses a field: " + e.what());
  }
  if (cb.w.size() != cb.mu.size() || cb.w.size() != cb.sigma.size() || cb.w.empty())
    throw DataError("codebook file " + path.string() + " is inconsistent");
  return cb;
}

void label_episodes(std::vector<Episode>& eps, const ActionCodebook& cb) {
  for (Episode& ep : eps)
    for (FeatureFrame& f : ep.frames) f.action_id = discretize(cb, f.a);
}

}  // namespace carfollow::data
