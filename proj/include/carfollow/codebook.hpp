#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "carfollow/common.hpp"

namespace carfollow::data {

struct Episode;

// 1-D Gaussian mixture over accelerations, components sorted by mean.
struct ActionCodebook {
  std::vector<double> w, mu, sigma;
  int K() const { return static_cast<int>(w.size()); }
};

struct CodebookFit {
  ActionCodebook codebook;
  int k_selected = 0;
  std::vector<double> bic;           // per candidate K (index K-1), +inf if EM failed
  std::vector<double> loglik_curve;  // EM trajectory for the selected K
};

// EM over K = 1..k_max with deterministic quantile init, 100 iterations max,
// 1e-6 log-likelihood tolerance; BIC = -2 logL + (3K-1) ln n picks K.
// Component stds are floored at 1e-4; a component whose weight starves
// (< 1e-6) is re-seeded up to 5 times, after which that K is skipped.
// Requires at least 10*k_max samples.
CodebookFit fit_action_codebook(std::span<const double> samples, int k_max = 15,
                                uint64_t seed = 0);

// Highest responsibility w_k * N(a; mu_k, sigma_k); ties break to the lower id.
int discretize(const ActionCodebook& cb, double a);

double component_sample(const ActionCodebook& cb, int id, Rng& rng);

// assigns discretize(frame.a) to every frame's action_id in place
void label_episodes(std::vector<Episode>& eps, const ActionCodebook& cb);

void save_codebook(const std::filesystem::path& path, const CodebookFit& fit);
ActionCodebook load_codebook(const std::filesystem::path& path);

}  // namespace carfollow::data
