// Times the per-episode evaluation kernel on the serial reference path and
// the OpenMP path of parallel_for, and checks the results agree bitwise.
#include <chrono>
#include <cstdio>
#include <vector>

#include "carfollow/eval.hpp"
#include "carfollow/synth.hpp"

using namespace carfollow;

namespace {

double time_ms(bool parallel, const std::vector<data::Episode>& eps,
               const eval::Predictor& pred, std::vector<double>& out) {
  auto t0 = std::chrono::steady_clock::now();
  parallel_for(static_cast<long>(eps.size()), parallel, [&](long i) {
    Rng rng(derive_seed(7, static_cast<uint64_t>(i)));
    std::vector<double> hat = pred(eps[static_cast<size_t>(i)], rng);
    double acc = 0.0;
    for (size_t k = 0; k < hat.size(); ++k)
      acc += std::fabs(hat[k] - eps[static_cast<size_t>(i)].frames[k].a);
    out[static_cast<size_t>(i)] = acc / static_cast<double>(hat.size());
  });
  auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

}  // namespace

int main() {
  idm::IdmParams gen;
  auto profiles = data::mixed_profiles(64, 1);
  data::SynthResult sr = data::synth_generate(gen, profiles, 0.05, 64, 1);
  eval::Predictor pred = eval::idm_predictor(gen);

  std::vector<double> serial(sr.episodes.size()), parallel(sr.episodes.size());
  // warm cache so the first timed path is not penalized
  time_ms(false, sr.episodes, pred, serial);

  double ts = time_ms(false, sr.episodes, pred, serial);
  double tp = time_ms(true, sr.episodes, pred, parallel);
  bool same = serial == parallel;

  std::printf("episodes: %zu\n", sr.episodes.size());
  std::printf("serial reference: %8.2f ms\n", ts);
  std::printf("openmp:           %8.2f ms  (speedup %.2fx)\n", tp, ts / tp);
  std::printf("bitwise equal:    %s\n", same ? "yes" : "NO");
  return same ? 0 : 1;
}
