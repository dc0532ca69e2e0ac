#include "carfollow/aida.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <limits>
#include <numeric>

#include "carfollow/optim.hpp"
#include "carfollow/tape.hpp"

namespace carfollow::aida {

using diff::Adam;
using diff::AdamConfig;
using diff::Tape;
using diff::Tensor;

namespace {

constexpr double kLn2Pi = 1.8378770664093453;  // ln(2*pi)
constexpr double kEntConst = 1.5 * (1.0 + kLn2Pi);
constexpr double kUnderflowLogMass = -700.0;
constexpr int kPolicySweeps = 50;
constexpr double kPolicyTol = 1e-10;

double logsumexp(const double* x, long n) {
  double m = -std::numeric_limits<double>::infinity();
  for (long i = 0; i < n; ++i) m = std::max(m, x[i]);
  if (m == -std::numeric_limits<double>::infinity()) return m;
  double s = 0.0;
  for (long i = 0; i < n; ++i) s += std::exp(x[i] - m);
  return m + std::log(s);
}

// exp(x - logsumexp(x)), the same shifted form the autodiff kernel uses
void softmax(const double* x, long n, double* out) {
  double lse = logsumexp(x, n);
  for (long i = 0; i < n; ++i) out[i] = std::exp(x[i] - lse);
}

void log_softmax(const double* x, long n, double* out) {
  double lse = logsumexp(x, n);
  for (long i = 0; i < n; ++i) out[i] = x[i] - lse;
}

std::array<double, 3> frame_obs(const data::FeatureFrame& f) {
  return {f.d, f.dv, f.tau_inv};
}

void check_finite(const std::vector<double>& v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw DataError(std::string(what) + " holds a non-finite value");
}

void check_labels(const std::vector<data::Episode>& eps, int n_actions) {
  for (const auto& ep : eps)
    for (const auto& f : ep.frames)
      if (f.action_id < 0 || f.action_id >= n_actions)
        throw DataError("episode " + ep.id + " lacks a valid action id");
}

}  // namespace

void AidaParams::validate() const {
  if (S < 1 || A < 1 || H_max < 1) throw DataError("state, action, and horizon counts must be positive");
  size_t s = static_cast<size_t>(S), a = static_cast<size_t>(A);
  if (trans_logits.size() != s * a * s) throw DataError("transition logits have the wrong size");
  if (pref_logits.size() != s) throw DataError("preference logits have the wrong size");
  if (obs_mean.size() != 3 * s) throw DataError("observation means have the wrong size");
  if (obs_logstd.size() != 3 * s) throw DataError("observation log-stds have the wrong size");
  check_finite(trans_logits, "transition logits");
  check_finite(pref_logits, "preference logits");
  check_finite(obs_mean, "observation means");
  check_finite(obs_logstd, "observation log-stds");
  if (!std::isfinite(horizon_lograte)) throw DataError("horizon log-rate is not finite");
}

double obs_loglik(const AidaParams& p, const std::array<double, 3>& o, int s) {
  if (s < 0 || s >= p.S) throw DataError("state index out of range");
  const double* mu = p.obs_mean.data() + 3 * s;
  const double* ls = p.obs_logstd.data() + 3 * s;
  double sq = 0.0, sl = 0.0;
  for (int i = 0; i < 3; ++i) {
    double z = (mu[i] - o[static_cast<size_t>(i)]) * std::exp(-ls[i]);
    sq += z * z;
    sl += ls[i];
  }
  return -0.5 * sq - sl - 1.5 * kLn2Pi;
}

std::vector<double> obs_loglik_all(const AidaParams& p, const std::array<double, 3>& o) {
  std::vector<double> out(static_cast<size_t>(p.S));
  for (int s = 0; s < p.S; ++s) out[static_cast<size_t>(s)] = obs_loglik(p, o, s);
  return out;
}

std::vector<double> prior_predictive(const std::vector<double>& b, int a,
                                     const AidaParams& p) {
  if (b.size() != static_cast<size_t>(p.S)) throw DataError("belief has the wrong size");
  if (a < 0 || a >= p.A) throw DataError("action index out of range");
  std::vector<double> out(static_cast<size_t>(p.S), 0.0);
  std::vector<double> row(static_cast<size_t>(p.S));
  for (int s = 0; s < p.S; ++s) {
    const double* lg = p.trans_logits.data() + (static_cast<long>(s) * p.A + a) * p.S;
    softmax(lg, p.S, row.data());
    for (int t = 0; t < p.S; ++t) out[static_cast<size_t>(t)] += b[static_cast<size_t>(s)] * row[static_cast<size_t>(t)];
  }
  return out;
}

namespace {

// posterior ~ exp(loglik) * prior with the underflow fallback; log_evidence
// is log sum_s exp(loglik(s) + log prior(s))
struct Posterior {
  std::vector<double> b;
  double log_evidence = 0.0;
  bool shock = false;
};

Posterior fuse(const std::vector<double>& loglik, const std::vector<double>& prior) {
  size_t n = loglik.size();
  std::vector<double> x(n);
  for (size_t i = 0; i < n; ++i) x[i] = loglik[i] + std::log(prior[i]);
  Posterior out;
  out.log_evidence = logsumexp(x.data(), static_cast<long>(n));
  if (out.log_evidence < kUnderflowLogMass) {
    out.b = prior;
    out.shock = true;
  } else {
    out.b.resize(n);
    softmax(x.data(), static_cast<long>(n), out.b.data());
  }
  return out;
}

}  // namespace

BeliefResult initial_belief(const std::array<double, 3>& o, const AidaParams& p) {
  std::vector<double> l = obs_loglik_all(p, o);
  double evidence = logsumexp(l.data(), p.S) - std::log(static_cast<double>(p.S));
  BeliefResult out;
  if (evidence < kUnderflowLogMass) {
    out.b.assign(static_cast<size_t>(p.S), 1.0 / static_cast<double>(p.S));
    out.shock = true;
  } else {
    out.b.resize(static_cast<size_t>(p.S));
    softmax(l.data(), p.S, out.b.data());
  }
  return out;
}

BeliefResult belief_update(const std::vector<double>& b_prev, int a_prev,
                           const std::array<double, 3>& o, const AidaParams& p) {
  std::vector<double> prior = prior_predictive(b_prev, a_prev, p);
  Posterior post = fuse(obs_loglik_all(p, o), prior);
  return {std::move(post.b), post.shock};
}

double efe_state(int s, int a, const AidaParams& p) {
  if (s < 0 || s >= p.S || a < 0 || a >= p.A) throw DataError("state or action index out of range");
  std::vector<double> row(static_cast<size_t>(p.S)), logrow(static_cast<size_t>(p.S)),
      logpref(static_cast<size_t>(p.S));
  const double* lg = p.trans_logits.data() + (static_cast<long>(s) * p.A + a) * p.S;
  softmax(lg, p.S, row.data());
  log_softmax(lg, p.S, logrow.data());
  log_softmax(p.pref_logits.data(), p.S, logpref.data());
  double plogp = 0.0, plogpref = 0.0, eent = 0.0;
  for (int t = 0; t < p.S; ++t) {
    size_t k = static_cast<size_t>(t);
    double slog = 0.0;
    for (int i = 0; i < 3; ++i) slog += p.obs_logstd[static_cast<size_t>(3 * t + i)];
    double ent = slog + kEntConst;
    plogp += row[k] * logrow[k];
    plogpref += row[k] * logpref[k];
    eent += row[k] * ent;
  }
  return (plogp - plogpref) + eent;
}

AidaTables build_tables(const AidaParams& p, int horizon) {
  p.validate();
  int H = horizon == 0 ? p.H_max : horizon;
  if (H < 1 || H > p.H_max) throw DataError("planning horizon out of range");

  AidaTables t;
  t.S = p.S;
  t.A = p.A;
  t.H = H;
  long S = p.S, A = p.A;

  t.trans.resize(static_cast<size_t>(S * A * S));
  t.log_trans.resize(static_cast<size_t>(S * A * S));
  for (long r = 0; r < S * A; ++r) {
    const double* lg = p.trans_logits.data() + r * S;
    softmax(lg, S, t.trans.data() + r * S);
    log_softmax(lg, S, t.log_trans.data() + r * S);
  }
  t.log_pref.resize(static_cast<size_t>(S));
  log_softmax(p.pref_logits.data(), S, t.log_pref.data());
  t.entropy.resize(static_cast<size_t>(S));
  for (long s = 0; s < S; ++s) {
    double slog = 0.0;
    for (int i = 0; i < 3; ++i) slog += p.obs_logstd[static_cast<size_t>(3 * s + i)];
    t.entropy[static_cast<size_t>(s)] = slog + kEntConst;
  }

  t.efe.resize(static_cast<size_t>(S * A));
  for (long s = 0; s < S; ++s)
    for (long a = 0; a < A; ++a) {
      const double* pr = t.trans.data() + (s * A + a) * S;
      const double* lr = t.log_trans.data() + (s * A + a) * S;
      double plogp = 0.0, plogpref = 0.0, eent = 0.0;
      for (long s2 = 0; s2 < S; ++s2) {
        plogp += pr[s2] * lr[s2];
        plogpref += pr[s2] * t.log_pref[static_cast<size_t>(s2)];
        eent += pr[s2] * t.entropy[static_cast<size_t>(s2)];
      }
      t.efe[static_cast<size_t>(s * A + a)] = (plogp - plogpref) + eent;
    }

  t.q.assign(static_cast<size_t>(H) * static_cast<size_t>(S * A), 0.0);
  t.log_pi = t.q;
  t.g = t.q;
  t.v.assign(static_cast<size_t>(H) * static_cast<size_t>(S), 0.0);

  std::vector<double> x(static_cast<size_t>(A)), y(static_cast<size_t>(A)),
      step(static_cast<size_t>(A)), negg(static_cast<size_t>(A));
  for (int h = 1; h <= H; ++h) {
    double* q = t.q.data() + static_cast<long>(h - 1) * S * A;
    double* lp = t.log_pi.data() + static_cast<long>(h - 1) * S * A;
    double* g = t.g.data() + static_cast<long>(h - 1) * S * A;
    double* v = t.v.data() + static_cast<long>(h - 1) * S;
    const double* v_prev = h > 1 ? t.v.data() + static_cast<long>(h - 2) * S : nullptr;
    for (long s = 0; s < S; ++s)
      for (long a = 0; a < A; ++a) {
        double acc = t.efe[static_cast<size_t>(s * A + a)];
        if (v_prev) {
          const double* pr = t.trans.data() + (s * A + a) * S;
          double e = 0.0;
          for (long s2 = 0; s2 < S; ++s2) e += pr[s2] * v_prev[s2];
          acc += e;
        }
        q[s * A + a] = acc;
      }
    for (long s = 0; s < S; ++s) {
      const double* qs = q + s * A;
      // damped sweeps on log pi; the undamped map alone oscillates with
      // period two, averaging it with the iterate contracts
      for (long a = 0; a < A; ++a) x[static_cast<size_t>(a)] = -std::log(static_cast<double>(A));
      for (int it = 0; it < kPolicySweeps; ++it) {
        for (long a = 0; a < A; ++a) y[static_cast<size_t>(a)] = -(qs[a] + x[static_cast<size_t>(a)]);
        log_softmax(y.data(), A, step.data());
        double delta = 0.0;
        for (long a = 0; a < A; ++a) {
          double nx = 0.5 * (x[static_cast<size_t>(a)] + step[static_cast<size_t>(a)]);
          delta = std::max(delta, std::fabs(nx - x[static_cast<size_t>(a)]));
          x[static_cast<size_t>(a)] = nx;
        }
        if (delta < kPolicyTol) break;
      }
      for (long a = 0; a < A; ++a) {
        lp[s * A + a] = x[static_cast<size_t>(a)];
        g[s * A + a] = qs[a] + x[static_cast<size_t>(a)];
        negg[static_cast<size_t>(a)] = -g[s * A + a];
      }
      v[s] = -logsumexp(negg.data(), A);
    }
  }

  t.horizon_w.resize(static_cast<size_t>(H));
  std::vector<double> wl(static_cast<size_t>(H));
  for (int h = 1; h <= H; ++h)
    wl[static_cast<size_t>(h - 1)] = h * p.horizon_lograte - std::lgamma(static_cast<double>(h) + 1.0);
  softmax(wl.data(), H, t.horizon_w.data());
  return t;
}

std::vector<double> policy_at_horizon(const AidaTables& t, const std::vector<double>& b,
                                      int h) {
  if (h < 1 || h > t.H) throw DataError("planning horizon out of range");
  if (b.size() != static_cast<size_t>(t.S)) throw DataError("belief has the wrong size");
  long S = t.S, A = t.A;
  const double* g = t.g.data() + static_cast<long>(h - 1) * S * A;
  std::vector<double> score(static_cast<size_t>(A), 0.0);
  for (long s = 0; s < S; ++s)
    for (long a = 0; a < A; ++a)
      score[static_cast<size_t>(a)] -= b[static_cast<size_t>(s)] * g[s * A + a];
  std::vector<double> out(static_cast<size_t>(A));
  softmax(score.data(), A, out.data());
  return out;
}

std::vector<double> policy(const AidaTables& t, const std::vector<double>& b) {
  std::vector<double> out(static_cast<size_t>(t.A), 0.0);
  for (int h = 1; h <= t.H; ++h) {
    std::vector<double> ph = policy_at_horizon(t, b, h);
    double w = t.horizon_w[static_cast<size_t>(h - 1)];
    for (size_t a = 0; a < out.size(); ++a) out[a] += w * ph[a];
  }
  return out;
}

double map_objective(const AidaParams& p, const std::vector<data::Episode>& eps,
                     double l1, double l2) {
  p.validate();
  check_labels(eps, p.A);
  if (eps.empty()) throw DataError("no episodes to score");
  AidaTables t = build_tables(p);

  double act_sum = 0.0, obs_sum = 0.0;
  long n_act = 0, n_obs = 0;
  for (const auto& ep : eps) {
    std::vector<double> b;
    int a_prev = -1;
    for (const auto& f : ep.frames) {
      std::array<double, 3> o = frame_obs(f);
      if (a_prev < 0) {
        b = initial_belief(o, p).b;
      } else {
        std::vector<double> prior = prior_predictive(b, a_prev, p);
        Posterior post = fuse(obs_loglik_all(p, o), prior);
        obs_sum += post.log_evidence;
        ++n_obs;
        b = std::move(post.b);
      }
      std::vector<double> pi = policy(t, b);
      act_sum += std::log(pi[static_cast<size_t>(f.action_id)]);
      ++n_act;
      a_prev = f.action_id;
    }
  }
  if (n_act == 0) throw DataError("no frames to score");

  double pen = 0.0;
  for (double ls : p.obs_logstd) {
    double var = std::exp(2.0 * ls);
    pen += var * var;
  }
  double mean_obs = n_obs > 0 ? obs_sum / static_cast<double>(n_obs) : 0.0;
  double loss = -(act_sum / static_cast<double>(n_act) + l1 * mean_obs) + l2 * pen;
  if (!std::isfinite(loss)) throw TrainError("model loss is not finite");
  return loss;
}

// ---- autodiff graph ----

namespace {

struct LossGraph {
  Tape tp;
  int trans = -1, pref = -1, mean = -1, logstd = -1, lograte = -1;
  int loss = -1;
  long n_act = 0, n_obs = 0;
};

Tensor tensor3(const std::vector<double>& v, long d0, long d1, long d2) {
  Tensor t = Tensor::zeros({d0, d1, d2});
  t.data() = v;
  return t;
}

void build_loss_graph(LossGraph& G, const AidaParams& p,
                      const std::vector<const data::Episode*>& eps, double l1,
                      double l2) {
  Tape& tp = G.tp;
  long S = p.S, A = p.A;
  int H = p.H_max;

  G.trans = tp.leaf(tensor3(p.trans_logits, S, A, S));
  G.pref = tp.leaf(Tensor::from(p.pref_logits));
  G.mean = tp.leaf(Tensor::from(S, 3, p.obs_mean));
  G.logstd = tp.leaf(Tensor::from(S, 3, p.obs_logstd));
  G.lograte = tp.leaf(Tensor::scalar(p.horizon_lograte));

  int trans_p = tp.softmax_last(G.trans);
  int log_trans = tp.log_softmax_last(G.trans);
  int log_pref = tp.log_softmax_last(G.pref);
  int ent = tp.add_const(tp.sum_last(G.logstd), kEntConst);

  int plogp = tp.sum_last(tp.mul(trans_p, log_trans));
  int plogpref = tp.t3vec(trans_p, log_pref);
  int eent = tp.t3vec(trans_p, ent);
  int efe = tp.add(tp.sub(plogp, plogpref), eent);

  // soft backups; the self-consistent policy gives the closed forms
  // v = -2 lse_a(-q/2) and pi = softmax_a(-q/2), so only q is carried
  std::vector<int> qs;
  int v = -1;
  for (int h = 1; h <= H; ++h) {
    int q = h == 1 ? efe : tp.add(efe, tp.t3vec(trans_p, v));
    qs.push_back(q);
    v = tp.scale(tp.logsumexp_last(tp.scale(q, -0.5)), -2.0);
  }
  int qstack = tp.stack(qs);

  std::vector<double> coef(static_cast<size_t>(H)), off(static_cast<size_t>(H));
  for (int h = 1; h <= H; ++h) {
    coef[static_cast<size_t>(h - 1)] = static_cast<double>(h);
    off[static_cast<size_t>(h - 1)] = -std::lgamma(static_cast<double>(h) + 1.0);
  }
  int horizon_w = tp.softmax_last(tp.affine(G.lograte, coef, off));

  int neg_inv_std = tp.exp_(tp.neg(G.logstd));
  int sum_logstd = tp.sum_last(G.logstd);

  std::vector<int> slices(static_cast<size_t>(A));
  for (long a = 0; a < A; ++a) slices[static_cast<size_t>(a)] = tp.slice_mid(trans_p, a);

  int act_acc = -1, obs_acc = -1;
  double logS = std::log(static_cast<double>(S));
  for (const data::Episode* ep : eps) {
    int b = -1;
    int a_prev = -1;
    for (const auto& f : ep->frames) {
      std::array<double, 3> oarr = frame_obs(f);
      int o = tp.constant(Tensor::from({oarr[0], oarr[1], oarr[2]}));
      int z = tp.mul(tp.sub_bcast_last(G.mean, o), neg_inv_std);
      int l = tp.add_const(tp.sub(tp.scale(tp.sum_last(tp.square(z)), -0.5), sum_logstd),
                           -1.5 * kLn2Pi);
      if (a_prev < 0) {
        int lse = tp.logsumexp_last(l);
        if (tp.val(lse)() - logS < kUnderflowLogMass)
          b = tp.constant(Tensor::from(std::vector<double>(
              static_cast<size_t>(S), 1.0 / static_cast<double>(S))));
        else
          b = tp.softmax_last(l);
      } else {
        int prior = tp.vecmat(b, slices[static_cast<size_t>(a_prev)]);
        int post_log = tp.add(l, tp.log_(prior));
        int lse = tp.logsumexp_last(post_log);
        obs_acc = obs_acc < 0 ? lse : tp.add(obs_acc, lse);
        ++G.n_obs;
        b = tp.val(lse)() < kUnderflowLogMass ? prior : tp.softmax_last(post_log);
      }
      int bq = tp.contract_mid(qstack, b);
      int pih = tp.softmax_last(tp.scale(bq, -0.5));
      int mix = tp.vecmat(horizon_w, pih);
      int ll = tp.log_(tp.pick(mix, f.action_id));
      act_acc = act_acc < 0 ? ll : tp.add(act_acc, ll);
      ++G.n_act;
      a_prev = f.action_id;
    }
  }
  if (G.n_act == 0) throw DataError("no frames to score");

  int pen = tp.sum(tp.square(tp.exp_(tp.scale(G.logstd, 2.0))));
  int loss = tp.scale(act_acc, -1.0 / static_cast<double>(G.n_act));
  if (G.n_obs > 0)
    loss = tp.add(loss, tp.scale(obs_acc, -l1 / static_cast<double>(G.n_obs)));
  loss = tp.add(loss, tp.scale(pen, l2));
  G.loss = loss;
}

// gradient flattened as [trans, pref, mean, logstd, lograte]
std::vector<double> flatten_grads(const LossGraph& G) {
  std::vector<double> g;
  auto push = [&](int id) {
    const auto& t = G.tp.grad(id).data();
    g.insert(g.end(), t.begin(), t.end());
  };
  push(G.trans);
  push(G.pref);
  push(G.mean);
  push(G.logstd);
  push(G.lograte);
  return g;
}

std::vector<double> flatten_params(const AidaParams& p) {
  std::vector<double> w;
  w.reserve(static_cast<size_t>(p.param_count()));
  w.insert(w.end(), p.trans_logits.begin(), p.trans_logits.end());
  w.insert(w.end(), p.pref_logits.begin(), p.pref_logits.end());
  w.insert(w.end(), p.obs_mean.begin(), p.obs_mean.end());
  w.insert(w.end(), p.obs_logstd.begin(), p.obs_logstd.end());
  w.push_back(p.horizon_lograte);
  return w;
}

void unflatten_params(const std::vector<double>& w, AidaParams& p) {
  size_t s = static_cast<size_t>(p.S), a = static_cast<size_t>(p.A);
  auto it = w.begin();
  p.trans_logits.assign(it, it + static_cast<long>(s * a * s));
  it += static_cast<long>(s * a * s);
  p.pref_logits.assign(it, it + static_cast<long>(s));
  it += static_cast<long>(s);
  p.obs_mean.assign(it, it + static_cast<long>(3 * s));
  it += static_cast<long>(3 * s);
  p.obs_logstd.assign(it, it + static_cast<long>(3 * s));
  it += static_cast<long>(3 * s);
  p.horizon_lograte = *it;
}

}  // namespace

std::pair<double, std::vector<double>> map_gradient(
    const AidaParams& p, const std::vector<data::Episode>& eps, double l1,
    double l2) {
  p.validate();
  check_labels(eps, p.A);
  if (eps.empty()) throw DataError("no episodes to score");
  std::vector<const data::Episode*> ptrs;
  for (const auto& ep : eps) ptrs.push_back(&ep);
  LossGraph G;
  build_loss_graph(G, p, ptrs, l1, l2);
  double loss = G.tp.val(G.loss)();
  if (!std::isfinite(loss)) throw TrainError("model loss is not finite");
  G.tp.backward(G.loss);
  return {loss, flatten_grads(G)};
}

AidaParams init_params(const std::vector<data::Episode>& eps,
                       const AidaTrainOptions& o) {
  std::vector<std::array<double, 3>> X;
  for (const auto& ep : eps)
    for (const auto& f : ep.frames) X.push_back(frame_obs(f));
  long n = static_cast<long>(X.size());
  if (n < o.S) throw DataError("fewer observation frames than model states");

  AidaParams p;
  p.S = o.S;
  p.A = o.A;
  p.H_max = o.H_max;
  Rng rng(derive_seed(o.seed, 0xa1da));
  size_t s = static_cast<size_t>(p.S), a = static_cast<size_t>(p.A);
  p.trans_logits.resize(s * a * s);
  for (double& x : p.trans_logits) x = 0.1 * rng.normal();
  p.pref_logits.resize(s);
  for (double& x : p.pref_logits) x = 0.1 * rng.normal();

  // k-means++ seeding then Lloyd iterations over the observation cloud
  std::vector<std::array<double, 3>> centers;
  centers.push_back(X[static_cast<size_t>(rng.index(n))]);
  std::vector<double> d2(static_cast<size_t>(n));
  auto dist2 = [](const std::array<double, 3>& u, const std::array<double, 3>& v) {
    double acc = 0.0;
    for (int i = 0; i < 3; ++i) {
      double d = u[static_cast<size_t>(i)] - v[static_cast<size_t>(i)];
      acc += d * d;
    }
    return acc;
  };
  while (centers.size() < s) {
    for (long i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centers) best = std::min(best, dist2(X[static_cast<size_t>(i)], c));
      d2[static_cast<size_t>(i)] = best;
    }
    double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    centers.push_back(total > 0.0 ? X[static_cast<size_t>(rng.categorical(d2))]
                                  : X[static_cast<size_t>(rng.index(n))]);
  }
  std::vector<int> assign(static_cast<size_t>(n), 0);
  for (int it = 0; it < 30; ++it) {
    for (long i = 0; i < n; ++i) {
      int best = 0;
      double bd = dist2(X[static_cast<size_t>(i)], centers[0]);
      for (size_t c = 1; c < centers.size(); ++c) {
        double d = dist2(X[static_cast<size_t>(i)], centers[c]);
        if (d < bd) {
          bd = d;
          best = static_cast<int>(c);
        }
      }
      assign[static_cast<size_t>(i)] = best;
    }
    double moved = 0.0;
    for (size_t c = 0; c < centers.size(); ++c) {
      std::array<double, 3> acc{0, 0, 0};
      long cnt = 0;
      for (long i = 0; i < n; ++i)
        if (assign[static_cast<size_t>(i)] == static_cast<int>(c)) {
          for (int k = 0; k < 3; ++k) acc[static_cast<size_t>(k)] += X[static_cast<size_t>(i)][static_cast<size_t>(k)];
          ++cnt;
        }
      std::array<double, 3> next = cnt > 0
          ? std::array<double, 3>{acc[0] / static_cast<double>(cnt), acc[1] / static_cast<double>(cnt), acc[2] / static_cast<double>(cnt)}
          : X[static_cast<size_t>(rng.index(n))];
      moved = std::max(moved, dist2(next, centers[c]));
      centers[c] = next;
    }
    if (moved < 1e-18) break;
  }

  p.obs_mean.resize(3 * s);
  for (size_t c = 0; c < s; ++c)
    for (int k = 0; k < 3; ++k) p.obs_mean[3 * c + static_cast<size_t>(k)] = centers[c][static_cast<size_t>(k)];

  std::array<double, 3> mean{0, 0, 0}, var{0, 0, 0};
  for (const auto& x : X)
    for (int k = 0; k < 3; ++k) mean[static_cast<size_t>(k)] += x[static_cast<size_t>(k)];
  for (int k = 0; k < 3; ++k) mean[static_cast<size_t>(k)] /= static_cast<double>(n);
  for (const auto& x : X)
    for (int k = 0; k < 3; ++k) {
      double d = x[static_cast<size_t>(k)] - mean[static_cast<size_t>(k)];
      var[static_cast<size_t>(k)] += d * d;
    }
  p.obs_logstd.resize(3 * s);
  for (int k = 0; k < 3; ++k) {
    double sd = std::sqrt(var[static_cast<size_t>(k)] / static_cast<double>(n));
    double ls = std::log(std::max(sd, 1e-3));
    for (size_t c = 0; c < s; ++c) p.obs_logstd[3 * c + static_cast<size_t>(k)] = ls;
  }
  p.horizon_lograte = std::log(10.0);
  return p;
}

AidaTrainResult train_aida(const std::vector<data::Episode>& eps,
                           const AidaTrainOptions& o) {
  check_labels(eps, o.A);
  if (eps.empty()) throw DataError("no episodes to train on");

  for (int attempt = 0; attempt <= 2; ++attempt) {
    AidaParams p = init_params(eps, o);
    std::vector<double> w = flatten_params(p);
    AdamConfig acfg;
    acfg.lr = o.lr * std::pow(0.5, attempt);
    Adam adam(w.size(), acfg);
    AidaTrainResult res;
    res.restarts = attempt;
    bool diverged = false;

    for (int epoch = 0; epoch < o.max_epochs && !diverged; ++epoch) {
      Rng ep_rng(derive_seed(o.seed, 0x3e0c + static_cast<uint64_t>(epoch)));
      std::vector<const data::Episode*> sched;
      for (const auto& ep : eps) sched.push_back(&ep);
      for (size_t i = sched.size(); i > 1; --i)
        std::swap(sched[i - 1], sched[static_cast<size_t>(ep_rng.index(static_cast<long>(i)))]);

      double loss_sum = 0.0;
      long steps_sum = 0;
      for (size_t off = 0; off < sched.size() && !diverged;
           off += static_cast<size_t>(o.batch_episodes)) {
        std::vector<const data::Episode*> batch(
            sched.begin() + static_cast<long>(off),
            sched.begin() + static_cast<long>(std::min(
                               off + static_cast<size_t>(o.batch_episodes), sched.size())));
        unflatten_params(w, p);
        LossGraph G;
        try {
          build_loss_graph(G, p, batch, o.lambda1, o.lambda2);
          double loss = G.tp.val(G.loss)();
          if (!std::isfinite(loss)) throw TrainError("model loss is not finite");
          G.tp.backward(G.loss);
          adam.step(w, flatten_grads(G));
          loss_sum += loss * static_cast<double>(G.n_act);
          steps_sum += G.n_act;
        } catch (const TrainError&) {
          diverged = true;
        }
      }
      if (!diverged) res.loss_curve.push_back(loss_sum / static_cast<double>(steps_sum));
    }
    if (!diverged) {
      unflatten_params(w, p);
      res.params = std::move(p);
      return res;
    }
  }
  throw TrainError("training diverged three times, last with a quartered step size");
}

std::vector<ObsSample> sample_observations(const AidaParams& p, const AidaTables& t,
                                           int n_per_state, uint64_t seed) {
  p.validate();
  if (n_per_state < 1) throw DataError("sample count must be positive");
  Rng rng(derive_seed(seed, 0x0b5e));
  std::vector<ObsSample> out;
  out.reserve(static_cast<size_t>(p.S) * static_cast<size_t>(n_per_state));
  std::vector<double> x(static_cast<size_t>(p.S));
  for (int s = 0; s < p.S; ++s) {
    const double* mu = p.obs_mean.data() + 3 * s;
    const double* ls = p.obs_logstd.data() + 3 * s;
    for (int i = 0; i < n_per_state; ++i) {
      ObsSample smp;
      smp.state = s;
      for (int k = 0; k < 3; ++k)
        smp.o[static_cast<size_t>(k)] = mu[k] + std::exp(ls[k]) * rng.normal();
      std::vector<double> l = obs_loglik_all(p, smp.o);
      for (int s2 = 0; s2 < p.S; ++s2)
        x[static_cast<size_t>(s2)] = t.log_pref[static_cast<size_t>(s2)] + l[static_cast<size_t>(s2)];
      smp.pref_loglik = logsumexp(x.data(), p.S);
      std::vector<double> pi = policy(t, initial_belief(smp.o, p).b);
      int best = 0;
      for (int a = 1; a < p.A; ++a)
        if (pi[static_cast<size_t>(a)] > pi[static_cast<size_t>(best)]) best = a;
      smp.action = best;
      out.push_back(smp);
    }
  }
  return out;
}

void save_aida(const std::filesystem::path& path, const AidaModel& m) {
  m.params.validate();
  if (m.codebook.mu.size() != m.codebook.w.size() ||
      m.codebook.sigma.size() != m.codebook.w.size())
    throw DataError("action codebook arrays disagree in length");
  if (m.codebook.K() != m.params.A)
    throw DataError("action codebook size " + std::to_string(m.codebook.K()) +
                    " does not match the model's " + std::to_string(m.params.A) +
                    " actions");
  nlohmann::json j;
  j["format_version"] = 1;
  j["kind"] = "aida";
  j["S"] = m.params.S;
  j["A"] = m.params.A;
  j["H_max"] = m.params.H_max;
  j["lambda1"] = m.lambda1;
  j["lambda2"] = m.lambda2;
  j["trans_logits"] = m.params.trans_logits;
  j["pref_logits"] = m.params.pref_logits;
  j["obs_mean"] = m.params.obs_mean;
  j["obs_logstd"] = m.params.obs_logstd;
  j["horizon_lograte"] = m.params.horizon_lograte;
  j["codebook"] = {{"weights", m.codebook.w}, {"means", m.codebook.mu}, {"stds", m.codebook.sigma}};
  write_text(path, j.dump() + "\n");
}

AidaModel load_aida(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("cannot parse checkpoint " + path.string() + ": " + e.what());
  }
  AidaModel m;
  try {
    if (j.at("kind").get<std::string>() != "aida")
      throw DataError("checkpoint " + path.string() + " holds a '" +
                      j.at("kind").get<std::string>() + "' model, expected 'aida'");
    m.params.S = j.at("S").get<int>();
    m.params.A = j.at("A").get<int>();
    m.params.H_max = j.at("H_max").get<int>();
    m.lambda1 = j.at("lambda1").get<double>();
    m.lambda2 = j.at("lambda2").get<double>();
    m.params.trans_logits = j.at("trans_logits").get<std::vector<double>>();
    m.params.pref_logits = j.at("pref_logits").get<std::vector<double>>();
    m.params.obs_mean = j.at("obs_mean").get<std::vector<double>>();
    m.params.obs_logstd = j.at("obs_logstd").get<std::vector<double>>();
    m.params.horizon_lograte = j.at("horizon_lograte").get<double>();
    const auto& cb = j.at("codebook");
    m.codebook.w = cb.at("weights").get<std::vector<double>>();
    m.codebook.mu = cb.at("means").get<std::vector<double>>();
    m.codebook.sigma = cb.at("stds").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad checkpoint " + path.string() + ": " + e.what());
  }
  m.params.validate();
  if (m.codebook.w.size() != m.codebook.mu.size() ||
      m.codebook.w.size() != m.codebook.sigma.size() || m.codebook.w.empty())
    throw DataError("inconsistent codebook in checkpoint " + path.string());
  if (m.codebook.K() != m.params.A)
    throw DataError("checkpoint " + path.string() + " codebook size mismatch");
  return m;
}

}  // namespace carfollow::aida
