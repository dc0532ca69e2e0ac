#include "carfollow/bc.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <json.hpp>
#include <limits>
#include <numeric>

#include "carfollow/optim.hpp"
#include "carfollow/tape.hpp"

namespace carfollow::bc {

using diff::Adam;
using diff::AdamConfig;
using diff::Tape;
using diff::Tensor;

namespace {

void log_softmax_inplace(std::vector<double>& v) {
  double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  double lse = m + std::log(s);
  for (double& x : v) x -= lse;
}

std::array<double, 3> normalize(const NormStats& n, const std::array<double, 3>& o) {
  for (double x : o)
    if (!std::isfinite(x)) throw DataError("non-finite feature value");
  return {(o[0] - n.mean[0]) / n.std[0], (o[1] - n.mean[1]) / n.std[1],
          (o[2] - n.mean[2]) / n.std[2]};
}

// y = relu(W x + b) with W row-major (rows x cols)
void dense(const double* W, const double* b, const double* x, double* y,
           long rows, long cols, bool rect) {
  for (long r = 0; r < rows; ++r) {
    double acc = b[r];
    const double* wr = W + r * cols;
    for (long c = 0; c < cols; ++c) acc += wr[c] * x[c];
    y[r] = rect && acc < 0.0 ? 0.0 : acc;
  }
}

double xavier_limit(long fan_in, long fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

void fill_xavier(double* w, long rows, long cols, Rng& rng) {
  double lim = xavier_limit(cols, rows);
  for (long i = 0; i < rows * cols; ++i) w[i] = rng.uniform(-lim, lim);
}

Tensor mat_of(const double* src, long r, long c) {
  return Tensor::from(r, c, std::vector<double>(src, src + r * c));
}

Tensor vec_of(const double* src, long n) {
  return Tensor::from(std::vector<double>(src, src + n));
}

void add_grad(const Tensor& g, double* dst) {
  const std::vector<double>& s = g.data();
  for (size_t i = 0; i < s.size(); ++i) dst[i] += s[i];
}

}  // namespace

NormStats compute_norm_stats(const std::vector<data::Episode>& eps) {
  NormStats n;
  double cnt = 0.0;
  std::array<double, 3> sum{0, 0, 0}, sq{0, 0, 0};
  for (const auto& ep : eps)
    for (const auto& f : ep.frames) {
      auto o = obs3(f);
      for (int i = 0; i < 3; ++i) {
        sum[static_cast<size_t>(i)] += o[static_cast<size_t>(i)];
        sq[static_cast<size_t>(i)] += o[static_cast<size_t>(i)] * o[static_cast<size_t>(i)];
      }
      cnt += 1.0;
    }
  if (cnt < 1.0) throw DataError("no frames to normalize over");
  for (int i = 0; i < 3; ++i) {
    size_t k = static_cast<size_t>(i);
    n.mean[k] = sum[k] / cnt;
    n.std[k] = std::max(std::sqrt(std::max(0.0, sq[k] / cnt - n.mean[k] * n.mean[k])), 1e-9);
  }
  return n;
}

// ---- MLP ----

namespace {
// flat layout offsets for MlpPolicy::w
struct MlpView {
  long H, K;
  long W1, b1, W2, b2, W3, b3, total;
  explicit MlpView(int n_actions) : H(MlpPolicy::kHidden), K(n_actions) {
    W1 = 0;
    b1 = W1 + 3 * H;
    W2 = b1 + H;
    b2 = W2 + H * H;
    W3 = b2 + H;
    b3 = W3 + K * H;
    total = b3 + K;
  }
};
}  // namespace

long MlpPolicy::param_count() const { return MlpView(n_actions).total; }

void MlpPolicy::init_weights(uint64_t seed) {
  MlpView v(n_actions);
  w.assign(static_cast<size_t>(v.total), 0.0);
  Rng rng(derive_seed(seed, 0x317a));
  fill_xavier(w.data() + v.W1, v.H, 3, rng);
  fill_xavier(w.data() + v.W2, v.H, v.H, rng);
  fill_xavier(w.data() + v.W3, v.K, v.H, rng);
}

std::vector<double> MlpPolicy::log_probs(const std::array<double, 3>& o) const {
  MlpView v(n_actions);
  auto x = normalize(norm, o);
  std::vector<double> h1(static_cast<size_t>(v.H)), h2(static_cast<size_t>(v.H));
  std::vector<double> out(static_cast<size_t>(v.K));
  dense(w.data() + v.W1, w.data() + v.b1, x.data(), h1.data(), v.H, 3, true);
  dense(w.data() + v.W2, w.data() + v.b2, h1.data(), h2.data(), v.H, v.H, true);
  dense(w.data() + v.W3, w.data() + v.b3, h2.data(), out.data(), v.K, v.H, false);
  log_softmax_inplace(out);
  return out;
}

// ---- GRU ----

namespace {
struct GruView {
  long H, K;
  long Wr, Ur, br, Wz, Uz, bz, Wn, Un, bn, Wh, bh, Wo, bo, total;
  explicit GruView(int n_actions) : H(GruPolicy::kHidden), K(n_actions) {
    long p = 0;
    auto gate = [&](long& Wx, long& Uh, long& b) {
      Wx = p;
      p += 3 * H;
      Uh = p;
      p += H * H;
      b = p;
      p += H;
    };
    gate(Wr, Ur, br);
    gate(Wz, Uz, bz);
    gate(Wn, Un, bn);
    Wh = p;
    p += H * H;
    bh = p;
    p += H;
    Wo = p;
    p += K * H;
    bo = p;
    p += K;
    total = p;
  }
};
}  // namespace

long GruPolicy::param_count() const { return GruView(n_actions).total; }

void GruPolicy::init_weights(uint64_t seed) {
  GruView v(n_actions);
  w.assign(static_cast<size_t>(v.total), 0.0);
  Rng rng(derive_seed(seed, 0x9b42));
  fill_xavier(w.data() + v.Wr, v.H, 3, rng);
  fill_xavier(w.data() + v.Ur, v.H, v.H, rng);
  fill_xavier(w.data() + v.Wz, v.H, 3, rng);
  fill_xavier(w.data() + v.Uz, v.H, v.H, rng);
  fill_xavier(w.data() + v.Wn, v.H, 3, rng);
  fill_xavier(w.data() + v.Un, v.H, v.H, rng);
  fill_xavier(w.data() + v.Wh, v.H, v.H, rng);
  fill_xavier(w.data() + v.Wo, v.K, v.H, rng);
}

std::vector<double> GruPolicy::step(State& st, const std::array<double, 3>& o) const {
  GruView v(n_actions);
  if (st.h.size() != static_cast<size_t>(v.H)) throw DataError("bad policy state");
  auto x = normalize(norm, o);
  std::vector<double> r(static_cast<size_t>(v.H)), z(static_cast<size_t>(v.H)),
      n(static_cast<size_t>(v.H)), un(static_cast<size_t>(v.H));

  auto gate = [&](long Wx, long Uh, long b, std::vector<double>& out) {
    dense(w.data() + Wx, w.data() + b, x.data(), out.data(), v.H, 3, false);
    for (long i = 0; i < v.H; ++i) {
      const double* u = w.data() + Uh + i * v.H;
      double acc = out[static_cast<size_t>(i)];
      for (long j = 0; j < v.H; ++j) acc += u[j] * st.h[static_cast<size_t>(j)];
      out[static_cast<size_t>(i)] = 1.0 / (1.0 + std::exp(-acc));
    }
  };
  gate(v.Wr, v.Ur, v.br, r);
  gate(v.Wz, v.Uz, v.bz, z);

  // candidate: tanh(Wn x + r * (Un h + bn))
  dense(w.data() + v.Un, w.data() + v.bn, st.h.data(), un.data(), v.H, v.H, false);
  for (long i = 0; i < v.H; ++i) {
    const double* wr = w.data() + v.Wn + i * 3;
    double acc = wr[0] * x[0] + wr[1] * x[1] + wr[2] * x[2];
    n[static_cast<size_t>(i)] =
        std::tanh(acc + r[static_cast<size_t>(i)] * un[static_cast<size_t>(i)]);
  }
  for (long i = 0; i < v.H; ++i) {
    size_t k = static_cast<size_t>(i);
    st.h[k] = (1.0 - z[k]) * n[k] + z[k] * st.h[k];
  }

  std::vector<double> g(static_cast<size_t>(v.H)), out(static_cast<size_t>(v.K));
  dense(w.data() + v.Wh, w.data() + v.bh, st.h.data(), g.data(), v.H, v.H, true);
  dense(w.data() + v.Wo, w.data() + v.bo, g.data(), out.data(), v.K, v.H, false);
  log_softmax_inplace(out);
  return out;
}

std::vector<std::vector<double>> GruPolicy::log_probs_seq(
    const std::vector<std::array<double, 3>>& seq) const {
  if (seq.empty()) throw DataError("empty observation sequence");
  State st = init_state();
  std::vector<std::vector<double>> out;
  out.reserve(seq.size());
  for (const auto& o : seq) out.push_back(step(st, o));
  return out;
}

double predict_sample(const std::vector<double>& log_probs,
                      const data::ActionCodebook& cb, Rng& rng) {
  if (log_probs.size() != static_cast<size_t>(cb.K()))
    throw DataError("policy output size does not match the codebook");
  std::vector<double> p(log_probs.size());
  for (size_t i = 0; i < p.size(); ++i) p[i] = std::exp(log_probs[i]);
  int id = rng.categorical(p);
  return std::clamp(data::component_sample(cb, id, rng), kAccelMin, kAccelMax);
}

// ---- training ----

namespace {

struct BatchGraph {
  Tape tp;
  std::vector<int> leaves;   // in flat-layout order
  std::vector<long> sizes;   // element count per leaf
  int root = -1;
  long steps = 0;
};

// negative mean per-step log-likelihood over the batch, as a fresh graph
template <typename StepFn>
void batch_loss(BatchGraph& bg, StepFn&& per_episode,
                const std::vector<const data::Episode*>& batch) {
  std::vector<int> logliks;
  for (const data::Episode* ep : batch) per_episode(bg.tp, *ep, logliks);
  bg.steps = static_cast<long>(logliks.size());
  int acc = logliks[0];
  for (size_t i = 1; i < logliks.size(); ++i) acc = bg.tp.add(acc, logliks[i]);
  bg.root = bg.tp.scale(acc, -1.0 / static_cast<double>(bg.steps));
}

void check_labels(const std::vector<data::Episode>& eps, int n_actions) {
  for (const auto& ep : eps)
    for (const auto& f : ep.frames)
      if (f.action_id < 0 || f.action_id >= n_actions)
        throw DataError("episode " + ep.id + " lacks a valid action id");
}

// shared optimizer loop; build(batch) must fill a BatchGraph whose leaves map
// onto the flat weight vector, eval_nll(eps) scores with plain forwards
template <typename Build, typename EvalNll>
TrainReport run_training(std::vector<double>& w, const std::vector<data::Episode>& eps,
                         const TrainOptions& opts, Build&& build, EvalNll&& eval_nll) {
  if (eps.size() < 2) throw DataError("training needs at least 2 episodes");

  std::vector<size_t> order(eps.size());
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(derive_seed(opts.seed, 0x5e7));
  for (size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[static_cast<size_t>(split_rng.index(static_cast<long>(i)))]);
  size_t n_val = std::clamp<size_t>(
      static_cast<size_t>(std::llround(opts.val_fraction * static_cast<double>(eps.size()))),
      1, eps.size() - 1);
  std::vector<const data::Episode*> val, train;
  for (size_t i = 0; i < n_val; ++i) val.push_back(&eps[order[i]]);
  for (size_t i = n_val; i < order.size(); ++i) train.push_back(&eps[order[i]]);

  AdamConfig acfg;
  acfg.lr = opts.lr;
  Adam adam(w.size(), acfg);
  TrainReport rep;
  std::vector<double> best_w = w;
  double best_val = std::numeric_limits<double>::infinity();
  int plateau = 0;
  bool halved = false;

  for (int epoch = 0; epoch < opts.max_epochs; ++epoch) {
    Rng ep_rng(derive_seed(opts.seed, 0xe90c + static_cast<uint64_t>(epoch)));
    std::vector<const data::Episode*> sched = train;
    for (size_t i = sched.size(); i > 1; --i)
      std::swap(sched[i - 1], sched[static_cast<size_t>(ep_rng.index(static_cast<long>(i)))]);

    double loglik_sum = 0.0;
    long step_sum = 0;
    bool failed = false;
    for (size_t off = 0; off < sched.size(); off += static_cast<size_t>(opts.batch_episodes)) {
      std::vector<const data::Episode*> batch(
          sched.begin() + static_cast<long>(off),
          sched.begin() + static_cast<long>(std::min(off + static_cast<size_t>(opts.batch_episodes),
                                                     sched.size())));
      BatchGraph bg;
      build(bg, w, batch);
      double loss = bg.tp.val(bg.root)();
      if (!std::isfinite(loss)) {
        failed = true;
        break;
      }
      bg.tp.backward(bg.root);
      std::vector<double> g(w.size(), 0.0);
      long pos = 0;
      for (size_t li = 0; li < bg.leaves.size(); ++li) {
        add_grad(bg.tp.grad(bg.leaves[li]), g.data() + pos);
        pos += bg.sizes[li];
      }
      try {
        adam.step(w, g);
      } catch (const TrainError&) {
        failed = true;
        break;
      }
      loglik_sum += loss * static_cast<double>(bg.steps);
      step_sum += bg.steps;
    }

    if (failed) {
      if (halved) throw TrainError("training diverged after halving the step size");
      halved = true;
      acfg.lr *= 0.5;
      adam = Adam(w.size(), acfg);
      w = best_w;
      continue;
    }

    rep.train_nll.push_back(loglik_sum / static_cast<double>(step_sum));
    double vl = eval_nll(w, val);
    rep.val_nll.push_back(vl);
    if (vl < best_val - 1e-9) {
      best_val = vl;
      best_w = w;
      rep.best_epoch = epoch;
      plateau = 0;
    } else if (++plateau >= opts.patience) {
      break;
    }
  }
  w = best_w;
  return rep;
}

double plain_nll(const std::vector<const data::Episode*>& eps,
                 const std::function<void(const data::Episode&, std::vector<std::vector<double>>&)>& fwd) {
  double s = 0.0;
  long n = 0;
  std::vector<std::vector<double>> lps;
  for (const data::Episode* ep : eps) {
    lps.clear();
    fwd(*ep, lps);
    for (size_t j = 0; j < lps.size(); ++j) {
      s += lps[j][static_cast<size_t>(ep->frames[j].action_id)];
      ++n;
    }
  }
  return -s / static_cast<double>(n);
}

}  // namespace

TrainReport train_mlp(MlpPolicy& p, const std::vector<data::Episode>& eps,
                      const TrainOptions& opts) {
  check_labels(eps, p.n_actions);
  MlpView v(p.n_actions);
  if (p.w.size() != static_cast<size_t>(v.total)) throw DataError("policy weights not initialized");

  auto build = [&](BatchGraph& bg, const std::vector<double>& w,
                   const std::vector<const data::Episode*>& batch) {
    Tape& tp = bg.tp;
    int W1 = tp.leaf(mat_of(w.data() + v.W1, v.H, 3));
    int b1 = tp.leaf(vec_of(w.data() + v.b1, v.H));
    int W2 = tp.leaf(mat_of(w.data() + v.W2, v.H, v.H));
    int b2 = tp.leaf(vec_of(w.data() + v.b2, v.H));
    int W3 = tp.leaf(mat_of(w.data() + v.W3, v.K, v.H));
    int b3 = tp.leaf(vec_of(w.data() + v.b3, v.K));
    bg.leaves = {W1, b1, W2, b2, W3, b3};
    bg.sizes = {3 * v.H, v.H, v.H * v.H, v.H, v.K * v.H, v.K};
    batch_loss(bg,
               [&](Tape& t, const data::Episode& ep, std::vector<int>& out) {
                 for (const auto& f : ep.frames) {
                   auto x = normalize(p.norm, obs3(f));
                   int xi = t.constant(vec_of(x.data(), 3));
                   int h1 = t.relu(t.add(t.matvec(W1, xi), b1));
                   int h2 = t.relu(t.add(t.matvec(W2, h1), b2));
                   int lp = t.log_softmax_last(t.add(t.matvec(W3, h2), b3));
                   out.push_back(t.pick(lp, f.action_id));
                 }
               },
               batch);
  };

  auto eval_nll = [&](const std::vector<double>& w,
                      const std::vector<const data::Episode*>& val) {
    MlpPolicy q = p;
    q.w = w;
    return plain_nll(val, [&](const data::Episode& ep, std::vector<std::vector<double>>& lps) {
      for (const auto& f : ep.frames) lps.push_back(q.log_probs(obs3(f)));
    });
  };

  return run_training(p.w, eps, opts, build, eval_nll);
}

TrainReport train_gru(GruPolicy& p, const std::vector<data::Episode>& eps,
                      const TrainOptions& opts) {
  check_labels(eps, p.n_actions);
  GruView v(p.n_actions);
  if (p.w.size() != static_cast<size_t>(v.total)) throw DataError("policy weights not initialized");

  auto build = [&](BatchGraph& bg, const std::vector<double>& w,
                   const std::vector<const data::Episode*>& batch) {
    Tape& tp = bg.tp;
    auto mat = [&](long off, long r, long c) { return tp.leaf(mat_of(w.data() + off, r, c)); };
    auto vec = [&](long off, long n) { return tp.leaf(vec_of(w.data() + off, n)); };
    int Wr = mat(v.Wr, v.H, 3), Ur = mat(v.Ur, v.H, v.H), br = vec(v.br, v.H);
    int Wz = mat(v.Wz, v.H, 3), Uz = mat(v.Uz, v.H, v.H), bz = vec(v.bz, v.H);
    int Wn = mat(v.Wn, v.H, 3), Un = mat(v.Un, v.H, v.H), bn = vec(v.bn, v.H);
    int Wh = mat(v.Wh, v.H, v.H), bh = vec(v.bh, v.H);
    int Wo = mat(v.Wo, v.K, v.H), bo = vec(v.bo, v.K);
    bg.leaves = {Wr, Ur, br, Wz, Uz, bz, Wn, Un, bn, Wh, bh, Wo, bo};
    bg.sizes = {3 * v.H, v.H * v.H, v.H, 3 * v.H, v.H * v.H, v.H,
                3 * v.H, v.H * v.H, v.H, v.H * v.H, v.H, v.K * v.H, v.K};
    batch_loss(bg,
               [&](Tape& t, const data::Episode& ep, std::vector<int>& out) {
                 int h = t.constant(Tensor::zeros({v.H}));
                 for (const auto& f : ep.frames) {
                   auto x = normalize(p.norm, obs3(f));
                   int xi = t.constant(vec_of(x.data(), 3));
                   int r = t.sigmoid(t.add(t.add(t.matvec(Wr, xi), t.matvec(Ur, h)), br));
                   int z = t.sigmoid(t.add(t.add(t.matvec(Wz, xi), t.matvec(Uz, h)), bz));
                   int cand = t.tanh_(
                       t.add(t.matvec(Wn, xi), t.mul(r, t.add(t.matvec(Un, h), bn))));
                   h = t.add(t.mul(t.add_const(t.neg(z), 1.0), cand), t.mul(z, h));
                   int g = t.relu(t.add(t.matvec(Wh, h), bh));
                   int lp = t.log_softmax_last(t.add(t.matvec(Wo, g), bo));
                   out.push_back(t.pick(lp, f.action_id));
                 }
               },
               batch);
  };

  auto eval_nll = [&](const std::vector<double>& w,
                      const std::vector<const data::Episode*>& val) {
    GruPolicy q = p;
    q.w = w;
    return plain_nll(val, [&](const data::Episode& ep, std::vector<std::vector<double>>& lps) {
      auto st = q.init_state();
      for (const auto& f : ep.frames) lps.push_back(q.step(st, obs3(f)));
    });
  };

  return run_training(p.w, eps, opts, build, eval_nll);
}

// ---- checkpoints ----

namespace {

nlohmann::json cb_json(const data::ActionCodebook& cb) {
  return {{"weights", cb.w}, {"means", cb.mu}, {"stds", cb.sigma}};
}

data::ActionCodebook cb_from(const nlohmann::json& j) {
  data::ActionCodebook cb;
  cb.w = j.at("weights").get<std::vector<double>>();
  cb.mu = j.at("means").get<std::vector<double>>();
  cb.sigma = j.at("stds").get<std::vector<double>>();
  if (cb.w.size() != cb.mu.size() || cb.w.size() != cb.sigma.size() || cb.w.empty())
    throw DataError("inconsistent codebook in checkpoint");
  return cb;
}

template <typename Policy>
void save_policy(const std::filesystem::path& path, const Policy& p, const char* kind) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["kind"] = kind;
  j["n_actions"] = p.n_actions;
  j["norm_mean"] = p.norm.mean;
  j["norm_std"] = p.norm.std;
  j["weights"] = p.w;
  j["codebook"] = cb_json(p.codebook);
  write_text(path, j.dump() + "\n");
}

template <typename Policy>
Policy load_policy(const std::filesystem::path& path, const char* kind) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("cannot parse checkpoint " + path.string() + ": " + e.what());
  }
  Policy p;
  try {
    if (j.at("kind").get<std::string>() != kind)
      throw DataError("checkpoint " + path.string() + " holds a '" +
                      j.at("kind").get<std::string>() + "' model, expected '" + kind + "'");
    p.n_actions = j.at("n_actions").get<int>();
    p.norm.mean = j.at("norm_mean").get<std::array<double, 3>>();
    p.norm.std = j.at("norm_std").get<std::array<double, 3>>();
    p.w = j.at("weights").get<std::vector<double>>();
    p.codebook = cb_from(j.at("codebook"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad checkpoint " + path.string() + ": " + e.what());
  }
  if (p.n_actions < 1 || p.w.size() != static_cast<size_t>(p.param_count()))
    throw DataError("checkpoint " + path.string() + " has a wrong weight count");
  if (p.codebook.K() != p.n_actions)
    throw DataError("checkpoint " + path.string() + " codebook size mismatch");
  return p;
}

}  // namespace

void save_mlp(const std::filesystem::path& path, const MlpPolicy& p) {
  save_policy(path, p, "bc-mlp");
}
MlpPolicy load_mlp(const std::filesystem::path& path) {
  return load_policy<MlpPolicy>(path, "bc-mlp");
}
void save_gru(const std::filesystem::path& path, const GruPolicy& p) {
  save_policy(path, p, "bc-gru");
}
GruPolicy load_gru(const std::filesystem::path& path) {
  return load_policy<GruPolicy>(path, "bc-gru");
}

}  // namespace carfollow::bc
