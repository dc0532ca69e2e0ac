#include "carfollow/idm.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "carfollow/tape.hpp"

namespace carfollow::idm {

using diff::Tape;
using diff::Tensor;

double desired_gap(const IdmParams& p, double v, double dv) {
  return p.d0 + v * p.tau - v * dv / (2.0 * std::sqrt(p.a_max * p.b));
}

double accel_mean(const IdmParams& p, double d, double dv, double v) {
  if (d <= 0.0) throw DataError("IDM needs a positive gap");
  double r = v / p.v_des;
  double g = desired_gap(p, v, dv) / d;
  return p.a_max * (1.0 - r * r * r * r - g * g);
}

double equilibrium_gap(const IdmParams& p, double v) {
  double r = v / p.v_des;
  double denom = 1.0 - r * r * r * r;
  if (denom <= 0.0) throw DataError("no equilibrium at or above the desired speed");
  return (p.d0 + v * p.tau) / std::sqrt(denom);
}

double sample_action(const IdmParams& p, double d, double dv, double v, Rng& rng) {
  return clamp_accel(accel_mean(p, d, dv, v) + p.sigma * rng.normal());
}

namespace {

struct StepData {
  double d, v, dv, a;
};

// per-step graph over log-parameters, rebound for every sample
struct StepGraph {
  Tape tp;
  int lv, ld0, ltau, lamax, lb;  // leaves
  int cd, cv, cdv, ca;          // per-step constants
  int pred, sq;

  StepGraph() {
    lv = tp.leaf(Tensor::scalar(0.0));
    ld0 = tp.leaf(Tensor::scalar(0.0));
    ltau = tp.leaf(Tensor::scalar(0.0));
    lamax = tp.leaf(Tensor::scalar(0.0));
    lb = tp.leaf(Tensor::scalar(0.0));
    cd = tp.constant(Tensor::scalar(1.0));
    cv = tp.constant(Tensor::scalar(1.0));
    cdv = tp.constant(Tensor::scalar(0.0));
    ca = tp.constant(Tensor::scalar(0.0));

    int vdes = tp.exp_(lv);
    int d0 = tp.exp_(ld0);
    int tau = tp.exp_(ltau);
    int amax = tp.exp_(lamax);
    int b = tp.exp_(lb);

    int r4 = tp.square(tp.square(tp.div(cv, vdes)));
    int brake = tp.div(tp.mul(cv, cdv), tp.scale(tp.sqrt_(tp.mul(amax, b)), 2.0));
    int gap = tp.sub(tp.add(d0, tp.mul(cv, tau)), brake);
    int g2 = tp.square(tp.div(gap, cd));
    pred = tp.mul(amax, tp.add_const(tp.neg(tp.add(r4, g2)), 1.0));
    sq = tp.square(tp.sub(pred, ca));
  }

  void bind(const double logp[5], const StepData& s) {
    tp.set_value(lv, Tensor::scalar(logp[0]));
    tp.set_value(ld0, Tensor::scalar(logp[1]));
    tp.set_value(ltau, Tensor::scalar(logp[2]));
    tp.set_value(lamax, Tensor::scalar(logp[3]));
    tp.set_value(lb, Tensor::scalar(logp[4]));
    tp.set_value(cd, Tensor::scalar(s.d));
    tp.set_value(cv, Tensor::scalar(s.v));
    tp.set_value(cdv, Tensor::scalar(s.dv));
    tp.set_value(ca, Tensor::scalar(s.a));
    tp.forward();
  }

  void grad_out(double g[5]) {
    g[0] = tp.grad(lv)();
    g[1] = tp.grad(ld0)();
    g[2] = tp.grad(ltau)();
    g[3] = tp.grad(lamax)();
    g[4] = tp.grad(lb)();
  }
};

IdmParams from_log(const double logp[5], double sigma) {
  return {std::exp(logp[0]), std::exp(logp[1]), std::exp(logp[2]),
          std::exp(logp[3]), std::exp(logp[4]), sigma};
}

double mse_loss(const std::vector<StepData>& steps, const double logp[5]) {
  IdmParams p = from_log(logp, 0.0);
  double s = 0.0;
  for (const StepData& st : steps) {
    double e = accel_mean(p, st.d, st.dv, st.v) - st.a;
    s += e * e;
  }
  return s / static_cast<double>(steps.size());
}

// eigenvalues of a symmetric n x n matrix by cyclic Jacobi sweeps
std::vector<double> symmetric_eigenvalues(std::vector<double> m, int n) {
  for (int sweep = 0; sweep < 30; ++sweep) {
    double off = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) off += m[static_cast<size_t>(i * n + j)] * m[static_cast<size_t>(i * n + j)];
    if (off < 1e-24) break;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) {
        double apq = m[static_cast<size_t>(p * n + q)];
        if (std::abs(apq) < 1e-30) continue;
        double app = m[static_cast<size_t>(p * n + p)];
        double aqq = m[static_cast<size_t>(q * n + q)];
        double phi = 0.5 * std::atan2(2.0 * apq, aqq - app);
        double c = std::cos(phi), s = std::sin(phi);
        for (int k = 0; k < n; ++k) {
          double akp = m[static_cast<size_t>(k * n + p)];
          double akq = m[static_cast<size_t>(k * n + q)];
          m[static_cast<size_t>(k * n + p)] = c * akp - s * akq;
          m[static_cast<size_t>(k * n + q)] = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          double apk = m[static_cast<size_t>(p * n + k)];
          double aqk = m[static_cast<size_t>(q * n + k)];
          m[static_cast<size_t>(p * n + k)] = c * apk - s * aqk;
          m[static_cast<size_t>(q * n + k)] = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> ev(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) ev[static_cast<size_t>(i)] = m[static_cast<size_t>(i * n + i)];
  return ev;
}

}  // namespace

FitResult fit_idm(const std::vector<data::Episode>& eps, const FitOptions& opts) {
  std::vector<StepData> steps;
  for (const auto& ep : eps)
    for (const auto& f : ep.frames) steps.push_back({f.d, f.v, f.dv, f.a});
  if (steps.size() < 50) throw DataError("too few steps to fit IDM");
  double n = static_cast<double>(steps.size());

  // data-driven init
  double vmax = 0.0, dmin = 1e9, amax_obs = 0.0;
  for (const StepData& s : steps) {
    vmax = std::max(vmax, s.v);
    dmin = std::min(dmin, s.d);
    amax_obs = std::max(amax_obs, std::abs(s.a));
  }
  double logp[5] = {std::log(std::max(1.0, 1.2 * vmax)),
                    std::log(std::clamp(0.5 * dmin, 0.5, 10.0)), std::log(1.0),
                    std::log(std::clamp(0.8 * amax_obs, 0.5, 4.0)), std::log(2.0)};

  StepGraph sg;
  auto full_grad = [&](const double lp[5], double g[5]) {
    for (int i = 0; i < 5; ++i) g[i] = 0.0;
    double gs[5];
    for (const StepData& s : steps) {
      sg.bind(lp, s);
      sg.tp.backward(sg.sq);
      sg.grad_out(gs);
      for (int i = 0; i < 5; ++i) g[i] += gs[i];
    }
    for (int i = 0; i < 5; ++i) g[i] /= n;
  };

  FitResult out;
  double loss = mse_loss(steps, logp);
  auto nll = [](double mse) { return 0.5 * (1.0 + std::log(2.0 * kPi * std::max(mse, 1e-300))); };
  out.nll_curve.push_back(nll(loss));

  double eta = opts.init_step;
  int stall = 0;
  for (int it = 0; it < opts.max_iters && stall < 8; ++it) {
    double g[5];
    full_grad(logp, g);
    double gnorm2 = 0.0;
    for (double gi : g) gnorm2 += gi * gi;
    if (gnorm2 < 1e-20) break;

    double cand[5];
    double new_loss = loss;
    bool accepted = false;
    while (eta > 1e-14) {
      for (int i = 0; i < 5; ++i)
        cand[i] = std::clamp(logp[i] - eta * g[i], -6.0, 6.0);
      new_loss = mse_loss(steps, cand);
      if (new_loss <= loss - 1e-4 * eta * gnorm2) {
        accepted = true;
        break;
      }
      eta *= 0.5;
    }
    if (!accepted) break;
    for (int i = 0; i < 5; ++i) logp[i] = cand[i];
    stall = (loss - new_loss) < opts.tol * std::max(1.0, std::abs(loss)) ? stall + 1 : 0;
    loss = new_loss;
    out.nll_curve.push_back(nll(loss));
    eta = std::min(eta * 1.3, 1.0);
  }

  out.params = from_log(logp, std::sqrt(loss));

  // Gauss-Newton spectrum of the prediction Jacobian at the solution
  double jtj[25] = {0};
  size_t stride = std::max<size_t>(1, steps.size() / 2000);
  size_t used = 0;
  double gs[5];
  for (size_t i = 0; i < steps.size(); i += stride, ++used) {
    sg.bind(logp, steps[i]);
    sg.tp.backward(sg.pred);
    sg.grad_out(gs);
    for (int r = 0; r < 5; ++r)
      for (int c = 0; c < 5; ++c) jtj[r * 5 + c] += gs[r] * gs[c];
  }
  auto ev = symmetric_eigenvalues(std::vector<double>(jtj, jtj + 25), 5);
  double lmax = 0.0, lmin = std::numeric_limits<double>::infinity();
  for (double e : ev) {
    lmax = std::max(lmax, std::abs(e));
    lmin = std::min(lmin, std::abs(e));
  }
  out.rank_deficient = lmax <= 0.0 || lmin <= 1e-9 * lmax;
  return out;
}

void save_idm(const std::filesystem::path& path, const IdmParams& p) {
  std::ostringstream out;
  out << "v_des=" << fmt_double(p.v_des) << "\n";
  out << "d0=" << fmt_double(p.d0) << "\n";
  out << "tau=" << fmt_double(p.tau) << "\n";
  out << "a_max=" << fmt_double(p.a_max) << "\n";
  out << "b=" << fmt_double(p.b) << "\n";
  out << "sigma=" << fmt_double(p.sigma) << "\n";
  write_text(path, out.str());
}

IdmParams load_idm(const std::filesystem::path& path) {
  std::map<std::string, double> kv;
  for (const std::string& raw : read_lines(path)) {
    std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    auto pos = line.find('=');
    if (pos == std::string::npos)
      throw DataError("bad parameter line '" + line + "' in " + path.string());
    std::string key = trim(line.substr(0, pos));
    if (kv.count(key))
      throw DataError("duplicate parameter '" + key + "' in " + path.string());
    kv[key] = parse_double(line.substr(pos + 1), key);
  }
  static const char* keys[] = {"v_des", "d0", "tau", "a_max", "b", "sigma"};
  for (const char* k : keys)
    if (!kv.count(k))
      throw DataError("missing parameter '" + std::string(k) + "' in " + path.string());
  for (const auto& [k, v] : kv) {
    bool known = false;
    for (const char* kk : keys) known |= k == kk;
    if (!known) throw DataError("unknown parameter '" + k + "' in " + path.string());
  }
  return {kv["v_des"], kv["d0"], kv["tau"], kv["a_max"], kv["b"], kv["sigma"]};
}

}  // namespace carfollow::idm
