#include "carfollow/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "carfollow/codebook.hpp"

namespace carfollow::eval {

namespace {

void require_frames(const data::Episode& ep) {
  if (ep.frames.empty()) throw DataError("episode " + ep.id + " has no frames");
}

void require_labels(const data::Episode& ep, int n_actions) {
  for (const auto& f : ep.frames)
    if (f.action_id < 0 || f.action_id >= n_actions)
      throw DataError("episode " + ep.id + " lacks a valid action id");
}

}  // namespace

Predictor idm_predictor(const idm::IdmParams& p) {
  return [p](const data::Episode& ep, Rng& rng) {
    require_frames(ep);
    std::vector<double> out;
    out.reserve(ep.frames.size());
    for (const auto& f : ep.frames)
      out.push_back(idm::sample_action(p, f.d, f.dv, f.v, rng));
    return out;
  };
}

Predictor mlp_predictor(const bc::MlpPolicy& p) {
  return [&p](const data::Episode& ep, Rng& rng) {
    require_frames(ep);
    std::vector<double> out;
    out.reserve(ep.frames.size());
    for (const auto& f : ep.frames)
      out.push_back(bc::predict_sample(p.log_probs({f.d, f.dv, f.tau_inv}),
                                       p.codebook, rng));
    return out;
  };
}

Predictor gru_predictor(const bc::GruPolicy& p) {
  return [&p](const data::Episode& ep, Rng& rng) {
    require_frames(ep);
    std::vector<double> out;
    out.reserve(ep.frames.size());
    bc::GruPolicy::State st = p.init_state();
    for (const auto& f : ep.frames)
      out.push_back(bc::predict_sample(p.step(st, {f.d, f.dv, f.tau_inv}),
                                       p.codebook, rng));
    return out;
  };
}

Predictor aida_predictor(const aida::AidaModel& m) {
  auto tables = std::make_shared<aida::AidaTables>(aida::build_tables(m.params));
  return [&m, tables](const data::Episode& ep, Rng& rng) {
    require_frames(ep);
    require_labels(ep, m.params.A);
    std::vector<double> out;
    out.reserve(ep.frames.size());
    std::vector<double> b;
    for (size_t k = 0; k < ep.frames.size(); ++k) {
      const auto& f = ep.frames[k];
      std::array<double, 3> o{f.d, f.dv, f.tau_inv};
      b = k == 0 ? aida::initial_belief(o, m.params).b
                 : aida::belief_update(b, ep.frames[k - 1].action_id, o, m.params).b;
      std::vector<double> pi = aida::policy(*tables, b);
      int id = rng.categorical(pi);
      out.push_back(std::clamp(data::component_sample(m.codebook, id, rng),
                               kAccelMin, kAccelMax));
    }
    return out;
  };
}

std::vector<double> offline_mae(const Predictor& pred,
                                const std::vector<data::Episode>& eps,
                                uint64_t seed) {
  if (eps.empty()) throw DataError("no episodes to evaluate");
  std::vector<double> mae(eps.size(), 0.0);
  std::exception_ptr fail;
  parallel_for(static_cast<long>(eps.size()), true, [&](long i) {
    try {
      Rng rng(derive_seed(seed, static_cast<uint64_t>(i)));
      std::vector<double> hat = pred(eps[static_cast<size_t>(i)], rng);
      const auto& frames = eps[static_cast<size_t>(i)].frames;
      if (hat.size() != frames.size())
        throw DataError("predictor returned " + std::to_string(hat.size()) +
                        " actions for " + std::to_string(frames.size()) + " frames");
      double acc = 0.0;
      for (size_t k = 0; k < frames.size(); ++k)
        acc += std::fabs(hat[k] - frames[k].a);
      mae[static_cast<size_t>(i)] = acc / static_cast<double>(frames.size());
    } catch (...) {
      if (!fail) fail = std::current_exception();
    }
  });
  if (fail) std::rethrow_exception(fail);
  return mae;
}

OnlineMetrics online_metrics(const std::vector<sim::SimTrace>& traces,
                             const std::vector<data::Episode>& eps) {
  if (traces.size() != eps.size())
    throw DataError("got " + std::to_string(traces.size()) + " traces for " +
                    std::to_string(eps.size()) + " episodes");
  OnlineMetrics om;
  om.ade.reserve(traces.size());
  for (size_t i = 0; i < traces.size(); ++i) {
    const sim::SimTrace& tr = traces[i];
    const data::Episode& ep = eps[i];
    if (tr.error)
      throw DataError("trace for episode " + ep.id + " aborted: " + tr.error_what);
    std::vector<double> se = data::ego_positions(ep);
    size_t steps = std::min(tr.rows.size(), se.size());
    if (tr.collided) {
      ++om.collisions;
      steps = std::min(steps, tr.rows.size() - 1);  // drop the flagged row
    } else if (tr.rows.size() != ep.frames.size()) {
      throw DataError("trace for episode " + ep.id + " has " +
                      std::to_string(tr.rows.size()) + " rows for " +
                      std::to_string(ep.frames.size()) + " frames");
    }
    if (steps == 0)
      throw DataError("episode " + ep.id + " collides at its initial state");
    double acc = 0.0;
    for (size_t k = 0; k < steps; ++k)
      acc += std::fabs(tr.rows[k].s_ego - se[k]);
    om.ade.push_back(acc / static_cast<double>(steps));
  }
  om.collision_rate =
      static_cast<double>(om.collisions) / static_cast<double>(traces.size());
  return om;
}

double iqm(std::vector<double> values) {
  const size_t n = values.size();
  if (n < 4)
    throw DataError("interquartile mean needs at least 4 values, got " +
                    std::to_string(n));
  std::sort(values.begin(), values.end());
  const size_t lo = n / 4;
  double acc = 0.0;
  for (size_t k = lo; k < n - lo; ++k) acc += values[k];
  return acc / static_cast<double>(n - 2 * lo);
}

namespace {

// Lentz continued fraction for the incomplete beta, split at the
// convergence boundary x = (a+1)/(a+b+2)
double beta_cf(double a, double b, double x) {
  const double tiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 300; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < 3e-16) break;
  }
  return h;
}

}  // namespace

double reg_inc_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw DataError("beta parameters must be positive");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double lbeta = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
  const double front = std::exp(a * std::log(x) + b * std::log1p(-x) - lbeta);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_cf(a, b, x) / a;
  return 1.0 - front * beta_cf(b, a, 1.0 - x) / b;
}

WelchResult welch(const std::vector<double>& a, const std::vector<double>& b) {
  const size_t na = a.size(), nb = b.size();
  if (na < 2 || nb < 2)
    throw DataError("each sample needs at least two values");
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(na);
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / static_cast<double>(nb);
  double va = 0.0, vb = 0.0;
  for (double x : a) va += (x - ma) * (x - ma);
  for (double x : b) vb += (x - mb) * (x - mb);
  va /= static_cast<double>(na - 1);
  vb /= static_cast<double>(nb - 1);
  if (va <= 0.0 && vb <= 0.0)
    throw DataError("zero variance in both samples");
  const double sa = va / static_cast<double>(na), sb = vb / static_cast<double>(nb);
  WelchResult r;
  r.t = (ma - mb) / std::sqrt(sa + sb);
  r.df = (sa + sb) * (sa + sb) /
         (sa * sa / static_cast<double>(na - 1) + sb * sb / static_cast<double>(nb - 1));
  r.p = reg_inc_beta(r.df / 2.0, 0.5, r.df / (r.df + r.t * r.t));
  return r;
}

// ---- diagnostics ----

void export_state_samples(const aida::AidaModel& m, const aida::AidaTables& t,
                          const std::filesystem::path& path, int n_per_state,
                          uint64_t seed) {
  std::vector<aida::ObsSample> samples =
      aida::sample_observations(m.params, t, n_per_state, seed);
  std::ostringstream out;
  out << "state,d,dv,tau_inv,pref_loglik,action\n";
  for (const auto& s : samples)
    out << s.state << ',' << fmt_double(s.o[0]) << ',' << fmt_double(s.o[1]) << ','
        << fmt_double(s.o[2]) << ',' << fmt_double(s.pref_loglik) << ',' << s.action
        << '\n';
  write_text(path, out.str());
}

namespace {

std::vector<int> state_order_by_tau(const aida::AidaParams& p) {
  std::vector<int> order(static_cast<size_t>(p.S));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return p.obs_mean[static_cast<size_t>(3 * a + 2)] <
           p.obs_mean[static_cast<size_t>(3 * b + 2)];
  });
  return order;
}

std::vector<int> action_order_by_accel(const data::ActionCodebook& cb) {
  std::vector<int> order(cb.mu.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return cb.mu[static_cast<size_t>(a)] <
                                              cb.mu[static_cast<size_t>(b)]; });
  return order;
}

}  // namespace

void export_belief_trace(const aida::AidaModel& m, const aida::AidaTables& t,
                         const data::Episode& ep,
                         const std::filesystem::path& path) {
  require_frames(ep);
  require_labels(ep, m.params.A);
  const std::vector<int> sorder = state_order_by_tau(m.params);
  const std::vector<int> aorder = action_order_by_accel(m.codebook);

  std::ostringstream out;
  out << "t,d,dv,tau_inv";
  for (int a : aorder) out << ",act_a" << a;
  for (int a : aorder) out << ",pred_a" << a;
  for (int s : sorder) out << ",belief_s" << s;
  out << '\n';

  std::vector<double> b;
  for (size_t k = 0; k < ep.frames.size(); ++k) {
    const auto& f = ep.frames[k];
    std::array<double, 3> o{f.d, f.dv, f.tau_inv};
    b = k == 0 ? aida::initial_belief(o, m.params).b
               : aida::belief_update(b, ep.frames[k - 1].action_id, o, m.params).b;
    std::vector<double> pi = aida::policy(t, b);
    out << fmt_double(static_cast<double>(k) * ep.dt) << ',' << fmt_double(f.d) << ','
        << fmt_double(f.dv) << ',' << fmt_double(f.tau_inv);
    for (int a : aorder) out << ',' << (f.action_id == a ? 1 : 0);
    for (int a : aorder) out << ',' << fmt_double(pi[static_cast<size_t>(a)]);
    for (int s : sorder) out << ',' << fmt_double(b[static_cast<size_t>(s)]);
    out << '\n';
  }
  write_text(path, out.str());
}

DiagTrace load_belief_trace(const std::filesystem::path& path) {
  std::vector<std::string> lines = read_lines(path);
  if (lines.empty()) throw DataError("trace " + path.string() + " is empty");
  std::vector<std::string> head = split(lines[0], ',');
  if (head.size() < 5 || head[0] != "t" || head[1] != "d" || head[2] != "dv" ||
      head[3] != "tau_inv")
    throw DataError("trace " + path.string() + " has an unexpected header");

  struct Col {
    enum Kind { kAct, kPred, kBelief } kind;
    int id;
  };
  std::vector<Col> cols;
  int n_actions = 0, n_states = 0;
  for (size_t c = 4; c < head.size(); ++c) {
    const std::string& h = head[c];
    Col col{};
    std::string tail;
    if (h.rfind("act_a", 0) == 0) {
      col.kind = Col::kAct;
      tail = h.substr(5);
    } else if (h.rfind("pred_a", 0) == 0) {
      col.kind = Col::kPred;
      tail = h.substr(6);
    } else if (h.rfind("belief_s", 0) == 0) {
      col.kind = Col::kBelief;
      tail = h.substr(8);
    } else {
      throw DataError("trace " + path.string() + " has unknown column " + h);
    }
    col.id = static_cast<int>(parse_long(tail, "column index"));
    cols.push_back(col);
    if (col.kind != Col::kBelief) n_actions = std::max(n_actions, col.id + 1);
    if (col.kind == Col::kBelief) n_states = std::max(n_states, col.id + 1);
  }

  DiagTrace out;
  for (size_t li = 1; li < lines.size(); ++li) {
    if (trim(lines[li]).empty()) continue;
    std::vector<std::string> cells = split(lines[li], ',');
    if (cells.size() != head.size())
      throw DataError("trace " + path.string() + " row " + std::to_string(li) +
                      " has " + std::to_string(cells.size()) + " cells");
    data::FeatureFrame f;
    f.d = parse_double(cells[1], "d");
    f.dv = parse_double(cells[2], "dv");
    f.tau_inv = parse_double(cells[3], "tau_inv");
    std::vector<double> pred(static_cast<size_t>(n_actions), 0.0);
    std::vector<double> belief(static_cast<size_t>(n_states), 0.0);
    for (size_t c = 4; c < cells.size(); ++c) {
      double v = parse_double(cells[c], head[c]);
      const Col& col = cols[c - 4];
      if (col.kind == Col::kAct) {
        if (v == 1.0) f.action_id = col.id;
      } else if (col.kind == Col::kPred) {
        pred[static_cast<size_t>(col.id)] = v;
      } else {
        belief[static_cast<size_t>(col.id)] = v;
      }
    }
    out.frames.push_back(f);
    out.pred.push_back(std::move(pred));
    out.belief.push_back(std::move(belief));
  }
  return out;
}

void export_diagnostics(const aida::AidaModel& m,
                        const std::vector<data::Episode>& eps,
                        const std::filesystem::path& out_dir, int n_per_state,
                        uint64_t seed) {
  std::filesystem::create_directories(out_dir);
  aida::AidaTables t = aida::build_tables(m.params);
  export_state_samples(m, t, out_dir / "state_samples.csv", n_per_state, seed);
  for (const auto& ep : eps)
    export_belief_trace(m, t, ep, out_dir / ("trace_" + ep.id + ".csv"));
}

// ---- report primitives ----

void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<MetricRow>& rows) {
  std::ostringstream out;
  out << "model,condition,seed,metric,value\n";
  for (const auto& r : rows)
    out << r.model << ',' << r.condition << ',' << r.seed << ',' << r.metric << ','
        << fmt_double(r.value) << '\n';
  write_text(path, out.str());
}

std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path) {
  std::vector<std::string> lines = read_lines(path);
  if (lines.empty() || trim(lines[0]) != "model,condition,seed,metric,value")
    throw DataError("metrics file " + path.string() + " has an unexpected header");
  std::vector<MetricRow> rows;
  for (size_t li = 1; li < lines.size(); ++li) {
    if (trim(lines[li]).empty()) continue;
    std::vector<std::string> cells = split(lines[li], ',');
    if (cells.size() != 5)
      throw DataError("metrics file " + path.string() + " row " +
                      std::to_string(li) + " has " + std::to_string(cells.size()) +
                      " cells");
    MetricRow r;
    r.model = cells[0];
    r.condition = cells[1];
    r.seed = static_cast<int>(parse_long(cells[2], "seed"));
    r.metric = cells[3];
    r.value = parse_double(cells[4], "value");
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_welch_csv(const std::filesystem::path& path,
                     const std::vector<WelchRow>& rows) {
  std::ostringstream out;
  out << "metric,condition,model_a,model_b,t,df,df_whole,p,significant\n";
  for (const auto& r : rows)
    out << r.metric << ',' << r.condition << ',' << r.model_a << ',' << r.model_b
        << ',' << fmt_double(r.r.t) << ',' << fmt_double(r.r.df) << ',' << r.df_whole
        << ',' << fmt_double(r.r.p) << ',' << (r.r.p < 0.05 ? 1 : 0) << '\n';
  write_text(path, out.str());
}

namespace {

struct Range {
  double lo = 0.0, hi = 1.0;
  double map(double v, double a, double b) const {
    if (hi <= lo) return (a + b) / 2.0;
    return a + (v - lo) / (hi - lo) * (b - a);
  }
};

Range span_of(const std::vector<std::array<double, 2>>& pts, int k) {
  Range r;
  if (pts.empty()) return r;
  r.lo = r.hi = pts[0][static_cast<size_t>(k)];
  for (const auto& p : pts) {
    r.lo = std::min(r.lo, p[static_cast<size_t>(k)]);
    r.hi = std::max(r.hi, p[static_cast<size_t>(k)]);
  }
  if (r.hi == r.lo) {
    r.lo -= 1.0;
    r.hi += 1.0;
  }
  return r;
}

}  // namespace

std::string svg_scatter(const std::vector<std::array<double, 2>>& pts,
                        const std::string& label_x, const std::string& label_y) {
  const double W = 480, H = 360, M = 48;
  Range rx = span_of(pts, 0), ry = span_of(pts, 1);
  std::ostringstream out;
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H
      << "' viewBox='0 0 " << W << ' ' << H << "'>\n"
      << "<rect width='100%' height='100%' fill='white'/>\n"
      << "<line x1='" << M << "' y1='" << H - M << "' x2='" << W - M / 2 << "' y2='"
      << H - M << "' stroke='black'/>\n"
      << "<line x1='" << M << "' y1='" << H - M << "' x2='" << M << "' y2='" << M / 2
      << "' stroke='black'/>\n"
      << "<text x='" << W / 2 << "' y='" << H - 10
      << "' font-size='13' text-anchor='middle'>" << label_x << "</text>\n"
      << "<text x='14' y='" << H / 2
      << "' font-size='13' text-anchor='middle' transform='rotate(-90 14 " << H / 2
      << ")'>" << label_y << "</text>\n";
  for (const auto& p : pts) {
    double x = rx.map(p[0], M, W - M / 2);
    double y = ry.map(p[1], H - M, M / 2);  // y axis points up
    out << "<circle cx='" << fmt_double(x) << "' cy='" << fmt_double(y)
        << "' r='2.2' fill='steelblue' fill-opacity='0.55'/>\n";
  }
  out << "</svg>\n";
  return out.str();
}

std::string svg_heatmap(const std::vector<std::vector<double>>& rows) {
  const size_t nr = rows.size();
  const size_t nc = nr == 0 ? 0 : rows[0].size();
  const double cell = 6.0, M = 4.0;
  const double W = M * 2 + cell * static_cast<double>(nc);
  const double H = M * 2 + cell * static_cast<double>(nr);
  std::ostringstream out;
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H
      << "' viewBox='0 0 " << W << ' ' << H << "'>\n"
      << "<rect width='100%' height='100%' fill='white'/>\n";
  for (size_t r = 0; r < nr; ++r) {
    if (rows[r].size() != nc) throw DataError("ragged heat-map rows");
    for (size_t c = 0; c < nc; ++c) {
      double v = std::clamp(rows[r][c], 0.0, 1.0);
      int g = static_cast<int>(std::lround(255.0 * (1.0 - v)));
      out << "<rect x='" << M + cell * static_cast<double>(c) << "' y='"
          << M + cell * static_cast<double>(r) << "' width='" << cell << "' height='"
          << cell << "' fill='rgb(" << g << ',' << g << ',' << g << ")'/>\n";
    }
  }
  out << "</svg>\n";
  return out.str();
}

}  // namespace carfollow::eval
