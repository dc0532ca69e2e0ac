#include "carfollow/sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace carfollow::sim {

double bumper_gap(const SimState& st) {
  return (st.s_lead - 0.5 * st.lead_len) - (st.s_ego + 0.5 * st.ego_len);
}

bool collision_check(const SimState& st) { return bumper_gap(st) <= 0.0; }

void step_ego(SimState& st, double a) {
  st.v_ego = std::max(0.0, st.v_ego + a * kSimDt);
  st.s_ego += st.v_ego * kSimDt;
}

double MlpController::act(const data::FeatureFrame& f) {
  return bc::predict_sample(p_.log_probs({f.d, f.dv, f.tau_inv}), p_.codebook, rng_);
}

double GruController::act(const data::FeatureFrame& f) {
  return bc::predict_sample(p_.step(st_, {f.d, f.dv, f.tau_inv}), p_.codebook, rng_);
}

AidaController::AidaController(const aida::AidaModel& m, uint64_t seed)
    : m_(m), tables_(aida::build_tables(m.params)), seed_(seed), rng_(seed) {}

void AidaController::reset() {
  rng_ = Rng(seed_);
  belief_.clear();
  last_action_ = -1;
}

double AidaController::act(const data::FeatureFrame& f) {
  std::array<double, 3> o{f.d, f.dv, f.tau_inv};
  if (belief_.empty())
    belief_ = aida::initial_belief(o, m_.params).b;
  else
    belief_ = aida::belief_update(belief_, last_action_, o, m_.params).b;
  std::vector<double> pi = aida::policy(tables_, belief_);
  last_action_ = rng_.categorical(pi);
  return data::component_sample(m_.codebook, last_action_, rng_);
}

SimTrace run_closed_loop(Controller& ctrl, const data::Episode& ep) {
  if (ep.frames.empty()) throw DataError("episode " + ep.id + " has no frames");
  data::LeadPlayback lp = data::lead_playback(ep);

  SimTrace trace;
  trace.episode_id = ep.id;
  trace.rows.reserve(ep.frames.size());
  ctrl.reset();

  SimState st;
  st.ego_len = ep.ego_len;
  st.lead_len = ep.lead_len;
  st.s_ego = ep.s0_ego;
  st.v_ego = ep.frames[0].v;

  const size_t n = ep.frames.size();
  for (size_t k = 0; k < n; ++k) {
    st.s_lead = lp.s[k];
    st.v_lead = lp.v[k];

    TraceRow row;
    row.t = static_cast<double>(k) * kSimDt;
    row.s_ego = st.s_ego;
    row.v_ego = st.v_ego;
    row.s_lead = st.s_lead;
    row.v_lead = st.v_lead;
    row.d = bumper_gap(st);
    row.dv = st.v_lead - st.v_ego;
    row.tau_inv = data::tau_inv_feature(row.d, row.dv, ep.lead_width);
    row.collision_flag = collision_check(st) ? 1 : 0;

    if (row.collision_flag) {
      trace.rows.push_back(row);
      trace.collided = true;
      break;
    }
    if (k + 1 == n) {  // terminal frame: nothing left to integrate against
      trace.rows.push_back(row);
      break;
    }

    data::FeatureFrame f;
    f.d = row.d;
    f.dv = row.dv;
    f.tau_inv = row.tau_inv;
    f.v = st.v_ego;
    double a = ctrl.act(f);
    if (!std::isfinite(a)) {
      trace.error = true;
      trace.error_what = "controller returned a non-finite action at t=" +
                         fmt_double(row.t) + " in episode " + ep.id;
      break;
    }
    row.a_ego = std::clamp(a, kAccelMin, kAccelMax);
    trace.rows.push_back(row);
    step_ego(st, row.a_ego);
  }
  return trace;
}

CemResult cem_plan(const SeqReward& reward, const CemConfig& cfg, Rng& rng) {
  if (cfg.horizon < 1 || cfg.samples < 1 || cfg.elites < 1 || cfg.iters < 1)
    throw DataError("planner dimensions must be positive");
  if (cfg.elites > cfg.samples)
    throw DataError("elite count exceeds sample count");

  const size_t H = static_cast<size_t>(cfg.horizon);
  std::vector<double> mean(H, cfg.init_mean), stdv(H, cfg.init_std);

  struct Cand {
    std::vector<double> seq;
    double r;
  };
  std::vector<Cand> elites;
  CemResult res;
  res.elite_reward.reserve(static_cast<size_t>(cfg.iters));

  for (int it = 0; it < cfg.iters; ++it) {
    std::vector<Cand> pool = elites;  // retention keeps the best ever found
    pool.reserve(pool.size() + static_cast<size_t>(cfg.samples));
    for (int i = 0; i < cfg.samples; ++i) {
      Cand c;
      c.seq.resize(H);
      for (size_t h = 0; h < H; ++h) c.seq[h] = mean[h] + stdv[h] * rng.normal();
      c.r = reward(c.seq);
      if (!std::isfinite(c.r)) throw TrainError("planner reward is not finite");
      pool.push_back(std::move(c));
    }
    std::stable_sort(pool.begin(), pool.end(),
                     [](const Cand& a, const Cand& b) { return a.r > b.r; });
    pool.resize(static_cast<size_t>(cfg.elites));
    elites = std::move(pool);
    res.elite_reward.push_back(elites.front().r);

    for (size_t h = 0; h < H; ++h) {
      double m = 0.0;
      for (const Cand& c : elites) m += c.seq[h];
      m /= static_cast<double>(cfg.elites);
      double v = 0.0;
      for (const Cand& c : elites) v += (c.seq[h] - m) * (c.seq[h] - m);
      v /= static_cast<double>(cfg.elites);
      mean[h] = m;
      stdv[h] = std::max(cfg.std_floor, std::sqrt(v));
    }
  }
  res.mean = mean;
  res.action = std::clamp(mean[0], kAccelMin, kAccelMax);
  return res;
}

SeqReward aida_rollout_reward(const aida::AidaParams& p, double d0, double dv0) {
  // normalized preference log-probabilities, fixed for the whole plan
  std::vector<double> log_pref = p.pref_logits;
  {
    double mp = *std::max_element(log_pref.begin(), log_pref.end());
    double zp = 0.0;
    for (double x : log_pref) zp += std::exp(x - mp);
    double lse = mp + std::log(zp);
    for (double& x : log_pref) x -= lse;
  }
  return [p, log_pref, d0, dv0](const std::vector<double>& seq) {
    double d = d0, dv = dv0, total = 0.0;
    for (double a : seq) {
      dv -= kSimDt * a;
      d += kSimDt * dv;
      // small-angle looming rate; the planner's model, not the dataset feature
      std::array<double, 3> o{d, dv, dv / d};
      std::vector<double> l = aida::obs_loglik_all(p, o);
      for (int s = 0; s < p.S; ++s)
        l[static_cast<size_t>(s)] += log_pref[static_cast<size_t>(s)];
      double m = *std::max_element(l.begin(), l.end());
      double z = 0.0;
      for (double x : l) z += std::exp(x - m);
      total += m + std::log(z);
    }
    return total;
  };
}

void save_trace(const std::filesystem::path& path, const SimTrace& trace) {
  std::ostringstream out;
  out << "t,s_ego,v_ego,a_ego,s_lead,v_lead,d,dv,tau_inv,collision_flag\n";
  for (const TraceRow& r : trace.rows)
    out << fmt_double(r.t) << ',' << fmt_double(r.s_ego) << ',' << fmt_double(r.v_ego)
        << ',' << fmt_double(r.a_ego) << ',' << fmt_double(r.s_lead) << ','
        << fmt_double(r.v_lead) << ',' << fmt_double(r.d) << ',' << fmt_double(r.dv)
        << ',' << fmt_double(r.tau_inv) << ',' << r.collision_flag << '\n';
  write_text(path, out.str());
}

SimTrace load_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open trace " + path.string());
  std::string line;
  if (!std::getline(in, line) ||
      line != "t,s_ego,v_ego,a_ego,s_lead,v_lead,d,dv,tau_inv,collision_flag")
    throw DataError("trace " + path.string() + " has an unexpected header");
  SimTrace trace;
  trace.episode_id = path.stem().string();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(ss, cell, ',')) {
      try {
        vals.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw DataError("bad number '" + cell + "' in trace " + path.string());
      }
    }
    if (vals.size() != 10)
      throw DataError("trace " + path.string() + " row has " +
                      std::to_string(vals.size()) + " columns, expected 10");
    TraceRow r;
    r.t = vals[0];
    r.s_ego = vals[1];
    r.v_ego = vals[2];
    r.a_ego = vals[3];
    r.s_lead = vals[4];
    r.v_lead = vals[5];
    r.d = vals[6];
    r.dv = vals[7];
    r.tau_inv = vals[8];
    r.collision_flag = static_cast<int>(vals[9]);
    if (r.collision_flag) trace.collided = true;
    trace.rows.push_back(r);
  }
  return trace;
}

}  // namespace carfollow::sim
