#include "carfollow/workflows.hpp"

#include <algorithm>
#include <iostream>
#include <map>
#include <memory>
#include <set>

#include "carfollow/aida.hpp"
#include "carfollow/bc.hpp"
#include "carfollow/geometry.hpp"
#include "carfollow/idm.hpp"
#include "carfollow/segment.hpp"
#include "carfollow/sim.hpp"
#include "carfollow/synth.hpp"
#include "carfollow/tracks.hpp"

namespace carfollow::cli {

namespace fs = std::filesystem;

Dataset load_dataset(const fs::path& dir) {
  Dataset ds;
  ds.episodes = data::load_episodes(dir / "episodes");
  ds.split = data::load_split(dir / "split.json");
  ds.codebook = data::load_codebook(dir / "codebook.json");
  return ds;
}

std::vector<data::Episode> select_episodes(const std::vector<data::Episode>& eps,
                                           const std::vector<std::string>& ids) {
  std::map<std::string, const data::Episode*> by_id;
  for (const auto& ep : eps) by_id[ep.id] = &ep;
  std::vector<data::Episode> out;
  for (const std::string& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("episode id " + id + " not in the archive");
    out.push_back(*it->second);
  }
  return out;
}

fs::path checkpoint_path(const fs::path& dir, const std::string& model, long seed) {
  std::string kind = model == "aida-mpc" ? "aida" : model;
  return dir / (kind + "_seed" + std::to_string(seed) + ".ckpt");
}

namespace {

fs::path checkpoint_dir(const RunConfig& cfg) {
  return cfg.checkpoints.empty() ? fs::path(cfg.out) : fs::path(cfg.checkpoints);
}

// split, codebook on the training split, labels, archive, manifest
void finalize_dataset(std::vector<data::Episode> eps,
                      const std::vector<std::string>& same_lane,
                      const std::vector<std::string>& new_lane,
                      const RunConfig& cfg) {
  if (eps.empty()) throw DataError("no episodes to archive");
  data::SplitConfig sc;
  sc.train_ratio = cfg.split_ratio;
  sc.same_lane_cap = cfg.cap_same_lane;
  sc.new_lane_cap = cfg.cap_new_lane;
  data::DatasetSplit split = data::make_split(same_lane, new_lane, sc, cfg.data_seed);

  std::vector<double> train_accels;
  {
    std::set<std::string> train_ids(split.train.begin(), split.train.end());
    for (const auto& ep : eps)
      if (train_ids.count(ep.id))
        for (const auto& f : ep.frames) train_accels.push_back(f.a);
  }
  data::CodebookFit fit = data::fit_action_codebook(
      train_accels, static_cast<int>(cfg.K_codebook), cfg.data_seed);
  data::label_episodes(eps, fit.codebook);

  fs::path out(cfg.out);
  data::save_episodes(out / "episodes", eps);
  data::save_codebook(out / "codebook.json", fit);
  data::save_split(out / "split.json", split);

  long frames = 0;
  for (const auto& ep : eps) frames += static_cast<long>(ep.frames.size());
  std::string manifest;
  manifest += "episodes = " + std::to_string(eps.size()) + "\n";
  manifest += "train = " + std::to_string(split.train.size()) + "\n";
  manifest += "test_same_lane = " + std::to_string(split.test_same_lane.size()) + "\n";
  manifest += "test_new_lane = " + std::to_string(split.test_new_lane.size()) + "\n";
  manifest += "frames = " + std::to_string(frames) + "\n";
  manifest += "codebook_k = " + std::to_string(fit.codebook.K()) + "\n";
  write_text(out / "manifest.txt", manifest);
  write_resolved(cfg, out);
}

void write_loss_csv(const fs::path& path, const std::string& header,
                    const std::vector<std::vector<double>>& cols) {
  std::string text = header + "\n";
  size_t n = cols.empty() ? 0 : cols[0].size();
  for (size_t i = 0; i < n; ++i) {
    text += std::to_string(i);
    for (const auto& c : cols) {
      text += ',';
      text += i < c.size() ? fmt_double(c[i]) : std::string("nan");
    }
    text += '\n';
  }
  write_text(path, text);
}

eval::Predictor make_predictor(ModelKind kind, const fs::path& ckpt,
                               std::vector<std::shared_ptr<void>>& keep) {
  switch (kind) {
    case ModelKind::idm: {
      auto p = std::make_shared<idm::IdmParams>(idm::load_idm(ckpt));
      keep.push_back(p);
      return eval::idm_predictor(*p);
    }
    case ModelKind::bc_mlp: {
      auto p = std::make_shared<bc::MlpPolicy>(bc::load_mlp(ckpt));
      keep.push_back(p);
      return eval::mlp_predictor(*p);
    }
    case ModelKind::bc_rnn: {
      auto p = std::make_shared<bc::GruPolicy>(bc::load_gru(ckpt));
      keep.push_back(p);
      return eval::gru_predictor(*p);
    }
    case ModelKind::aida:
    case ModelKind::aida_mpc: {
      auto m = std::make_shared<aida::AidaModel>(aida::load_aida(ckpt));
      keep.push_back(m);
      return eval::aida_predictor(*m);
    }
  }
  throw UsageError("bad model kind");
}

std::unique_ptr<sim::Controller> make_controller(ModelKind kind, const fs::path& ckpt,
                                                 uint64_t seed) {
  switch (kind) {
    case ModelKind::idm:
      return std::make_unique<sim::IdmController>(idm::load_idm(ckpt));
    case ModelKind::bc_mlp:
      return std::make_unique<sim::MlpController>(bc::load_mlp(ckpt), seed);
    case ModelKind::bc_rnn:
      return std::make_unique<sim::GruController>(bc::load_gru(ckpt), seed);
    case ModelKind::aida:
      return std::make_unique<sim::AidaController>(aida::load_aida(ckpt), seed);
    case ModelKind::aida_mpc:
      return std::make_unique<sim::AidaMpcController>(aida::load_aida(ckpt),
                                                      sim::CemConfig{}, seed);
  }
  throw UsageError("bad model kind");
}

struct Condition {
  std::string name;
  std::vector<data::Episode> eps;
};

std::vector<Condition> test_conditions(const Dataset& ds) {
  std::vector<Condition> out;
  out.push_back({"same-lane", select_episodes(ds.episodes, ds.split.test_same_lane)});
  if (!ds.split.test_new_lane.empty())
    out.push_back({"new-lane", select_episodes(ds.episodes, ds.split.test_new_lane)});
  return out;
}

bool metric_row_before(const eval::MetricRow& a, const eval::MetricRow& b) {
  return std::tie(a.model, a.condition, a.metric, a.seed) <
         std::tie(b.model, b.condition, b.metric, b.seed);
}

}  // namespace

std::vector<eval::WelchRow> model_comparisons(const std::vector<eval::MetricRow>& rows) {
  // (metric, condition) -> model -> per-seed values in seed order
  std::map<std::pair<std::string, std::string>,
           std::map<std::string, std::vector<std::pair<int, double>>>>
      cells;
  for (const auto& r : rows)
    cells[{r.metric, r.condition}][r.model].push_back({r.seed, r.value});

  std::vector<eval::WelchRow> out;
  for (auto& [key, models] : cells) {
    for (auto& [name, vals] : models) std::sort(vals.begin(), vals.end());
    for (auto a = models.begin(); a != models.end(); ++a) {
      for (auto b = std::next(a); b != models.end(); ++b) {
        if (a->second.size() < 2 || b->second.size() < 2) continue;
        std::vector<double> va, vb;
        for (auto [s, v] : a->second) va.push_back(v);
        for (auto [s, v] : b->second) vb.push_back(v);
        eval::WelchRow row;
        row.metric = key.first;
        row.condition = key.second;
        row.model_a = a->first;
        row.model_b = b->first;
        row.df_whole = static_cast<long>(va.size() + vb.size()) - 2;
        try {
          row.r = eval::welch(va, vb);
        } catch (const DataError&) {
          continue;  // both samples constant: no test statistic exists
        }
        out.push_back(std::move(row));
      }
    }
  }
  return out;
}

void run_synth(const RunConfig& cfg) {
  validate_config(cfg);
  idm::IdmParams gen;  // default parameters are the generator
  auto profiles = data::mixed_profiles(static_cast<int>(cfg.synth_episodes), cfg.data_seed);
  data::SynthResult sr =
      data::synth_generate(gen, profiles, cfg.synth_noise,
                           static_cast<int>(cfg.synth_episodes), cfg.data_seed);
  std::vector<std::string> ids;
  for (const auto& ep : sr.episodes) ids.push_back(ep.id);
  finalize_dataset(std::move(sr.episodes), ids, {}, cfg);
  idm::save_idm(fs::path(cfg.out) / "generator.idm", sr.generator);
}

void run_ingest(const RunConfig& cfg) {
  validate_config(cfg);
  if (cfg.tracks.empty()) throw UsageError("ingest needs tracks=<csv>");
  if (cfg.centerlines.empty())
    throw UsageError("ingest needs centerlines=<csv>[,<csv>...]");
  data::TrackLoad tl = data::load_tracks(cfg.tracks);
  for (const auto& w : tl.warnings) std::cerr << "warning: " << w << "\n";
  std::vector<data::Centerline> lanes;
  for (const std::string& p : split(cfg.centerlines, ','))
    lanes.push_back(data::Centerline::load_csv(trim(p)));
  data::SegmentResult sr = data::segment_episodes(tl.tracks, lanes);
  for (const auto& w : sr.warnings) std::cerr << "warning: " << w << "\n";
  if (sr.episodes.empty()) throw DataError("no car-following episodes survived filtering");
  std::vector<std::string> same, fresh;
  for (size_t i = 0; i < sr.episodes.size(); ++i)
    (sr.lanes[i] == 0 ? same : fresh).push_back(sr.episodes[i].id);
  finalize_dataset(std::move(sr.episodes), same, fresh, cfg);
}

void run_train(const RunConfig& cfg) {
  validate_config(cfg);
  if (cfg.data.empty()) throw UsageError("train needs data=<dataset dir>");
  Dataset ds = load_dataset(cfg.data);
  std::vector<data::Episode> train = select_episodes(ds.episodes, ds.split.train);
  ModelKind kind = model_kind(cfg.model);
  fs::path out(cfg.out);
  fs::create_directories(out);

  for (long seed : cfg.seeds) {
    fs::path ckpt = checkpoint_path(out, cfg.model, seed);
    fs::path loss = out / (cfg.model + "_seed" + std::to_string(seed) + "_loss.csv");
    try {
      switch (kind) {
        case ModelKind::idm: {
          idm::FitResult fr = idm::fit_idm(train);
          if (fr.rank_deficient)
            std::cerr << "warning: seed " << seed << ": unidentifiable fit\n";
          idm::save_idm(ckpt, fr.params);
          write_loss_csv(loss, "iter,nll", {fr.nll_curve});
          break;
        }
        case ModelKind::bc_mlp: {
          bc::MlpPolicy p;
          p.n_actions = ds.codebook.K();
          p.codebook = ds.codebook;
          p.norm = bc::compute_norm_stats(train);
          p.init_weights(static_cast<uint64_t>(seed));
          bc::TrainOptions o;
          o.max_epochs = static_cast<int>(cfg.bc_epochs);
          o.batch_episodes = static_cast<int>(cfg.bc_batch);
          o.lr = cfg.bc_lr;
          o.patience = static_cast<int>(cfg.bc_patience);
          o.seed = static_cast<uint64_t>(seed);
          bc::TrainReport rep = bc::train_mlp(p, train, o);
          bc::save_mlp(ckpt, p);
          write_loss_csv(loss, "epoch,train_nll,val_nll", {rep.train_nll, rep.val_nll});
          break;
        }
        case ModelKind::bc_rnn: {
          bc::GruPolicy p;
          p.n_actions = ds.codebook.K();
          p.codebook = ds.codebook;
          p.norm = bc::compute_norm_stats(train);
          p.init_weights(static_cast<uint64_t>(seed));
          bc::TrainOptions o;
          o.max_epochs = static_cast<int>(cfg.bc_epochs);
          o.batch_episodes = static_cast<int>(cfg.bc_batch);
          o.lr = cfg.bc_lr;
          o.patience = static_cast<int>(cfg.bc_patience);
          o.seed = static_cast<uint64_t>(seed);
          bc::TrainReport rep = bc::train_gru(p, train, o);
          bc::save_gru(ckpt, p);
          write_loss_csv(loss, "epoch,train_nll,val_nll", {rep.train_nll, rep.val_nll});
          break;
        }
        case ModelKind::aida:
        case ModelKind::aida_mpc: {
          aida::AidaTrainOptions o;
          o.S = static_cast<int>(cfg.S);
          o.A = ds.codebook.K();
          o.H_max = static_cast<int>(cfg.H_max);
          o.lambda1 = cfg.lambda1;
          o.lambda2 = cfg.lambda2;
          o.max_epochs = static_cast<int>(cfg.aida_epochs);
          o.batch_episodes = static_cast<int>(cfg.aida_batch);
          o.lr = cfg.aida_lr;
          o.seed = static_cast<uint64_t>(seed);
          aida::AidaTrainResult tr = aida::train_aida(train, o);
          aida::AidaModel m;
          m.params = tr.params;
          m.codebook = ds.codebook;
          m.lambda1 = cfg.lambda1;
          m.lambda2 = cfg.lambda2;
          aida::save_aida(ckpt, m);
          write_loss_csv(loss, "epoch,loss", {tr.loss_curve});
          break;
        }
      }
    } catch (const TrainError& e) {
      throw TrainError("seed " + std::to_string(seed) + ": " + e.what());
    }
  }
  write_resolved(cfg, out);
}

void run_evaluate(const RunConfig& cfg) {
  validate_config(cfg);
  if (cfg.data.empty()) throw UsageError("evaluate needs data=<dataset dir>");
  Dataset ds = load_dataset(cfg.data);
  ModelKind kind = model_kind(cfg.model);
  std::vector<Condition> conds = test_conditions(ds);
  fs::path out(cfg.out);
  fs::create_directories(out);
  fs::path ckpts = checkpoint_dir(cfg);

  for (long seed : cfg.seeds)
    if (!fs::exists(checkpoint_path(ckpts, cfg.model, seed)))
      throw DataError("missing checkpoint " +
                      checkpoint_path(ckpts, cfg.model, seed).string() +
                      " for seed " + std::to_string(seed));

  std::vector<eval::MetricRow> fresh;
  for (long seed : cfg.seeds) {
    fs::path ckpt = checkpoint_path(ckpts, cfg.model, seed);
    std::string tag = cfg.model + "_seed" + std::to_string(seed);

    if (cfg.suite != "online") {
      std::vector<std::shared_ptr<void>> keep;
      eval::Predictor pred = make_predictor(kind, ckpt, keep);
      for (const auto& c : conds) {
        std::vector<double> maes =
            eval::offline_mae(pred, c.eps, static_cast<uint64_t>(seed));
        std::string csv = "episode,mae\n";
        for (size_t i = 0; i < maes.size(); ++i)
          csv += c.eps[i].id + "," + fmt_double(maes[i]) + "\n";
        write_text(out / ("offline_" + tag + "_" + c.name + ".csv"), csv);
        fresh.push_back({cfg.model, c.name, static_cast<int>(seed), "mae_iqm",
                         eval::iqm(maes)});
      }
    }
    if (cfg.suite != "offline") {
      auto ctrl = make_controller(kind, ckpt, static_cast<uint64_t>(seed));
      for (const auto& c : conds) {
        std::vector<sim::SimTrace> traces;
        for (const auto& ep : c.eps) traces.push_back(sim::run_closed_loop(*ctrl, ep));
        eval::OnlineMetrics om = eval::online_metrics(traces, c.eps);
        std::string csv = "episode,ade,collision\n";
        for (size_t i = 0; i < traces.size(); ++i)
          csv += c.eps[i].id + "," + fmt_double(om.ade[i]) + "," +
                 (traces[i].collided ? "1" : "0") + "\n";
        write_text(out / ("online_" + tag + "_" + c.name + ".csv"), csv);
        fresh.push_back({cfg.model, c.name, static_cast<int>(seed), "ade_iqm",
                         eval::iqm(om.ade)});
        fresh.push_back({cfg.model, c.name, static_cast<int>(seed), "collision_rate",
                         om.collision_rate});
      }
    }
  }

  // merge with other models' rows so repeated runs build one comparison table
  std::vector<eval::MetricRow> rows;
  fs::path metrics = out / "metrics.csv";
  if (fs::exists(metrics))
    for (auto& r : eval::read_metrics_csv(metrics))
      if (r.model != cfg.model) rows.push_back(std::move(r));
  rows.insert(rows.end(), fresh.begin(), fresh.end());
  std::sort(rows.begin(), rows.end(), metric_row_before);
  eval::write_metrics_csv(metrics, rows);
  eval::write_welch_csv(out / "welch.csv", model_comparisons(rows));
  write_resolved(cfg, out);
}

void run_diagnose(const RunConfig& cfg) {
  validate_config(cfg);
  ModelKind kind = model_kind(cfg.model);
  if (kind != ModelKind::aida && kind != ModelKind::aida_mpc)
    throw UsageError("diagnose needs a latent-state model (aida or aida-mpc)");
  if (cfg.data.empty()) throw UsageError("diagnose needs data=<dataset dir>");
  Dataset ds = load_dataset(cfg.data);

  fs::path ckpt = cfg.checkpoint.empty()
                      ? checkpoint_path(checkpoint_dir(cfg), cfg.model, cfg.seeds.front())
                      : fs::path(cfg.checkpoint);
  if (!fs::exists(ckpt)) throw DataError("missing checkpoint " + ckpt.string());
  aida::AidaModel m = aida::load_aida(ckpt);

  const auto& pool =
      ds.split.test_same_lane.empty() ? ds.split.train : ds.split.test_same_lane;
  if (pool.empty()) throw DataError("dataset has no episodes to trace");
  std::vector<std::string> ids(
      pool.begin(),
      pool.begin() + std::min<size_t>(pool.size(), static_cast<size_t>(cfg.diag_episodes)));
  std::vector<data::Episode> eps = select_episodes(ds.episodes, ids);

  fs::path out(cfg.out);
  eval::export_diagnostics(m, eps, out / "diagnostics",
                           static_cast<int>(cfg.diag_samples), cfg.data_seed);
  write_resolved(cfg, out);
}

void run_report(const RunConfig& cfg) {
  validate_config(cfg);
  fs::path out(cfg.out);
  fs::path metrics = out / "metrics.csv";
  if (!fs::exists(metrics))
    throw DataError("no metrics.csv under " + out.string() + "; run evaluate first");
  std::vector<eval::MetricRow> rows = eval::read_metrics_csv(metrics);
  std::sort(rows.begin(), rows.end(), metric_row_before);

  std::map<std::tuple<std::string, std::string, std::string>, std::vector<double>> cells;
  for (const auto& r : rows) cells[{r.model, r.condition, r.metric}].push_back(r.value);
  std::string summary = "model,condition,metric,n,mean,central\n";
  for (const auto& [key, vals] : cells) {
    double mean = 0.0;
    for (double v : vals) mean += v;
    mean /= static_cast<double>(vals.size());
    double central = vals.size() >= 4 ? eval::iqm(vals) : mean;
    summary += std::get<0>(key) + "," + std::get<1>(key) + "," + std::get<2>(key) +
               "," + std::to_string(vals.size()) + "," + fmt_double(mean) + "," +
               fmt_double(central) + "\n";
  }
  write_text(out / "summary.csv", summary);
  eval::write_welch_csv(out / "welch.csv", model_comparisons(rows));

  // per-seed scatter per table cell, derived from the CSV rows
  std::map<std::tuple<std::string, std::string, std::string>,
           std::vector<std::array<double, 2>>>
      pts;
  for (const auto& r : rows)
    pts[{r.metric, r.condition, r.model}].push_back(
        {static_cast<double>(r.seed), r.value});
  for (const auto& [key, p] : pts) {
    std::string name = "scatter_" + std::get<0>(key) + "_" + std::get<1>(key) + "_" +
                       std::get<2>(key) + ".svg";
    write_text(out / name, eval::svg_scatter(p, "seed", std::get<0>(key)));
  }

  // belief diagnostics, when a diagnose run left its CSVs here
  fs::path diag = out / "diagnostics";
  if (fs::exists(diag / "state_samples.csv")) {
    std::vector<std::string> lines = read_lines(diag / "state_samples.csv");
    std::vector<std::array<double, 2>> cloud;
    for (size_t i = 1; i < lines.size(); ++i) {
      auto f = split(lines[i], ',');
      cloud.push_back({parse_double(f[2], "dv"), parse_double(f[3], "tau_inv")});
    }
    write_text(out / "state_scatter.svg", eval::svg_scatter(cloud, "dv", "tau_inv"));
  }
  std::vector<fs::path> traces;
  if (fs::exists(diag))
    for (const auto& e : fs::directory_iterator(diag))
      if (e.path().filename().string().rfind("trace_", 0) == 0) traces.push_back(e.path());
  if (!traces.empty()) {
    std::sort(traces.begin(), traces.end());
    eval::DiagTrace dt = eval::load_belief_trace(traces.front());
    write_text(out / "belief_heatmap.svg", eval::svg_heatmap(dt.belief));
  }
}

}  // namespace carfollow::cli
