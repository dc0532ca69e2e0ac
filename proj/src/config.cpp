#include "carfollow/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <set>

namespace carfollow::cli {

ModelKind model_kind(const std::string& name) {
  if (name == "idm") return ModelKind::idm;
  if (name == "bc-mlp") return ModelKind::bc_mlp;
  if (name == "bc-rnn") return ModelKind::bc_rnn;
  if (name == "aida") return ModelKind::aida;
  if (name == "aida-mpc") return ModelKind::aida_mpc;
  throw UsageError("unknown model '" + name +
                   "' (expected idm, bc-mlp, bc-rnn, aida, or aida-mpc)");
}

std::string model_name(ModelKind k) {
  switch (k) {
    case ModelKind::idm: return "idm";
    case ModelKind::bc_mlp: return "bc-mlp";
    case ModelKind::bc_rnn: return "bc-rnn";
    case ModelKind::aida: return "aida";
    case ModelKind::aida_mpc: return "aida-mpc";
  }
  throw UsageError("bad model kind");
}

namespace {

struct Entry {
  const char* key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

long to_long(const std::string& key, const std::string& v) {
  try {
    return parse_long(v, key);
  } catch (const DataError& e) {
    throw UsageError(e.what());
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    return parse_double(v, key);
  } catch (const DataError& e) {
    throw UsageError(e.what());
  }
}

std::vector<long> to_seed_list(const std::string& v) {
  std::vector<long> out;
  for (const std::string& part : split(v, ','))
    if (!trim(part).empty()) out.push_back(to_long("seeds", part));
  return out;
}

std::string from_seed_list(const std::vector<long>& seeds) {
  std::string out;
  for (size_t i = 0; i < seeds.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(seeds[i]);
  }
  return out;
}

Entry str_entry(const char* key, std::string RunConfig::* f) {
  return {key, [f](RunConfig& c, const std::string& v) { c.*f = trim(v); },
          [f](const RunConfig& c) { return c.*f; }};
}

Entry long_entry(const char* key, long RunConfig::* f) {
  return {key,
          [key, f](RunConfig& c, const std::string& v) { c.*f = to_long(key, v); },
          [f](const RunConfig& c) { return std::to_string(c.*f); }};
}

Entry dbl_entry(const char* key, double RunConfig::* f) {
  return {key,
          [key, f](RunConfig& c, const std::string& v) { c.*f = to_double(key, v); },
          [f](const RunConfig& c) { return fmt_double(c.*f); }};
}

const std::vector<Entry>& registry() {
  static const std::vector<Entry> table = [] {
    std::vector<Entry> t;
    t.push_back(str_entry("tracks", &RunConfig::tracks));
    t.push_back(str_entry("centerlines", &RunConfig::centerlines));
    t.push_back(str_entry("data", &RunConfig::data));
    t.push_back(str_entry("out", &RunConfig::out));
    t.push_back(str_entry("checkpoints", &RunConfig::checkpoints));
    t.push_back(str_entry("checkpoint", &RunConfig::checkpoint));
    t.push_back(str_entry("model", &RunConfig::model));
    t.push_back(dbl_entry("lambda1", &RunConfig::lambda1));
    t.push_back(dbl_entry("lambda2", &RunConfig::lambda2));
    t.push_back(long_entry("S", &RunConfig::S));
    t.push_back(long_entry("A", &RunConfig::A));
    t.push_back(long_entry("H_max", &RunConfig::H_max));
    t.push_back(long_entry("K_codebook", &RunConfig::K_codebook));
    t.push_back(Entry{"seeds",
                      [](RunConfig& c, const std::string& v) { c.seeds = to_seed_list(v); },
                      [](const RunConfig& c) { return from_seed_list(c.seeds); }});
    t.push_back(dbl_entry("split_ratio", &RunConfig::split_ratio));
    t.push_back(long_entry("cap_same_lane", &RunConfig::cap_same_lane));
    t.push_back(long_entry("cap_new_lane", &RunConfig::cap_new_lane));
    t.push_back(dbl_entry("accel_min", &RunConfig::accel_min));
    t.push_back(dbl_entry("accel_max", &RunConfig::accel_max));
    t.push_back(long_entry("bc_epochs", &RunConfig::bc_epochs));
    t.push_back(long_entry("bc_batch", &RunConfig::bc_batch));
    t.push_back(long_entry("bc_patience", &RunConfig::bc_patience));
    t.push_back(dbl_entry("bc_lr", &RunConfig::bc_lr));
    t.push_back(long_entry("aida_epochs", &RunConfig::aida_epochs));
    t.push_back(long_entry("aida_batch", &RunConfig::aida_batch));
    t.push_back(dbl_entry("aida_lr", &RunConfig::aida_lr));
    t.push_back(long_entry("synth_episodes", &RunConfig::synth_episodes));
    t.push_back(dbl_entry("synth_noise", &RunConfig::synth_noise));
    t.push_back(Entry{"data_seed",
                      [](RunConfig& c, const std::string& v) {
                        c.data_seed = static_cast<uint64_t>(to_long("data_seed", v));
                      },
                      [](const RunConfig& c) { return std::to_string(c.data_seed); }});
    t.push_back(str_entry("suite", &RunConfig::suite));
    t.push_back(long_entry("diag_samples", &RunConfig::diag_samples));
    t.push_back(long_entry("diag_episodes", &RunConfig::diag_episodes));
    return t;
  }();
  return table;
}

const Entry& find_entry(const std::string& key) {
  for (const Entry& e : registry())
    if (key == e.key) return e;
  throw UsageError("unknown config key '" + key + "'");
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const Entry& e : registry()) out.push_back(e.key);
  return out;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path.string());
  RunConfig cfg;
  std::set<std::string> seen;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError(path.filename().string() + ":" + std::to_string(lineno) +
                       ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    if (!seen.insert(key).second)
      throw UsageError(path.filename().string() + ":" + std::to_string(lineno) +
                       ": duplicate key '" + key + "'");
    find_entry(key).set(cfg, line.substr(eq + 1));
  }
  return cfg;
}

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
  find_entry(key).set(cfg, value);
}

void validate_config(const RunConfig& cfg) {
  model_kind(cfg.model);
  if (cfg.lambda1 < 0 || cfg.lambda2 < 0)
    throw UsageError("regularization weights must be nonnegative");
  if (cfg.S < 1 || cfg.A < 1 || cfg.H_max < 1 || cfg.K_codebook < 1)
    throw UsageError("S, A, H_max, and K_codebook must be positive");
  if (cfg.seeds.empty()) throw UsageError("seed list is empty");
  if (!(cfg.split_ratio > 0.0 && cfg.split_ratio < 1.0))
    throw UsageError("split_ratio must lie in (0, 1)");
  if (cfg.accel_min != kAccelMin || cfg.accel_max != kAccelMax)
    throw UsageError("acceleration bounds are fixed at " + fmt_double(kAccelMin) +
                     ".." + fmt_double(kAccelMax) + " in this build");
  if (cfg.bc_epochs < 1 || cfg.bc_batch < 1 || cfg.bc_patience < 1 ||
      cfg.aida_epochs < 1 || cfg.aida_batch < 1)
    throw UsageError("epoch, batch, and patience counts must be positive");
  if (cfg.bc_lr <= 0 || cfg.aida_lr <= 0)
    throw UsageError("learning rates must be positive");
  if (cfg.synth_episodes < 1) throw UsageError("synth_episodes must be positive");
  if (cfg.synth_noise < 0) throw UsageError("synth_noise must be nonnegative");
  if (cfg.suite != "offline" && cfg.suite != "online" && cfg.suite != "both")
    throw UsageError("suite must be offline, online, or both");
  if (cfg.diag_samples < 1 || cfg.diag_episodes < 1)
    throw UsageError("diagnostic counts must be positive");
}

std::string resolved_text(const RunConfig& cfg) {
  std::string out;
  for (const Entry& e : registry()) {
    out += e.key;
    out += " = ";
    out += e.get(cfg);
    out += '\n';
  }
  return out;
}

void write_resolved(const RunConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / "config.resolved", resolved_text(cfg));
}

}  // namespace carfollow::cli
