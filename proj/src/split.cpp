#include "carfollow/split.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <utility>

#include <json.hpp>

namespace carfollow::data {

namespace {

void shuffle_ids(std::vector<std::string>& ids, Rng& rng) {
  for (size_t i = ids.size(); i > 1; --i)
    std::swap(ids[i - 1], ids[static_cast<size_t>(rng.index(static_cast<long>(i)))]);
}

void cap_and_sort(std::vector<std::string>& ids, long cap) {
  if (cap >= 0 && ids.size() > static_cast<size_t>(cap)) ids.resize(static_cast<size_t>(cap));
  std::sort(ids.begin(), ids.end());
}

}  // namespace

DatasetSplit make_split(const std::vector<std::string>& same_lane,
                        const std::vector<std::string>& new_lane,
                        const SplitConfig& cfg, uint64_t seed) {
  if (cfg.train_ratio <= 0.0 || cfg.train_ratio >= 1.0)
    throw DataError("train ratio must lie strictly between 0 and 1");
  std::set<std::string> seen(same_lane.begin(), same_lane.end());
  if (seen.size() != same_lane.size()) throw DataError("duplicate episode id in split input");
  for (const std::string& id : new_lane)
    if (!seen.insert(id).second) throw DataError("episode id '" + id + "' appears in both lanes");

  DatasetSplit out;
  std::vector<std::string> pool = same_lane;
  std::sort(pool.begin(), pool.end());  // input order must not matter
  Rng rng(derive_seed(seed, 0x517));
  shuffle_ids(pool, rng);
  size_t n_train = static_cast<size_t>(
      std::llround(cfg.train_ratio * static_cast<double>(pool.size())));
  out.train.assign(pool.begin(), pool.begin() + static_cast<long>(n_train));
  out.test_same_lane.assign(pool.begin() + static_cast<long>(n_train), pool.end());
  std::sort(out.train.begin(), out.train.end());
  cap_and_sort(out.test_same_lane, cfg.same_lane_cap);

  out.test_new_lane = new_lane;
  std::sort(out.test_new_lane.begin(), out.test_new_lane.end());
  Rng rng2(derive_seed(seed, 0xb4c));
  shuffle_ids(out.test_new_lane, rng2);
  cap_and_sort(out.test_new_lane, cfg.new_lane_cap);
  return out;
}

void save_split(const std::filesystem::path& path, const DatasetSplit& s) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["train"] = s.train;
  j["test_same_lane"] = s.test_same_lane;
  j["test_new_lane"] = s.test_new_lane;
  write_text(path, j.dump(2) + "\n");
}

DatasetSplit load_split(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("cannot parse split file " + path.string() + ": " + e.what());
  }
  DatasetSplit s;
  try {
    s.train = j.at("train").get<std::vector<std::string>>();
    s.test_same_lane = j.at("test_same_lane").get<std::vector<std::string>>();
    s.test_new_lane = j.at("test_new_lane").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad split file " + path.string() + ": " + e.what());
  }
  return s;
}

}  // namespace carfollow::data
