#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "carfollow/common.hpp"

namespace carfollow::data {

struct SplitConfig {
  double train_ratio = 0.7;
  long same_lane_cap = 100;  // max same-lane test episodes; < 0 disables the cap
  long new_lane_cap = 75;    // max new-lane test episodes; < 0 disables the cap
};

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> test_same_lane;
  std::vector<std::string> test_new_lane;
};

// Shuffles same_lane ids and cuts at round(ratio*n); the remainder becomes the
// same-lane test set, truncated to the cap. new_lane ids never enter training.
// The two input id sets must be disjoint. Output lists are sorted.
DatasetSplit make_split(const std::vector<std::string>& same_lane,
                        const std::vector<std::string>& new_lane,
                        const SplitConfig& cfg, uint64_t seed);

void save_split(const std::filesystem::path& path, const DatasetSplit& s);
DatasetSplit load_split(const std::filesystem::path& path);

}  // namespace carfollow::data
