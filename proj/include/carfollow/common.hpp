#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace carfollow {

inline constexpr double kPi = 3.14159265358979323846;

// physical acceleration bounds applied at sampling and in simulation, m/s^2
inline constexpr double kAccelMin = -8.0;
inline constexpr double kAccelMax = 5.0;

// Error categories mapped to process exit codes by the CLI:
// UsageError -> 1, DataError -> 2, TrainError -> 3.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Independent stream seed for item idx under run seed `seed`. Per-item streams
// keep random draws independent of thread scheduling.
inline uint64_t derive_seed(uint64_t seed, uint64_t idx) {
  return splitmix64(seed ^ splitmix64(idx + 0x517cc1b727220a95ull));
}

// Deterministic RNG. The engine is bit-stable by the standard; distributions
// are hand-rolled because std::*_distribution is not.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  // [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  // Box-Muller, cosine branch only.
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }
  double normal(double mean, double std) { return mean + std * normal(); }

  long index(long n) {
    long i = static_cast<long>(uniform() * static_cast<double>(n));
    return i < n ? i : n - 1;
  }

  int categorical(std::span<const double> w) {
    double total = 0.0;
    for (double x : w) total += x;
    double r = uniform() * total;
    double acc = 0.0;
    for (size_t i = 0; i < w.size(); ++i) {
      acc += w[i];
      if (r < acc) return static_cast<int>(i);
    }
    return static_cast<int>(w.size()) - 1;
  }

  uint64_t raw() { return eng_(); }

 private:
  std::mt19937_64 eng_;
};

// Runs body(i) for i in [0, n). The serial path is the reference
// implementation; the OpenMP path must only be used with bodies that write to
// disjoint slots, so both paths produce bit-identical results.
void parallel_for(long n, bool parallel, const std::function<void(long)>& body);

// ---- string / number helpers ----

inline std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    size_t pos = line.find(sep, start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline double parse_double(const std::string& s, const std::string& what = "number") {
  std::string t = trim(s);
  double v = 0.0;
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || p != t.data() + t.size())
    throw DataError("cannot parse " + what + " from '" + s + "'");
  return v;
}

inline long parse_long(const std::string& s, const std::string& what = "integer") {
  std::string t = trim(s);
  long v = 0;
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || p != t.data() + t.size())
    throw DataError("cannot parse " + what + " from '" + s + "'");
  return v;
}

// Shortest representation that round-trips exactly.
inline std::string fmt_double(double v) {
  char buf[40];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, p);
}

// ---- file helpers ----

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << content;
  if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace carfollow
