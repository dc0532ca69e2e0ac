#include "carfollow/geometry.hpp"

#include <algorithm>
#include <limits>
#include <sstream>

namespace carfollow::data {

namespace {

double wrap_angle(double a) {
  while (a > kPi) a -= 2.0 * kPi;
  while (a <= -kPi) a += 2.0 * kPi;
  return a;
}

}  // namespace

Centerline Centerline::from_points(std::vector<Vec2> pts) {
  if (pts.size() < 2) throw DataError("centerline needs at least 2 points");
  Centerline c;
  c.pts_ = std::move(pts);
  c.s_.resize(c.pts_.size());
  c.s_[0] = 0.0;
  size_t nseg = c.pts_.size() - 1;
  std::vector<double> seg_heading(nseg);
  for (size_t i = 0; i < nseg; ++i) {
    Vec2 d = c.pts_[i + 1] - c.pts_[i];
    double len = norm(d);
    if (len <= 0.0)
      throw DataError("centerline has duplicate consecutive points at index " +
                      std::to_string(i));
    c.s_[i + 1] = c.s_[i] + len;
    seg_heading[i] = std::atan2(d.y, d.x);
  }
  c.vh_.resize(c.pts_.size());
  c.vh_[0] = seg_heading[0];
  c.vh_[c.pts_.size() - 1] = seg_heading[nseg - 1];
  for (size_t i = 1; i + 1 < c.pts_.size(); ++i) {
    double h0 = seg_heading[i - 1], h1 = seg_heading[i];
    c.vh_[i] = std::atan2(std::sin(h0) + std::sin(h1), std::cos(h0) + std::cos(h1));
  }
  return c;
}

Centerline Centerline::load_csv(const std::filesystem::path& path) {
  auto lines = read_lines(path);
  if (lines.empty()) throw DataError("empty centerline file " + path.string());
  if (trim(lines[0]) != "x,y")
    throw DataError("centerline header must be 'x,y' in " + path.string());
  std::vector<Vec2> pts;
  for (size_t i = 1; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    auto cols = split(lines[i], ',');
    if (cols.size() != 2)
      throw DataError("centerline row " + std::to_string(i + 1) + " has " +
                      std::to_string(cols.size()) + " columns in " + path.string());
    pts.push_back({parse_double(cols[0], "x"), parse_double(cols[1], "y")});
  }
  return from_points(std::move(pts));
}

void Centerline::save_csv(const std::filesystem::path& path) const {
  std::ostringstream out;
  out << "x,y\n";
  for (const Vec2& p : pts_) out << fmt_double(p.x) << "," << fmt_double(p.y) << "\n";
  write_text(path, out.str());
}

size_t Centerline::segment_of(double s) const {
  if (s <= 0.0) return 0;
  if (s >= s_.back()) return pts_.size() - 2;
  size_t i = static_cast<size_t>(std::upper_bound(s_.begin(), s_.end(), s) -
                                 s_.begin());
  return i - 1;
}

Vec2 Centerline::point_at(double s) const {
  double sc = std::clamp(s, 0.0, s_.back());
  size_t i = segment_of(sc);
  double u = (sc - s_[i]) / (s_[i + 1] - s_[i]);
  return pts_[i] + u * (pts_[i + 1] - pts_[i]);
}

double Centerline::heading_at(double s) const {
  double sc = std::clamp(s, 0.0, s_.back());
  size_t i = segment_of(sc);
  double u = (sc - s_[i]) / (s_[i + 1] - s_[i]);
  return vh_[i] + u * wrap_angle(vh_[i + 1] - vh_[i]);
}

Centerline::Projection Centerline::project(Vec2 p) const {
  size_t nseg = pts_.size() - 1;

  // coarse pass: per-segment clamped metric distance
  std::vector<double> naive(nseg);
  double best_naive = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < nseg; ++i) {
    Vec2 d = pts_[i + 1] - pts_[i];
    double t = std::clamp(dot(p - pts_[i], d) / dot(d, d), 0.0, 1.0);
    naive[i] = norm(p - (pts_[i] + t * d));
    best_naive = std::min(best_naive, naive[i]);
  }

  auto f = [&](double s) { return dot(p - point_at(s), tangent_at(s)); };

  // roots of f inside candidate segments
  std::vector<double> roots;
  constexpr int kSamples = 9;
  for (size_t i = 0; i < nseg; ++i) {
    if (naive[i] > best_naive + 2.0) continue;
    double lo = s_[i], hi = s_[i + 1];
    double prev_s = lo, prev_f = f(lo);
    for (int k = 1; k < kSamples; ++k) {
      double cur_s = lo + (hi - lo) * k / (kSamples - 1);
      double cur_f = f(cur_s);
      if (prev_f == 0.0) {
        roots.push_back(prev_s);
      } else if (prev_f * cur_f < 0.0) {
        double a = prev_s, b = cur_s, fa = prev_f;
        for (int it = 0; it < 64; ++it) {
          double m = 0.5 * (a + b);
          double fm = f(m);
          if (fa * fm <= 0.0) {
            b = m;
          } else {
            a = m;
            fa = fm;
          }
        }
        roots.push_back(0.5 * (a + b));
      }
      prev_s = cur_s;
      prev_f = cur_f;
    }
    if (prev_f == 0.0) roots.push_back(prev_s);
  }
  std::sort(roots.begin(), roots.end());
  roots.erase(std::unique(roots.begin(), roots.end(),
                          [](double a, double b) { return std::abs(a - b) < 1e-9; }),
              roots.end());

  Projection out;
  if (roots.empty()) {
    // beyond an endpoint: clamp to the nearer end
    double d0 = norm(p - pts_.front());
    double dn = norm(p - pts_.back());
    out.s = d0 <= dn ? 0.0 : s_.back();
    out.l = dot(p - point_at(out.s), normal_at(out.s));
    out.dist = std::min(d0, dn);
    out.clamped = true;
    return out;
  }

  size_t best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  std::vector<double> ls(roots.size());
  for (size_t i = 0; i < roots.size(); ++i) {
    ls[i] = dot(p - point_at(roots[i]), normal_at(roots[i]));
    if (std::abs(ls[i]) < best_dist) {
      best_dist = std::abs(ls[i]);
      best = i;
    }
  }
  for (size_t i = 0; i < roots.size(); ++i) {
    if (i == best) continue;
    if (std::abs(std::abs(ls[i]) - best_dist) < 1e-9 &&
        std::abs(roots[i] - roots[best]) > 1e-6) {
      out.ambiguous = true;
      if (roots[i] < roots[best]) best = i;  // nearest-by-index: lower s wins
    }
  }
  out.s = roots[best];
  out.l = ls[best];
  out.dist = std::abs(ls[best]);
  return out;
}

}  // namespace carfollow::data
