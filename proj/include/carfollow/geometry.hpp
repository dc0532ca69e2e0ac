#pragma once

#include <cmath>
#include <filesystem>
#include <utility>
#include <vector>

#include "carfollow/common.hpp"

namespace carfollow::data {

struct Vec2 {
  double x = 0.0, y = 0.0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(double c, Vec2 a) { return {c * a.x, c * a.y}; }
inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double norm(Vec2 a) { return std::hypot(a.x, a.y); }

// Polyline centerline with an interpolated heading field. Headings are
// defined at vertices (circular mean of adjacent segment headings, plain
// segment heading at the ends) and interpolated linearly in arclength inside
// each segment. Frenet coordinates are taken against this smooth field:
// s solves (p - point_at(s)) . tangent_at(s) = 0, and l is the signed
// left-normal component, which makes reconstruct(project(p)) == p exact at
// interior solutions (no wedge gaps at vertices).
class Centerline {
 public:
  static Centerline from_points(std::vector<Vec2> pts);
  static Centerline load_csv(const std::filesystem::path& path);
  void save_csv(const std::filesystem::path& path) const;

  double length() const { return s_.back(); }
  size_t n_points() const { return pts_.size(); }
  const std::vector<double>& vertex_s() const { return s_; }

  Vec2 point_at(double s) const;     // clamped to [0, length]
  double heading_at(double s) const;
  Vec2 tangent_at(double s) const {
    double h = heading_at(s);
    return {std::cos(h), std::sin(h)};
  }
  Vec2 normal_at(double s) const {  // left normal
    double h = heading_at(s);
    return {-std::sin(h), std::cos(h)};
  }
  Vec2 reconstruct(double s, double l) const {
    return point_at(s) + l * normal_at(s);
  }

  struct Projection {
    double s = 0.0;
    double l = 0.0;
    double dist = 0.0;     // |l| at interior solutions, metric distance when clamped
    bool ambiguous = false;  // equidistant non-adjacent solutions (lower s returned)
    bool clamped = false;    // projected beyond an endpoint
  };
  Projection project(Vec2 p) const;

  // longitudinal / lateral components of a velocity at arclength s
  std::pair<double, double> velocity(double s, Vec2 v) const {
    return {dot(v, tangent_at(s)), dot(v, normal_at(s))};
  }

 private:
  // segment index for arclength s (clamped)
  size_t segment_of(double s) const;

  std::vector<Vec2> pts_;
  std::vector<double> s_;   // cumulative arclength at vertices, s_[0] = 0
  std::vector<double> vh_;  // vertex headings
};

}  // namespace carfollow::data
