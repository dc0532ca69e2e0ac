#pragma once

#include <array>
#include <cassert>
#include <cstddef>
#include <vector>

namespace carfollow::diff {

// Dense row-major tensor of rank 0..3. Rank 0 is a scalar holding one element.
class Tensor {
 public:
  Tensor() : rank_(0), dims_{1, 1, 1}, v_(1, 0.0) {}

  static Tensor scalar(double v) {
    Tensor t;
    t.v_[0] = v;
    return t;
  }
  static Tensor zeros(std::initializer_list<long> dims) {
    return zeros(std::vector<long>(dims));
  }
  static Tensor zeros(const std::vector<long>& dims) {
    assert(dims.size() <= 3);
    Tensor t;
    t.rank_ = static_cast<int>(dims.size());
    long n = 1;
    for (size_t i = 0; i < dims.size(); ++i) {
      assert(dims[i] > 0);
      t.dims_[i] = dims[i];
      n *= dims[i];
    }
    t.v_.assign(static_cast<size_t>(n), 0.0);
    return t;
  }
  static Tensor from(std::vector<double> v) {
    Tensor t;
    t.rank_ = 1;
    t.dims_[0] = static_cast<long>(v.size());
    t.v_ = std::move(v);
    return t;
  }
  static Tensor from(long r, long c, std::vector<double> v) {
    assert(static_cast<long>(v.size()) == r * c);
    Tensor t;
    t.rank_ = 2;
    t.dims_[0] = r;
    t.dims_[1] = c;
    t.v_ = std::move(v);
    return t;
  }

  int rank() const { return rank_; }
  long dim(int i) const { return dims_[static_cast<size_t>(i)]; }
  long size() const { return static_cast<long>(v_.size()); }
  bool same_shape(const Tensor& o) const {
    return rank_ == o.rank_ && dims_ == o.dims_;
  }

  double& operator()() {
    assert(rank_ == 0);
    return v_[0];
  }
  double operator()() const {
    assert(rank_ == 0);
    return v_[0];
  }
  double& operator()(long i) {
    assert(rank_ == 1);
    return v_[static_cast<size_t>(i)];
  }
  double operator()(long i) const {
    assert(rank_ == 1);
    return v_[static_cast<size_t>(i)];
  }
  double& operator()(long i, long j) {
    assert(rank_ == 2);
    return v_[static_cast<size_t>(i * dims_[1] + j)];
  }
  double operator()(long i, long j) const {
    assert(rank_ == 2);
    return v_[static_cast<size_t>(i * dims_[1] + j)];
  }
  double& operator()(long i, long j, long k) {
    assert(rank_ == 3);
    return v_[static_cast<size_t>((i * dims_[1] + j) * dims_[2] + k)];
  }
  double operator()(long i, long j, long k) const {
    assert(rank_ == 3);
    return v_[static_cast<size_t>((i * dims_[1] + j) * dims_[2] + k)];
  }

  std::vector<double>& data() { return v_; }
  const std::vector<double>& data() const { return v_; }

  void fill(double v) {
    for (double& x : v_) x = v;
  }

 private:
  int rank_;
  std::array<long, 3> dims_;
  std::vector<double> v_;
};

}  // namespace carfollow::diff
