#pragma once

#include <vector>

#include "carfollow/tensor.hpp"

namespace carfollow::diff {

// Eager reverse-mode autodiff tape over Tensor. Each op records its inputs and
// computes its value at construction, so data-dependent control flow (loops
// whose termination depends on computed values) is safe: by the time a branch
// is taken the values exist. forward() re-executes the recorded graph after
// leaves are rebound with set_value(); backward(root) accumulates adjoints for
// a scalar root. Node evaluation and adjoint accumulation run in fixed order,
// so results are bit-reproducible.
class Tape {
 public:
  int leaf(Tensor v);
  int constant(Tensor v);

  // elementwise
  int add(int a, int b);
  int sub(int a, int b);
  int mul(int a, int b);
  int div(int a, int b);
  int neg(int a);
  int scale(int a, double c);
  int add_const(int a, double c);
  int relu(int a);
  int tanh_(int a);
  int sigmoid(int a);
  int exp_(int a);
  int log_(int a);
  int square(int a);
  int sqrt_(int a);

  // reductions and softmax family (over the last axis)
  int sum(int a);
  int mean(int a);
  int sum_last(int a);
  int logsumexp_last(int a);
  int log_softmax_last(int a);
  int softmax_last(int a);

  // indexing / shape
  int pick(int a, long i);    // vector -> scalar
  int row(int a, long i);     // matrix -> vector
  int slice_mid(int a, long j);  // (S,A,T) -> (S,T) at middle index j
  int stack(const std::vector<int>& mats);  // H matrices (S,A) -> (H,S,A)

  // linear algebra
  int matvec(int m, int x);         // (r,c)(c) -> (r)
  int vecmat(int x, int m);         // (r)(r,c) -> (c)
  int dot(int x, int y);            // (n)(n) -> scalar
  int t3vec(int t, int x);          // (i,j,k)(k) -> (i,j)
  int contract_mid(int t, int x);   // (i,j,k)(j) -> (i,k)
  int sub_bcast_last(int t, int x);  // t[..,k] - x[k], t rank 2 or 3

  // scalar s -> vector coef*s + off
  int affine(int s, std::vector<double> coef, std::vector<double> off);

  void forward();
  void backward(int root);  // root must be scalar; zeroes grads first

  const Tensor& val(int id) const { return nodes_[static_cast<size_t>(id)].val; }
  const Tensor& grad(int id) const { return nodes_[static_cast<size_t>(id)].grad; }
  void set_value(int id, const Tensor& v);

  long size() const { return static_cast<long>(nodes_.size()); }

 private:
  enum class Op : unsigned char {
    kLeaf, kConst, kAdd, kSub, kMul, kDiv, kNeg, kScale, kAddConst,
    kRelu, kTanh, kSigmoid, kExp, kLog, kSquare, kSqrt,
    kSum, kMean, kSumLast, kLogSumExpLast, kLogSoftmaxLast, kSoftmaxLast,
    kPick, kRow, kSliceMid, kStack,
    kMatVec, kVecMat, kDot, kT3Vec, kContractMid, kSubBcastLast,
    kAffine,
  };
  struct Node {
    Op op;
    int a = -1, b = -1;
    double c0 = 0.0;
    long i0 = 0;
    std::vector<int> srcs;    // kStack only
    std::vector<double> aux;  // kAffine: coef then off
    Tensor val, grad;
  };

  int push(Node n);
  void eval(Node& n);
  void backprop(const Node& n);
  Node& at(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& at(int id) const { return nodes_[static_cast<size_t>(id)]; }

  std::vector<Node> nodes_;
};

}  // namespace carfollow::diff
