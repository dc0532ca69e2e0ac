#include "carfollow/tape.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace carfollow::diff {

namespace {

void require(bool ok, const char* msg) {
  if (!ok) throw std::logic_error(std::string("tape: ") + msg);
}

// shape with the last axis dropped: (r,c) -> (r), (a,b,c) -> (a,b), (n) -> scalar
Tensor drop_last_zeros(const Tensor& t) {
  require(t.rank() >= 1, "reduction over last axis needs rank >= 1");
  std::vector<long> d;
  for (int i = 0; i + 1 < t.rank(); ++i) d.push_back(t.dim(i));
  return Tensor::zeros(d);
}

}  // namespace

int Tape::push(Node n) {
  int id = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(n));
  Node& node = nodes_.back();
  if (node.op != Op::kLeaf && node.op != Op::kConst) eval(node);
  node.grad = node.val;
  node.grad.fill(0.0);
  return id;
}

int Tape::leaf(Tensor v) {
  Node n;
  n.op = Op::kLeaf;
  n.val = std::move(v);
  return push(std::move(n));
}

int Tape::constant(Tensor v) {
  Node n;
  n.op = Op::kConst;
  n.val = std::move(v);
  return push(std::move(n));
}

#define BINOP(name, opcode)                          \
  int Tape::name(int a, int b) {                     \
    Node n;                                          \
    n.op = opcode;                                   \
    n.a = a;                                         \
    n.b = b;                                         \
    return push(std::move(n));                       \
  }

BINOP(add, Op::kAdd)
BINOP(sub, Op::kSub)
BINOP(mul, Op::kMul)
BINOP(div, Op::kDiv)
BINOP(matvec, Op::kMatVec)
BINOP(vecmat, Op::kVecMat)
BINOP(dot, Op::kDot)
BINOP(t3vec, Op::kT3Vec)
BINOP(contract_mid, Op::kContractMid)
BINOP(sub_bcast_last, Op::kSubBcastLast)
#undef BINOP

#define UNOP(name, opcode)       \
  int Tape::name(int a) {        \
    Node n;                      \
    n.op = opcode;               \
    n.a = a;                     \
    return push(std::move(n));   \
  }

UNOP(neg, Op::kNeg)
UNOP(relu, Op::kRelu)
UNOP(tanh_, Op::kTanh)
UNOP(sigmoid, Op::kSigmoid)
UNOP(exp_, Op::kExp)
UNOP(log_, Op::kLog)
UNOP(square, Op::kSquare)
UNOP(sqrt_, Op::kSqrt)
UNOP(sum, Op::kSum)
UNOP(mean, Op::kMean)
UNOP(sum_last, Op::kSumLast)
UNOP(logsumexp_last, Op::kLogSumExpLast)
UNOP(log_softmax_last, Op::kLogSoftmaxLast)
UNOP(softmax_last, Op::kSoftmaxLast)
#undef UNOP

int Tape::scale(int a, double c) {
  Node n;
  n.op = Op::kScale;
  n.a = a;
  n.c0 = c;
  return push(std::move(n));
}

int Tape::add_const(int a, double c) {
  Node n;
  n.op = Op::kAddConst;
  n.a = a;
  n.c0 = c;
  return push(std::move(n));
}

int Tape::pick(int a, long i) {
  Node n;
  n.op = Op::kPick;
  n.a = a;
  n.i0 = i;
  return push(std::move(n));
}

int Tape::row(int a, long i) {
  Node n;
  n.op = Op::kRow;
  n.a = a;
  n.i0 = i;
  return push(std::move(n));
}

int Tape::slice_mid(int a, long j) {
  Node n;
  n.op = Op::kSliceMid;
  n.a = a;
  n.i0 = j;
  return push(std::move(n));
}

int Tape::stack(const std::vector<int>& mats) {
  require(!mats.empty(), "stack of zero tensors");
  Node n;
  n.op = Op::kStack;
  n.srcs = mats;
  return push(std::move(n));
}

int Tape::affine(int s, std::vector<double> coef, std::vector<double> off) {
  require(coef.size() == off.size(), "affine: coef/off size mismatch");
  Node n;
  n.op = Op::kAffine;
  n.a = s;
  n.aux = std::move(coef);
  n.aux.insert(n.aux.end(), off.begin(), off.end());
  return push(std::move(n));
}

void Tape::set_value(int id, const Tensor& v) {
  Node& n = at(id);
  require(n.op == Op::kLeaf || n.op == Op::kConst, "set_value on computed node");
  require(n.val.same_shape(v), "set_value shape mismatch");
  n.val = v;
}

void Tape::forward() {
  for (Node& n : nodes_)
    if (n.op != Op::kLeaf && n.op != Op::kConst) eval(n);
}

void Tape::backward(int root) {
  require(at(root).val.rank() == 0, "backward root must be scalar");
  for (Node& n : nodes_) n.grad.fill(0.0);
  at(root).grad() = 1.0;
  for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) backprop(nodes_[static_cast<size_t>(i)]);
}

void Tape::eval(Node& n) {
  const double neg_inf = -std::numeric_limits<double>::infinity();
  switch (n.op) {
    case Op::kLeaf:
    case Op::kConst:
      break;
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul:
    case Op::kDiv: {
      const Tensor& a = at(n.a).val;
      const Tensor& b = at(n.b).val;
      require(a.same_shape(b), "elementwise shape mismatch");
      n.val = a;
      auto& o = n.val.data();
      const auto& x = a.data();
      const auto& y = b.data();
      for (size_t i = 0; i < o.size(); ++i) {
        switch (n.op) {
          case Op::kAdd: o[i] = x[i] + y[i]; break;
          case Op::kSub: o[i] = x[i] - y[i]; break;
          case Op::kMul: o[i] = x[i] * y[i]; break;
          default: o[i] = x[i] / y[i]; break;
        }
      }
      break;
    }
    case Op::kNeg:
    case Op::kScale:
    case Op::kAddConst:
    case Op::kRelu:
    case Op::kTanh:
    case Op::kSigmoid:
    case Op::kExp:
    case Op::kLog:
    case Op::kSquare:
    case Op::kSqrt: {
      const Tensor& a = at(n.a).val;
      n.val = a;
      auto& o = n.val.data();
      for (size_t i = 0; i < o.size(); ++i) {
        double x = o[i];
        switch (n.op) {
          case Op::kNeg: o[i] = -x; break;
          case Op::kScale: o[i] = n.c0 * x; break;
          case Op::kAddConst: o[i] = x + n.c0; break;
          case Op::kRelu: o[i] = x > 0.0 ? x : 0.0; break;
          case Op::kTanh: o[i] = std::tanh(x); break;
          case Op::kSigmoid: o[i] = 1.0 / (1.0 + std::exp(-x)); break;
          case Op::kExp: o[i] = std::exp(x); break;
          case Op::kLog: o[i] = std::log(x); break;
          case Op::kSquare: o[i] = x * x; break;
          default: o[i] = std::sqrt(x); break;
        }
      }
      break;
    }
    case Op::kSum:
    case Op::kMean: {
      const Tensor& a = at(n.a).val;
      double s = 0.0;
      for (double x : a.data()) s += x;
      n.val = Tensor::scalar(n.op == Op::kMean ? s / static_cast<double>(a.size()) : s);
      break;
    }
    case Op::kSumLast: {
      const Tensor& a = at(n.a).val;
      n.val = drop_last_zeros(a);
      long nl = a.dim(a.rank() - 1);
      long rows = a.size() / nl;
      for (long r = 0; r < rows; ++r) {
        double s = 0.0;
        for (long k = 0; k < nl; ++k) s += a.data()[static_cast<size_t>(r * nl + k)];
        n.val.data()[static_cast<size_t>(r)] = s;
      }
      break;
    }
    case Op::kLogSumExpLast: {
      const Tensor& a = at(n.a).val;
      n.val = drop_last_zeros(a);
      long nl = a.dim(a.rank() - 1);
      long rows = a.size() / nl;
      for (long r = 0; r < rows; ++r) {
        const double* x = a.data().data() + r * nl;
        double m = neg_inf;
        for (long k = 0; k < nl; ++k) m = std::max(m, x[k]);
        double out;
        if (m == neg_inf) {
          out = neg_inf;
        } else {
          double s = 0.0;
          for (long k = 0; k < nl; ++k) s += std::exp(x[k] - m);
          out = m + std::log(s);
        }
        n.val.data()[static_cast<size_t>(r)] = out;
      }
      break;
    }
    case Op::kLogSoftmaxLast:
    case Op::kSoftmaxLast: {
      const Tensor& a = at(n.a).val;
      n.val = a;
      long nl = a.dim(a.rank() - 1);
      long rows = a.size() / nl;
      for (long r = 0; r < rows; ++r) {
        const double* x = a.data().data() + r * nl;
        double* o = n.val.data().data() + r * nl;
        double m = neg_inf;
        for (long k = 0; k < nl; ++k) m = std::max(m, x[k]);
        if (m == neg_inf) {
          // all logits -inf: fall back to uniform mass
          for (long k = 0; k < nl; ++k)
            o[k] = n.op == Op::kSoftmaxLast ? 1.0 / static_cast<double>(nl)
                                            : -std::log(static_cast<double>(nl));
          continue;
        }
        double s = 0.0;
        for (long k = 0; k < nl; ++k) s += std::exp(x[k] - m);
        double lse = m + std::log(s);
        for (long k = 0; k < nl; ++k)
          o[k] = n.op == Op::kSoftmaxLast ? std::exp(x[k] - lse) : x[k] - lse;
      }
      break;
    }
    case Op::kPick: {
      const Tensor& a = at(n.a).val;
      require(a.rank() == 1, "pick needs a vector");
      n.val = Tensor::scalar(a(n.i0));
      break;
    }
    case Op::kRow: {
      const Tensor& a = at(n.a).val;
      require(a.rank() == 2, "row needs a matrix");
      n.val = Tensor::zeros({a.dim(1)});
      for (long j = 0; j < a.dim(1); ++j) n.val(j) = a(n.i0, j);
      break;
    }
    case Op::kSliceMid: {
      const Tensor& a = at(n.a).val;
      require(a.rank() == 3, "slice_mid needs rank 3");
      n.val = Tensor::zeros({a.dim(0), a.dim(2)});
      for (long i = 0; i < a.dim(0); ++i)
        for (long k = 0; k < a.dim(2); ++k) n.val(i, k) = a(i, n.i0, k);
      break;
    }
    case Op::kStack: {
      const Tensor& first = at(n.srcs[0]).val;
      require(first.rank() == 2, "stack needs matrices");
      long h = static_cast<long>(n.srcs.size());
      n.val = Tensor::zeros({h, first.dim(0), first.dim(1)});
      for (long m = 0; m < h; ++m) {
        const Tensor& src = at(n.srcs[static_cast<size_t>(m)]).val;
        require(src.same_shape(first), "stack shape mismatch");
        for (long i = 0; i < first.dim(0); ++i)
          for (long j = 0; j < first.dim(1); ++j) n.val(m, i, j) = src(i, j);
      }
      break;
    }
    case Op::kMatVec: {
      const Tensor& m = at(n.a).val;
      const Tensor& x = at(n.b).val;
      require(m.rank() == 2 && x.rank() == 1 && m.dim(1) == x.dim(0), "matvec shapes");
      n.val = Tensor::zeros({m.dim(0)});
      for (long i = 0; i < m.dim(0); ++i) {
        double s = 0.0;
        for (long j = 0; j < m.dim(1); ++j) s += m(i, j) * x(j);
        n.val(i) = s;
      }
      break;
    }
    case Op::kVecMat: {
      const Tensor& x = at(n.a).val;
      const Tensor& m = at(n.b).val;
      require(x.rank() == 1 && m.rank() == 2 && x.dim(0) == m.dim(0), "vecmat shapes");
      n.val = Tensor::zeros({m.dim(1)});
      for (long j = 0; j < m.dim(1); ++j) {
        double s = 0.0;
        for (long i = 0; i < m.dim(0); ++i) s += x(i) * m(i, j);
        n.val(j) = s;
      }
      break;
    }
    case Op::kDot: {
      const Tensor& x = at(n.a).val;
      const Tensor& y = at(n.b).val;
      require(x.rank() == 1 && y.rank() == 1 && x.dim(0) == y.dim(0), "dot shapes");
      double s = 0.0;
      for (long i = 0; i < x.dim(0); ++i) s += x(i) * y(i);
      n.val = Tensor::scalar(s);
      break;
    }
    case Op::kT3Vec: {
      const Tensor& t = at(n.a).val;
      const Tensor& x = at(n.b).val;
      require(t.rank() == 3 && x.rank() == 1 && t.dim(2) == x.dim(0), "t3vec shapes");
      n.val = Tensor::zeros({t.dim(0), t.dim(1)});
      for (long i = 0; i < t.dim(0); ++i)
        for (long j = 0; j < t.dim(1); ++j) {
          double s = 0.0;
          for (long k = 0; k < t.dim(2); ++k) s += t(i, j, k) * x(k);
          n.val(i, j) = s;
        }
      break;
    }
    case Op::kContractMid: {
      const Tensor& t = at(n.a).val;
      const Tensor& x = at(n.b).val;
      require(t.rank() == 3 && x.rank() == 1 && t.dim(1) == x.dim(0), "contract_mid shapes");
      n.val = Tensor::zeros({t.dim(0), t.dim(2)});
      for (long i = 0; i < t.dim(0); ++i)
        for (long k = 0; k < t.dim(2); ++k) {
          double s = 0.0;
          for (long j = 0; j < t.dim(1); ++j) s += t(i, j, k) * x(j);
          n.val(i, k) = s;
        }
      break;
    }
    case Op::kSubBcastLast: {
      const Tensor& t = at(n.a).val;
      const Tensor& x = at(n.b).val;
      require(t.rank() >= 2 && x.rank() == 1 && t.dim(t.rank() - 1) == x.dim(0),
              "sub_bcast_last shapes");
      n.val = t;
      long nl = x.dim(0);
      long rows = t.size() / nl;
      for (long r = 0; r < rows; ++r)
        for (long k = 0; k < nl; ++k)
          n.val.data()[static_cast<size_t>(r * nl + k)] -= x(k);
      break;
    }
    case Op::kAffine: {
      const Tensor& s = at(n.a).val;
      require(s.rank() == 0, "affine input must be scalar");
      long m = static_cast<long>(n.aux.size()) / 2;
      n.val = Tensor::zeros({m});
      for (long k = 0; k < m; ++k)
        n.val(k) = n.aux[static_cast<size_t>(k)] * s() + n.aux[static_cast<size_t>(m + k)];
      break;
    }
  }
}

void Tape::backprop(const Node& n) {
  switch (n.op) {
    case Op::kLeaf:
    case Op::kConst:
      return;
    case Op::kAdd: {
      auto& ga = at(n.a).grad.data();
      auto& gb = at(n.b).grad.data();
      const auto& g = n.grad.data();
      for (size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i];
        gb[i] += g[i];
      }
      return;
    }
    case Op::kSub: {
      auto& ga = at(n.a).grad.data();
      auto& gb = at(n.b).grad.data();
      const auto& g = n.grad.data();
      for (size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i];
        gb[i] -= g[i];
      }
      return;
    }
    case Op::kMul: {
      auto& ga = at(n.a).grad.data();
      auto& gb = at(n.b).grad.data();
      const auto& xa = at(n.a).val.data();
      const auto& xb = at(n.b).val.data();
      const auto& g = n.grad.data();
      for (size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i] * xb[i];
        gb[i] += g[i] * xa[i];
      }
      return;
    }
    case Op::kDiv: {
      auto& ga = at(n.a).grad.data();
      auto& gb = at(n.b).grad.data();
      const auto& xa = at(n.a).val.data();
      const auto& xb = at(n.b).val.data();
      const auto& g = n.grad.data();
      for (size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i] / xb[i];
        gb[i] -= g[i] * xa[i] / (xb[i] * xb[i]);
      }
      return;
    }
    case Op::kNeg:
    case Op::kScale:
    case Op::kAddConst:
    case Op::kRelu:
    case Op::kTanh:
    case Op::kSigmoid:
    case Op::kExp:
    case Op::kLog:
    case Op::kSquare:
    case Op::kSqrt: {
      auto& ga = at(n.a).grad.data();
      const auto& xa = at(n.a).val.data();
      const auto& y = n.val.data();
      const auto& g = n.grad.data();
      for (size_t i = 0; i < g.size(); ++i) {
        switch (n.op) {
          case Op::kNeg: ga[i] -= g[i]; break;
          case Op::kScale: ga[i] += n.c0 * g[i]; break;
          case Op::kAddConst: ga[i] += g[i]; break;
          case Op::kRelu: ga[i] += xa[i] > 0.0 ? g[i] : 0.0; break;
          case Op::kTanh: ga[i] += (1.0 - y[i] * y[i]) * g[i]; break;
          case Op::kSigmoid: ga[i] += y[i] * (1.0 - y[i]) * g[i]; break;
          case Op::kExp: ga[i] += y[i] * g[i]; break;
          case Op::kLog: ga[i] += g[i] / xa[i]; break;
          case Op::kSquare: ga[i] += 2.0 * xa[i] * g[i]; break;
          default: ga[i] += 0.5 / y[i] * g[i]; break;
        }
      }
      return;
    }
    case Op::kSum: {
      auto& ga = at(n.a).grad.data();
      double g = n.grad();
      for (double& v : ga) v += g;
      return;
    }
    case Op::kMean: {
      auto& ga = at(n.a).grad.data();
      double g = n.grad() / static_cast<double>(ga.size());
      for (double& v : ga) v += g;
      return;
    }
    case Op::kSumLast: {
      auto& ga = at(n.a).grad.data();
      const auto& g = n.grad.data();
      long nl = at(n.a).val.dim(at(n.a).val.rank() - 1);
      long rows = static_cast<long>(ga.size()) / nl;
      for (long r = 0; r < rows; ++r)
        for (long k = 0; k < nl; ++k)
          ga[static_cast<size_t>(r * nl + k)] += g[static_cast<size_t>(r)];
      return;
    }
    case Op::kLogSumExpLast: {
      auto& ga = at(n.a).grad.data();
      const auto& xa = at(n.a).val.data();
      const auto& y = n.val.data();
      const auto& g = n.grad.data();
      long nl = at(n.a).val.dim(at(n.a).val.rank() - 1);
      long rows = static_cast<long>(ga.size()) / nl;
      for (long r = 0; r < rows; ++r) {
        double yr = y[static_cast<size_t>(r)];
        if (!std::isfinite(yr)) continue;
        double gr = g[static_cast<size_t>(r)];
        for (long k = 0; k < nl; ++k)
          ga[static_cast<size_t>(r * nl + k)] +=
              gr * std::exp(xa[static_cast<size_t>(r * nl + k)] - yr);
      }
      return;
    }
    case Op::kLogSoftmaxLast: {
      auto& ga = at(n.a).grad.data();
      const auto& y = n.val.data();
      const auto& g = n.grad.data();
      long nl = at(n.a).val.dim(at(n.a).val.rank() - 1);
      long rows = static_cast<long>(ga.size()) / nl;
      for (long r = 0; r < rows; ++r) {
        double gsum = 0.0;
        for (long k = 0; k < nl; ++k) gsum += g[static_cast<size_t>(r * nl + k)];
        for (long k = 0; k < nl; ++k) {
          size_t i = static_cast<size_t>(r * nl + k);
          ga[i] += g[i] - std::exp(y[i]) * gsum;
        }
      }
      return;
    }
    case Op::kSoftmaxLast: {
      auto& ga = at(n.a).grad.data();
      const auto& y = n.val.data();
      const auto& g = n.grad.data();
      long nl = at(n.a).val.dim(at(n.a).val.rank() - 1);
      long rows = static_cast<long>(ga.size()) / nl;
      for (long r = 0; r < rows; ++r) {
        double dotgy = 0.0;
        for (long k = 0; k < nl; ++k) {
          size_t i = static_cast<size_t>(r * nl + k);
          dotgy += g[i] * y[i];
        }
        for (long k = 0; k < nl; ++k) {
          size_t i = static_cast<size_t>(r * nl + k);
          ga[i] += y[i] * (g[i] - dotgy);
        }
      }
      return;
    }
    case Op::kPick: {
      at(n.a).grad(n.i0) += n.grad();
      return;
    }
    case Op::kRow: {
      Tensor& ga = at(n.a).grad;
      for (long j = 0; j < n.val.dim(0); ++j) ga(n.i0, j) += n.grad(j);
      return;
    }
    case Op::kSliceMid: {
      Tensor& ga = at(n.a).grad;
      for (long i = 0; i < n.val.dim(0); ++i)
        for (long k = 0; k < n.val.dim(1); ++k) ga(i, n.i0, k) += n.grad(i, k);
      return;
    }
    case Op::kStack: {
      for (long m = 0; m < static_cast<long>(n.srcs.size()); ++m) {
        Tensor& gs = at(n.srcs[static_cast<size_t>(m)]).grad;
        for (long i = 0; i < gs.dim(0); ++i)
          for (long j = 0; j < gs.dim(1); ++j) gs(i, j) += n.grad(m, i, j);
      }
      return;
    }
    case Op::kMatVec: {
      Tensor& gm = at(n.a).grad;
      Tensor& gx = at(n.b).grad;
      const Tensor& m = at(n.a).val;
      const Tensor& x = at(n.b).val;
      for (long i = 0; i < m.dim(0); ++i) {
        double gi = n.grad(i);
        for (long j = 0; j < m.dim(1); ++j) {
          gm(i, j) += gi * x(j);
          gx(j) += m(i, j) * gi;
        }
      }
      return;
    }
    case Op::kVecMat: {
      Tensor& gx = at(n.a).grad;
      Tensor& gm = at(n.b).grad;
      const Tensor& x = at(n.a).val;
      const Tensor& m = at(n.b).val;
      for (long i = 0; i < m.dim(0); ++i)
        for (long j = 0; j < m.dim(1); ++j) {
          double gj = n.grad(j);
          gx(i) += m(i, j) * gj;
          gm(i, j) += x(i) * gj;
        }
      return;
    }
    case Op::kDot: {
      Tensor& gx = at(n.a).grad;
      Tensor& gy = at(n.b).grad;
      const Tensor& x = at(n.a).val;
      const Tensor& y = at(n.b).val;
      double g = n.grad();
      for (long i = 0; i < x.dim(0); ++i) {
        gx(i) += g * y(i);
        gy(i) += g * x(i);
      }
      return;
    }
    case Op::kT3Vec: {
      Tensor& gt = at(n.a).grad;
      Tensor& gx = at(n.b).grad;
      const Tensor& t = at(n.a).val;
      const Tensor& x = at(n.b).val;
      for (long i = 0; i < t.dim(0); ++i)
        for (long j = 0; j < t.dim(1); ++j) {
          double g = n.grad(i, j);
          for (long k = 0; k < t.dim(2); ++k) {
            gt(i, j, k) += g * x(k);
            gx(k) += t(i, j, k) * g;
          }
        }
      return;
    }
    case Op::kContractMid: {
      Tensor& gt = at(n.a).grad;
      Tensor& gx = at(n.b).grad;
      const Tensor& t = at(n.a).val;
      const Tensor& x = at(n.b).val;
      for (long i = 0; i < t.dim(0); ++i)
        for (long j = 0; j < t.dim(1); ++j)
          for (long k = 0; k < t.dim(2); ++k) {
            double g = n.grad(i, k);
            gt(i, j, k) += x(j) * g;
            gx(j) += t(i, j, k) * g;
          }
      return;
    }
    case Op::kSubBcastLast: {
      auto& gt = at(n.a).grad.data();
      Tensor& gx = at(n.b).grad;
      const auto& g = n.grad.data();
      long nl = gx.dim(0);
      long rows = static_cast<long>(gt.size()) / nl;
      for (long r = 0; r < rows; ++r)
        for (long k = 0; k < nl; ++k) {
          gt[static_cast<size_t>(r * nl + k)] += g[static_cast<size_t>(r * nl + k)];
          gx(k) -= g[static_cast<size_t>(r * nl + k)];
        }
      return;
    }
    case Op::kAffine: {
      long m = static_cast<long>(n.aux.size()) / 2;
      double s = 0.0;
      for (long k = 0; k < m; ++k) s += n.aux[static_cast<size_t>(k)] * n.grad(k);
      at(n.a).grad() += s;
      return;
    }
  }
}

}  // namespace carfollow::diff
