#include "tvdnn/autodiff.hpp"

#include <cmath>
#include <complex>
#include <limits>
#include <sstream>

#include <Eigen/Eigenvalues>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace tvdnn::ad {

namespace {

#if defined(__GLIBC__)
// Tape nodes are mostly a few hundred kB. glibc would serve each from a fresh
// mmap and pay page faults on every op; keep them on the heap instead.
const bool kHeapTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

Tape& tape_of(Var a) {
  if (!a.valid()) throw ConfigError("autodiff: operation on an empty Var");
  return *a.tape();
}

Tape& tape_of(Var a, Var b) {
  Tape& t = tape_of(a);
  if (b.tape() != &t) throw ConfigError("autodiff: operands live on different tapes");
  return t;
}

void require_same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    std::ostringstream os;
    os << "autodiff: shape mismatch in " << op << ": " << a.rows() << "x"
       << a.cols() << " vs " << b.rows() << "x" << b.cols();
    throw ConfigError(os.str());
  }
}

// Folds one bit per element into the tape signature.
void mix_mask(Tape& t, const Mask& m) {
  std::uint64_t word = 0;
  int n = 0;
  for (Eigen::Index k = 0; k < m.size(); ++k) {
    word = (word << 1) | static_cast<std::uint64_t>(m.data()[k]);
    if (++n == 64) {
      t.mix_branch(word);
      word = 0;
      n = 0;
    }
  }
  t.mix_branch(word ^ static_cast<std::uint64_t>(m.size()));
}

}  // namespace

const Matrix& Var::value() const {
  if (!valid()) throw ConfigError("autodiff: value() of an empty Var");
  return tape_->value(index_);
}

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ConfigError("autodiff: scalar() of a non-1x1 node");
  return v(0, 0);
}

Var Tape::variable(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.op = "variable";
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.op = "constant";
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Matrix value, const char* op, std::initializer_list<int> parents,
                 Backward backward) {
  return record(std::move(value), op, std::vector<int>(parents), std::move(backward));
}

Var Tape::record(Matrix value, const char* op, const std::vector<int>& parents,
                 Backward backward) {
  Node n;
  n.value = std::move(value);
  n.op = op;
  for (int p : parents) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::mix_branch(std::uint64_t bits) {
  signature_ ^= bits + 0x9e3779b97f4a7c15ULL + (signature_ << 6) + (signature_ >> 2);
  signature_ *= 1099511628211ULL;
}

void Tape::check_forward_values(int last) const {
  for (int k = 0; k <= last; ++k) {
    if (nodes_[k].value.hasNaN()) {
      std::ostringstream os;
      os << "autodiff: NaN in forward value of node " << k << " ("
         << nodes_[k].op << ")";
      throw GradientError(os.str(), k);
    }
  }
}

void Tape::backward(Var out) {
  if (out.value().size() != 1) {
    throw ConfigError("autodiff: backward(out) needs a 1x1 output; pass a seed");
  }
  backward(out, Matrix::Ones(1, 1));
}

void Tape::backward(Var out, const Matrix& seed) {
  if (out.tape() != this) throw ConfigError("autodiff: backward on a foreign Var");
  const int last = out.index();
  if (seed.rows() != value(last).rows() || seed.cols() != value(last).cols()) {
    throw ConfigError("autodiff: backward seed shape mismatch");
  }
  check_forward_values(last);
  accumulate(last, seed);
  visited_ = 0;
  for (int k = last; k >= 0; --k) {
    Node& n = nodes_[k];
    if (!n.requires_grad || n.adjoint.size() == 0) continue;
    ++visited_;
    if (n.backward) n.backward(*this, k);
  }
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[v.index()];
  if (n.adjoint.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.adjoint;
}

void Tape::zero_grad() {
  for (Node& n : nodes_) n.adjoint.resize(0, 0);
}

TapeStats Tape::stats() const {
  TapeStats s;
  s.nodes = nodes_.size();
  for (const Node& n : nodes_) {
    s.stored_scalars += static_cast<std::size_t>(n.value.size());
    if (n.adjoint.size() > 0) {
      s.max_abs_adjoint = std::max(s.max_abs_adjoint, n.adjoint.cwiseAbs().maxCoeff());
    }
  }
  return s;
}

void Tape::clear() {
  nodes_.clear();
  visited_ = 0;
}

// ---------------------------------------------------------------------------

Var operator+(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "+");
  const int ia = a.index(), ib = b.index();
  return t.record(a.value() + b.value(), "add", {ia, ib}, [ia, ib](Tape& t, int self) {
    t.accumulate(ia, t.adjoint(self));
    t.accumulate(ib, t.adjoint(self));
  });
}

Var operator-(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "-");
  const int ia = a.index(), ib = b.index();
  return t.record(a.value() - b.value(), "sub", {ia, ib}, [ia, ib](Tape& t, int self) {
    t.accumulate(ia, t.adjoint(self));
    t.accumulate(ib, -t.adjoint(self));
  });
}

Var operator*(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "*");
  const int ia = a.index(), ib = b.index();
  return t.record(a.value().cwiseProduct(b.value()), "mul", {ia, ib},
                  [ia, ib](Tape& t, int self) {
                    t.accumulate(ia, t.adjoint(self).cwiseProduct(t.value(ib)));
                    t.accumulate(ib, t.adjoint(self).cwiseProduct(t.value(ia)));
                  });
}

Var operator/(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "/");
  const int ia = a.index(), ib = b.index();
  return t.record(a.value().cwiseQuotient(b.value()), "div", {ia, ib},
                  [ia, ib](Tape& t, int self) {
                    const auto g = t.adjoint(self).array();
                    const auto bv = t.value(ib).array();
                    t.accumulate(ia, g / bv);
                    t.accumulate(ib, -g * t.value(self).array() / bv);
                  });
}

Var operator-(Var a) { return -1.0 * a; }

Var operator*(double s, Var a) {
  Tape& t = tape_of(a);
  const int ia = a.index();
  return t.record(s * a.value(), "scale", {ia},
                  [ia, s](Tape& t, int self) { t.accumulate(ia, s * t.adjoint(self)); });
}

Var operator*(Var a, double s) { return s * a; }

Var operator+(Var a, double s) {
  Tape& t = tape_of(a);
  const int ia = a.index();
  return t.record((a.value().array() + s).matrix(), "shift", {ia},
                  [ia](Tape& t, int self) { t.accumulate(ia, t.adjoint(self)); });
}

Var operator-(Var a, double s) { return a + (-s); }

Matrix tanh_values(const Matrix& x) {
  // Padded to whole packets: every entry goes through the same vectorized
  // exp, so equal inputs give equal outputs wherever they sit in the matrix.
  const Eigen::Index n = x.size();
  Eigen::ArrayXd a = Eigen::ArrayXd::Zero((n + 7) / 8 * 8);
  a.head(n) = Eigen::Map<const Eigen::ArrayXd>(x.data(), n);
  // 1 - 2 / (e^{2x} + 1) cancels for small |x|; use the series to x^15 there.
  const Eigen::ArrayXd big = 1.0 - 2.0 / ((2.0 * a.min(40.0).max(-40.0)).exp() + 1.0);
  const Eigen::ArrayXd x2 = a.square();
  const Eigen::ArrayXd small =
      a * (1.0 + x2 * (-1.0 / 3.0 + x2 * (2.0 / 15.0 + x2 * (-17.0 / 315.0 +
           x2 * (62.0 / 2835.0 + x2 * (-1382.0 / 155925.0 + x2 * (21844.0 / 6081075.0 +
           x2 * (-929569.0 / 638512875.0))))))));
  Matrix out(x.rows(), x.cols());
  Eigen::Map<Eigen::ArrayXd>(out.data(), n) = (a.abs() < 0.1).select(small, big).head(n);
  return out;
}

Var tanh(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.index();
  return t.record(tanh_values(a.value()), "tanh", {ia}, [ia](Tape& t, int self) {
    const auto y = t.value(self).array();
    t.accumulate(ia, t.adjoint(self).array() * (1.0 - y * y));
  });
}

Var square(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.index();
  return t.record(a.value().array().square().matrix(), "square", {ia},
                  [ia](Tape& t, int self) {
                    t.accumulate(ia, 2.0 * t.adjoint(self).array() * t.value(ia).array());
                  });
}

Var abs(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.index();
  const Mask pos = a.value().array() > 0.0;
  const Mask neg = a.value().array() < 0.0;
  mix_mask(t, pos);
  mix_mask(t, neg);
  return t.record(a.value().cwiseAbs(), "abs", {ia}, [ia](Tape& t, int self) {
    const auto x = t.value(ia).array();
    const Eigen::ArrayXXd sgn = (x > 0.0).cast<double>() - (x < 0.0).cast<double>();
    t.accumulate(ia, t.adjoint(self).array() * sgn);
  });
}

Var max(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "max");
  const Mask first = a.value().array() >= b.value().array();
  mix_mask(t, first);
  const int ia = a.index(), ib = b.index();
  Matrix v = first.select(a.value(), b.value());
  return t.record(std::move(v), "max", {ia, ib}, [ia, ib, first](Tape& t, int self) {
    const auto& g = t.adjoint(self);
    t.accumulate(ia, first.select(g, Matrix::Zero(g.rows(), g.cols())));
    t.accumulate(ib, first.select(Matrix::Zero(g.rows(), g.cols()), g));
  });
}

Var min(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "min");
  const Mask first = a.value().array() <= b.value().array();
  mix_mask(t, first);
  const int ia = a.index(), ib = b.index();
  Matrix v = first.select(a.value(), b.value());
  return t.record(std::move(v), "min", {ia, ib}, [ia, ib, first](Tape& t, int self) {
    const auto& g = t.adjoint(self);
    t.accumulate(ia, first.select(g, Matrix::Zero(g.rows(), g.cols())));
    t.accumulate(ib, first.select(Matrix::Zero(g.rows(), g.cols()), g));
  });
}

Var select(const Mask& cond, Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "select");
  if (cond.rows() != a.rows() || cond.cols() != a.cols()) {
    throw ConfigError("autodiff: select mask shape mismatch");
  }
  mix_mask(t, cond);
  const int ia = a.index(), ib = b.index();
  Matrix v = cond.select(a.value(), b.value());
  return t.record(std::move(v), "select", {ia, ib}, [ia, ib, cond](Tape& t, int self) {
    const auto& g = t.adjoint(self);
    t.accumulate(ia, cond.select(g, Matrix::Zero(g.rows(), g.cols())));
    t.accumulate(ib, cond.select(Matrix::Zero(g.rows(), g.cols()), g));
  });
}

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  if (a.cols() != b.rows()) {
    std::ostringstream os;
    os << "autodiff: matmul inner dimension mismatch: " << a.rows() << "x" << a.cols()
       << " * " << b.rows() << "x" << b.cols();
    throw ConfigError(os.str());
  }
  const int ia = a.index(), ib = b.index();
  Matrix v = a.value() * b.value();
  return t.record(std::move(v), "matmul", {ia, ib}, [ia, ib](Tape& t, int self) {
    const auto& g = t.adjoint(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

Var broadcast_to(Var a, Eigen::Index rows, Eigen::Index cols) {
  Tape& t = tape_of(a);
  const int ia = a.index();
  const Matrix& x = a.value();
  if (x.rows() == rows && x.cols() == cols) return a;
  Matrix v;
  int kind;
  if (x.size() == 1) {
    v = Matrix::Constant(rows, cols, x(0, 0));
    kind = 0;
  } else if (x.rows() == 1 && x.cols() == cols) {
    v = x.replicate(rows, 1);
    kind = 1;
  } else if (x.cols() == 1 && x.rows() == rows) {
    v = x.replicate(1, cols);
    kind = 2;
  } else {
    throw ConfigError("autodiff: cannot broadcast node to requested shape");
  }
  return t.record(std::move(v), "broadcast", {ia}, [ia, kind](Tape& t, int self) {
    const auto& g = t.adjoint(self);
    if (kind == 0) {
      t.accumulate(ia, Matrix::Constant(1, 1, g.sum()));
    } else if (kind == 1) {
      t.accumulate(ia, g.colwise().sum());
    } else {
      t.accumulate(ia, g.rowwise().sum());
    }
  });
}

Var add_bias(Var x, Var b) {
  Tape& t = tape_of(x, b);
  if (b.cols() != 1 || b.rows() != x.rows()) {
    throw ConfigError("autodiff: add_bias needs a column vector matching rows");
  }
  const int ix = x.index(), ib = b.index();
  Matrix v = x.value().colwise() + b.value().col(0);
  return t.record(std::move(v), "add_bias", {ix, ib}, [ix, ib](Tape& t, int self) {
    const auto& g = t.adjoint(self);
    t.accumulate(ix, g);
    t.accumulate(ib, g.rowwise().sum());
  });
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.index();
  return t.record(Matrix::Constant(1, 1, a.value().sum()), "sum", {ia},
                  [ia](Tape& t, int self) {
                    const Matrix& x = t.value(ia);
                    t.accumulate(ia, Matrix::Constant(x.rows(), x.cols(), t.adjoint(self)(0, 0)));
                  });
}

Var col_sum(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.index();
  const Eigen::Index r = a.rows();
  return t.record(a.value().colwise().sum(), "col_sum", {ia}, [ia, r](Tape& t, int self) {
    t.accumulate(ia, t.adjoint(self).replicate(r, 1));
  });
}

Var row(Var a, Eigen::Index r) {
  Tape& t = tape_of(a);
  if (r < 0 || r >= a.rows()) throw ConfigError("autodiff: row index out of range");
  const int ia = a.index();
  return t.record(a.value().row(r), "row", {ia}, [ia, r](Tape& t, int self) {
    const Matrix& x = t.value(ia);
    Matrix g = Matrix::Zero(x.rows(), x.cols());
    g.row(r) = t.adjoint(self);
    t.accumulate(ia, g);
  });
}

Var vstack(const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("autodiff: vstack of nothing");
  if (parts.size() == 1) return parts.front();
  Tape& t = tape_of(parts.front());
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const Var& p : parts) {
    if (p.tape() != &t) throw ConfigError("autodiff: vstack across tapes");
    if (p.cols() != cols) throw ConfigError("autodiff: vstack column mismatch");
    rows += p.rows();
  }
  Matrix v(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> layout;
  Eigen::Index offset = 0;
  for (const Var& p : parts) {
    v.middleRows(offset, p.rows()) = p.value();
    layout.emplace_back(p.index(), offset);
    offset += p.rows();
  }
  std::vector<int> parents;
  for (const auto& [idx, off] : layout) parents.push_back(idx);
  return t.record(std::move(v), "vstack", parents, [layout](Tape& t, int self) {
    for (const auto& [idx, off] : layout) {
      t.accumulate(idx, t.adjoint(self).middleRows(off, t.value(idx).rows()));
    }
  });
}

Var hcat(Var a, Var b) {
  Tape& t = tape_of(a, b);
  if (a.rows() != b.rows()) throw ConfigError("autodiff: hcat row mismatch");
  const int ia = a.index(), ib = b.index();
  const Eigen::Index ca = a.cols(), cb = b.cols();
  Matrix v(a.rows(), ca + cb);
  v << a.value(), b.value();
  return t.record(std::move(v), "hcat", {ia, ib}, [ia, ib, ca, cb](Tape& t, int self) {
    t.accumulate(ia, t.adjoint(self).leftCols(ca));
    t.accumulate(ib, t.adjoint(self).rightCols(cb));
  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  Tape& t = tape_of(a);
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw ConfigError("autodiff: slice_cols out of range");
  }
  const int ia = a.index();
  return t.record(a.value().middleCols(start, count), "slice_cols", {ia},
                  [ia, start](Tape& t, int self) {
                    t.accumulate_block(ia, 0, start, t.adjoint(self));
                  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  Tape& t = tape_of(a);
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw ConfigError("autodiff: slice_rows out of range");
  }
  const int ia = a.index();
  return t.record(a.value().middleRows(start, count), "slice_rows", {ia},
                  [ia, start](Tape& t, int self) {
                    t.accumulate_block(ia, start, 0, t.adjoint(self));
                  });
}

Var gather_cols(Var a, const std::vector<Eigen::Index>& index) {
  Tape& t = tape_of(a);
  const Matrix& x = a.value();
  Matrix v(x.rows(), static_cast<Eigen::Index>(index.size()));
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] < 0 || index[k] >= x.cols()) {
      throw ConfigError("autodiff: gather_cols index out of range");
    }
    v.col(static_cast<Eigen::Index>(k)) = x.col(index[k]);
  }
  const int ia = a.index();
  return t.record(std::move(v), "gather_cols", {ia}, [ia, index](Tape& t, int self) {
    const Matrix& x = t.value(ia);
    Matrix g = Matrix::Zero(x.rows(), x.cols());
    const Matrix& gs = t.adjoint(self);
    for (std::size_t k = 0; k < index.size(); ++k) {
      g.col(index[k]) += gs.col(static_cast<Eigen::Index>(k));
    }
    t.accumulate(ia, g);
  });
}

// ---------------------------------------------------------------------------

Var minmod(Var r) {
  Tape& t = tape_of(r);
  const auto x = r.value().array();
  // Interior branch only where 0 < r < 1; r == 1 takes the phi = 1 branch and
  // r == 0 the phi = 0 branch.
  const Mask inner = (x > 0.0) && (x < 1.0);
  const Mask upper = x >= 1.0;
  mix_mask(t, inner);
  mix_mask(t, upper);
  Matrix v = upper.select(Matrix::Ones(x.rows(), x.cols()),
                          inner.select(r.value(), Matrix::Zero(x.rows(), x.cols())));
  const int ir = r.index();
  return t.record(std::move(v), "minmod", {ir}, [ir, inner](Tape& t, int self) {
    const auto& g = t.adjoint(self);
    t.accumulate(ir, inner.select(g, Matrix::Zero(g.rows(), g.cols())));
  });
}

Var slope_ratio(Var num, Var den, double eps) {
  Tape& t = tape_of(num, den);
  require_same_shape(num, den, "slope_ratio");
  const auto n = num.value().array();
  const Eigen::ArrayXXd d = den.value().array() + eps;
  const Mask ok = d != 0.0;
  mix_mask(t, ok);
  constexpr double inf = std::numeric_limits<double>::infinity();
  Matrix v(n.rows(), n.cols());
  for (Eigen::Index k = 0; k < v.size(); ++k) {
    if (ok.data()[k]) {
      v.data()[k] = n.data()[k] / d.data()[k];
    } else {
      const double nk = n.data()[k];
      v.data()[k] = nk > 0.0 ? inf : (nk < 0.0 ? -inf : 0.0);
    }
  }
  const int in = num.index(), id = den.index();
  return t.record(std::move(v), "slope_ratio", {in, id}, [in, id, eps, ok](Tape& t, int self) {
    const auto g = t.adjoint(self).array();
    const Eigen::ArrayXXd d = t.value(id).array() + eps;
    // Only where the adjoint is nonzero: r / d overflows for tiny d, and a
    // limiter-blocked zero adjoint times inf would give NaN.
    const Mask live = ok && (g != 0.0);
    const Eigen::ArrayXXd inv = live.select(1.0 / d, 0.0);
    const Eigen::ArrayXXd r = live.select(t.value(self).array(), 0.0);
    t.accumulate(in, live.select(g * inv, 0.0));
    t.accumulate(id, live.select(-g * r * inv, 0.0));
  });
}

Var psi_limiter(Var r_i, Var r_ip1) {
  Tape& t = tape_of(r_i, r_ip1);
  require_same_shape(r_i, r_ip1, "psi_limiter");
  const auto a = r_i.value().array();
  const auto b = r_ip1.value().array();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  // m(r) = min(r, 1/r) for r > 0; ties go to r.
  const Mask active = (a > 0.0) && (b > 0.0);
  const Mask a_direct = a <= 1.0;
  const Mask b_direct = b <= 1.0;
  const Eigen::ArrayXXd ma = a_direct.select(a, 1.0 / a);
  const Eigen::ArrayXXd mb = b_direct.select(b, 1.0 / b);
  const Mask take_a = ma <= mb;
  mix_mask(t, active);
  mix_mask(t, a_direct);
  mix_mask(t, b_direct);
  mix_mask(t, take_a);
  Matrix v = active.select(take_a.select(ma, mb), Eigen::ArrayXXd::Zero(rows, cols)).matrix();
  const int ia = r_i.index(), ib = r_ip1.index();
  return t.record(std::move(v), "psi", {ia, ib},
                  [ia, ib, active, a_direct, b_direct, take_a](Tape& t, int self) {
                    const auto g = t.adjoint(self).array();
                    const auto a = t.value(ia).array();
                    const auto b = t.value(ib).array();
                    const Eigen::ArrayXXd da = a_direct.select(1.0 + 0.0 * a, -1.0 / (a * a));
                    const Eigen::ArrayXXd db = b_direct.select(1.0 + 0.0 * b, -1.0 / (b * b));
                    const Eigen::ArrayXXd zero = Eigen::ArrayXXd::Zero(g.rows(), g.cols());
                    const Eigen::ArrayXXd ga = (active && take_a).select(g * da, zero);
                    const Eigen::ArrayXXd gb = (active && !take_a).select(g * db, zero);
                    t.accumulate(ia, ga);
                    t.accumulate(ib, gb);
                  });
}

Var spectral_radius(const std::vector<Var>& jac_cols) {
  if (jac_cols.empty()) throw ConfigError("autodiff: spectral_radius of nothing");
  Tape& t = tape_of(jac_cols.front());
  const Eigen::Index d = static_cast<Eigen::Index>(jac_cols.size());
  const Eigen::Index faces = jac_cols.front().cols();
  for (const Var& c : jac_cols) {
    if (c.tape() != &t || c.rows() != d || c.cols() != faces) {
      throw ConfigError("autodiff: spectral_radius needs d columns of shape d x F");
    }
  }
  Matrix v(1, faces);
  // sensitivity(f)(i, j) = d sigma / d A_ij for face f
  std::vector<Matrix> sens(static_cast<std::size_t>(faces));
  Matrix a(d, d);
  for (Eigen::Index f = 0; f < faces; ++f) {
    for (Eigen::Index j = 0; j < d; ++j) a.col(j) = jac_cols[j].value().col(f);
    Eigen::EigenSolver<Matrix> right(a, true);
    Eigen::EigenSolver<Matrix> left(a.transpose(), true);
    if (right.info() != Eigen::Success || left.info() != Eigen::Success) {
      throw std::runtime_error("spectral_radius: eigensolve did not converge");
    }
    const auto lam = right.eigenvalues();
    Eigen::Index k = 0;
    for (Eigen::Index m = 1; m < d; ++m) {
      if (std::abs(lam(m)) > std::abs(lam(k))) k = m;
    }
    const std::complex<double> lk = lam(k);
    v(0, f) = std::abs(lk);
    Matrix s = Matrix::Zero(d, d);
    if (std::abs(lk) > 0.0) {
      const auto lam_l = left.eigenvalues();
      Eigen::Index kl = 0;
      for (Eigen::Index m = 1; m < d; ++m) {
        if (std::abs(lam_l(m) - lk) < std::abs(lam_l(kl) - lk)) kl = m;
      }
      const Eigen::VectorXcd vr = right.eigenvectors().col(k);
      const Eigen::VectorXcd ul = left.eigenvectors().col(kl);
      const std::complex<double> norm = ul.transpose() * vr;
      if (std::abs(norm) > 0.0) {
        const std::complex<double> phase = std::conj(lk) / std::abs(lk);
        for (Eigen::Index i = 0; i < d; ++i) {
          for (Eigen::Index j = 0; j < d; ++j) {
            s(i, j) = std::real(phase * ul(i) * vr(j) / norm);
          }
        }
      }
    }
    sens[static_cast<std::size_t>(f)] = std::move(s);
  }
  std::vector<int> idx;
  for (const Var& c : jac_cols) idx.push_back(c.index());
  return t.record(std::move(v), "spectral_radius", idx,
                  [idx, sens, d](Tape& t, int self) {
                    const Matrix& g = t.adjoint(self);
                    for (Eigen::Index j = 0; j < d; ++j) {
                      Matrix gj(d, g.cols());
                      for (Eigen::Index f = 0; f < g.cols(); ++f) {
                        gj.col(f) = g(0, f) * sens[static_cast<std::size_t>(f)].col(j);
                      }
                      t.accumulate(idx[static_cast<std::size_t>(j)], gj);
                    }
                  });
}

}  // namespace tvdnn::ad
