#pragma once

// Reverse-mode automatic differentiation over dense matrices.
//
// Every node on the tape holds an Eigen matrix. Networks are evaluated with
// features along rows and samples (cell faces) along columns, so one node
// covers a whole grid sweep and the tape length grows with the number of time
// steps rather than with the number of cells.
//
// Non-smooth primitives use one-sided subgradients:
//   max(a, b), min(a, b) with a == b   -> gradient to the first argument
//   abs(x) at x == 0                   -> 0
//   minmod(r) at r == 1                -> the phi = 1 branch (zero slope)
// Every branch decision taken by a non-smooth primitive is folded into a
// running signature so callers can tell whether two evaluations took the
// same piecewise-smooth branch.

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace tvdnn {

/// Raised for inconsistent shapes, sizes or options.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when the reverse sweep meets a NaN produced in the forward pass.
class GradientError : public std::runtime_error {
 public:
  GradientError(const std::string& what, int node)
      : std::runtime_error(what), node_(node) {}
  int node() const { return node_; }

 private:
  int node_;
};

namespace ad {

using Matrix = Eigen::MatrixXd;
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

class Tape;

/// Handle to a node on a tape. Cheap to copy.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  /// Value of a 1x1 node.
  double scalar() const;

  Tape* tape() const { return tape_; }
  int index() const { return index_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int index) : tape_(tape), index_(index) {}

  Tape* tape_ = nullptr;
  int index_ = -1;
};

struct TapeStats {
  std::size_t nodes = 0;
  std::size_t stored_scalars = 0;
  double max_abs_adjoint = 0.0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that receives a gradient.
  Var variable(Matrix value);
  /// Leaf that does not.
  Var constant(Matrix value);

  /// Reverse sweep seeded with d(out)/d(out) = 1; `out` must be 1x1.
  void backward(Var out);
  /// Reverse sweep seeded with an arbitrary cotangent of `out`'s shape.
  void backward(Var out, const Matrix& seed);

  /// Adjoint of `v` after backward(); zeros if the sweep never reached it.
  Matrix grad(Var v) const;
  /// Drop every adjoint so backward() can be called again.
  void zero_grad();

  std::uint64_t branch_signature() const { return signature_; }
  void mix_branch(std::uint64_t bits);

  TapeStats stats() const;
  std::size_t size() const { return nodes_.size(); }
  /// Number of nodes visited by the last backward().
  std::size_t last_visited() const { return visited_; }
  void clear();

  // Op recording interface.
  Var record(Matrix value, const char* op, std::initializer_list<int> parents,
             Backward backward);
  Var record(Matrix value, const char* op, const std::vector<int>& parents,
             Backward backward);
  const Matrix& value(int index) const { return nodes_[index].value; }
  const Matrix& adjoint(int index) const { return nodes_[index].adjoint; }
  bool requires_grad(int index) const { return nodes_[index].requires_grad; }
  const char* op_name(int index) const { return nodes_[index].op; }

  template <typename Derived>
  void accumulate(int index, const Eigen::MatrixBase<Derived>& delta) {
    Node& n = nodes_[index];
    if (!n.requires_grad) return;
    if (n.adjoint.size() == 0) {
      n.adjoint = delta;
    } else {
      n.adjoint += delta;
    }
  }
  template <typename Derived>
  void accumulate(int index, const Eigen::ArrayBase<Derived>& delta) {
    accumulate(index, delta.matrix());
  }
  /// Adds `delta` into the block of the adjoint starting at (row, col).
  template <typename Derived>
  void accumulate_block(int index, Eigen::Index row, Eigen::Index col,
                        const Eigen::MatrixBase<Derived>& delta) {
    Node& n = nodes_[index];
    if (!n.requires_grad) return;
    if (n.adjoint.size() == 0) n.adjoint = Matrix::Zero(n.value.rows(), n.value.cols());
    n.adjoint.block(row, col, delta.rows(), delta.cols()) += delta;
  }

 private:
  struct Node {
    Matrix value;
    Matrix adjoint;
    const char* op = "";
    bool requires_grad = false;
    Backward backward;
  };

  void check_forward_values(int last) const;

  // deque: references to node values stay valid while recording.
  std::deque<Node> nodes_;
  std::uint64_t signature_ = 1469598103934665603ULL;
  std::size_t visited_ = 0;
};

// ---- element-wise arithmetic (operands must share a shape) ----------------
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
/// Element-wise (Hadamard) product, not a matrix product.
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator-(Var a);
Var operator*(double s, Var a);
Var operator*(Var a, double s);
Var operator+(Var a, double s);
Var operator-(Var a, double s);

Var tanh(Var a);
/// Element-wise tanh through the vectorized exp (Eigen's double tanh is
/// scalar); within a few ulp of std::tanh.
Matrix tanh_values(const Matrix& x);
Var square(Var a);
Var abs(Var a);
Var max(Var a, Var b);
Var min(Var a, Var b);
/// Element-wise `cond ? a : b`; `cond` is evaluated on forward values.
Var select(const Mask& cond, Var a, Var b);

// ---- linear algebra and reshaping ------------------------------------------
Var matmul(Var a, Var b);
/// Broadcast a 1x1, 1xC or Rx1 node to rows x cols.
Var broadcast_to(Var a, Eigen::Index rows, Eigen::Index cols);
/// x + b with the column vector b broadcast across the columns of x.
Var add_bias(Var x, Var b);
/// Sum of all entries -> 1x1.
Var sum(Var a);
/// Column sums -> 1 x cols.
Var col_sum(Var a);
Var row(Var a, Eigen::Index r);
Var vstack(const std::vector<Var>& parts);
Var hcat(Var a, Var b);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
/// out(:, k) = a(:, index[k]); backward scatter-adds.
Var gather_cols(Var a, const std::vector<Eigen::Index>& index);

// ---- limiter primitives ----------------------------------------------------
/// phi(r) = max(0, min(1, r)).
Var minmod(Var r);
/// (num) / (den + eps). When den + eps == 0 the ratio is the sentinel +inf
/// (num > 0), -inf (num < 0) or 0 (num == 0) and carries no gradient.
Var slope_ratio(Var num, Var den, double eps);
/// psi(r_i, r_{i+1}) = min(min(r_i, 1/r_i), min(r_{i+1}, 1/r_{i+1})) when
/// both ratios are positive, 0 otherwise.
Var psi_limiter(Var r_i, Var r_ip1);
/// Spectral radius of the d x d matrices whose column j is `jac_cols[j]`
/// (each d x F). Returns 1 x F. Throws std::runtime_error if an eigensolve
/// does not converge.
Var spectral_radius(const std::vector<Var>& jac_cols);

}  // namespace ad
}  // namespace tvdnn
