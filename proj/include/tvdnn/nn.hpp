#pragma once

// Gated feed-forward network
//
//   z1 = tanh(W0 y + b0)
//   z2 = tanh(W1 z1 + b1)
//   z3 = z2 .* g1,   g1 = tanh(W2 y + b2)
//   z4 = tanh(W3 z3 + b3)
//   z5 = z4 .* g2,   g2 = tanh(W4 y + b4)
//   NN(y) = W5 z5 + b5
//
// W0, W2, W4 are n_hidden x n_in, W1, W3 are n_hidden x n_hidden and W5 is
// n_out x n_hidden. The two gate products let the network represent cubic
// polynomials exactly when the activation is the identity.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tvdnn/autodiff.hpp"

namespace tvdnn {

enum class InitKind { xavier, xavier_zero_output };

/// `identity` replaces every tanh; used to build exact polynomial maps
/// (e.g. the identity flux) in tests and reference runs.
enum class Activation { tanh, identity };

struct NNSpec {
  int n_in = 1;
  int n_hidden = 10;
  int n_out = 1;
  InitKind init = InitKind::xavier;
  Activation activation = Activation::tanh;

  void validate() const;
  bool same_shape(const NNSpec& o) const {
    return n_in == o.n_in && n_hidden == o.n_hidden && n_out == o.n_out;
  }
};

struct NNParams {
  static constexpr int kLayers = 6;

  NNSpec spec;
  std::array<Eigen::MatrixXd, kLayers> W;
  std::array<Eigen::VectorXd, kLayers> b;

  /// Zero parameters of the given shape.
  static NNParams zeros(const NNSpec& spec);

  /// Throws ConfigError if any matrix disagrees with `spec`.
  void validate() const;
  bool all_finite() const;
  /// Total number of scalar parameters.
  Eigen::Index size() const;

  /// Layer-major order: W0, b0, W1, b1, ..., W5, b5 (matrices column-major).
  Eigen::VectorXd flatten() const;
  void unflatten(const Eigen::VectorXd& flat, Eigen::Index offset = 0);
};

/// Gradient with respect to NNParams, same layout.
using GradVector = NNParams;

/// Xavier-uniform weights (gain 1), zero biases; W5 zeroed as well for
/// InitKind::xavier_zero_output. Deterministic in `seed`.
NNParams nn_init(const NNSpec& spec, std::uint64_t seed);

Eigen::VectorXd nn_forward(const NNParams& params, const Eigen::VectorXd& y);

/// n_out x n_in Jacobian d NN / d y, by forward tangent propagation.
Eigen::MatrixXd nn_input_jacobian(const NNParams& params, const Eigen::VectorXd& y);

// ---- taped evaluation ------------------------------------------------------

/// Parameter leaves of one network on a tape.
struct NNVars {
  NNSpec spec;
  std::array<ad::Var, NNParams::kLayers> W;
  std::array<ad::Var, NNParams::kLayers> b;
};

/// Put `params` on `tape` as trainable leaves (or constants).
NNVars nn_leaves(ad::Tape& tape, const NNParams& params, bool trainable = true);

/// Read the adjoints of `vars` after a backward sweep.
GradVector nn_gradient(const ad::Tape& tape, const NNVars& vars);

/// Batched forward pass: y is n_in x B, result n_out x B. One fused node.
ad::Var nn_forward(const NNVars& net, ad::Var y);

struct NNTapeEval {
  ad::Var out;
  /// jacobian[j] = d out / d y_j, each n_out x B.
  std::vector<ad::Var> jacobian;
};

/// Forward pass plus the exact input Jacobian, both recorded on the tape so
/// the Jacobian itself can be differentiated with respect to the parameters.
/// One fused node, evaluated in column blocks with a hand-written reverse
/// sweep.
NNTapeEval nn_forward_with_jacobian(const NNVars& net, ad::Var y);

/// The same computation assembled from primitive tape ops. Slow; kept as the
/// reference the fused node is tested against.
NNTapeEval nn_forward_with_jacobian_reference(const NNVars& net, ad::Var y);

}  // namespace tvdnn
