#pragma once

// Losses, the CFL projection, optimizers and the projected-gradient training
// loop, plus the two gradient oracles (finite differences and the discrete
// RK4 adjoint).

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include "tvdnn/autodiff.hpp"
#include "tvdnn/flux.hpp"
#include "tvdnn/scenarios.hpp"
#include "tvdnn/solver.hpp"

namespace tvdnn {

struct Bounds {
  double lo = 0.0;
  double hi = 1.0;
};

// ---- losses ----------------------------------------------------------------

/// dx * sum_i sum_k w_k (q_ki - e_ki)^2. Empty weights mean all ones.
double loss_l2(const Field& q, const Field& exact, double dx,
               const Eigen::VectorXd& weights = {});
ad::Var loss_l2(ad::Var q, const Field& exact, double dx, const Eigen::VectorXd& weights = {});

/// dx * sum_i P(q_i) with P = (q - lo)^2 below lo, (q - hi)^2 above hi.
double bound_penalty(const Field& q, Bounds b, double dx);
ad::Var bound_penalty(ad::Var q, Bounds b, double dx);

struct LossOptions {
  Eigen::VectorXd weights;
  std::optional<Bounds> penalty;
};

// ---- projection ------------------------------------------------------------

struct ProjectionResult {
  NNParams params;
  /// 1 when the parameters were already feasible.
  double factor = 1.0;
  bool applied() const { return factor != 1.0; }
};

/// Rescales W5 by bound / max_a when max_a exceeds bound = cfl_max dx / dt.
ProjectionResult project(const NNParams& params, double max_a, double cfl_max, double dx,
                         double dt);

// ---- optimizers ------------------------------------------------------------

enum class OptimizerKind { rmsprop, adam };

std::string to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& s);

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::rmsprop;
  double base_lr = 1e-3;
  double rms_smoothing = 0.99;
  double eps = 1e-8;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double l2_lambda = 0.0;
  double cfl_max = 0.5;
  int n_iters = 1000;
  std::uint64_t seed = 1;
  std::optional<Bounds> penalty;
  Stepper stepper = Stepper::forward_euler;
  /// Stop once the recorded loss falls below this value.
  std::optional<double> stop_below;
  /// Re-evaluate the wave speed on the recorded face states after projecting.
  bool verify_projection = false;
  /// Worker threads for multi-sample scenarios.
  int jobs = 1;

  void validate() const;
};

struct OptimizerState {
  Eigen::VectorXd m;  // Adam first moment
  Eigen::VectorXd v;  // second moment
  long step = 0;
};

/// v <- s v + (1 - s) g^2;  theta <- theta - lr g / (sqrt(v) + eps).
void rmsprop_step(OptimizerState& state, Eigen::VectorXd& params, const Eigen::VectorXd& grads,
                  const TrainConfig& config);
/// Bias-corrected Adam; the L2 term adds lambda theta to the gradient first.
void adam_step(OptimizerState& state, Eigen::VectorXd& params, const Eigen::VectorXd& grads,
               const TrainConfig& config);

// ---- gradients -------------------------------------------------------------

enum class GradientMode {
  automatic,   // whole-rollout tape when it fits the memory budget
  whole_tape,  // one tape over every step
  stepwise,    // forward rollout, then one tape per step seeded with the adjoint
};

struct Evaluation {
  double loss = 0.0;
  double data_loss = 0.0;
  double penalty = 0.0;
  bool diverged = false;
  Eigen::VectorXd grad;  // empty when not requested or diverged
  RolloutTrace trace;
};

struct EvalOptions {
  Stepper stepper = Stepper::forward_euler;
  GradientMode mode = GradientMode::automatic;
  bool gradient = true;
  bool store_faces = false;
  /// Tape memory budget for GradientMode::automatic, in bytes.
  double memory_budget = 1.0e9;
  /// Receives statistics of the (last) tape, if set.
  ad::TapeStats* tape_stats = nullptr;
};

Evaluation evaluate(const Model& model, const Sample& sample, const Grid& grid,
                    const LossOptions& loss, const EvalOptions& opts);

/// Discrete-adjoint gradient of the RK4 rollout loss, built from per-stage
/// vector-Jacobian products of the right-hand side.
Eigen::VectorXd adjoint_gradient_rk4(const Model& model, const Sample& sample, const Grid& grid,
                                     const LossOptions& loss);

struct GradCheckResult {
  double max_rel_error = 0.0;
  int checked = 0;
  int masked = 0;  // components skipped as non-smooth
  int worst_index = -1;
};

/// Central differences on a random subset of `n_samples` parameters.
/// Components whose +-h perturbation changes the branch signature reported
/// by `signature` are masked; entries with |analytic| <= 1e-8 are skipped.
GradCheckResult grad_check(const std::function<double(const Eigen::VectorXd&)>& loss_fn,
                           const Eigen::VectorXd& theta, const Eigen::VectorXd& analytic,
                           double h, int n_samples, std::uint64_t seed,
                           const std::function<std::uint64_t(const Eigen::VectorXd&)>& signature = {});

/// Branch signature of a plain rollout (hash of every limiter/abs/max choice).
std::uint64_t rollout_signature(const Model& model, const Sample& sample, const Grid& grid,
                                Stepper stepper);

// ---- training loop ---------------------------------------------------------

struct IterationRecord {
  int iter = 0;
  double loss = 0.0;
  double penalty = 0.0;
  double max_wave_speed = 0.0;
  bool projected = false;
  double rescale_factor = 1.0;
  /// Wave speed re-evaluated after projection (NaN when not verified).
  double max_wave_speed_after = std::numeric_limits<double>::quiet_NaN();
  double bound = 0.0;
  double wall_time = 0.0;
  bool diverged = false;
};

struct TrainRecord {
  std::vector<IterationRecord> iterations;
  Model model;

  double initial_loss() const { return iterations.front().loss; }
  double final_loss() const { return iterations.back().loss; }
};

/// Called once per record row with the model after that row's update (the
/// unchanged model on the final row or a skipped one).
using IterationCallback = std::function<void(const IterationRecord&, const Model&)>;

/// Projected gradient descent. Row k of the record holds the loss of the
/// parameters before update k; the last row is the returned model.
TrainRecord train(const Scenario& scenario, Model model, const TrainConfig& config,
                  const IterationCallback& on_iteration = {},
                  GradientMode mode = GradientMode::automatic);

}  // namespace tvdnn
