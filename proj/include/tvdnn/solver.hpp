#pragma once

#include <functional>
#include <vector>

#include "tvdnn/autodiff.hpp"
#include "tvdnn/flux.hpp"
#include "tvdnn/grid.hpp"

namespace tvdnn {

enum class Stepper { forward_euler, rk4 };

std::string to_string(Stepper s);
Stepper stepper_from_string(const std::string& s);

/// Any |q| above this (or a NaN) marks a rollout as diverged.
inline constexpr double kDivergenceThreshold = 1e6;

/// RK4 stage weights.
inline constexpr double kRk4Weights[4] = {1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0};

// ---- right-hand side -------------------------------------------------------

struct RhsVars {
  ad::Var rhs;         // -(F_{i+1/2} - F_{i-1/2}) / dx, d x n_x
  FluxVars flux;
};

RhsVars record_rhs(const FluxConfig& cfg, const std::vector<NNVars>& nets, ad::Var q,
                   const Grid& grid);

// ---- steppers --------------------------------------------------------------

using TapedRhs = std::function<ad::Var(ad::Var)>;
using PlainRhs = std::function<Field(const Field&)>;

/// q + dt R(q).
ad::Var step_forward_euler(const TapedRhs& rhs, ad::Var q, double dt);
Field step_forward_euler(const PlainRhs& rhs, const Field& q, double dt);

/// Classical four-stage Runge-Kutta. `stages`, if given, receives the stage
/// states q^{n,0..3} at which R is evaluated.
ad::Var step_rk4(const TapedRhs& rhs, ad::Var q, double dt, std::vector<ad::Var>* stages = nullptr);
Field step_rk4(const PlainRhs& rhs, const Field& q, double dt, std::vector<Field>* stages = nullptr);

// ---- rollout ---------------------------------------------------------------

struct RolloutOptions {
  Stepper stepper = Stepper::forward_euler;
  /// Keep every `state_stride`-th state (the initial and final state always).
  int state_stride = 1;
  /// Keep the reconstructed face states of every flux evaluation.
  bool store_faces = false;
};

struct RolloutTrace {
  std::vector<Field> states;
  std::vector<int> state_steps;
  /// TV[q^n] for n = 0..steps_taken.
  std::vector<double> tv;
  /// Maximum wave speed of the flux evaluations advancing q^n, n = 0..steps_taken-1.
  std::vector<double> max_wave_speed;
  /// Face states per flux evaluation, when requested.
  std::vector<FaceStates> faces;
  int steps_taken = 0;
  bool diverged = false;
  int diverged_step = -1;

  const Field& final_state() const { return states.back(); }
};

bool is_diverged(const Field& q);

/// Plain (untaped gradient) rollout of `model` from q0 over grid.n_t steps.
RolloutTrace rollout(const Model& model, const Field& q0, const Grid& grid,
                     const RolloutOptions& opts = {});

/// TV[q] = sum_i ||q_{i+1} - q_i||_1; periodic grids include the wrap term.
double total_variation(const Field& q, BoundaryKind bc);

/// max over the trace of the recorded wave speeds. Throws on an empty trace.
double max_wave_speed_over_rollout(const RolloutTrace& trace);

}  // namespace tvdnn
