#include "tvdnn/solver.hpp"

#include <algorithm>
#include <cmath>

namespace tvdnn {

std::string to_string(Stepper s) { return s == Stepper::forward_euler ? "euler" : "rk4"; }

Stepper stepper_from_string(const std::string& s) {
  if (s == "euler" || s == "forward_euler") return Stepper::forward_euler;
  if (s == "rk4") return Stepper::rk4;
  throw ConfigError("unknown stepper '" + s + "'");
}

RhsVars record_rhs(const FluxConfig& cfg, const std::vector<NNVars>& nets, ad::Var q,
                   const Grid& grid) {
  if (q.cols() != grid.n_x) throw ConfigError("rhs: field width does not match the grid");
  RhsVars out;
  out.flux = face_flux(cfg, nets, q, grid);
  const Eigen::Index n = q.cols();
  const ad::Var div = ad::slice_cols(out.flux.flux, 1, n) - ad::slice_cols(out.flux.flux, 0, n);
  out.rhs = (-1.0 / grid.dx) * div;
  return out;
}

ad::Var step_forward_euler(const TapedRhs& rhs, ad::Var q, double dt) {
  return q + dt * rhs(q);
}

Field step_forward_euler(const PlainRhs& rhs, const Field& q, double dt) {
  return q + dt * rhs(q);
}

ad::Var step_rk4(const TapedRhs& rhs, ad::Var q, double dt, std::vector<ad::Var>* stages) {
  const ad::Var k1 = rhs(q);
  const ad::Var q1 = q + (0.5 * dt) * k1;
  const ad::Var k2 = rhs(q1);
  const ad::Var q2 = q + (0.5 * dt) * k2;
  const ad::Var k3 = rhs(q2);
  const ad::Var q3 = q + dt * k3;
  const ad::Var k4 = rhs(q3);
  if (stages) *stages = {q, q1, q2, q3};
  const ad::Var incr = kRk4Weights[0] * k1 + kRk4Weights[1] * k2 + kRk4Weights[2] * k3 +
                       kRk4Weights[3] * k4;
  return q + dt * incr;
}

Field step_rk4(const PlainRhs& rhs, const Field& q, double dt, std::vector<Field>* stages) {
  const Field k1 = rhs(q);
  const Field q1 = q + (0.5 * dt) * k1;
  const Field k2 = rhs(q1);
  const Field q2 = q + (0.5 * dt) * k2;
  const Field k3 = rhs(q2);
  const Field q3 = q + dt * k3;
  const Field k4 = rhs(q3);
  if (stages) *stages = {q, q1, q2, q3};
  const Field incr = kRk4Weights[0] * k1 + kRk4Weights[1] * k2 + kRk4Weights[2] * k3 +
                     kRk4Weights[3] * k4;
  return q + dt * incr;
}

bool is_diverged(const Field& q) {
  return !q.allFinite() || q.cwiseAbs().maxCoeff() > kDivergenceThreshold;
}

RolloutTrace rollout(const Model& model, const Field& q0, const Grid& grid,
                     const RolloutOptions& opts) {
  grid.validate();
  model.validate(static_cast<int>(q0.rows()));
  if (q0.cols() != grid.n_x) throw ConfigError("rollout: initial field does not match the grid");
  if (opts.state_stride < 1) throw ConfigError("rollout: state_stride must be >= 1");

  RolloutTrace trace;
  trace.states.push_back(q0);
  trace.state_steps.push_back(0);
  trace.tv.push_back(total_variation(q0, grid.bc));

  Field q = q0;
  for (int n = 1; n <= grid.n_t; ++n) {
    ad::Tape tape;
    const std::vector<NNVars> nets = model_leaves(tape, model, false);
    double speed = 0.0;
    const TapedRhs rhs = [&](ad::Var state) {
      RhsVars r = record_rhs(model.config, nets, state, grid);
      if (r.flux.wave_speed.valid()) {
        speed = std::max(speed, r.flux.wave_speed.value().maxCoeff());
        if (opts.store_faces) {
          trace.faces.push_back({r.flux.q_plus.value(), r.flux.q_minus.value()});
        }
      }
      return r.rhs;
    };
    const ad::Var qv = tape.constant(q);
    const ad::Var next = opts.stepper == Stepper::forward_euler
                             ? step_forward_euler(rhs, qv, grid.dt)
                             : step_rk4(rhs, qv, grid.dt);
    trace.max_wave_speed.push_back(speed);
    q = next.value();
    trace.steps_taken = n;
    if (is_diverged(q)) {
      trace.diverged = true;
      trace.diverged_step = n;
      trace.states.push_back(q);
      trace.state_steps.push_back(n);
      break;
    }
    trace.tv.push_back(total_variation(q, grid.bc));
    if (n % opts.state_stride == 0 || n == grid.n_t) {
      trace.states.push_back(q);
      trace.state_steps.push_back(n);
    }
  }
  return trace;
}

double total_variation(const Field& q, BoundaryKind bc) {
  const Eigen::Index n = q.cols();
  if (n < 2) return 0.0;
  double tv = (q.rightCols(n - 1) - q.leftCols(n - 1)).cwiseAbs().sum();
  if (bc == BoundaryKind::periodic) tv += (q.col(0) - q.col(n - 1)).cwiseAbs().sum();
  return tv;
}

double max_wave_speed_over_rollout(const RolloutTrace& trace) {
  if (trace.max_wave_speed.empty()) {
    throw ConfigError("max_wave_speed_over_rollout: trace has no flux evaluations");
  }
  return *std::max_element(trace.max_wave_speed.begin(), trace.max_wave_speed.end());
}

}  // namespace tvdnn
