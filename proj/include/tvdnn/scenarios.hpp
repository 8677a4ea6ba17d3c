#pragma once

// The four 1D training problems: step advection, Burgers top-hat, Sod shock
// tube and anti-diffusion of a heat-smoothed step.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tvdnn/flux.hpp"
#include "tvdnn/grid.hpp"
#include "tvdnn/nn.hpp"

namespace tvdnn {

/// One training pair: initial field and the target at grid.t_final().
struct Sample {
  Field q0;
  Field target;
};

struct Scenario {
  std::string name;
  Grid grid;
  int components = 1;
  /// Flux kind used when none is requested.
  FluxKind flux_kind = FluxKind::tvd;
  SpeedMode speed = SpeedMode::one_norm;
  int n_hidden = 10;
  InitKind init = InitKind::xavier;
  /// Physical diffusivity behind the generalized flux's nu networks.
  double nu = 0.0;
  /// Diagonal loss weights, one per component.
  Eigen::VectorXd loss_weights;
  std::vector<Sample> samples;
  /// Exact solution at absolute time t, one value per component.
  std::function<Eigen::VectorXd(double x, double t)> exact;

  const Field& q0() const { return samples.front().q0; }
  const Field& exact_final() const { return samples.front().target; }
  double t_final() const { return grid.t_final(); }

  /// Exact field at absolute time t on the grid points.
  Field exact_field(double t) const;

  std::vector<NNSpec> nn_specs(FluxKind kind) const;
  FluxConfig flux_config(FluxKind kind) const;
  /// Freshly initialized model; network k is seeded from (seed, k).
  Model make_model(FluxKind kind, std::uint64_t seed) const;

  /// Constants for the run manifest.
  nlohmann::json manifest() const;
};

Scenario scenario_advection();
Scenario scenario_burgers();
Scenario scenario_euler_sod();
Scenario scenario_antidiffusion();

/// The same problem on `n_x` cells over the same domain and `n_t` steps, with
/// dt scaled with dx. Samples are rebuilt from the exact solution.
Scenario coarsened(const Scenario& s, int n_x, int n_t);

/// By name: advection, burgers, euler_sod (or sod), antidiffusion.
Scenario make_scenario(const std::string& name);
std::vector<std::string> scenario_names();

// ---- exact-solution pieces, exposed for tests ------------------------------

/// Step profile: 0 below 0.5, 0.5 at 0.5, 1 above, extended periodically.
double step_profile(double x);

/// Periodic heat-equation solution from the step at 1/2 after time s with
/// diffusivity nu (Fourier series, truncated once terms fall below 1e-17).
double heat_step(double x, double s, double nu);

/// Inviscid Burgers solution of the top-hat 1 on [0.375, 0.625), valid
/// until the rarefaction reaches the shock at t = 0.5.
double burgers_top_hat(double x, double t);

inline constexpr double kGamma = 1.4;

/// Conserved [rho, rho u, E] from a primitive triple.
Eigen::Vector3d conserved(double rho, double u, double p, double gamma = kGamma);
double pressure(const Eigen::Vector3d& q, double gamma = kGamma);

}  // namespace tvdnn
