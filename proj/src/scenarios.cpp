#include "tvdnn/scenarios.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "tvdnn/riemann.hpp"

namespace tvdnn {

namespace {

// Reduce to [0, 1), snapping values within `tol` of the step locations so
// that shifted grid points land exactly on them (0.7 - 0.2 != 0.5 in binary).
double wrap_unit(double x, double tol = 1e-9) {
  double s = x - std::floor(x);
  if (std::abs(s - 0.5) < tol) return 0.5;
  if (s < tol || s > 1.0 - tol) return 0.0;
  return s;
}

Grid unit_periodic_grid(int n_t, double dt) {
  Grid g;
  g.n_x = 100;
  g.dx = 0.01;
  g.dt = dt;
  g.n_t = n_t;
  g.bc = BoundaryKind::periodic;
  return g;
}

void fill_single_sample(Scenario& s) {
  s.samples = {{s.exact_field(s.grid.t0), s.exact_field(s.grid.t_final())}};
}

}  // namespace

double step_profile(double x) {
  const double s = wrap_unit(x);
  if (s < 0.5) return 0.0;
  if (s == 0.5) return 0.5;
  return 1.0;
}

double heat_step(double x, double s, double nu) {
  if (s <= 0.0) return step_profile(x);
  const double pi = std::numbers::pi;
  double w = 0.5;
  for (int k = 1;; k += 2) {
    const double amp = 2.0 / (k * pi) * std::exp(-nu * (2.0 * pi * k) * (2.0 * pi * k) * s);
    if (amp < 1e-17) break;
    w -= amp * std::sin(2.0 * pi * k * x);
  }
  return w;
}

double burgers_top_hat(double x, double t) {
  if (t < 0.0 || t >= 0.5) throw ConfigError("burgers_top_hat: valid for 0 <= t < 0.5");
  const double s = x - std::floor(x);
  const double a = 0.375;
  if (t == 0.0) return (s >= a && s < 0.625) ? 1.0 : 0.0;
  if (s < a) return 0.0;
  if (s < a + t) return (s - a) / t;
  if (s < 0.625 + 0.5 * t) return 1.0;
  return 0.0;
}

Eigen::Vector3d conserved(double rho, double u, double p, double gamma) {
  return {rho, rho * u, p / (gamma - 1.0) + 0.5 * rho * u * u};
}

double pressure(const Eigen::Vector3d& q, double gamma) {
  return (gamma - 1.0) * (q(2) - 0.5 * q(1) * q(1) / q(0));
}

// ---------------------------------------------------------------------------

Field Scenario::exact_field(double t) const {
  Field f(components, grid.n_x);
  for (int i = 0; i < grid.n_x; ++i) f.col(i) = exact(grid.x(i), t);
  return f;
}

std::vector<NNSpec> Scenario::nn_specs(FluxKind kind) const {
  const int d = components;
  NNSpec f{d, n_hidden, d, init};
  switch (kind) {
    case FluxKind::tvd:
      return {f};
    case FluxKind::unconstrained:
      f.n_in = 2 * d;
      return {f};
    case FluxKind::tvd_generalized: {
      if (d != 1) throw ConfigError("scenario " + name + ": generalized flux is scalar only");
      const NNSpec nu{2, n_hidden, 1, init};
      return {f, nu, nu};
    }
  }
  throw ConfigError("unknown flux kind");
}

FluxConfig Scenario::flux_config(FluxKind kind) const {
  FluxConfig c;
  c.kind = kind;
  c.speed = speed;
  if (kind == FluxKind::tvd_generalized) {
    c.eps_r = kGeneralizedEpsR;
    c.nu_scale = nu;
  }
  return c;
}

Model Scenario::make_model(FluxKind kind, std::uint64_t seed) const {
  Model m;
  m.config = flux_config(kind);
  std::uint64_t k = 0;
  for (const NNSpec& s : nn_specs(kind)) {
    m.nets.push_back(nn_init(s, seed + 0x9E3779B97F4A7C15ULL * k++));
  }
  m.validate(components);
  return m;
}

nlohmann::json Scenario::manifest() const {
  nlohmann::json j;
  j["name"] = name;
  j["components"] = components;
  j["grid"] = {{"n_x", grid.n_x}, {"dx", grid.dx},       {"dt", grid.dt},
               {"n_t", grid.n_t}, {"bc", to_string(grid.bc)}, {"x0", grid.x0},
               {"t0", grid.t0},   {"t_final", grid.t_final()}};
  j["default_flux"] = to_string(flux_kind);
  j["speed_mode"] = to_string(speed);
  j["n_hidden"] = n_hidden;
  j["init"] = init == InitKind::xavier ? "xavier" : "xavier_zero_output";
  j["nu"] = nu;
  j["loss_weights"] = std::vector<double>(loss_weights.data(),
                                          loss_weights.data() + loss_weights.size());
  j["samples"] = samples.size();
  return j;
}

// ---------------------------------------------------------------------------

Scenario scenario_advection() {
  Scenario s;
  s.name = "advection";
  s.grid = unit_periodic_grid(80, 2.5e-3);
  s.loss_weights = Eigen::VectorXd::Ones(1);
  s.exact = [](double x, double t) {
    return Eigen::VectorXd::Constant(1, step_profile(x - t));
  };
  fill_single_sample(s);
  return s;
}

Scenario scenario_burgers() {
  Scenario s;
  s.name = "burgers";
  s.grid = unit_periodic_grid(80, 0.25 / 80);
  s.loss_weights = Eigen::VectorXd::Ones(1);
  s.exact = [](double x, double t) {
    return Eigen::VectorXd::Constant(1, burgers_top_hat(x, t));
  };
  fill_single_sample(s);
  return s;
}

Scenario scenario_euler_sod() {
  Scenario s;
  s.name = "euler_sod";
  s.components = 3;
  s.grid.n_x = 501;
  s.grid.dx = 2e-3;
  s.grid.dt = 1e-4;
  s.grid.n_t = 500;
  s.grid.bc = BoundaryKind::neumann;
  s.grid.t0 = 0.1;
  s.n_hidden = 50;
  s.init = InitKind::xavier_zero_output;
  s.loss_weights = Eigen::VectorXd::Ones(3);
  const ExactRiemann rp({1.0, 0.0, 1.0}, {0.125, 0.0, 0.1}, kGamma);
  s.exact = [rp](double x, double t) -> Eigen::VectorXd {
    Primitive w;
    if (t <= 0.0) {
      w = x < 0.5 ? Primitive{1.0, 0.0, 1.0} : Primitive{0.125, 0.0, 0.1};
    } else {
      w = rp.sample((x - 0.5) / t);
    }
    return conserved(w.rho, w.u, w.p);
  };
  fill_single_sample(s);
  return s;
}

Scenario scenario_antidiffusion() {
  Scenario s;
  s.name = "antidiffusion";
  s.grid = unit_periodic_grid(80, 2.5e-3);
  s.flux_kind = FluxKind::tvd_generalized;
  s.nu = 0.01;
  s.loss_weights = Eigen::VectorXd::Ones(1);
  const double tf = s.grid.t_final();
  const double nu = s.nu;
  // Transport at unit speed of a heat solution run backwards in time.
  s.exact = [tf, nu](double x, double t) {
    return Eigen::VectorXd::Constant(1, heat_step(x - t, tf - t, nu));
  };
  fill_single_sample(s);
  return s;
}

Scenario coarsened(const Scenario& s, int n_x, int n_t) {
  if (n_x < 4 || n_t < 0) throw ConfigError("coarsened: need n_x >= 4 and n_t >= 0");
  Scenario c = s;
  const double length = s.grid.n_x * s.grid.dx;
  c.grid.n_x = n_x;
  c.grid.dx = length / n_x;
  c.grid.dt = s.grid.dt * (c.grid.dx / s.grid.dx);
  c.grid.n_t = n_t;
  fill_single_sample(c);
  return c;
}

Scenario make_scenario(const std::string& name) {
  if (name == "advection") return scenario_advection();
  if (name == "burgers") return scenario_burgers();
  if (name == "euler_sod" || name == "sod" || name == "euler") return scenario_euler_sod();
  if (name == "antidiffusion" || name == "anti-diffusion") return scenario_antidiffusion();
  std::ostringstream os;
  os << "unknown scenario '" << name << "' (known:";
  for (const auto& n : scenario_names()) os << ' ' << n;
  os << ')';
  throw ConfigError(os.str());
}

std::vector<std::string> scenario_names() {
  return {"advection", "burgers", "euler_sod", "antidiffusion"};
}

}  // namespace tvdnn
