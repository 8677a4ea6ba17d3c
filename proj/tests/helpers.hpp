#pragma once
// Small fixtures shared by the unit tests.

#include <cmath>
#include <random>
#include <vector>

#include "tvdnn/flux.hpp"
#include "tvdnn/nn.hpp"
#include "tvdnn/solver.hpp"

namespace testutil {

// Xavier weights plus random biases, so no structural zeros hide bugs.
inline tvdnn::NNParams random_params(const tvdnn::NNSpec& spec, std::uint64_t seed,
                                     double bias_scale = 0.5) {
  tvdnn::NNParams p = tvdnn::nn_init(spec, seed);
  std::mt19937_64 rng(seed ^ 0xB1A5ULL);
  std::uniform_real_distribution<double> u(-bias_scale, bias_scale);
  for (auto& b : p.b) {
    for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = u(rng);
  }
  return p;
}

inline Eigen::MatrixXd random_field(std::mt19937_64& rng, int rows, int cols, double lo = 0.0,
                                    double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Eigen::MatrixXd q(rows, cols);
  for (Eigen::Index j = 0; j < q.cols(); ++j) {
    for (Eigen::Index i = 0; i < q.rows(); ++i) q(i, j) = u(rng);
  }
  return q;
}

inline std::vector<double> to_std(const Eigen::VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

inline std::vector<double> row_std(const Eigen::MatrixXd& q, int r = 0) {
  std::vector<double> v(q.cols());
  for (Eigen::Index i = 0; i < q.cols(); ++i) v[i] = q(r, i);
  return v;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300});
}

inline double max_rel(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double scale = std::max(b.cwiseAbs().maxCoeff(), 1e-300);
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

inline tvdnn::Grid periodic_grid(int n_x, double dx, double dt, int n_t) {
  tvdnn::Grid g;
  g.n_x = n_x;
  g.dx = dx;
  g.dt = dt;
  g.n_t = n_t;
  g.bc = tvdnn::BoundaryKind::periodic;
  return g;
}

inline tvdnn::Model tvd_model(const tvdnn::NNParams& f) {
  tvdnn::Model m;
  m.config.kind = tvdnn::FluxKind::tvd;
  m.nets = {f};
  return m;
}

// Scale W5 until the rollout's own maximum wave speed respects the CFL
// bound (the rollout changes with the parameters, so iterate).
inline tvdnn::Model make_feasible(tvdnn::Model m, const Eigen::MatrixXd& q0,
                                  const tvdnn::Grid& g, double cfl_max = 0.5) {
  const double bound = cfl_max * g.dx / g.dt;
  for (int it = 0; it < 50; ++it) {
    const tvdnn::RolloutTrace tr = tvdnn::rollout(m, q0, g);
    const double a = tvdnn::max_wave_speed_over_rollout(tr);
    if (a <= bound) return m;
    m.nets[0].W[5] *= bound / a * 0.999;
  }
  return m;
}

}  // namespace testutil
