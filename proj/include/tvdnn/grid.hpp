#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

namespace tvdnn {

enum class BoundaryKind { periodic, neumann };

/// Cell averages, one row per conserved component, one column per cell.
using Field = Eigen::MatrixXd;

/// Uniform 1D grid with cell centres x_i = x0 + i dx.
struct Grid {
  int n_x = 100;
  double dx = 0.01;
  double dt = 2.5e-3;
  int n_t = 80;
  BoundaryKind bc = BoundaryKind::periodic;
  double x0 = 0.0;
  double t0 = 0.0;

  double x(int i) const { return x0 + i * dx; }
  double t_final() const { return t0 + n_t * dt; }
  /// Throws ConfigError on non-positive sizes or too few cells.
  void validate() const;
};

/// Column map from the ghost-extended array (two ghosts per side, n_x + 4
/// columns) to cell indices: periodic wraps, Neumann replicates the boundary
/// cell.
std::vector<Eigen::Index> ghost_index(int n_x, BoundaryKind bc);

std::string to_string(BoundaryKind bc);
BoundaryKind boundary_from_string(const std::string& s);

}  // namespace tvdnn
