#pragma once

// Numerical fluxes built around the network flux f_N.
//
// Face j (j = 0..n_x) sits between cells j-1 and j, so the update of cell i
// uses faces i and i+1. With periodic boundaries face 0 and face n_x are the
// same physical face.
//
//   TVD flux:    F = 1/2 [f_N(q+) + f_N(q-) - a (q+ - q-)]
//                a = max(rho(df_N/dq (q+)), rho(df_N/dq (q-)))
//   generalized: F_tvd - nu_hat (q_{i+1} - q_i) / dx,
//                nu_hat = |nu+(q_i, q_{i+1})| + psi(r_i, r_{i+1}) nu-(q_i, q_{i+1})
//   unconstrained: F = f_N(q_i, q_{i+1})
//
// q+ and q- are the minmod-limited linear reconstructions from the right and
// left cells of the face.

#include <string>
#include <vector>

#include "tvdnn/autodiff.hpp"
#include "tvdnn/grid.hpp"
#include "tvdnn/nn.hpp"

namespace tvdnn {

enum class FluxKind { unconstrained, tvd, tvd_generalized };
enum class SpeedMode { one_norm, spectral };

std::string to_string(FluxKind k);
FluxKind flux_kind_from_string(const std::string& s);
std::string to_string(SpeedMode m);
SpeedMode speed_mode_from_string(const std::string& s);

/// eps_r used by the generalized flux in its slope ratios.
inline constexpr double kGeneralizedEpsR = 1e-12;

/// Reconstructed face states, d x (n_x + 1) each.
struct FaceStates {
  Eigen::MatrixXd q_plus;
  Eigen::MatrixXd q_minus;
};

// ---- pointwise helpers -----------------------------------------------------

/// phi(r) = max(0, min(1, r)).
double minmod(double r);

/// r_i = (q_i - q_{i-1}) / (q_{i+1} - q_i + eps_r) for component `comp`,
/// neighbours taken through the boundary condition. A zero denominator gives
/// +inf, -inf or 0 by the sign of the numerator.
double slope_ratio(const Field& q, int i, double eps_r, BoundaryKind bc, int comp = 0);

/// psi(r_i, r_{i+1}) in [0, 1]; zero unless both ratios are positive.
double psi_limiter(double r_i, double r_ip1);

// ---- taped building blocks -------------------------------------------------

struct FaceVars {
  ad::Var q_plus;   // d x (n_x + 1)
  ad::Var q_minus;  // d x (n_x + 1)
  ad::Var q_left;   // q_i of the face (left cell), d x (n_x + 1)
  ad::Var q_right;  // q_{i+1}
  ad::Var r_left;   // slope ratio at the left cell
  ad::Var r_right;  // slope ratio at the right cell
};

FaceVars reconstruct(ad::Var q, BoundaryKind bc, double eps_r);
FaceStates reconstruct(const Field& q, BoundaryKind bc, double eps_r);

struct FluxVars {
  ad::Var flux;        // d x n_faces
  ad::Var wave_speed;  // 1 x n_faces; invalid for the unconstrained flux
  ad::Var q_plus;      // reconstructed states the wave speed was taken at
  ad::Var q_minus;
};

/// Scalar Rusanov flux; `f` must map 1 -> 1.
FluxVars rusanov_scalar(const NNVars& f, ad::Var q_plus, ad::Var q_minus);
/// Vector Rusanov flux with the spectral radius or its 1-norm bound as the
/// wave speed. A failed eigensolve falls back to the 1-norm with a warning.
FluxVars rusanov_system(const NNVars& f, ad::Var q_plus, ad::Var q_minus,
                        SpeedMode mode = SpeedMode::one_norm);
/// Direct two-point network flux; `f` must map 2d -> d.
ad::Var unconstrained_flux(const NNVars& f, ad::Var q, BoundaryKind bc);
/// Rusanov part from `f` plus the limited network diffusivity. Raw outputs of
/// the diffusivity networks are multiplied by `nu_scale`.
FluxVars generalized_flux(const NNVars& f, const NNVars& nu_plus, const NNVars& nu_minus,
                          ad::Var q, BoundaryKind bc, double dx, double nu_scale,
                          double eps_r = kGeneralizedEpsR);

/// Wave speeds at every face of `faces` (no gradient), 1 x n_faces.
Eigen::RowVectorXd wave_speed(const NNParams& f, const FaceStates& faces,
                              SpeedMode mode = SpeedMode::one_norm);

// ---- model -----------------------------------------------------------------

struct FluxConfig {
  FluxKind kind = FluxKind::tvd;
  SpeedMode speed = SpeedMode::one_norm;
  /// Slope-ratio regularisation for the TVD reconstruction (0 = plain ratio).
  double eps_r = 0.0;
  /// Physical diffusivity multiplying the raw diffusivity-network outputs.
  double nu_scale = 0.0;
};

/// Flux configuration plus its networks: nets[0] is the flux network; the
/// generalized flux adds nets[1] = nu+ and nets[2] = nu-.
struct Model {
  FluxConfig config;
  std::vector<NNParams> nets;

  /// Checks network count and shapes against the flux kind and component
  /// count `d`.
  void validate(int d) const;
  Eigen::Index size() const;
  Eigen::VectorXd flatten() const;
  void unflatten(const Eigen::VectorXd& flat);
  bool all_finite() const;
};

std::vector<NNVars> model_leaves(ad::Tape& tape, const Model& m, bool trainable);
Eigen::VectorXd model_gradient(const ad::Tape& tape, const std::vector<NNVars>& vars);

/// Face fluxes for any flux kind.
FluxVars face_flux(const FluxConfig& cfg, const std::vector<NNVars>& nets, ad::Var q,
                   const Grid& grid);

}  // namespace tvdnn
