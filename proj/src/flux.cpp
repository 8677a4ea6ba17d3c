#include "tvdnn/flux.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <sstream>

namespace tvdnn {

// ---- grid ------------------------------------------------------------------

void Grid::validate() const {
  if (n_x < 4) throw ConfigError("grid: need at least 4 cells for the reconstruction stencil");
  if (!(dx > 0.0) || !(dt > 0.0)) throw ConfigError("grid: dx and dt must be positive");
  if (n_t < 0) throw ConfigError("grid: negative step count");
}

std::vector<Eigen::Index> ghost_index(int n_x, BoundaryKind bc) {
  if (n_x < 4) throw ConfigError("grid: need at least 4 cells for the reconstruction stencil");
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n_x) + 4);
  for (int k = 0; k < n_x + 4; ++k) {
    const int cell = k - 2;
    Eigen::Index mapped;
    if (bc == BoundaryKind::periodic) {
      mapped = ((cell % n_x) + n_x) % n_x;
    } else {
      mapped = std::clamp(cell, 0, n_x - 1);
    }
    idx[static_cast<std::size_t>(k)] = mapped;
  }
  return idx;
}

std::string to_string(BoundaryKind bc) {
  return bc == BoundaryKind::periodic ? "periodic" : "neumann";
}

BoundaryKind boundary_from_string(const std::string& s) {
  if (s == "periodic") return BoundaryKind::periodic;
  if (s == "neumann") return BoundaryKind::neumann;
  throw ConfigError("unknown boundary kind '" + s + "'");
}

std::string to_string(FluxKind k) {
  switch (k) {
    case FluxKind::unconstrained: return "unconstrained";
    case FluxKind::tvd: return "tvd";
    case FluxKind::tvd_generalized: return "tvd-generalized";
  }
  return "?";
}

FluxKind flux_kind_from_string(const std::string& s) {
  if (s == "unconstrained") return FluxKind::unconstrained;
  if (s == "tvd") return FluxKind::tvd;
  if (s == "tvd-generalized" || s == "tvd_generalized") return FluxKind::tvd_generalized;
  throw ConfigError("unknown flux kind '" + s + "'");
}

std::string to_string(SpeedMode m) {
  return m == SpeedMode::one_norm ? "one_norm" : "spectral";
}

SpeedMode speed_mode_from_string(const std::string& s) {
  if (s == "one_norm" || s == "one-norm") return SpeedMode::one_norm;
  if (s == "spectral") return SpeedMode::spectral;
  throw ConfigError("unknown speed mode '" + s + "'");
}

// ---- pointwise -------------------------------------------------------------

double minmod(double r) { return std::max(0.0, std::min(1.0, r)); }

double slope_ratio(const Field& q, int i, double eps_r, BoundaryKind bc, int comp) {
  const int n = static_cast<int>(q.cols());
  const auto idx = ghost_index(n, bc);
  if (i < -1 || i > n) throw ConfigError("slope_ratio: index outside ghost range");
  const auto at = [&](int cell) { return q(comp, idx[static_cast<std::size_t>(cell + 2)]); };
  const double num = at(i) - at(i - 1);
  const double den = at(i + 1) - at(i) + eps_r;
  if (den == 0.0) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    return num > 0.0 ? inf : (num < 0.0 ? -inf : 0.0);
  }
  return num / den;
}

double psi_limiter(double r_i, double r_ip1) {
  if (!(std::min(r_i, r_ip1) > 0.0)) return 0.0;
  return std::min(std::min(r_i, 1.0 / r_i), std::min(r_ip1, 1.0 / r_ip1));
}

// ---- reconstruction --------------------------------------------------------

FaceVars reconstruct(ad::Var q, BoundaryKind bc, double eps_r) {
  const Eigen::Index n = q.cols();
  const ad::Var ext = ad::gather_cols(q, ghost_index(static_cast<int>(n), bc));
  // diff(k) = ext(k + 1) - ext(k), k = 0..n+2
  const ad::Var diff = ad::slice_cols(ext, 1, n + 3) - ad::slice_cols(ext, 0, n + 3);
  // Slope ratio at extended cells k = 1..n+2.
  const ad::Var r = ad::slope_ratio(ad::slice_cols(diff, 0, n + 2),
                                    ad::slice_cols(diff, 1, n + 2), eps_r);
  const ad::Var phi = ad::minmod(r);

  FaceVars f;
  f.q_left = ad::slice_cols(ext, 1, n + 1);
  f.q_right = ad::slice_cols(ext, 2, n + 1);
  f.r_left = ad::slice_cols(r, 0, n + 1);
  f.r_right = ad::slice_cols(r, 1, n + 1);
  const ad::Var centre = ad::slice_cols(diff, 1, n + 1);  // q_{i+1} - q_i
  const ad::Var ahead = ad::slice_cols(diff, 2, n + 1);   // q_{i+2} - q_{i+1}
  f.q_minus = f.q_left + 0.5 * (ad::slice_cols(phi, 0, n + 1) * centre);
  f.q_plus = f.q_right - 0.5 * (ad::slice_cols(phi, 1, n + 1) * ahead);
  return f;
}

FaceStates reconstruct(const Field& q, BoundaryKind bc, double eps_r) {
  ad::Tape tape;
  const FaceVars f = reconstruct(tape.constant(q), bc, eps_r);
  return {f.q_plus.value(), f.q_minus.value()};
}

// ---- Rusanov fluxes --------------------------------------------------------

namespace {

ad::Var one_norm_speed(const std::vector<ad::Var>& jac) {
  ad::Var speed = ad::col_sum(ad::abs(jac.front()));
  for (std::size_t j = 1; j < jac.size(); ++j) {
    speed = ad::max(speed, ad::col_sum(ad::abs(jac[j])));
  }
  return speed;
}

FluxVars rusanov(const NNVars& f, ad::Var q_plus, ad::Var q_minus, SpeedMode mode) {
  const Eigen::Index d = q_plus.rows();
  const Eigen::Index faces = q_plus.cols();
  if (q_minus.rows() != d || q_minus.cols() != faces) {
    throw ConfigError("rusanov: face state shapes differ");
  }
  if (f.spec.n_in != d || f.spec.n_out != d) {
    std::ostringstream os;
    os << "rusanov: network maps " << f.spec.n_in << " -> " << f.spec.n_out
       << " but the state has " << d << " components";
    throw ConfigError(os.str());
  }
  const NNTapeEval eval = nn_forward_with_jacobian(f, ad::hcat(q_plus, q_minus));

  ad::Var speed_both;
  if (d == 1) {
    speed_both = ad::abs(eval.jacobian.front());
  } else if (mode == SpeedMode::spectral) {
    try {
      speed_both = ad::spectral_radius(eval.jacobian);
    } catch (const std::runtime_error& e) {
      std::cerr << "warning: " << e.what() << "; using the 1-norm wave speed\n";
      speed_both = one_norm_speed(eval.jacobian);
    }
  } else {
    speed_both = one_norm_speed(eval.jacobian);
  }
  const ad::Var a = ad::max(ad::slice_cols(speed_both, 0, faces),
                            ad::slice_cols(speed_both, faces, faces));
  const ad::Var f_plus = ad::slice_cols(eval.out, 0, faces);
  const ad::Var f_minus = ad::slice_cols(eval.out, faces, faces);
  const ad::Var jump = q_plus - q_minus;
  FluxVars out;
  out.flux = 0.5 * (f_plus + f_minus - ad::broadcast_to(a, d, faces) * jump);
  out.wave_speed = a;
  out.q_plus = q_plus;
  out.q_minus = q_minus;
  return out;
}

}  // namespace

FluxVars rusanov_scalar(const NNVars& f, ad::Var q_plus, ad::Var q_minus) {
  if (f.spec.n_in != 1 || f.spec.n_out != 1 || q_plus.rows() != 1) {
    throw ConfigError("rusanov_scalar: needs a 1 -> 1 network and scalar states");
  }
  return rusanov(f, q_plus, q_minus, SpeedMode::one_norm);
}

FluxVars rusanov_system(const NNVars& f, ad::Var q_plus, ad::Var q_minus, SpeedMode mode) {
  return rusanov(f, q_plus, q_minus, mode);
}

ad::Var unconstrained_flux(const NNVars& f, ad::Var q, BoundaryKind bc) {
  const Eigen::Index d = q.rows();
  if (f.spec.n_in != 2 * d || f.spec.n_out != d) {
    throw ConfigError("unconstrained_flux: network must map 2d -> d");
  }
  const Eigen::Index n = q.cols();
  const ad::Var ext = ad::gather_cols(q, ghost_index(static_cast<int>(n), bc));
  const ad::Var left = ad::slice_cols(ext, 1, n + 1);
  const ad::Var right = ad::slice_cols(ext, 2, n + 1);
  return nn_forward(f, ad::vstack({left, right}));
}

FluxVars generalized_flux(const NNVars& f, const NNVars& nu_plus, const NNVars& nu_minus,
                          ad::Var q, BoundaryKind bc, double dx, double nu_scale,
                          double eps_r) {
  if (q.rows() != 1) throw ConfigError("generalized_flux: scalar fields only");
  for (const NNVars* nu : {&nu_plus, &nu_minus}) {
    if (nu->spec.n_in != 2 || nu->spec.n_out != 1) {
      throw ConfigError("generalized_flux: diffusivity networks must map 2 -> 1");
    }
  }
  const FaceVars faces = reconstruct(q, bc, eps_r);
  FluxVars out = rusanov_scalar(f, faces.q_plus, faces.q_minus);
  const ad::Var pair = ad::vstack({faces.q_left, faces.q_right});
  const ad::Var diffusive = ad::abs(nu_scale * nn_forward(nu_plus, pair));
  const ad::Var anti = ad::psi_limiter(faces.r_left, faces.r_right) *
                       (nu_scale * nn_forward(nu_minus, pair));
  const ad::Var nu_hat = diffusive + anti;
  out.flux = out.flux - nu_hat * ((faces.q_right - faces.q_left) * (1.0 / dx));
  return out;
}

Eigen::RowVectorXd wave_speed(const NNParams& f, const FaceStates& faces, SpeedMode mode) {
  ad::Tape tape;
  const NNVars vars = nn_leaves(tape, f, false);
  const FluxVars out = rusanov(vars, tape.constant(faces.q_plus),
                               tape.constant(faces.q_minus), mode);
  return out.wave_speed.value().row(0);
}

// ---- model -----------------------------------------------------------------

void Model::validate(int d) const {
  const std::size_t expected = config.kind == FluxKind::tvd_generalized ? 3 : 1;
  if (nets.size() != expected) {
    std::ostringstream os;
    os << "model: flux kind " << to_string(config.kind) << " needs " << expected
       << " network(s), got " << nets.size();
    throw ConfigError(os.str());
  }
  for (const NNParams& p : nets) p.validate();
  const NNSpec& f = nets.front().spec;
  const int want_in = config.kind == FluxKind::unconstrained ? 2 * d : d;
  if (f.n_in != want_in || f.n_out != d) {
    std::ostringstream os;
    os << "model: flux network maps " << f.n_in << " -> " << f.n_out << ", expected "
       << want_in << " -> " << d;
    throw ConfigError(os.str());
  }
  if (config.kind == FluxKind::tvd_generalized) {
    if (d != 1) throw ConfigError("model: generalized flux is scalar only");
    for (std::size_t k = 1; k < 3; ++k) {
      if (nets[k].spec.n_in != 2 || nets[k].spec.n_out != 1) {
        throw ConfigError("model: diffusivity networks must map 2 -> 1");
      }
    }
  }
}

Eigen::Index Model::size() const {
  Eigen::Index n = 0;
  for (const NNParams& p : nets) n += p.size();
  return n;
}

Eigen::VectorXd Model::flatten() const {
  Eigen::VectorXd flat(size());
  Eigen::Index k = 0;
  for (const NNParams& p : nets) {
    flat.segment(k, p.size()) = p.flatten();
    k += p.size();
  }
  return flat;
}

void Model::unflatten(const Eigen::VectorXd& flat) {
  if (flat.size() != size()) throw ConfigError("model: flat parameter size mismatch");
  Eigen::Index k = 0;
  for (NNParams& p : nets) {
    p.unflatten(flat, k);
    k += p.size();
  }
}

bool Model::all_finite() const {
  return std::all_of(nets.begin(), nets.end(), [](const NNParams& p) { return p.all_finite(); });
}

std::vector<NNVars> model_leaves(ad::Tape& tape, const Model& m, bool trainable) {
  std::vector<NNVars> vars;
  vars.reserve(m.nets.size());
  for (const NNParams& p : m.nets) vars.push_back(nn_leaves(tape, p, trainable));
  return vars;
}

Eigen::VectorXd model_gradient(const ad::Tape& tape, const std::vector<NNVars>& vars) {
  Eigen::Index n = 0;
  std::vector<Eigen::VectorXd> parts;
  for (const NNVars& v : vars) {
    parts.push_back(nn_gradient(tape, v).flatten());
    n += parts.back().size();
  }
  Eigen::VectorXd flat(n);
  Eigen::Index k = 0;
  for (const auto& p : parts) {
    flat.segment(k, p.size()) = p;
    k += p.size();
  }
  return flat;
}

namespace {

FluxVars face_flux_raw(const FluxConfig& cfg, const std::vector<NNVars>& nets, ad::Var q,
                       const Grid& grid) {
  switch (cfg.kind) {
    case FluxKind::unconstrained: {
      FluxVars out;
      out.flux = unconstrained_flux(nets.at(0), q, grid.bc);
      return out;
    }
    case FluxKind::tvd: {
      const FaceVars faces = reconstruct(q, grid.bc, cfg.eps_r);
      return rusanov_system(nets.at(0), faces.q_plus, faces.q_minus, cfg.speed);
    }
    case FluxKind::tvd_generalized:
      return generalized_flux(nets.at(0), nets.at(1), nets.at(2), q, grid.bc, grid.dx,
                              cfg.nu_scale, cfg.eps_r);
  }
  throw ConfigError("face_flux: unknown flux kind");
}

}  // namespace

FluxVars face_flux(const FluxConfig& cfg, const std::vector<NNVars>& nets, ad::Var q,
                   const Grid& grid) {
  FluxVars out = face_flux_raw(cfg, nets, q, grid);
  if (grid.bc == BoundaryKind::periodic) {
    // Faces 0 and n_x are the same face; evaluating it twice can differ in the
    // last bit, which would leak mass. Reuse the first evaluation.
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(q.cols()) + 1);
    for (std::size_t k = 0; k + 1 < idx.size(); ++k) idx[k] = static_cast<Eigen::Index>(k);
    idx.back() = 0;
    out.flux = ad::gather_cols(out.flux, idx);
  }
  return out;
}

}  // namespace tvdnn
