#pragma once

// Exact solution of the 1D Euler Riemann problem for an ideal gas.
// Star pressure by Newton iteration on the usual pressure function
// (shock branch for p > p_K, rarefaction branch otherwise).

namespace tvdnn {

struct Primitive {
  double rho = 1.0;
  double u = 0.0;
  double p = 1.0;
};

class ExactRiemann {
 public:
  ExactRiemann(Primitive left, Primitive right, double gamma);

  double p_star() const { return p_star_; }
  double u_star() const { return u_star_; }

  /// State on the ray x / t = xi (interface at xi = 0).
  Primitive sample(double xi) const;

 private:
  // f_K(p) and its derivative for side K.
  void side_function(const Primitive& s, double c, double p, double& f, double& df) const;

  Primitive L_, R_;
  double gamma_;
  double cL_, cR_;
  double p_star_ = 0.0;
  double u_star_ = 0.0;
};

}  // namespace tvdnn
