#include "tvdnn/riemann.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tvdnn {

ExactRiemann::ExactRiemann(Primitive left, Primitive right, double gamma)
    : L_(left), R_(right), gamma_(gamma) {
  if (!(L_.rho > 0 && R_.rho > 0 && L_.p > 0 && R_.p > 0 && gamma_ > 1)) {
    throw std::invalid_argument("riemann: states must have positive density and pressure");
  }
  cL_ = std::sqrt(gamma_ * L_.p / L_.rho);
  cR_ = std::sqrt(gamma_ * R_.p / R_.rho);
  const double du = R_.u - L_.u;
  if (2.0 / (gamma_ - 1.0) * (cL_ + cR_) <= du) {
    throw std::invalid_argument("riemann: initial data generates vacuum");
  }

  // Two-rarefaction guess, then Newton.
  const double z = (gamma_ - 1.0) / (2.0 * gamma_);
  double p = std::pow((cL_ + cR_ - 0.5 * (gamma_ - 1.0) * du) /
                          (cL_ / std::pow(L_.p, z) + cR_ / std::pow(R_.p, z)),
                      1.0 / z);
  p = std::max(p, 1e-12);
  for (int it = 0; it < 100; ++it) {
    double fL, dfL, fR, dfR;
    side_function(L_, cL_, p, fL, dfL);
    side_function(R_, cR_, p, fR, dfR);
    const double next = std::max(p - (fL + fR + du) / (dfL + dfR), 1e-14);
    const double change = 2.0 * std::abs(next - p) / (next + p);
    p = next;
    if (change < 1e-15) break;
  }
  double fL, dfL, fR, dfR;
  side_function(L_, cL_, p, fL, dfL);
  side_function(R_, cR_, p, fR, dfR);
  p_star_ = p;
  u_star_ = 0.5 * (L_.u + R_.u) + 0.5 * (fR - fL);
}

void ExactRiemann::side_function(const Primitive& s, double c, double p, double& f,
                                 double& df) const {
  const double g = gamma_;
  if (p > s.p) {
    const double A = 2.0 / ((g + 1.0) * s.rho);
    const double B = (g - 1.0) / (g + 1.0) * s.p;
    const double q = std::sqrt(A / (p + B));
    f = (p - s.p) * q;
    df = q * (1.0 - 0.5 * (p - s.p) / (B + p));
  } else {
    const double pr = p / s.p;
    f = 2.0 * c / (g - 1.0) * (std::pow(pr, (g - 1.0) / (2.0 * g)) - 1.0);
    df = 1.0 / (s.rho * c) * std::pow(pr, -(g + 1.0) / (2.0 * g));
  }
}

Primitive ExactRiemann::sample(double xi) const {
  const double g = gamma_;
  const double gm = (g - 1.0) / (g + 1.0);
  if (xi <= u_star_) {
    if (p_star_ > L_.p) {
      const double pr = p_star_ / L_.p;
      const double sL = L_.u - cL_ * std::sqrt((g + 1.0) / (2.0 * g) * pr + (g - 1.0) / (2.0 * g));
      if (xi <= sL) return L_;
      return {L_.rho * (pr + gm) / (pr * gm + 1.0), u_star_, p_star_};
    }
    const double head = L_.u - cL_;
    const double c_star = cL_ * std::pow(p_star_ / L_.p, (g - 1.0) / (2.0 * g));
    const double tail = u_star_ - c_star;
    if (xi <= head) return L_;
    if (xi > tail) return {L_.rho * std::pow(p_star_ / L_.p, 1.0 / g), u_star_, p_star_};
    const double k = 2.0 / (g + 1.0) + gm / cL_ * (L_.u - xi);
    return {L_.rho * std::pow(k, 2.0 / (g - 1.0)),
            2.0 / (g + 1.0) * (cL_ + 0.5 * (g - 1.0) * L_.u + xi),
            L_.p * std::pow(k, 2.0 * g / (g - 1.0))};
  }
  if (p_star_ > R_.p) {
    const double pr = p_star_ / R_.p;
    const double sR = R_.u + cR_ * std::sqrt((g + 1.0) / (2.0 * g) * pr + (g - 1.0) / (2.0 * g));
    if (xi >= sR) return R_;
    return {R_.rho * (pr + gm) / (pr * gm + 1.0), u_star_, p_star_};
  }
  const double head = R_.u + cR_;
  const double c_star = cR_ * std::pow(p_star_ / R_.p, (g - 1.0) / (2.0 * g));
  const double tail = u_star_ + c_star;
  if (xi >= head) return R_;
  if (xi < tail) return {R_.rho * std::pow(p_star_ / R_.p, 1.0 / g), u_star_, p_star_};
  const double k = 2.0 / (g + 1.0) - gm / cR_ * (R_.u - xi);
  return {R_.rho * std::pow(k, 2.0 / (g - 1.0)),
          2.0 / (g + 1.0) * (-cR_ + 0.5 * (g - 1.0) * R_.u + xi),
          R_.p * std::pow(k, 2.0 * g / (g - 1.0))};
}

}  // namespace tvdnn
