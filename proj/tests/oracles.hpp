#pragma once
// Reference implementations for the tests. Written from the formulas with
// plain loops and std::vector so they share no code with the library.
//
// Forward-mode derivatives: Dual carries one tangent, Hyper carries a
// parameter tangent (a), an input tangent (b) and their mixed term (ab), which
// is enough for d/dtheta of both f(y) and f'(y).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "tvdnn/nn.hpp"

namespace oracle {

// ---- number types ----------------------------------------------------------

struct Dual {
  double v = 0.0, d = 0.0;
  Dual() = default;
  Dual(double value, double tangent = 0.0) : v(value), d(tangent) {}
};
inline Dual operator+(Dual x, Dual y) { return {x.v + y.v, x.d + y.d}; }
inline Dual operator-(Dual x, Dual y) { return {x.v - y.v, x.d - y.d}; }
inline Dual operator-(Dual x) { return {-x.v, -x.d}; }
inline Dual operator*(Dual x, Dual y) { return {x.v * y.v, x.v * y.d + x.d * y.v}; }
inline Dual operator/(Dual x, Dual y) {
  return {x.v / y.v, (x.d * y.v - x.v * y.d) / (y.v * y.v)};
}
inline Dual tanh(Dual x) {
  const double t = std::tanh(x.v);
  return {t, (1.0 - t * t) * x.d};
}
inline Dual fabs(Dual x) {
  if (x.v > 0) return x;
  if (x.v < 0) return -x;
  return {0.0, 0.0};
}
inline void mark(Dual& x) { x.d = 1.0; }

struct Hyper {
  double v = 0.0, a = 0.0, b = 0.0, ab = 0.0;
  Hyper() = default;
  Hyper(double value) : v(value) {}
  Hyper(double value, double ta, double tb, double tab) : v(value), a(ta), b(tb), ab(tab) {}
};
inline Hyper operator+(Hyper x, Hyper y) { return {x.v + y.v, x.a + y.a, x.b + y.b, x.ab + y.ab}; }
inline Hyper operator-(Hyper x, Hyper y) { return {x.v - y.v, x.a - y.a, x.b - y.b, x.ab - y.ab}; }
inline Hyper operator*(Hyper x, Hyper y) {
  return {x.v * y.v, x.v * y.a + x.a * y.v, x.v * y.b + x.b * y.v,
          x.v * y.ab + x.a * y.b + x.b * y.a + x.ab * y.v};
}
inline Hyper tanh(Hyper x) {
  const double t = std::tanh(x.v);
  const double d1 = 1.0 - t * t;
  const double d2 = -2.0 * t * d1;
  return {t, d1 * x.a, d1 * x.b, d1 * x.ab + d2 * x.a * x.b};
}
inline void mark(Hyper& x) { x.a = 1.0; }
inline void mark(double&) {}

// ---- network ---------------------------------------------------------------

template <class T>
struct Net {
  int n_in = 0, n_h = 0, n_out = 0;
  bool identity = false;
  std::vector<std::vector<T>> W[6];  // W[l][row][col]
  std::vector<T> b[6];
};

// Copy of the parameters with the tangent switched on for flat index `seed`
// (layer-major W0, b0, ..., W5, b5; matrices column-major). -1: none.
template <class T>
Net<T> lift(const tvdnn::NNParams& p, long seed = -1) {
  Net<T> n;
  n.n_in = p.spec.n_in;
  n.n_h = p.spec.n_hidden;
  n.n_out = p.spec.n_out;
  n.identity = p.spec.activation == tvdnn::Activation::identity;
  long k = 0;
  for (int l = 0; l < 6; ++l) {
    const auto& W = p.W[l];
    n.W[l].assign(W.rows(), std::vector<T>(W.cols()));
    for (int c = 0; c < W.cols(); ++c) {
      for (int r = 0; r < W.rows(); ++r, ++k) {
        n.W[l][r][c] = T(W(r, c));
        if (k == seed) mark(n.W[l][r][c]);
      }
    }
    n.b[l].resize(p.b[l].size());
    for (int r = 0; r < p.b[l].size(); ++r, ++k) {
      n.b[l][r] = T(p.b[l](r));
      if (k == seed) mark(n.b[l][r]);
    }
  }
  return n;
}

template <class T>
std::vector<T> affine(const std::vector<std::vector<T>>& W, const std::vector<T>& b,
                      const std::vector<T>& x) {
  std::vector<T> out(W.size());
  for (std::size_t r = 0; r < W.size(); ++r) {
    T s = b[r];
    for (std::size_t c = 0; c < x.size(); ++c) s = s + W[r][c] * x[c];
    out[r] = s;
  }
  return out;
}

template <class T>
std::vector<T> activate(const Net<T>& n, std::vector<T> x) {
  using std::tanh;
  if (!n.identity) {
    for (auto& v : x) v = tanh(v);
  }
  return x;
}

template <class T>
std::vector<T> forward(const Net<T>& n, const std::vector<T>& y) {
  const auto z1 = activate(n, affine(n.W[0], n.b[0], y));
  const auto z2 = activate(n, affine(n.W[1], n.b[1], z1));
  const auto g1 = activate(n, affine(n.W[2], n.b[2], y));
  std::vector<T> z3(z2.size());
  for (std::size_t i = 0; i < z2.size(); ++i) z3[i] = z2[i] * g1[i];
  const auto z4 = activate(n, affine(n.W[3], n.b[3], z3));
  const auto g2 = activate(n, affine(n.W[4], n.b[4], y));
  std::vector<T> z5(z4.size());
  for (std::size_t i = 0; i < z4.size(); ++i) z5[i] = z4[i] * g2[i];
  return affine(n.W[5], n.b[5], z5);
}

inline std::vector<double> nn(const tvdnn::NNParams& p, const std::vector<double>& y) {
  return forward(lift<double>(p), y);
}

// d out / d y_j by forward tangents.
inline std::vector<std::vector<double>> nn_jacobian(const tvdnn::NNParams& p,
                                                    const std::vector<double>& y) {
  const Net<Dual> n = lift<Dual>(p);
  std::vector<std::vector<double>> J(p.spec.n_out, std::vector<double>(y.size()));
  for (std::size_t j = 0; j < y.size(); ++j) {
    std::vector<Dual> yd(y.begin(), y.end());
    yd[j].d = 1.0;
    const auto o = forward(n, yd);
    for (int r = 0; r < p.spec.n_out; ++r) J[r][j] = o[r].d;
  }
  return J;
}

// Parameters for which the network is exactly f(q) = q (d -> d), using the
// identity activation: W0, W1, W3, W5 pick the first d hidden units, the
// gates see zero weights and unit biases.
inline tvdnn::NNParams identity_flux(int d, int hidden) {
  tvdnn::NNSpec s{d, hidden, d};
  s.activation = tvdnn::Activation::identity;
  tvdnn::NNParams p = tvdnn::NNParams::zeros(s);
  for (int k = 0; k < d; ++k) {
    p.W[0](k, k) = 1.0;
    p.W[1](k, k) = 1.0;
    p.W[3](k, k) = 1.0;
    p.W[5](k, k) = 1.0;
  }
  p.b[2].setOnes();
  p.b[4].setOnes();
  return p;
}

// ---- classical schemes -----------------------------------------------------

inline double minmod2(double a, double b) {
  if (a * b <= 0.0) return 0.0;
  return a > 0 ? std::min(a, b) : std::max(a, b);
}

// One forward-Euler step of the second-order central (Kurganov-Tadmor type)
// scheme for q_t + q_x = 0 on a periodic grid: minmod slopes, local speed 1.
inline std::vector<double> kt_advection_step(const std::vector<double>& q, double lambda) {
  const int n = static_cast<int>(q.size());
  auto at = [&](int i) { return q[((i % n) + n) % n]; };
  std::vector<double> slope(n), H(n);
  for (int i = 0; i < n; ++i) slope[i] = minmod2(at(i) - at(i - 1), at(i + 1) - at(i));
  for (int i = 0; i < n; ++i) {
    const double qL = at(i) + 0.5 * slope[i];
    const double qR = at(i + 1) - 0.5 * slope[(i + 1) % n];
    H[i] = 0.5 * (qL + qR) - 0.5 * (qR - qL);  // flux at i+1/2
  }
  std::vector<double> out(n);
  for (int i = 0; i < n; ++i) out[i] = q[i] - lambda * (H[i] - H[(i - 1 + n) % n]);
  return out;
}

inline double tv_brute(const Eigen::MatrixXd& q, bool periodic) {
  double tv = 0.0;
  for (int k = 0; k < q.rows(); ++k) {
    for (int i = 0; i + 1 < q.cols(); ++i) tv += std::abs(q(k, i + 1) - q(k, i));
    if (periodic) tv += std::abs(q(k, 0) - q(k, q.cols() - 1));
  }
  return tv;
}

// Generic explicit four-stage Butcher tableau (classical RK4 coefficients).
template <class F>
std::vector<double> butcher_rk4(const F& rhs, const std::vector<double>& y, double h) {
  const double A[4][4] = {{0, 0, 0, 0}, {0.5, 0, 0, 0}, {0, 0.5, 0, 0}, {0, 0, 1, 0}};
  const double B[4] = {1.0 / 6, 2.0 / 6, 2.0 / 6, 1.0 / 6};
  std::vector<std::vector<double>> K;
  for (int s = 0; s < 4; ++s) {
    std::vector<double> ys = y;
    for (int j = 0; j < s; ++j) {
      for (std::size_t i = 0; i < y.size(); ++i) ys[i] += h * A[s][j] * K[j][i];
    }
    K.push_back(rhs(ys));
  }
  std::vector<double> out = y;
  for (int s = 0; s < 4; ++s) {
    for (std::size_t i = 0; i < y.size(); ++i) out[i] += h * B[s] * K[s][i];
  }
  return out;
}

// ---- optimizers ------------------------------------------------------------

struct RmsRef {
  std::vector<double> v;
  void step(std::vector<double>& th, const std::vector<double>& g, double lr, double rho,
            double eps) {
    if (v.empty()) v.assign(th.size(), 0.0);
    for (std::size_t i = 0; i < th.size(); ++i) {
      v[i] = rho * v[i] + (1 - rho) * g[i] * g[i];
      th[i] -= lr * g[i] / (std::sqrt(v[i]) + eps);
    }
  }
};

struct AdamRef {
  std::vector<double> m, v;
  int t = 0;
  void step(std::vector<double>& th, std::vector<double> g, double lr, double b1, double b2,
            double eps, double lambda) {
    if (m.empty()) {
      m.assign(th.size(), 0.0);
      v.assign(th.size(), 0.0);
    }
    ++t;
    for (std::size_t i = 0; i < th.size(); ++i) {
      g[i] += lambda * th[i];
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(b1, t));
      const double vh = v[i] / (1 - std::pow(b2, t));
      th[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
};

// ---- tangent-mode TVD solver -------------------------------------------------
// Scalar, periodic, Rusanov flux on minmod-limited states. Every quantity is
// a Dual carrying d/dtheta_k for one parameter k.

struct FluxAt {
  Dual f, df;  // f(y) and f'(y), each with its theta tangent
};

inline FluxAt flux_at(const Net<Hyper>& n, Dual y) {
  const Hyper o = forward(n, {Hyper(y.v, y.d, 1.0, 0.0)})[0];
  return {{o.v, o.a}, {o.b, o.ab}};
}

// phi(r) (q_{i+1} - q_i) with r = (q_i - q_{i-1}) / (q_{i+1} - q_i).
inline Dual limited_slope(Dual qm, Dual q, Dual qp) {
  const Dual num = q - qm, den = qp - q;
  if (den.v == 0.0) return {0.0, 0.0};
  const Dual r = num / den;
  if (r.v <= 0.0) return {0.0, 0.0};
  if (r.v < 1.0) return r * den;
  return den;
}

inline std::vector<Dual> tvd_rhs(const Net<Hyper>& n, const std::vector<Dual>& q, double dx) {
  const int N = static_cast<int>(q.size());
  auto at = [&](int i) { return q[((i % N) + N) % N]; };
  std::vector<Dual> s(N), F(N);
  for (int i = 0; i < N; ++i) s[i] = limited_slope(at(i - 1), at(i), at(i + 1));
  for (int i = 0; i < N; ++i) {
    const Dual qm = at(i) + 0.5 * s[i];
    const Dual qp = at(i + 1) - 0.5 * s[(i + 1) % N];
    const FluxAt fp = flux_at(n, qp), fm = flux_at(n, qm);
    const Dual ap = fabs(fp.df), am = fabs(fm.df);
    const Dual a = ap.v >= am.v ? ap : am;
    F[i] = 0.5 * (fp.f + fm.f - a * (qp - qm));
  }
  std::vector<Dual> R(N);
  for (int i = 0; i < N; ++i) R[i] = -(F[i] - F[(i - 1 + N) % N]) / Dual(dx);
  return R;
}

// dJ/dtheta for J = dx sum (q^{n_t} - target)^2, one tangent pass per
// parameter. rk4 = false: forward Euler.
inline std::vector<double> tangent_gradient(const tvdnn::NNParams& p,
                                            const std::vector<double>& q0,
                                            const std::vector<double>& target, double dx,
                                            double dt, int n_t, bool rk4) {
  const long n_par = p.size();
  std::vector<double> grad(n_par);
  for (long k = 0; k < n_par; ++k) {
    const Net<Hyper> net = lift<Hyper>(p, k);
    std::vector<Dual> q(q0.begin(), q0.end());
    auto axpy = [](const std::vector<Dual>& x, double h, const std::vector<Dual>& y) {
      std::vector<Dual> out(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + Dual(h) * y[i];
      return out;
    };
    for (int step = 0; step < n_t; ++step) {
      if (!rk4) {
        q = axpy(q, dt, tvd_rhs(net, q, dx));
        continue;
      }
      const auto k1 = tvd_rhs(net, q, dx);
      const auto k2 = tvd_rhs(net, axpy(q, dt / 2, k1), dx);
      const auto k3 = tvd_rhs(net, axpy(q, dt / 2, k2), dx);
      const auto k4 = tvd_rhs(net, axpy(q, dt, k3), dx);
      for (std::size_t i = 0; i < q.size(); ++i) {
        q[i] = q[i] + Dual(dt / 6) * (k1[i] + Dual(2.0) * k2[i] + Dual(2.0) * k3[i] + k4[i]);
      }
    }
    Dual J;
    for (std::size_t i = 0; i < q.size(); ++i) {
      const Dual e = q[i] - Dual(target[i]);
      J = J + Dual(dx) * e * e;
    }
    grad[k] = J.d;
  }
  return grad;
}

// ---- misc ------------------------------------------------------------------

inline std::vector<double> random_vector(std::mt19937_64& rng, int n, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// Star pressure of a Riemann problem by bisection on the pressure function.
inline double riemann_p_star(double rl, double ul, double pl, double rr, double ur, double pr,
                             double g) {
  auto side = [g](double p, double r, double pk) {
    const double c = std::sqrt(g * pk / r);
    if (p > pk) {
      const double A = 2 / ((g + 1) * r), B = (g - 1) / (g + 1) * pk;
      return (p - pk) * std::sqrt(A / (p + B));
    }
    return 2 * c / (g - 1) * (std::pow(p / pk, (g - 1) / (2 * g)) - 1);
  };
  double lo = 1e-10, hi = 10 * std::max(pl, pr);
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double f = side(mid, rl, pl) + side(mid, rr, pr) + (ur - ul);
    (f > 0 ? hi : lo) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace oracle
