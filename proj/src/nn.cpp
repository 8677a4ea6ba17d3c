#include "tvdnn/nn.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace tvdnn {

namespace {

struct LayerShape {
  int rows;
  int cols;
};

std::array<LayerShape, NNParams::kLayers> layer_shapes(const NNSpec& s) {
  return {{{s.n_hidden, s.n_in},
           {s.n_hidden, s.n_hidden},
           {s.n_hidden, s.n_in},
           {s.n_hidden, s.n_hidden},
           {s.n_hidden, s.n_in},
           {s.n_out, s.n_hidden}}};
}

Eigen::VectorXd activate(const Eigen::VectorXd& x, Activation act) {
  if (act == Activation::identity) return x;
  return ad::tanh_values(x);
}

// Derivative of the activation expressed through its output.
Eigen::VectorXd activation_slope(const Eigen::VectorXd& out, Activation act) {
  if (act == Activation::identity) return Eigen::VectorXd::Ones(out.size());
  return (1.0 - out.array().square()).matrix();
}

void check_input(const NNParams& p, Eigen::Index n) {
  if (n != p.spec.n_in) {
    std::ostringstream os;
    os << "nn: input has " << n << " entries, network expects " << p.spec.n_in;
    throw ConfigError(os.str());
  }
}

}  // namespace

void NNSpec::validate() const {
  if (n_in < 1 || n_hidden < 1 || n_out < 1) {
    throw ConfigError("nn: layer widths must be >= 1");
  }
}

NNParams NNParams::zeros(const NNSpec& spec) {
  spec.validate();
  NNParams p;
  p.spec = spec;
  const auto shapes = layer_shapes(spec);
  for (int l = 0; l < kLayers; ++l) {
    p.W[l] = Eigen::MatrixXd::Zero(shapes[l].rows, shapes[l].cols);
    p.b[l] = Eigen::VectorXd::Zero(shapes[l].rows);
  }
  return p;
}

void NNParams::validate() const {
  spec.validate();
  const auto shapes = layer_shapes(spec);
  for (int l = 0; l < kLayers; ++l) {
    if (W[l].rows() != shapes[l].rows || W[l].cols() != shapes[l].cols ||
        b[l].size() != shapes[l].rows) {
      std::ostringstream os;
      os << "nn: layer " << l << " has shape " << W[l].rows() << "x" << W[l].cols()
         << " (bias " << b[l].size() << "), expected " << shapes[l].rows << "x"
         << shapes[l].cols;
      throw ConfigError(os.str());
    }
  }
}

bool NNParams::all_finite() const {
  for (int l = 0; l < kLayers; ++l) {
    if (!W[l].allFinite() || !b[l].allFinite()) return false;
  }
  return true;
}

Eigen::Index NNParams::size() const {
  Eigen::Index n = 0;
  for (int l = 0; l < kLayers; ++l) n += W[l].size() + b[l].size();
  return n;
}

Eigen::VectorXd NNParams::flatten() const {
  Eigen::VectorXd flat(size());
  Eigen::Index k = 0;
  for (int l = 0; l < kLayers; ++l) {
    flat.segment(k, W[l].size()) = Eigen::Map<const Eigen::VectorXd>(W[l].data(), W[l].size());
    k += W[l].size();
    flat.segment(k, b[l].size()) = b[l];
    k += b[l].size();
  }
  return flat;
}

void NNParams::unflatten(const Eigen::VectorXd& flat, Eigen::Index offset) {
  if (offset < 0 || offset + size() > flat.size()) {
    throw ConfigError("nn: flat parameter vector too short");
  }
  Eigen::Index k = offset;
  for (int l = 0; l < kLayers; ++l) {
    Eigen::Map<Eigen::VectorXd>(W[l].data(), W[l].size()) = flat.segment(k, W[l].size());
    k += W[l].size();
    b[l] = flat.segment(k, b[l].size());
    k += b[l].size();
  }
}

NNParams nn_init(const NNSpec& spec, std::uint64_t seed) {
  NNParams p = NNParams::zeros(spec);
  std::mt19937_64 rng(seed);
  for (int l = 0; l < NNParams::kLayers; ++l) {
    if (l == 5 && spec.init == InitKind::xavier_zero_output) continue;
    Eigen::MatrixXd& w = p.W[l];
    const double bound = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    std::uniform_real_distribution<double> dist(-bound, bound);
    // Row-major fill so the draw order does not depend on storage order.
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = dist(rng);
    }
  }
  return p;
}

Eigen::VectorXd nn_forward(const NNParams& p, const Eigen::VectorXd& y) {
  check_input(p, y.size());
  const Activation act = p.spec.activation;
  const Eigen::VectorXd z1 = activate(p.W[0] * y + p.b[0], act);
  const Eigen::VectorXd z2 = activate(p.W[1] * z1 + p.b[1], act);
  const Eigen::VectorXd g1 = activate(p.W[2] * y + p.b[2], act);
  const Eigen::VectorXd z3 = z2.cwiseProduct(g1);
  const Eigen::VectorXd z4 = activate(p.W[3] * z3 + p.b[3], act);
  const Eigen::VectorXd g2 = activate(p.W[4] * y + p.b[4], act);
  const Eigen::VectorXd z5 = z4.cwiseProduct(g2);
  return p.W[5] * z5 + p.b[5];
}

Eigen::MatrixXd nn_input_jacobian(const NNParams& p, const Eigen::VectorXd& y) {
  check_input(p, y.size());
  const Activation act = p.spec.activation;
  const Eigen::VectorXd z1 = activate(p.W[0] * y + p.b[0], act);
  const Eigen::VectorXd z2 = activate(p.W[1] * z1 + p.b[1], act);
  const Eigen::VectorXd g1 = activate(p.W[2] * y + p.b[2], act);
  const Eigen::VectorXd z3 = z2.cwiseProduct(g1);
  const Eigen::VectorXd z4 = activate(p.W[3] * z3 + p.b[3], act);
  const Eigen::VectorXd g2 = activate(p.W[4] * y + p.b[4], act);

  // Tangents for all input directions at once (columns).
  const Eigen::MatrixXd dz1 = activation_slope(z1, act).asDiagonal() * p.W[0];
  const Eigen::MatrixXd dz2 = activation_slope(z2, act).asDiagonal() * (p.W[1] * dz1);
  const Eigen::MatrixXd dg1 = activation_slope(g1, act).asDiagonal() * p.W[2];
  const Eigen::MatrixXd dz3 = g1.asDiagonal() * dz2 + z2.asDiagonal() * dg1;
  const Eigen::MatrixXd dz4 = activation_slope(z4, act).asDiagonal() * (p.W[3] * dz3);
  const Eigen::MatrixXd dg2 = activation_slope(g2, act).asDiagonal() * p.W[4];
  const Eigen::MatrixXd dz5 = g2.asDiagonal() * dz4 + z4.asDiagonal() * dg2;
  return p.W[5] * dz5;
}

// ---------------------------------------------------------------------------

NNVars nn_leaves(ad::Tape& tape, const NNParams& params, bool trainable) {
  params.validate();
  NNVars v;
  v.spec = params.spec;
  for (int l = 0; l < NNParams::kLayers; ++l) {
    v.W[l] = trainable ? tape.variable(params.W[l]) : tape.constant(params.W[l]);
    v.b[l] = trainable ? tape.variable(params.b[l]) : tape.constant(params.b[l]);
  }
  return v;
}

GradVector nn_gradient(const ad::Tape& tape, const NNVars& vars) {
  GradVector g = NNParams::zeros(vars.spec);
  for (int l = 0; l < NNParams::kLayers; ++l) {
    g.W[l] = tape.grad(vars.W[l]);
    g.b[l] = tape.grad(vars.b[l]).col(0);
  }
  return g;
}

namespace {

struct ForwardNodes {
  ad::Var z1, z2, g1, z3, z4, g2, z5, out;
};

ad::Var act(ad::Var x, Activation a) { return a == Activation::tanh ? ad::tanh(x) : x; }

ForwardNodes forward_nodes(const NNVars& n, ad::Var y) {
  if (y.rows() != n.spec.n_in) {
    std::ostringstream os;
    os << "nn: input has " << y.rows() << " rows, network expects " << n.spec.n_in;
    throw ConfigError(os.str());
  }
  const Activation a = n.spec.activation;
  ForwardNodes f;
  f.z1 = act(ad::add_bias(ad::matmul(n.W[0], y), n.b[0]), a);
  f.z2 = act(ad::add_bias(ad::matmul(n.W[1], f.z1), n.b[1]), a);
  f.g1 = act(ad::add_bias(ad::matmul(n.W[2], y), n.b[2]), a);
  f.z3 = f.z2 * f.g1;
  f.z4 = act(ad::add_bias(ad::matmul(n.W[3], f.z3), n.b[3]), a);
  f.g2 = act(ad::add_bias(ad::matmul(n.W[4], y), n.b[4]), a);
  f.z5 = f.z4 * f.g2;
  f.out = ad::add_bias(ad::matmul(n.W[5], f.z5), n.b[5]);
  return f;
}

// Activation derivative from its output: 1 - x^2 for tanh.
ad::Var act_slope(ad::Var x, Activation a) {
  if (a == Activation::identity) {
    return x.tape()->constant(Eigen::MatrixXd::Ones(x.rows(), x.cols()));
  }
  return -ad::square(x) + 1.0;
}

}  // namespace

NNTapeEval nn_forward_with_jacobian_reference(const NNVars& n, ad::Var y) {
  const ForwardNodes f = forward_nodes(n, y);
  const Eigen::Index batch = y.cols();
  const Eigen::Index h = n.spec.n_hidden;

  const Activation a = n.spec.activation;
  const ad::Var s1 = act_slope(f.z1, a);
  const ad::Var s2 = act_slope(f.z2, a);
  const ad::Var sg1 = act_slope(f.g1, a);
  const ad::Var s4 = act_slope(f.z4, a);
  const ad::Var sg2 = act_slope(f.g2, a);

  NNTapeEval out;
  out.out = f.out;
  for (int j = 0; j < n.spec.n_in; ++j) {
    // d(W y)/d y_j is column j of W, the same for every sample.
    ad::Tape& tape = *y.tape();
    Eigen::MatrixXd pick = Eigen::MatrixXd::Zero(n.spec.n_in, 1);
    pick(j, 0) = 1.0;
    const ad::Var e = tape.constant(std::move(pick));
    const ad::Var w0j = ad::broadcast_to(ad::matmul(n.W[0], e), h, batch);
    const ad::Var w2j = ad::broadcast_to(ad::matmul(n.W[2], e), h, batch);
    const ad::Var w4j = ad::broadcast_to(ad::matmul(n.W[4], e), h, batch);

    const ad::Var dz1 = s1 * w0j;
    const ad::Var dz2 = s2 * ad::matmul(n.W[1], dz1);
    const ad::Var dg1 = sg1 * w2j;
    const ad::Var dz3 = dz2 * f.g1 + f.z2 * dg1;
    const ad::Var dz4 = s4 * ad::matmul(n.W[3], dz3);
    const ad::Var dg2 = sg2 * w4j;
    const ad::Var dz5 = dz4 * f.g2 + f.z4 * dg2;
    out.jacobian.push_back(ad::matmul(n.W[5], dz5));
  }
  return out;
}

// ---- fused node ------------------------------------------------------------

namespace {

constexpr Eigen::Index kBlock = 128;

using Mat = Eigen::MatrixXd;

struct Weights {
  std::array<const Mat*, NNParams::kLayers> W;
  std::array<const Mat*, NNParams::kLayers> b;
};

// Forward intermediates of one column block; s* are activation slopes.
struct BlockForward {
  Mat z1, z2, g1, z3, z4, g2, z5;
  Mat s1, s2, sg1, s4, sg2;
};

// Tangent of the forward pass along input direction j.
struct BlockTangent {
  Mat t1, u2, t2, tg1, t3, u4, t4, tg2, t5;
};

Mat activate_mat(Mat a, Activation act) {
  return act == Activation::tanh ? ad::tanh_values(a) : a;
}

Mat slope_mat(const Mat& z, Activation act) {
  if (act == Activation::identity) return Mat::Ones(z.rows(), z.cols());
  return (1.0 - z.array().square()).matrix();
}

void block_forward(const Weights& w, const Mat& y, Activation act, BlockForward& f) {
  f.z1 = activate_mat((*w.W[0] * y).colwise() + w.b[0]->col(0), act);
  f.z2 = activate_mat((*w.W[1] * f.z1).colwise() + w.b[1]->col(0), act);
  f.g1 = activate_mat((*w.W[2] * y).colwise() + w.b[2]->col(0), act);
  f.z3 = f.z2.cwiseProduct(f.g1);
  f.z4 = activate_mat((*w.W[3] * f.z3).colwise() + w.b[3]->col(0), act);
  f.g2 = activate_mat((*w.W[4] * y).colwise() + w.b[4]->col(0), act);
  f.z5 = f.z4.cwiseProduct(f.g2);
  f.s1 = slope_mat(f.z1, act);
  f.s2 = slope_mat(f.z2, act);
  f.sg1 = slope_mat(f.g1, act);
  f.s4 = slope_mat(f.z4, act);
  f.sg2 = slope_mat(f.g2, act);
}

void block_tangent(const Weights& w, const BlockForward& f, Eigen::Index j, BlockTangent& t) {
  t.t1 = f.s1.array().colwise() * w.W[0]->col(j).array();
  t.u2.noalias() = *w.W[1] * t.t1;
  t.t2 = f.s2.cwiseProduct(t.u2);
  t.tg1 = f.sg1.array().colwise() * w.W[2]->col(j).array();
  t.t3 = t.t2.cwiseProduct(f.g1) + f.z2.cwiseProduct(t.tg1);
  t.u4.noalias() = *w.W[3] * t.t3;
  t.t4 = f.s4.cwiseProduct(t.u4);
  t.tg2 = f.sg2.array().colwise() * w.W[4]->col(j).array();
  t.t5 = t.t4.cwiseProduct(f.g2) + f.z4.cwiseProduct(t.tg2);
}

// Value rows: [out; J_0; ...; J_{n_in-1}], each n_out rows.
Mat fused_value(const Weights& w, const NNSpec& spec, const Mat& y, bool jac) {
  const Eigen::Index n_out = spec.n_out;
  const Eigen::Index rows = jac ? n_out * (1 + spec.n_in) : n_out;
  Mat v(rows, y.cols());
  BlockForward f;
  BlockTangent t;
  for (Eigen::Index c0 = 0; c0 < y.cols(); c0 += kBlock) {
    const Eigen::Index nb = std::min(kBlock, y.cols() - c0);
    block_forward(w, y.middleCols(c0, nb), spec.activation, f);
    v.block(0, c0, n_out, nb) = (*w.W[5] * f.z5).colwise() + w.b[5]->col(0);
    if (!jac) continue;
    for (Eigen::Index j = 0; j < spec.n_in; ++j) {
      block_tangent(w, f, j, t);
      v.block(n_out * (1 + j), c0, n_out, nb).noalias() = *w.W[5] * t.t5;
    }
  }
  return v;
}

Weights weights_of(const ad::Tape& tape, const std::array<int, 13>& idx) {
  Weights w;
  for (int l = 0; l < NNParams::kLayers; ++l) {
    w.W[l] = &tape.value(idx[1 + l]);
    w.b[l] = &tape.value(idx[7 + l]);
  }
  return w;
}

// Reverse sweep of fused_value. Recomputes the forward block by block.
void fused_backward(ad::Tape& tape, int self, const std::array<int, 13>& idx,
                    const NNSpec& spec, bool jac) {
  const Weights w = weights_of(tape, idx);
  const Mat& y = tape.value(idx[0]);
  const Mat& adj = tape.adjoint(self);
  const Activation act = spec.activation;
  const Eigen::Index n_out = spec.n_out;

  std::array<Mat, NNParams::kLayers> dW, db;
  for (int l = 0; l < NNParams::kLayers; ++l) {
    dW[l] = Mat::Zero(w.W[l]->rows(), w.W[l]->cols());
    db[l] = Mat::Zero(w.b[l]->rows(), 1);
  }
  Mat dy = Mat::Zero(y.rows(), y.cols());

  BlockForward f;
  BlockTangent t;
  for (Eigen::Index c0 = 0; c0 < y.cols(); c0 += kBlock) {
    const Eigen::Index nb = std::min(kBlock, y.cols() - c0);
    const auto yb = y.middleCols(c0, nb);
    block_forward(w, yb, act, f);
    const Eigen::Index h = f.z1.rows();

    Mat dz1 = Mat::Zero(h, nb), dz2 = Mat::Zero(h, nb), dg1 = Mat::Zero(h, nb);
    Mat dz4 = Mat::Zero(h, nb), dg2 = Mat::Zero(h, nb);
    Mat ds1 = Mat::Zero(h, nb), ds2 = Mat::Zero(h, nb), dsg1 = Mat::Zero(h, nb);
    Mat ds4 = Mat::Zero(h, nb), dsg2 = Mat::Zero(h, nb);

    if (jac) {
      for (Eigen::Index j = 0; j < spec.n_in; ++j) {
        const auto gJ = adj.block(n_out * (1 + j), c0, n_out, nb);
        if (gJ.isZero(0.0)) continue;
        block_tangent(w, f, j, t);
        dW[5].noalias() += gJ * t.t5.transpose();
        const Mat dt5 = w.W[5]->transpose() * gJ;
        // t5 = t4 .* g2 + z4 .* tg2
        const Mat dt4 = dt5.cwiseProduct(f.g2);
        dg2 += dt5.cwiseProduct(t.t4);
        dz4 += dt5.cwiseProduct(t.tg2);
        const Mat dtg2 = dt5.cwiseProduct(f.z4);
        // tg2 = sg2 .* W4(:, j)
        dsg2 += (dtg2.array().colwise() * w.W[4]->col(j).array()).matrix();
        dW[4].col(j) += dtg2.cwiseProduct(f.sg2).rowwise().sum();
        // t4 = s4 .* u4, u4 = W3 t3
        ds4 += dt4.cwiseProduct(t.u4);
        const Mat du4 = dt4.cwiseProduct(f.s4);
        dW[3].noalias() += du4 * t.t3.transpose();
        const Mat dt3 = w.W[3]->transpose() * du4;
        // t3 = t2 .* g1 + z2 .* tg1
        const Mat dt2 = dt3.cwiseProduct(f.g1);
        dg1 += dt3.cwiseProduct(t.t2);
        dz2 += dt3.cwiseProduct(t.tg1);
        const Mat dtg1 = dt3.cwiseProduct(f.z2);
        // tg1 = sg1 .* W2(:, j)
        dsg1 += (dtg1.array().colwise() * w.W[2]->col(j).array()).matrix();
        dW[2].col(j) += dtg1.cwiseProduct(f.sg1).rowwise().sum();
        // t2 = s2 .* u2, u2 = W1 t1
        ds2 += dt2.cwiseProduct(t.u2);
        const Mat du2 = dt2.cwiseProduct(f.s2);
        dW[1].noalias() += du2 * t.t1.transpose();
        const Mat dt1 = w.W[1]->transpose() * du2;
        // t1 = s1 .* W0(:, j)
        ds1 += (dt1.array().colwise() * w.W[0]->col(j).array()).matrix();
        dW[0].col(j) += dt1.cwiseProduct(f.s1).rowwise().sum();
      }
    }

    // out = W5 z5 + b5
    const auto gO = adj.block(0, c0, n_out, nb);
    dW[5].noalias() += gO * f.z5.transpose();
    db[5] += gO.rowwise().sum();
    const Mat dz5 = w.W[5]->transpose() * gO;
    dz4 += dz5.cwiseProduct(f.g2);
    dg2 += dz5.cwiseProduct(f.z4);

    // Slopes depend on the activations: d(1 - z^2)/dz = -2 z.
    if (act == Activation::tanh) {
      dz1 -= 2.0 * ds1.cwiseProduct(f.z1);
      dz2 -= 2.0 * ds2.cwiseProduct(f.z2);
      dg1 -= 2.0 * dsg1.cwiseProduct(f.g1);
      dz4 -= 2.0 * ds4.cwiseProduct(f.z4);
      dg2 -= 2.0 * dsg2.cwiseProduct(f.g2);
    }

    // z4 = act(W3 z3 + b3)
    const Mat da4 = dz4.cwiseProduct(f.s4);
    dW[3].noalias() += da4 * f.z3.transpose();
    db[3] += da4.rowwise().sum();
    const Mat dz3 = w.W[3]->transpose() * da4;
    // g2 = act(W4 y + b4)
    const Mat dc2 = dg2.cwiseProduct(f.sg2);
    dW[4].noalias() += dc2 * yb.transpose();
    db[4] += dc2.rowwise().sum();
    // z3 = z2 .* g1
    dz2 += dz3.cwiseProduct(f.g1);
    dg1 += dz3.cwiseProduct(f.z2);
    // z2 = act(W1 z1 + b1)
    const Mat da2 = dz2.cwiseProduct(f.s2);
    dW[1].noalias() += da2 * f.z1.transpose();
    db[1] += da2.rowwise().sum();
    dz1.noalias() += w.W[1]->transpose() * da2;
    // g1 = act(W2 y + b2)
    const Mat dc1 = dg1.cwiseProduct(f.sg1);
    dW[2].noalias() += dc1 * yb.transpose();
    db[2] += dc1.rowwise().sum();
    // z1 = act(W0 y + b0)
    const Mat da1 = dz1.cwiseProduct(f.s1);
    dW[0].noalias() += da1 * yb.transpose();
    db[0] += da1.rowwise().sum();

    auto dyb = dy.middleCols(c0, nb);
    dyb.noalias() += w.W[0]->transpose() * da1;
    dyb.noalias() += w.W[2]->transpose() * dc1;
    dyb.noalias() += w.W[4]->transpose() * dc2;
  }

  tape.accumulate(idx[0], dy);
  for (int l = 0; l < NNParams::kLayers; ++l) {
    tape.accumulate(idx[1 + l], dW[l]);
    tape.accumulate(idx[7 + l], db[l]);
  }
}

ad::Var record_fused(const NNVars& n, ad::Var y, bool jac) {
  if (y.rows() != n.spec.n_in) {
    std::ostringstream os;
    os << "nn: input has " << y.rows() << " rows, network expects " << n.spec.n_in;
    throw ConfigError(os.str());
  }
  ad::Tape& tape = *y.tape();
  std::array<int, 13> idx{};
  idx[0] = y.index();
  for (int l = 0; l < NNParams::kLayers; ++l) {
    if (n.W[l].tape() != &tape || n.b[l].tape() != &tape) {
      throw ConfigError("nn: parameters and input live on different tapes");
    }
    idx[1 + l] = n.W[l].index();
    idx[7 + l] = n.b[l].index();
  }
  Mat v = fused_value(weights_of(tape, idx), n.spec, y.value(), jac);
  const NNSpec spec = n.spec;
  return tape.record(std::move(v), jac ? "nn_fused_jac" : "nn_fused",
                     std::vector<int>(idx.begin(), idx.end()),
                     [idx, spec, jac](ad::Tape& t, int self) {
                       fused_backward(t, self, idx, spec, jac);
                     });
}

}  // namespace

ad::Var nn_forward(const NNVars& n, ad::Var y) { return record_fused(n, y, false); }

NNTapeEval nn_forward_with_jacobian(const NNVars& n, ad::Var y) {
  const ad::Var packed = record_fused(n, y, true);
  const Eigen::Index n_out = n.spec.n_out;
  NNTapeEval out;
  out.out = ad::slice_rows(packed, 0, n_out);
  for (int j = 0; j < n.spec.n_in; ++j) {
    out.jacobian.push_back(ad::slice_rows(packed, n_out * (1 + j), n_out));
  }
  return out;
}

}  // namespace tvdnn
