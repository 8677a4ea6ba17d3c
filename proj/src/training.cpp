#include "tvdnn/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <future>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

namespace tvdnn {

namespace {

Eigen::MatrixXd weight_matrix(const Eigen::VectorXd& w, Eigen::Index rows, Eigen::Index cols) {
  if (w.size() == 0) return Eigen::MatrixXd::Ones(rows, cols);
  if (w.size() != rows) throw ConfigError("loss: weight count does not match components");
  return w.replicate(1, cols);
}

ad::Var taped_loss(ad::Var q, const Sample& s, double dx, const LossOptions& lo,
                   ad::Var* data_part = nullptr, ad::Var* penalty_part = nullptr) {
  ad::Var data = loss_l2(q, s.target, dx, lo.weights);
  if (data_part) *data_part = data;
  if (!lo.penalty) return data;
  ad::Var pen = bound_penalty(q, *lo.penalty, dx);
  if (penalty_part) *penalty_part = pen;
  return data + pen;
}

ad::Var record_step(const Model& model, const std::vector<NNVars>& nets, ad::Var q,
                    const Grid& grid, Stepper stepper, RolloutTrace* trace, double* speed,
                    bool store_faces) {
  const TapedRhs rhs = [&](ad::Var state) {
    RhsVars r = record_rhs(model.config, nets, state, grid);
    if (r.flux.wave_speed.valid()) {
      if (speed) *speed = std::max(*speed, r.flux.wave_speed.value().maxCoeff());
      if (store_faces && trace) {
        trace->faces.push_back({r.flux.q_plus.value(), r.flux.q_minus.value()});
      }
    }
    return r.rhs;
  };
  return stepper == Stepper::forward_euler ? step_forward_euler(rhs, q, grid.dt)
                                           : step_rk4(rhs, q, grid.dt);
}

Field plain_rhs(const Model& model, const Field& q, const Grid& grid) {
  ad::Tape t;
  const std::vector<NNVars> nets = model_leaves(t, model, false);
  return record_rhs(model.config, nets, t.constant(q), grid).rhs.value();
}

struct Vjp {
  Field dq;
  Eigen::VectorXd dtheta;
};

// a^T dR/dq and a^T dR/dtheta at state q.
Vjp rhs_vjp(const Model& model, const Field& q, const Field& a, const Grid& grid) {
  ad::Tape t;
  const std::vector<NNVars> nets = model_leaves(t, model, true);
  const ad::Var qv = t.variable(q);
  const RhsVars r = record_rhs(model.config, nets, qv, grid);
  t.backward(r.rhs, a);
  return {t.grad(qv), model_gradient(t, nets)};
}

void finish_loss(Evaluation& ev, const Sample& s, const Grid& grid, const LossOptions& lo) {
  const Field& q = ev.trace.final_state();
  ev.data_loss = loss_l2(q, s.target, grid.dx, lo.weights);
  ev.penalty = lo.penalty ? bound_penalty(q, *lo.penalty, grid.dx) : 0.0;
  ev.loss = ev.data_loss + ev.penalty;
}

void mark_diverged(Evaluation& ev) {
  ev.diverged = true;
  ev.loss = ev.data_loss = std::numeric_limits<double>::infinity();
  ev.penalty = 0.0;
  ev.grad.resize(0);
}

Evaluation evaluate_whole_tape(const Model& model, const Sample& s, const Grid& grid,
                               const LossOptions& lo, const EvalOptions& opts) {
  Evaluation ev;
  RolloutTrace& tr = ev.trace;
  ad::Tape tape;
  const std::vector<NNVars> nets = model_leaves(tape, model, opts.gradient);
  ad::Var q = tape.constant(s.q0);
  tr.states.push_back(s.q0);
  tr.state_steps.push_back(0);
  tr.tv.push_back(total_variation(s.q0, grid.bc));
  for (int n = 1; n <= grid.n_t; ++n) {
    double speed = 0.0;
    q = record_step(model, nets, q, grid, opts.stepper, &tr, &speed, opts.store_faces);
    tr.max_wave_speed.push_back(speed);
    tr.steps_taken = n;
    tr.states.push_back(q.value());
    tr.state_steps.push_back(n);
    if (is_diverged(q.value())) {
      tr.diverged = true;
      tr.diverged_step = n;
      mark_diverged(ev);
      return ev;
    }
    tr.tv.push_back(total_variation(q.value(), grid.bc));
  }
  const ad::Var J = taped_loss(q, s, grid.dx, lo);
  finish_loss(ev, s, grid, lo);
  if (opts.gradient) {
    tape.backward(J);
    ev.grad = model_gradient(tape, nets);
  }
  if (opts.tape_stats) *opts.tape_stats = tape.stats();
  return ev;
}

Evaluation evaluate_stepwise(const Model& model, const Sample& s, const Grid& grid,
                             const LossOptions& lo, const EvalOptions& opts) {
  Evaluation ev;
  RolloutOptions ro;
  ro.stepper = opts.stepper;
  ro.store_faces = opts.store_faces;
  ev.trace = rollout(model, s.q0, grid, ro);
  if (ev.trace.diverged) {
    mark_diverged(ev);
    return ev;
  }
  finish_loss(ev, s, grid, lo);
  if (!opts.gradient) return ev;

  Field lambda;
  {
    ad::Tape t;
    const ad::Var qf = t.variable(ev.trace.final_state());
    t.backward(taped_loss(qf, s, grid.dx, lo));
    lambda = t.grad(qf);
  }
  ev.grad = Eigen::VectorXd::Zero(model.size());
  for (int n = grid.n_t - 1; n >= 0; --n) {
    ad::Tape t;
    const std::vector<NNVars> nets = model_leaves(t, model, true);
    const ad::Var qn = t.variable(ev.trace.states[n]);
    const ad::Var next = record_step(model, nets, qn, grid, opts.stepper, nullptr, nullptr, false);
    t.backward(next, lambda);
    ev.grad += model_gradient(t, nets);
    lambda = t.grad(qn);
    if (opts.tape_stats && n == 0) *opts.tape_stats = t.stats();
  }
  return ev;
}

// Bytes a whole-rollout tape would hold, from a one-step probe.
double whole_tape_bytes(const Model& model, const Sample& s, const Grid& grid, Stepper stepper) {
  ad::Tape t;
  const std::vector<NNVars> nets = model_leaves(t, model, true);
  record_step(model, nets, t.constant(s.q0), grid, stepper, nullptr, nullptr, false);
  // values and adjoints
  return 2.0 * 8.0 * static_cast<double>(t.stats().stored_scalars) * grid.n_t;
}

}  // namespace

// ---- losses ----------------------------------------------------------------

double loss_l2(const Field& q, const Field& exact, double dx, const Eigen::VectorXd& weights) {
  if (q.rows() != exact.rows() || q.cols() != exact.cols()) {
    throw ConfigError("loss_l2: shape mismatch");
  }
  const Eigen::MatrixXd w = weight_matrix(weights, q.rows(), q.cols());
  return dx * (w.array() * (q - exact).array().square()).sum();
}

ad::Var loss_l2(ad::Var q, const Field& exact, double dx, const Eigen::VectorXd& weights) {
  if (q.rows() != exact.rows() || q.cols() != exact.cols()) {
    throw ConfigError("loss_l2: shape mismatch");
  }
  ad::Tape& t = *q.tape();
  const ad::Var diff = q - t.constant(exact);
  ad::Var sq = ad::square(diff);
  if (weights.size() != 0) sq = sq * t.constant(weight_matrix(weights, q.rows(), q.cols()));
  return dx * ad::sum(sq);
}

double bound_penalty(const Field& q, Bounds b, double dx) {
  if (!(b.lo < b.hi)) throw ConfigError("bound_penalty: need lo < hi");
  const auto below = (q.array() - b.lo).min(0.0);
  const auto above = (q.array() - b.hi).max(0.0);
  return dx * (below.square().sum() + above.square().sum());
}

ad::Var bound_penalty(ad::Var q, Bounds b, double dx) {
  if (!(b.lo < b.hi)) throw ConfigError("bound_penalty: need lo < hi");
  ad::Tape& t = *q.tape();
  const ad::Var zero = t.constant(Eigen::MatrixXd::Zero(q.rows(), q.cols()));
  const ad::Var below = ad::min(q - b.lo, zero);
  const ad::Var above = ad::max(q - b.hi, zero);
  return dx * (ad::sum(ad::square(below)) + ad::sum(ad::square(above)));
}

// ---- projection ------------------------------------------------------------

ProjectionResult project(const NNParams& params, double max_a, double cfl_max, double dx,
                         double dt) {
  if (!(cfl_max > 0 && dx > 0 && dt > 0)) throw ConfigError("project: non-positive constants");
  ProjectionResult r{params, 1.0};
  const double bound = cfl_max * dx / dt;
  if (max_a > bound) {
    r.factor = bound / max_a;
    r.params.W[5] *= r.factor;
  }
  return r;
}

// ---- optimizers ------------------------------------------------------------

std::string to_string(OptimizerKind k) { return k == OptimizerKind::rmsprop ? "rmsprop" : "adam"; }

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "rmsprop") return OptimizerKind::rmsprop;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + s + "'");
}

void TrainConfig::validate() const {
  if (!(base_lr > 0)) throw ConfigError("train: base_lr must be positive");
  if (!(cfl_max > 0)) throw ConfigError("train: cfl_max must be positive");
  if (n_iters < 0) throw ConfigError("train: n_iters must be >= 0");
  if (!(rms_smoothing >= 0 && rms_smoothing < 1)) {
    throw ConfigError("train: rms_smoothing must lie in [0, 1)");
  }
  if (penalty && !(penalty->lo < penalty->hi)) throw ConfigError("train: penalty needs lo < hi");
  if (jobs < 1) throw ConfigError("train: jobs must be >= 1");
}

void rmsprop_step(OptimizerState& st, Eigen::VectorXd& params, const Eigen::VectorXd& grads,
                  const TrainConfig& c) {
  if (grads.size() != params.size()) throw ConfigError("rmsprop: gradient size mismatch");
  if (st.v.size() != params.size()) st.v = Eigen::VectorXd::Zero(params.size());
  const Eigen::ArrayXd g = grads.array() + c.l2_lambda * params.array();
  st.v = (c.rms_smoothing * st.v.array() + (1.0 - c.rms_smoothing) * g.square()).matrix();
  params.array() -= c.base_lr * g / (st.v.array().sqrt() + c.eps);
  ++st.step;
}

void adam_step(OptimizerState& st, Eigen::VectorXd& params, const Eigen::VectorXd& grads,
               const TrainConfig& c) {
  if (grads.size() != params.size()) throw ConfigError("adam: gradient size mismatch");
  if (st.m.size() != params.size()) st.m = Eigen::VectorXd::Zero(params.size());
  if (st.v.size() != params.size()) st.v = Eigen::VectorXd::Zero(params.size());
  const Eigen::ArrayXd g = grads.array() + c.l2_lambda * params.array();
  ++st.step;
  st.m = (c.beta1 * st.m.array() + (1.0 - c.beta1) * g).matrix();
  st.v = (c.beta2 * st.v.array() + (1.0 - c.beta2) * g.square()).matrix();
  const double c1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
  params.array() -= c.base_lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + c.eps);
}

// ---- gradients -------------------------------------------------------------

Evaluation evaluate(const Model& model, const Sample& sample, const Grid& grid,
                    const LossOptions& loss, const EvalOptions& opts) {
  grid.validate();
  model.validate(static_cast<int>(sample.q0.rows()));
  if (sample.q0.cols() != grid.n_x || sample.target.cols() != grid.n_x) {
    throw ConfigError("evaluate: sample does not match the grid");
  }
  GradientMode mode = opts.mode;
  if (!opts.gradient) {
    mode = GradientMode::stepwise;
  } else if (mode == GradientMode::automatic) {
    mode = whole_tape_bytes(model, sample, grid, opts.stepper) <= opts.memory_budget
               ? GradientMode::whole_tape
               : GradientMode::stepwise;
  }
  return mode == GradientMode::whole_tape ? evaluate_whole_tape(model, sample, grid, loss, opts)
                                          : evaluate_stepwise(model, sample, grid, loss, opts);
}

Eigen::VectorXd adjoint_gradient_rk4(const Model& model, const Sample& sample, const Grid& grid,
                                     const LossOptions& loss) {
  grid.validate();
  model.validate(static_cast<int>(sample.q0.rows()));
  const double dt = grid.dt;

  // Forward sweep keeping the four stage states of every step.
  std::vector<std::vector<Field>> stages(grid.n_t);
  Field q = sample.q0;
  const PlainRhs rhs = [&](const Field& state) { return plain_rhs(model, state, grid); };
  for (int n = 0; n < grid.n_t; ++n) {
    q = step_rk4(rhs, q, dt, &stages[n]);
    if (is_diverged(q)) throw GradientError("adjoint: forward rollout diverged", -1);
  }

  Field lambda;
  {
    ad::Tape t;
    const ad::Var qf = t.variable(q);
    t.backward(taped_loss(qf, sample, grid.dx, loss));
    lambda = t.grad(qf);
  }

  Eigen::VectorXd grad = Eigen::VectorXd::Zero(model.size());
  for (int n = grid.n_t - 1; n >= 0; --n) {
    const std::vector<Field>& Q = stages[n];
    if (Q.size() != 4) throw ConfigError("adjoint: missing RK4 stage storage");
    // a4 = lambda; a3 = lambda + dt/2 a4 R'(Q3); a2 = lambda + dt/2 a3 R'(Q2);
    // a1 = lambda + dt a2 R'(Q1); lambda_prev = lambda + dt sum_s w_s a_s R'(Q_{s-1}).
    const Field& a4 = lambda;
    const Vjp v4 = rhs_vjp(model, Q[3], a4, grid);
    const Field a3 = lambda + 0.5 * dt * v4.dq;
    const Vjp v3 = rhs_vjp(model, Q[2], a3, grid);
    const Field a2 = lambda + 0.5 * dt * v3.dq;
    const Vjp v2 = rhs_vjp(model, Q[1], a2, grid);
    const Field a1 = lambda + dt * v2.dq;
    const Vjp v1 = rhs_vjp(model, Q[0], a1, grid);

    grad += dt * (kRk4Weights[0] * v1.dtheta + kRk4Weights[1] * v2.dtheta +
                  kRk4Weights[2] * v3.dtheta + kRk4Weights[3] * v4.dtheta);
    lambda = lambda + dt * (kRk4Weights[0] * v1.dq + kRk4Weights[1] * v2.dq +
                            kRk4Weights[2] * v3.dq + kRk4Weights[3] * v4.dq);
  }
  return grad;
}

GradCheckResult grad_check(const std::function<double(const Eigen::VectorXd&)>& loss_fn,
                           const Eigen::VectorXd& theta, const Eigen::VectorXd& analytic,
                           double h, int n_samples, std::uint64_t seed,
                           const std::function<std::uint64_t(const Eigen::VectorXd&)>& signature) {
  if (analytic.size() != theta.size()) throw ConfigError("grad_check: gradient size mismatch");
  std::vector<int> idx(theta.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  if (n_samples < static_cast<int>(idx.size())) idx.resize(n_samples);
  std::sort(idx.begin(), idx.end());

  const std::uint64_t sig0 = signature ? signature(theta) : 0;
  GradCheckResult res;
  for (int j : idx) {
    Eigen::VectorXd tp = theta, tm = theta;
    tp(j) += h;
    tm(j) -= h;
    if (signature && (signature(tp) != sig0 || signature(tm) != sig0)) {
      ++res.masked;
      continue;
    }
    const double fd = (loss_fn(tp) - loss_fn(tm)) / (2.0 * h);
    const double an = analytic(j);
    if (std::abs(an) <= 1e-8) continue;
    ++res.checked;
    const double rel = std::abs(fd - an) / std::abs(an);
    if (res.worst_index < 0 || rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_index = j;
    }
  }
  return res;
}

std::uint64_t rollout_signature(const Model& model, const Sample& sample, const Grid& grid,
                                Stepper stepper) {
  ad::Tape acc;
  Field q = sample.q0;
  for (int n = 0; n < grid.n_t; ++n) {
    ad::Tape t;
    const std::vector<NNVars> nets = model_leaves(t, model, false);
    q = record_step(model, nets, t.constant(q), grid, stepper, nullptr, nullptr, false).value();
    acc.mix_branch(t.branch_signature());
    if (is_diverged(q)) break;
  }
  return acc.branch_signature();
}

// ---- training loop ---------------------------------------------------------

namespace {

struct BatchResult {
  double loss = 0.0;
  double penalty = 0.0;
  double max_speed = 0.0;
  bool diverged = false;
  Eigen::VectorXd grad;
  std::vector<FaceStates> faces;
};

BatchResult evaluate_batch(const Scenario& sc, const Model& model, const LossOptions& lo,
                           const EvalOptions& eo, int jobs) {
  const std::size_t m = sc.samples.size();
  std::vector<Evaluation> evs(m);
  if (jobs > 1 && m > 1) {
    std::vector<std::future<Evaluation>> fut;
    for (std::size_t k = 0; k < m; ++k) {
      fut.push_back(std::async(std::launch::async, [&, k] {
        return evaluate(model, sc.samples[k], sc.grid, lo, eo);
      }));
      if (fut.size() == static_cast<std::size_t>(jobs) || k + 1 == m) {
        const std::size_t first = k + 1 - fut.size();
        for (std::size_t f = 0; f < fut.size(); ++f) evs[first + f] = fut[f].get();
        fut.clear();
      }
    }
  } else {
    for (std::size_t k = 0; k < m; ++k) evs[k] = evaluate(model, sc.samples[k], sc.grid, lo, eo);
  }

  // Fixed-order reduction keeps runs deterministic for any job count.
  BatchResult b;
  for (Evaluation& ev : evs) {
    b.diverged = b.diverged || ev.diverged;
    b.loss += ev.loss / m;
    b.penalty += ev.penalty / m;
    for (double s : ev.trace.max_wave_speed) b.max_speed = std::max(b.max_speed, s);
    if (ev.grad.size()) {
      if (b.grad.size() == 0) b.grad = Eigen::VectorXd::Zero(ev.grad.size());
      b.grad += ev.grad / static_cast<double>(m);
    }
    for (FaceStates& f : ev.trace.faces) b.faces.push_back(std::move(f));
  }
  if (b.diverged) {
    b.loss = std::numeric_limits<double>::infinity();
    b.grad.resize(0);
  }
  return b;
}

double max_speed_on(const NNParams& f, const std::vector<FaceStates>& faces, SpeedMode mode) {
  double a = 0.0;
  for (const FaceStates& fs : faces) a = std::max(a, wave_speed(f, fs, mode).maxCoeff());
  return a;
}

}  // namespace

TrainRecord train(const Scenario& scenario, Model model, const TrainConfig& config,
                  const IterationCallback& on_iteration, GradientMode mode) {
  config.validate();
  model.validate(scenario.components);
  const Grid& grid = scenario.grid;
  const bool constrained = model.config.kind != FluxKind::unconstrained;
  const double bound = config.cfl_max * grid.dx / grid.dt;

  LossOptions lo{scenario.loss_weights, config.penalty};
  EvalOptions eo;
  eo.stepper = config.stepper;
  eo.mode = mode;
  eo.store_faces = constrained;

  TrainRecord rec;
  OptimizerState opt;
  Eigen::VectorXd flat = model.flatten();
  const auto t_start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  };

  for (int k = 0;; ++k) {
    const bool last = k == config.n_iters;
    eo.gradient = !last;
    BatchResult b = evaluate_batch(scenario, model, lo, eo, config.jobs);

    IterationRecord row;
    row.iter = k;
    row.loss = b.loss;
    row.penalty = b.penalty;
    row.max_wave_speed = b.max_speed;
    row.bound = bound;
    row.diverged = b.diverged;

    const bool stop = last || (config.stop_below && b.loss < *config.stop_below);
    if (stop || b.diverged) {
      if (b.diverged) {
        std::cerr << "train: iteration " << k << " diverged, update skipped\n";
      }
      row.wall_time = elapsed();
      rec.iterations.push_back(row);
      if (on_iteration) on_iteration(row, model);
      if (stop) break;
      continue;
    }

    if (config.optimizer == OptimizerKind::rmsprop) {
      rmsprop_step(opt, flat, b.grad, config);
    } else {
      adam_step(opt, flat, b.grad, config);
    }
    model.unflatten(flat);

    if (constrained) {
      // Wave speed of the updated flux network on this iteration's states.
      const double a_new = max_speed_on(model.nets[0], b.faces, model.config.speed);
      ProjectionResult p = project(model.nets[0], a_new, config.cfl_max, grid.dx, grid.dt);
      row.projected = p.applied();
      row.rescale_factor = p.factor;
      if (!p.applied()) {
        row.max_wave_speed_after = a_new;
      } else if (config.verify_projection) {
        row.max_wave_speed_after = max_speed_on(p.params, b.faces, model.config.speed);
      }
      model.nets[0] = std::move(p.params);
      flat = model.flatten();
    }
    if (!model.all_finite()) throw GradientError("train: non-finite parameters after update", -1);

    row.wall_time = elapsed();
    rec.iterations.push_back(row);
    if (on_iteration) on_iteration(row, model);
  }
  rec.model = std::move(model);
  return rec;
}

}  // namespace tvdnn
