#include <doctest.h>

#include <random>

#include "helpers.hpp"
#include "oracles.hpp"
#include "tvdnn/scenarios.hpp"
#include "tvdnn/training.hpp"

using namespace tvdnn;
using testutil::max_rel;
using testutil::random_params;

namespace {

Evaluation eval_mode(const Model& m, const Scenario& s, GradientMode mode, Stepper st,
                     const LossOptions& lo = {}) {
  EvalOptions eo;
  eo.mode = mode;
  eo.stepper = st;
  return evaluate(m, s.samples.front(), s.grid, lo, eo);
}

double speed_oracle(const NNParams& p, const FaceStates& f) {
  double a = 0.0;
  for (Eigen::Index j = 0; j < f.q_plus.cols(); ++j) {
    for (const Eigen::MatrixXd* side : {&f.q_plus, &f.q_minus}) {
      const double y = (*side)(0, j);
      a = std::max(a, std::abs(oracle::nn_jacobian(p, {y})[0][0]));
    }
  }
  return a;
}

bool same_rows(const TrainRecord& a, const TrainRecord& b) {
  if (a.iterations.size() != b.iterations.size()) return false;
  for (std::size_t k = 0; k < a.iterations.size(); ++k) {
    const IterationRecord &x = a.iterations[k], &y = b.iterations[k];
    if (x.loss != y.loss || x.max_wave_speed != y.max_wave_speed || x.projected != y.projected ||
        x.rescale_factor != y.rescale_factor) {
      return false;
    }
  }
  return a.model.flatten() == b.model.flatten();
}

}  // namespace

TEST_CASE("L2 loss") {
  Field q(2, 2), e = Field::Zero(2, 2);
  q << 1, 2, 3, 4;
  CHECK(loss_l2(q, e, 0.5) == 0.5 * (1 + 4 + 9 + 16));
  Eigen::VectorXd w(2);
  w << 2.0, 0.5;
  CHECK(loss_l2(q, e, 0.5, w) == 0.5 * (2 * (1 + 4) + 0.5 * (9 + 16)));
  CHECK(loss_l2(e, e, 0.1) == 0.0);
  CHECK_THROWS_AS(loss_l2(q, Field::Zero(1, 2), 0.5), ConfigError);

  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const Field a = testutil::random_field(rng, 3, 7, -1, 1);
    const Field b = testutil::random_field(rng, 3, 7, -1, 1);
    const Eigen::VectorXd wt = Eigen::VectorXd::Random(3).cwiseAbs();
    double brute = 0.0;
    for (int k = 0; k < 3; ++k) {
      for (int i = 0; i < 7; ++i) brute += wt(k) * (a(k, i) - b(k, i)) * (a(k, i) - b(k, i));
    }
    CHECK(loss_l2(a, b, 0.03, wt) == doctest::Approx(0.03 * brute).epsilon(1e-14));

    ad::Tape t;
    const ad::Var qa = t.variable(a);
    const ad::Var J = loss_l2(qa, b, 0.03, wt);
    CHECK(J.scalar() == doctest::Approx(0.03 * brute).epsilon(1e-14));
    t.backward(J);
    Field want = 2 * 0.03 * (a - b);
    want.array().colwise() *= wt.array();
    CHECK((t.grad(qa) - want).cwiseAbs().maxCoeff() < 1e-15);
  }
}

TEST_CASE("bound penalty") {
  Field q(1, 4);
  q << -0.5, 0.5, 1.5, 1.0;
  CHECK(bound_penalty(q, {0.0, 1.0}, 0.1) == doctest::Approx(0.1 * (0.25 + 0.25)).epsilon(1e-15));
  CHECK(bound_penalty(Field::Constant(1, 5, 0.3), {0.0, 1.0}, 0.1) == 0.0);

  ad::Tape t;
  const ad::Var qv = t.variable(q);
  const ad::Var P = bound_penalty(qv, {0.0, 1.0}, 0.1);
  CHECK(P.scalar() == bound_penalty(q, {0.0, 1.0}, 0.1));
  t.backward(P);
  const Field g = t.grad(qv);
  CHECK(g(0, 0) == doctest::Approx(0.1 * 2 * -0.5));
  CHECK(g(0, 1) == 0.0);
  CHECK(g(0, 2) == doctest::Approx(0.1 * 2 * 0.5));
  CHECK(g(0, 3) == 0.0);
}

TEST_CASE("CFL projection") {
  const NNParams p = random_params({1, 6, 1}, 9);
  // bound = 0.5 * 0.01 / 2.5e-4 = 20
  SUBCASE("scales W5 by bound / max_a and nothing else") {
    const ProjectionResult r = project(p, 40.0, 0.5, 0.01, 2.5e-4);
    CHECK(r.applied());
    CHECK(r.factor == doctest::Approx(0.5).epsilon(1e-15));
    CHECK((r.params.W[5] - 0.5 * p.W[5]).cwiseAbs().maxCoeff() < 1e-16);
    CHECK(r.params.b[5] == p.b[5]);
    for (int l = 0; l < 5; ++l) {
      CHECK(r.params.W[l] == p.W[l]);
      CHECK(r.params.b[l] == p.b[l]);
    }
  }
  SUBCASE("feasible parameters are untouched") {
    for (double a : {0.0, 5.0, 20.0}) {
      const ProjectionResult r = project(p, a, 0.5, 0.01, 2.5e-4);
      CHECK_FALSE(r.applied());
      CHECK(r.params.flatten() == p.flatten());
    }
  }
  SUBCASE("recomputed wave speed respects the bound") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
      NNParams big = random_params({1, 8, 1}, 100 + trial);
      big.W[5] *= 50.0;
      const Field q = testutil::random_field(rng, 1, 30, -1, 2);
      const FaceStates f = reconstruct(q, BoundaryKind::periodic, 0.0);
      const double a = wave_speed(big, f, SpeedMode::one_norm).maxCoeff();
      CHECK(a == doctest::Approx(speed_oracle(big, f)).epsilon(1e-12));
      const ProjectionResult r = project(big, a, 0.5, 0.01, 2.5e-4);
      const double after = speed_oracle(r.params, f);
      CHECK(after <= 20.0 * (1 + 4 * std::numeric_limits<double>::epsilon()));
      // Projecting at the bound is the identity.
      CHECK(project(r.params, std::min(after, 20.0), 0.5, 0.01, 2.5e-4).params.flatten() ==
            r.params.flatten());
    }
  }
  CHECK_THROWS_AS(project(p, 1.0, 0.5, 0.0, 1e-3), ConfigError);
}

TEST_CASE("optimizers follow the reference recurrences") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd;
  const int n = 13;
  std::vector<double> th0(n);
  for (double& x : th0) x = nd(rng);
  std::vector<std::vector<double>> grads(10, std::vector<double>(n));
  for (auto& g : grads) {
    for (double& x : g) x = nd(rng);
  }
  grads[3][4] = 0.0;

  SUBCASE("RMSprop") {
    TrainConfig c;
    c.base_lr = 3e-3;
    c.rms_smoothing = 0.9;
    c.l2_lambda = 0.02;
    OptimizerState st;
    Eigen::VectorXd th = Eigen::Map<Eigen::VectorXd>(th0.data(), n);
    oracle::RmsRef ref;
    std::vector<double> th_ref = th0;
    for (const auto& g : grads) {
      rmsprop_step(st, th, Eigen::Map<const Eigen::VectorXd>(g.data(), n), c);
      std::vector<double> gl = g;
      for (int i = 0; i < n; ++i) gl[i] += c.l2_lambda * th_ref[i];
      ref.step(th_ref, gl, c.base_lr, c.rms_smoothing, c.eps);
    }
    CHECK(max_rel(th, Eigen::Map<Eigen::VectorXd>(th_ref.data(), n)) < 1e-14);
    CHECK(st.step == 10);
  }
  SUBCASE("Adam") {
    TrainConfig c;
    c.optimizer = OptimizerKind::adam;
    c.base_lr = 1e-2;
    c.l2_lambda = 0.1;
    OptimizerState st;
    Eigen::VectorXd th = Eigen::Map<Eigen::VectorXd>(th0.data(), n);
    oracle::AdamRef ref;
    std::vector<double> th_ref = th0;
    for (const auto& g : grads) {
      adam_step(st, th, Eigen::Map<const Eigen::VectorXd>(g.data(), n), c);
      ref.step(th_ref, g, c.base_lr, c.beta1, c.beta2, c.eps, c.l2_lambda);
    }
    CHECK(max_rel(th, Eigen::Map<Eigen::VectorXd>(th_ref.data(), n)) < 1e-14);
  }
  SUBCASE("first RMSprop step has magnitude lr / sqrt(1 - s)") {
    TrainConfig c;
    c.eps = 0.0;
    OptimizerState st;
    Eigen::VectorXd th = Eigen::VectorXd::Zero(3);
    Eigen::VectorXd g(3);
    g << 2.0, -0.1, 7.0;
    rmsprop_step(st, th, g, c);
    const double mag = c.base_lr / std::sqrt(1 - c.rms_smoothing);
    CHECK(th(0) == doctest::Approx(-mag));
    CHECK(th(1) == doctest::Approx(mag));
    CHECK(th(2) == doctest::Approx(-mag));
  }
  SUBCASE("zero gradients") {
    TrainConfig c;
    OptimizerState st;
    Eigen::VectorXd th = Eigen::Map<Eigen::VectorXd>(th0.data(), n);
    const Eigen::VectorXd before = th;
    rmsprop_step(st, th, Eigen::VectorXd::Zero(n), c);
    CHECK(th == before);
    OptimizerState sa;
    adam_step(sa, th, Eigen::VectorXd::Zero(n), c);
    CHECK(th == before);
    c.l2_lambda = 0.01;
    for (int k = 0; k < 5; ++k) adam_step(sa, th, Eigen::VectorXd::Zero(n), c);
    for (int i = 0; i < n; ++i) {
      CHECK(std::abs(th(i)) < std::abs(before(i)));
      CHECK(th(i) * before(i) > 0);
    }
  }
  SUBCASE("size mismatch") {
    OptimizerState st;
    Eigen::VectorXd th = Eigen::VectorXd::Zero(3);
    CHECK_THROWS_AS(rmsprop_step(st, th, Eigen::VectorXd::Zero(2), TrainConfig{}), ConfigError);
    CHECK_THROWS_AS(adam_step(st, th, Eigen::VectorXd::Zero(2), TrainConfig{}), ConfigError);
  }
}

TEST_CASE("gradient modes agree") {
  const Scenario s = coarsened(scenario_burgers(), 30, 12);
  const Model m = s.make_model(FluxKind::tvd, 4);
  LossOptions lo;
  lo.penalty = Bounds{0.0, 1.0};
  for (Stepper st : {Stepper::forward_euler, Stepper::rk4}) {
    const Evaluation w = eval_mode(m, s, GradientMode::whole_tape, st, lo);
    const Evaluation sw = eval_mode(m, s, GradientMode::stepwise, st, lo);
    const Evaluation au = eval_mode(m, s, GradientMode::automatic, st, lo);
    CHECK(w.loss == sw.loss);
    CHECK(w.loss == au.loss);
    CHECK(w.loss == doctest::Approx(w.data_loss + w.penalty).epsilon(1e-15));
    CHECK(max_rel(w.grad, sw.grad) < 1e-11);
    CHECK(au.grad == w.grad);
  }
  SUBCASE("automatic mode falls back to stepwise under a tiny budget") {
    EvalOptions eo;
    eo.memory_budget = 1.0;
    ad::TapeStats stats;
    eo.tape_stats = &stats;
    const Evaluation e = evaluate(m, s.samples.front(), s.grid, {}, eo);
    EvalOptions whole;
    whole.mode = GradientMode::whole_tape;
    ad::TapeStats big;
    whole.tape_stats = &big;
    evaluate(m, s.samples.front(), s.grid, {}, whole);
    CHECK(stats.stored_scalars * 5 < big.stored_scalars);
    CHECK(e.grad.size() == m.size());
  }
}

TEST_CASE("taped gradients equal the forward-mode tangent solver") {
  for (bool rk4 : {false, true}) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      const Grid g = testutil::periodic_grid(8, 0.125, 0.02, 3);
      std::mt19937_64 rng(seed);
      Sample smp{testutil::random_field(rng, 1, 8, -0.5, 1.0),
                 testutil::random_field(rng, 1, 8, -0.5, 1.0)};
      const Model m = testutil::tvd_model(random_params({1, 3, 1}, seed));
      EvalOptions eo;
      eo.mode = GradientMode::whole_tape;
      eo.stepper = rk4 ? Stepper::rk4 : Stepper::forward_euler;
      const Evaluation e = evaluate(m, smp, g, {}, eo);
      const auto want = oracle::tangent_gradient(m.nets[0], testutil::row_std(smp.q0),
                                                 testutil::row_std(smp.target), g.dx, g.dt, 3, rk4);
      const Eigen::VectorXd wv = Eigen::Map<const Eigen::VectorXd>(want.data(), want.size());
      CHECK((e.grad - wv).cwiseAbs().maxCoeff() <= 1e-11 * (1 + wv.cwiseAbs().maxCoeff()));
    }
  }
}

TEST_CASE("discrete RK4 adjoint") {
  SUBCASE("zero loss seed gives a zero gradient") {
    const Scenario s = coarsened(scenario_burgers(), 16, 5);
    const Model m = s.make_model(FluxKind::tvd, 1);
    RolloutOptions ro;
    ro.stepper = Stepper::rk4;
    Sample smp{s.q0(), rollout(m, s.q0(), s.grid, ro).final_state()};
    const Eigen::VectorXd g = adjoint_gradient_rk4(m, smp, s.grid, {});
    CHECK(g.size() == m.size());
    // The adjoint's forward pass agrees with rollout() to rounding only.
    const Eigen::VectorXd ref = adjoint_gradient_rk4(m, s.samples.front(), s.grid, {});
    CHECK(g.cwiseAbs().maxCoeff() <= 1e-12 * ref.cwiseAbs().maxCoeff());
  }
  SUBCASE("one step on four cells against the tangent solver") {
    const Grid g = testutil::periodic_grid(4, 0.25, 0.05, 1);
    Field q0(1, 4), tgt(1, 4);
    q0 << 0.1, 0.9, 0.4, -0.2;
    tgt << 0.0, 1.0, 0.5, 0.0;
    const Model m = testutil::tvd_model(random_params({1, 4, 1}, 77));
    const Eigen::VectorXd adj = adjoint_gradient_rk4(m, {q0, tgt}, g, {});
    const auto want = oracle::tangent_gradient(m.nets[0], testutil::row_std(q0),
                                               testutil::row_std(tgt), g.dx, g.dt, 1, true);
    for (Eigen::Index k = 0; k < adj.size(); ++k) {
      CHECK(std::abs(adj(k) - want[k]) <= 1e-12 * (1 + std::abs(want[k])));
    }
  }
  SUBCASE("fifty-step Burgers against the taped RK4 rollout") {
    const Scenario s = coarsened(scenario_burgers(), 100, 50);
    const Model m = s.make_model(FluxKind::tvd, 3);
    const Evaluation e = eval_mode(m, s, GradientMode::whole_tape, Stepper::rk4);
    const Eigen::VectorXd adj = adjoint_gradient_rk4(m, s.samples.front(), s.grid, {});
    CHECK(max_rel(adj, e.grad) < 1e-8);
  }
  SUBCASE("random instances, with loss weights and penalty") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      const Scenario s = coarsened(seed % 2 ? scenario_burgers() : scenario_advection(), 16, 10);
      Model m;
      m.config = s.flux_config(FluxKind::tvd);
      m.nets = {nn_init({1, 5, 1}, seed)};
      LossOptions lo;
      lo.penalty = Bounds{0.0, 1.0};
      EvalOptions eo;
      eo.mode = GradientMode::whole_tape;
      eo.stepper = Stepper::rk4;
      const Evaluation e = evaluate(m, s.samples.front(), s.grid, lo, eo);
      const Eigen::VectorXd adj = adjoint_gradient_rk4(m, s.samples.front(), s.grid, lo);
      CHECK(max_rel(adj, e.grad) < 1e-8);
    }
  }
  SUBCASE("Euler system and generalized flux") {
    const Scenario e3 = coarsened(scenario_euler_sod(), 24, 4);
    Model m;
    m.config = e3.flux_config(FluxKind::tvd);
    m.nets = {nn_init({3, 6, 3}, 5)};
    const Evaluation ev = eval_mode(m, e3, GradientMode::whole_tape, Stepper::rk4);
    CHECK(max_rel(adjoint_gradient_rk4(m, e3.samples.front(), e3.grid, {}), ev.grad) < 1e-8);

    const Scenario a = coarsened(scenario_antidiffusion(), 20, 4);
    const Model mg = a.make_model(FluxKind::tvd_generalized, 6);
    const Evaluation eg = eval_mode(mg, a, GradientMode::whole_tape, Stepper::rk4);
    CHECK(max_rel(adjoint_gradient_rk4(mg, a.samples.front(), a.grid, {}), eg.grad) < 1e-8);
  }
}

TEST_CASE("training loop") {
  const Scenario s = coarsened(scenario_advection(), 40, 16);
  TrainConfig c;
  c.n_iters = 6;
  c.seed = 3;

  SUBCASE("zero iterations records the initial loss only") {
    TrainConfig z = c;
    z.n_iters = 0;
    const Model m = s.make_model(FluxKind::tvd, 3);
    const TrainRecord r = train(s, m, z);
    REQUIRE(r.iterations.size() == 1);
    EvalOptions eo;
    eo.gradient = false;
    CHECK(r.initial_loss() == evaluate(m, s.samples.front(), s.grid, {s.loss_weights, {}}, eo).loss);
    CHECK(r.model.flatten() == m.flatten());
  }
  SUBCASE("deterministic and consistent with evaluation") {
    const Model m = s.make_model(FluxKind::tvd, 3);
    int calls = 0;
    const TrainRecord a = train(s, m, c, [&](const IterationRecord&, const Model&) { ++calls; });
    const TrainRecord b = train(s, m, c);
    CHECK(calls == 7);
    CHECK(a.iterations.size() == 7);
    CHECK(same_rows(a, b));
    EvalOptions eo;
    eo.gradient = false;
    CHECK(a.final_loss() ==
          evaluate(a.model, s.samples.front(), s.grid, {s.loss_weights, {}}, eo).loss);
    CHECK(a.final_loss() < a.initial_loss());
    for (std::size_t k = 0; k < a.iterations.size(); ++k) CHECK(a.iterations[k].iter == int(k));
  }
  SUBCASE("every update is projected onto the feasible set") {
    Model m = s.make_model(FluxKind::tvd, 8);
    m.nets[0].W[5] *= 200.0;
    TrainConfig v = c;
    v.verify_projection = true;
    const TrainRecord r = train(s, m, v);
    int projected = 0;
    const double tol = 1 + 4 * std::numeric_limits<double>::epsilon();
    for (std::size_t k = 0; k + 1 < r.iterations.size(); ++k) {
      const IterationRecord& row = r.iterations[k];
      CHECK(row.bound == doctest::Approx(0.5 * s.grid.dx / s.grid.dt));
      CHECK(row.max_wave_speed_after <= row.bound * tol);
      if (row.projected) {
        ++projected;
        CHECK(row.rescale_factor < 1.0);
      }
    }
    CHECK(projected >= 1);
    // The next rollout starts from feasible parameters.
    for (std::size_t k = 1; k < r.iterations.size(); ++k) {
      CHECK_FALSE(r.iterations[k].diverged);
    }
  }
  SUBCASE("unconstrained flux is never projected") {
    Model m = s.make_model(FluxKind::unconstrained, 2);
    const TrainRecord r = train(s, m, c);
    for (const IterationRecord& row : r.iterations) {
      CHECK_FALSE(row.projected);
      CHECK(row.rescale_factor == 1.0);
    }
  }
  SUBCASE("diverged iterations skip the update") {
    Model m = s.make_model(FluxKind::unconstrained, 4);
    m.nets[0].W[5] *= 1e8;
    const TrainRecord r = train(s, m, c);
    for (const IterationRecord& row : r.iterations) {
      CHECK(row.diverged);
      CHECK(std::isinf(row.loss));
    }
    CHECK(r.model.flatten() == m.flatten());
  }
  SUBCASE("stop_below ends training at the first qualifying row") {
    Model m = s.make_model(FluxKind::tvd, 3);
    const TrainRecord full = train(s, m, c);
    TrainConfig st = c;
    st.stop_below = full.iterations[3].loss * (1 + 1e-12);
    const TrainRecord r = train(s, m, st);
    CHECK(r.iterations.size() <= 4);
    CHECK(r.final_loss() < *st.stop_below);
  }
  SUBCASE("parallel samples give identical results") {
    Scenario multi = s;
    for (int shift = 1; shift <= 3; ++shift) {
      Sample extra = s.samples.front();
      const int k = shift * 7;
      extra.q0 = Field(s.q0().rightCols(40 - k)).eval();
      Field q0(1, 40), tg(1, 40);
      q0 << s.q0().rightCols(40 - k), s.q0().leftCols(k);
      tg << s.exact_final().rightCols(40 - k), s.exact_final().leftCols(k);
      multi.samples.push_back({q0, tg});
    }
    const Model m = multi.make_model(FluxKind::tvd, 5);
    TrainConfig j1 = c, j3 = c;
    j1.jobs = 1;
    j3.jobs = 3;
    CHECK(same_rows(train(multi, m, j1), train(multi, m, j3)));
  }
  SUBCASE("configuration errors") {
    const Model m = s.make_model(FluxKind::tvd, 1);
    auto bad = [&](auto edit) {
      TrainConfig b = c;
      edit(b);
      CHECK_THROWS_AS(train(s, m, b), ConfigError);
    };
    bad([](TrainConfig& b) { b.base_lr = 0.0; });
    bad([](TrainConfig& b) { b.cfl_max = -1.0; });
    bad([](TrainConfig& b) { b.n_iters = -1; });
    bad([](TrainConfig& b) { b.rms_smoothing = 1.0; });
    bad([](TrainConfig& b) { b.jobs = 0; });
    bad([](TrainConfig& b) { b.penalty = Bounds{1.0, 0.0}; });
    CHECK_THROWS_AS(train(s, scenario_euler_sod().make_model(FluxKind::tvd, 1), c), ConfigError);
  }
}
