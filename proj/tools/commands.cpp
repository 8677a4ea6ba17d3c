#include "commands.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "tvdnn/io.hpp"

namespace tvdnn::cli {

namespace fs = std::filesystem;

namespace {

std::string mode_name(GradientMode m) {
  switch (m) {
    case GradientMode::automatic: return "auto";
    case GradientMode::whole_tape: return "whole";
    case GradientMode::stepwise: return "stepwise";
  }
  return "auto";
}

GradientMode mode_from_name(const std::string& s) {
  if (s == "auto") return GradientMode::automatic;
  if (s == "whole") return GradientMode::whole_tape;
  if (s == "stepwise") return GradientMode::stepwise;
  throw ConfigError("unknown gradient mode '" + s + "' (auto, whole, stepwise)");
}

Model initial_model(const RunConfig& c, const Scenario& sc) {
  if (c.checkpoint.empty()) return sc.make_model(c.flux_or(sc), c.train.seed);
  std::string from;
  Model m = load_checkpoint(c.checkpoint, &from);
  if (!from.empty() && from != sc.name) {
    throw ConfigError("checkpoint was written for scenario '" + from + "', not '" + sc.name + "'");
  }
  if (c.flux && m.config.kind != *c.flux) {
    throw ConfigError("checkpoint holds a " + to_string(m.config.kind) + " model, --flux asks for " +
                      to_string(*c.flux));
  }
  const std::vector<NNSpec> want = sc.nn_specs(m.config.kind);
  if (want.size() != m.nets.size()) throw ConfigError("checkpoint network count mismatch");
  for (std::size_t k = 0; k < want.size(); ++k) {
    if (!want[k].same_shape(m.nets[k].spec)) {
      throw ConfigError("checkpoint network " + std::to_string(k) +
                        " does not match the scenario's architecture");
    }
  }
  m.validate(sc.components);
  return m;
}

// Evaluation rollout of the final model: snapshots, TV history, comparison.
// Returns false when the rollout diverged.
bool write_rollout_artifacts(const fs::path& out, const Scenario& sc, const Model& m,
                             const RunConfig& c, nlohmann::json& summary) {
  RolloutOptions ro;
  ro.stepper = c.train.stepper;
  ro.state_stride = c.snapshot_stride > 0 ? c.snapshot_stride : sc.grid.n_t + 1;
  const RolloutTrace tr = rollout(m, sc.q0(), sc.grid, ro);
  write_tv_history(out / "tv_history.csv", tr, sc.grid);
  if (c.snapshot_stride > 0) {
    for (std::size_t k = 0; k < tr.states.size(); ++k) {
      char name[64];
      std::snprintf(name, sizeof name, "snapshot_%05d.csv", tr.state_steps[k]);
      write_snapshot(out / "snapshots" / name, tr.states[k], sc.grid);
    }
  }
  write_snapshot(out / "snapshot_final.csv", tr.final_state(), sc.grid);
  const double max_a = tr.max_wave_speed.empty() ? 0.0 : max_wave_speed_over_rollout(tr);
  summary["diverged"] = tr.diverged;
  summary["steps_taken"] = tr.steps_taken;
  summary["max_wave_speed"] = max_a;
  summary["cfl_bound"] = c.train.cfl_max * sc.grid.dx / sc.grid.dt;
  summary["tv_initial"] = tr.tv.front();
  summary["tv_final"] = tr.tv.back();
  if (!tr.diverged) {
    write_comparison(out / "comparison.csv", tr.final_state(), sc.exact_final(), sc.grid);
    summary["l2_error"] = loss_l2(tr.final_state(), sc.exact_final(), sc.grid.dx, sc.loss_weights);
  }
  return !tr.diverged;
}

}  // namespace

std::string RunConfig::resolved_out() const {
  if (!out.empty()) return out;
  const char* root = std::getenv("TVDNN_OUT_ROOT");
  const fs::path base = root && *root ? fs::path(root) : fs::path("runs");
  const std::string f = flux ? to_string(*flux) : "default";
  return (base / (scenario + "_" + f + "_s" + std::to_string(train.seed))).string();
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  j["scenario"] = scenario;
  if (flux) j["flux"] = to_string(*flux);
  j["iters"] = train.n_iters;
  j["seed"] = train.seed;
  j["lr"] = train.base_lr;
  j["rms_smoothing"] = train.rms_smoothing;
  j["eps"] = train.eps;
  j["cfl_max"] = train.cfl_max;
  j["optimizer"] = to_string(train.optimizer);
  j["l2_lambda"] = train.l2_lambda;
  j["stepper"] = to_string(train.stepper);
  if (train.penalty) j["penalty"] = {train.penalty->lo, train.penalty->hi};
  if (train.stop_below) j["stop_below"] = *train.stop_below;
  j["verify_projection"] = train.verify_projection;
  j["jobs"] = train.jobs;
  j["grad_mode"] = mode_name(grad_mode);
  j["out"] = resolved_out();
  j["checkpoint"] = checkpoint;
  j["snapshot_stride"] = snapshot_stride;
  j["checkpoint_every"] = checkpoint_every;
  return j;
}

void apply_json(RunConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "scenario") c.scenario = v.get<std::string>();
      else if (key == "flux") c.flux = flux_kind_from_string(v.get<std::string>());
      else if (key == "iters") c.train.n_iters = v.get<int>();
      else if (key == "seed") c.train.seed = v.get<std::uint64_t>();
      else if (key == "lr") c.train.base_lr = v.get<double>();
      else if (key == "rms_smoothing") c.train.rms_smoothing = v.get<double>();
      else if (key == "eps") c.train.eps = v.get<double>();
      else if (key == "cfl_max") c.train.cfl_max = v.get<double>();
      else if (key == "optimizer") c.train.optimizer = optimizer_from_string(v.get<std::string>());
      else if (key == "l2_lambda") c.train.l2_lambda = v.get<double>();
      else if (key == "stepper") c.train.stepper = stepper_from_string(v.get<std::string>());
      else if (key == "penalty") {
        const auto p = v.get<std::vector<double>>();
        if (p.size() != 2) throw ConfigError("penalty needs [lo, hi]");
        c.train.penalty = Bounds{p[0], p[1]};
      } else if (key == "stop_below") c.train.stop_below = v.get<double>();
      else if (key == "verify_projection") c.train.verify_projection = v.get<bool>();
      else if (key == "jobs") c.train.jobs = v.get<int>();
      else if (key == "grad_mode") c.grad_mode = mode_from_name(v.get<std::string>());
      else if (key == "out") c.out = v.get<std::string>();
      else if (key == "checkpoint") c.checkpoint = v.get<std::string>();
      else if (key == "snapshot_stride") c.snapshot_stride = v.get<int>();
      else if (key == "checkpoint_every") c.checkpoint_every = v.get<int>();
      else throw ConfigError("unknown config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config file: ") + e.what());
  }
}

int cmd_train(const RunConfig& c) {
  const Scenario sc = make_scenario(c.scenario);
  const fs::path out = c.resolved_out();
  fs::create_directories(out);
  Model model = initial_model(c, sc);

  nlohmann::json manifest;
  manifest["command"] = "train";
  manifest["config"] = c.to_json();
  manifest["scenario"] = sc.manifest();
  manifest["flux"] = to_string(model.config.kind);
  manifest["parameters"] = model.size();
  write_json(out / "manifest.json", manifest);

  const int every = c.checkpoint_every;
  const int report = std::max(1, c.train.n_iters / 20);
  const IterationCallback progress = [&](const IterationRecord& r, const Model& m) {
    if (r.iter % report == 0 || r.iter == c.train.n_iters) {
      std::cerr << "iter " << r.iter << "  loss " << format_double(r.loss) << "  max_a "
                << format_double(r.max_wave_speed) << (r.projected ? "  projected" : "") << '\n';
    }
    // `m` is the model row r.iter + 1 will evaluate; the final row has no successor.
    const bool stopping =
        r.iter == c.train.n_iters || (c.train.stop_below && r.loss < *c.train.stop_below);
    if (every > 0 && !stopping && (r.iter + 1) % every == 0) {
      char name[64];
      std::snprintf(name, sizeof name, "checkpoint_%06d.json", r.iter + 1);
      save_checkpoint(out / "checkpoints" / name, m, sc.name);
    }
  };

  if (c.tape_stats) {
    ad::TapeStats st;
    EvalOptions eo;
    eo.stepper = c.train.stepper;
    eo.mode = c.grad_mode;
    eo.tape_stats = &st;
    evaluate(model, sc.samples.front(), sc.grid, {sc.loss_weights, c.train.penalty}, eo);
    std::cout << "tape nodes " << st.nodes << "  stored scalars " << st.stored_scalars
              << "  max |adjoint| " << format_double(st.max_abs_adjoint) << '\n';
  }

  const TrainRecord rec = train(sc, std::move(model), c.train, progress, c.grad_mode);
  write_training_record(out / "training_record.csv", rec);
  save_checkpoint(out / "checkpoint.json", rec.model, sc.name);

  nlohmann::json summary;
  summary["iterations"] = rec.iterations.size() - 1;
  summary["initial_loss"] = rec.initial_loss();
  summary["final_loss"] = rec.final_loss();
  const bool ok = write_rollout_artifacts(out, sc, rec.model, c, summary);
  write_json(out / "summary.json", summary);
  std::cout << "final loss " << format_double(rec.final_loss()) << "  (initial "
            << format_double(rec.initial_loss()) << ")  -> " << out.string() << '\n';
  if (!ok) {
    std::cerr << "error: the trained model's evaluation rollout diverged\n";
    return 3;
  }
  return 0;
}

int cmd_eval(const RunConfig& c) {
  if (c.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
  const Scenario sc = make_scenario(c.scenario);
  const Model model = initial_model(c, sc);
  const fs::path out = c.resolved_out();
  fs::create_directories(out);

  nlohmann::json summary;
  summary["command"] = "eval";
  summary["config"] = c.to_json();
  summary["scenario"] = sc.manifest();
  summary["flux"] = to_string(model.config.kind);
  const bool ok = write_rollout_artifacts(out, sc, model, c, summary);
  write_json(out / "eval.json", summary);
  if (!ok) {
    std::cerr << "error: evaluation rollout diverged\n";
    return 3;
  }
  std::cout << "l2 error " << format_double(summary["l2_error"].get<double>()) << "  max_a "
            << format_double(summary["max_wave_speed"].get<double>()) << "  bound "
            << format_double(summary["cfl_bound"].get<double>()) << '\n';
  return 0;
}

int cmd_gradcheck(const RunConfig& c) {
  const Scenario full = make_scenario(c.scenario);
  const Scenario sc = coarsened(full, c.cells, c.steps);
  const FluxKind kind = c.flux_or(full);
  const LossOptions lo{sc.loss_weights, c.train.penalty};
  constexpr double kFdTol = 1e-4;
  constexpr double kAdjointTol = 1e-8;

  double worst_fd = 0.0, worst_adj = 0.0;
  for (int inst = 0; inst < c.instances; ++inst) {
    Model m;
    m.config = sc.flux_config(kind);
    std::uint64_t k = 0;
    for (NNSpec s : sc.nn_specs(kind)) {
      s.n_hidden = c.hidden;
      s.init = InitKind::xavier;
      m.nets.push_back(nn_init(s, c.train.seed + 1000 * inst + k++));
    }
    const Sample& sample = sc.samples.front();
    const Eigen::VectorXd theta = m.flatten();

    EvalOptions eo;
    eo.mode = GradientMode::whole_tape;
    Evaluation ev = evaluate(m, sample, sc.grid, lo, eo);
    if (ev.diverged) throw GradientError("gradcheck: rollout diverged", -1);
    Eigen::VectorXd analytic = ev.grad;
    if (c.corrupt_gradient) analytic *= 1.01;

    auto with = [&](const Eigen::VectorXd& t) {
      Model mm = m;
      mm.unflatten(t);
      return mm;
    };
    EvalOptions plain;
    plain.gradient = false;
    const auto loss_fn = [&](const Eigen::VectorXd& t) {
      return evaluate(with(t), sample, sc.grid, lo, plain).loss;
    };
    const auto sig = [&](const Eigen::VectorXd& t) {
      return rollout_signature(with(t), sample, sc.grid, Stepper::forward_euler);
    };
    const GradCheckResult fd =
        grad_check(loss_fn, theta, analytic, c.fd_step, c.fd_samples, c.train.seed + inst, sig);

    EvalOptions rk = eo;
    rk.stepper = Stepper::rk4;
    const Evaluation tape_rk = evaluate(m, sample, sc.grid, lo, rk);
    Eigen::VectorXd adj = adjoint_gradient_rk4(m, sample, sc.grid, lo);
    if (c.corrupt_gradient) adj *= 1.0 + 1e-6;
    const double scale = std::max(tape_rk.grad.cwiseAbs().maxCoeff(), 1e-300);
    const double adj_err = (adj - tape_rk.grad).cwiseAbs().maxCoeff() / scale;

    std::cout << "instance " << inst << ": fd max rel err " << format_double(fd.max_rel_error)
              << " (" << fd.checked << " checked, " << fd.masked << " masked)"
              << "  adjoint-vs-tape rel err " << format_double(adj_err) << '\n';
    worst_fd = std::max(worst_fd, fd.max_rel_error);
    worst_adj = std::max(worst_adj, adj_err);
  }
  const bool ok = worst_fd < kFdTol && worst_adj < kAdjointTol;
  std::cout << "finite differences: " << format_double(worst_fd) << " (tol " << kFdTol << ")  "
            << "adjoint: " << format_double(worst_adj) << " (tol " << kAdjointTol << ")  "
            << (ok ? "PASS" : "FAIL") << '\n';
  return ok ? 0 : 1;
}

}  // namespace tvdnn::cli
