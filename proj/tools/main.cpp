// tvdnn: train, evaluate and gradient-check neural-network TVD fluxes.
//
//   tvdnn train --scenario advection --flux tvd --iters 1000 --seed 1
//   tvdnn eval --scenario advection --checkpoint runs/x/checkpoint.json
//   tvdnn gradcheck --scenario burgers --cells 16 --steps 10
//
// Precedence: command-line flags, then --config JSON, then defaults.

#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "commands.hpp"

using namespace tvdnn;

namespace {

struct Flags {
  std::string config, scenario, flux, optimizer, stepper, grad_mode, out, checkpoint, penalty;
  int iters = 0, jobs = 1, snapshot_stride = 0, checkpoint_every = 0;
  std::uint64_t seed = 1;
  double lr = 0, cfl_max = 0, l2 = 0, stop_below = 0;
};

void add_common(CLI::App* app, Flags& f) {
  app->add_option("--config", f.config, "JSON file mirroring the run configuration");
  app->add_option("--scenario", f.scenario, "advection | burgers | euler_sod | antidiffusion");
  app->add_option("--flux", f.flux, "unconstrained | tvd | tvd-generalized");
  app->add_option("--seed", f.seed, "Initialization seed");
  app->add_option("--cfl-max", f.cfl_max, "CFL limit of the projection");
  app->add_option("--stepper", f.stepper, "euler | rk4");
  app->add_option("--out", f.out, "Output directory");
  app->add_option("--checkpoint", f.checkpoint, "Checkpoint to load");
  app->add_option("--penalty", f.penalty, "Bound penalty lo,hi");
}

void add_training(CLI::App* app, Flags& f) {
  app->add_option("--iters", f.iters, "Training iterations");
  app->add_option("--lr", f.lr, "Base learning rate");
  app->add_option("--optimizer", f.optimizer, "rmsprop | adam");
  app->add_option("--l2", f.l2, "L2 regularization constant");
  app->add_option("--stop-below", f.stop_below, "Stop once the loss is below this value");
  app->add_option("--jobs", f.jobs, "Parallel rollouts across samples");
  app->add_option("--grad-mode", f.grad_mode, "auto | whole | stepwise");
  app->add_option("--snapshot-stride", f.snapshot_stride, "Write every n-th state of the final rollout");
  app->add_option("--checkpoint-every", f.checkpoint_every, "Checkpoint every K iterations");
}

bool given(const CLI::App* app, const char* name) { return app->count(name) > 0; }

cli::RunConfig resolve(const CLI::App* app, const Flags& f) {
  cli::RunConfig c;
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw ConfigError("cannot read config file " + f.config);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config file " + f.config + ": " + e.what());
    }
    cli::apply_json(c, j);
  }
  nlohmann::json over = nlohmann::json::object();
  auto set = [&](const char* flag, const char* key, auto value) {
    if (app->get_option_no_throw(flag) && given(app, flag)) over[key] = value;
  };
  set("--scenario", "scenario", f.scenario);
  set("--flux", "flux", f.flux);
  set("--seed", "seed", f.seed);
  set("--cfl-max", "cfl_max", f.cfl_max);
  set("--stepper", "stepper", f.stepper);
  set("--out", "out", f.out);
  set("--checkpoint", "checkpoint", f.checkpoint);
  set("--iters", "iters", f.iters);
  set("--lr", "lr", f.lr);
  set("--optimizer", "optimizer", f.optimizer);
  set("--l2", "l2_lambda", f.l2);
  set("--stop-below", "stop_below", f.stop_below);
  set("--jobs", "jobs", f.jobs);
  set("--grad-mode", "grad_mode", f.grad_mode);
  set("--snapshot-stride", "snapshot_stride", f.snapshot_stride);
  set("--checkpoint-every", "checkpoint_every", f.checkpoint_every);
  if (app->get_option_no_throw("--penalty") && given(app, "--penalty")) {
    const auto comma = f.penalty.find(',');
    if (comma == std::string::npos) throw ConfigError("--penalty expects lo,hi");
    over["penalty"] = {std::stod(f.penalty.substr(0, comma)), std::stod(f.penalty.substr(comma + 1))};
  }
  cli::apply_json(c, over);
  c.train.validate();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural-network TVD fluxes for 1D conservation laws"};
  app.require_subcommand(1);

  Flags train_f, eval_f, grad_f;
  bool tape_stats = false, verify = false;
  CLI::App* train_cmd = app.add_subcommand("train", "Train a flux model and write artifacts");
  add_common(train_cmd, train_f);
  add_training(train_cmd, train_f);
  train_cmd->add_flag("--tape-stats", tape_stats, "Print tape statistics of one gradient evaluation");
  train_cmd->add_flag("--verify-projection", verify,
                      "Re-evaluate the wave speed after every projection");

  CLI::App* eval_cmd = app.add_subcommand("eval", "Roll out a checkpoint and compare with the exact solution");
  add_common(eval_cmd, eval_f);
  eval_cmd->add_option("--snapshot-stride", eval_f.snapshot_stride, "Write every n-th state");

  cli::RunConfig gc_extra;
  bool corrupt = false;
  CLI::App* grad_cmd = app.add_subcommand("gradcheck", "Check tape gradients against finite differences and the RK4 adjoint");
  add_common(grad_cmd, grad_f);
  grad_cmd->add_option("--cells", gc_extra.cells, "Cells of the shrunken instance");
  grad_cmd->add_option("--steps", gc_extra.steps, "Time steps of the shrunken instance");
  grad_cmd->add_option("--hidden", gc_extra.hidden, "Hidden width of the random networks");
  grad_cmd->add_option("--instances", gc_extra.instances, "Random instances to check");
  grad_cmd->add_option("--fd-step", gc_extra.fd_step, "Finite-difference step");
  grad_cmd->add_option("--samples", gc_extra.fd_samples, "Parameters sampled per instance");
  grad_cmd->add_flag("--corrupt-gradient", corrupt, "Test hook: perturb the analytic gradients");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) {
      cli::RunConfig c = resolve(train_cmd, train_f);
      c.tape_stats = tape_stats;
      if (verify) c.train.verify_projection = true;
      return cli::cmd_train(c);
    }
    if (eval_cmd->parsed()) return cli::cmd_eval(resolve(eval_cmd, eval_f));
    cli::RunConfig c = resolve(grad_cmd, grad_f);
    c.cells = gc_extra.cells;
    c.steps = gc_extra.steps;
    c.hidden = gc_extra.hidden;
    c.instances = gc_extra.instances;
    c.fd_step = gc_extra.fd_step;
    c.fd_samples = gc_extra.fd_samples;
    c.corrupt_gradient = corrupt;
    if (!grad_cmd->count("--scenario") && c.scenario == "advection" && !grad_cmd->count("--config")) {
      c.scenario = "burgers";
    }
    return cli::cmd_gradcheck(c);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
