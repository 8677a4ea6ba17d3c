#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <json.hpp>

#include "tvdnn/training.hpp"

namespace tvdnn::cli {

struct RunConfig {
  std::string scenario = "advection";
  std::optional<FluxKind> flux;  // scenario default when unset
  TrainConfig train;
  GradientMode grad_mode = GradientMode::automatic;
  std::string out;             // empty: <root>/<scenario>_<flux>_s<seed>
  std::string checkpoint;      // load before training / for eval
  int snapshot_stride = 0;     // 0: final state only
  int checkpoint_every = 0;    // 0: final checkpoint only
  bool tape_stats = false;

  // gradcheck
  int cells = 16;
  int steps = 10;
  int hidden = 5;
  int instances = 1;
  double fd_step = 1e-5;
  int fd_samples = 50;
  bool corrupt_gradient = false;

  FluxKind flux_or(const Scenario& s) const { return flux.value_or(s.flux_kind); }
  std::string resolved_out() const;
  nlohmann::json to_json() const;
};

/// Overlay the keys present in `j` onto `c`. Unknown keys are an error.
void apply_json(RunConfig& c, const nlohmann::json& j);

int cmd_train(const RunConfig& c);
int cmd_eval(const RunConfig& c);
int cmd_gradcheck(const RunConfig& c);

}  // namespace tvdnn::cli
