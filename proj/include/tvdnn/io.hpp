#pragma once

// Checkpoints (JSON) and the CSV artifacts written by the command-line tool.
// All numbers are printed with 17 significant digits so files round-trip.

#include <filesystem>
#include <string>

#include <json.hpp>

#include "tvdnn/flux.hpp"
#include "tvdnn/solver.hpp"
#include "tvdnn/training.hpp"

namespace tvdnn {

inline constexpr int kCheckpointVersion = 1;

nlohmann::json model_to_json(const Model& m);
Model model_from_json(const nlohmann::json& j);

/// Writes {format, version, scenario, model}.
void save_checkpoint(const std::filesystem::path& path, const Model& m,
                     const std::string& scenario);
/// Throws ConfigError on a missing file, wrong format or unknown version.
Model load_checkpoint(const std::filesystem::path& path, std::string* scenario = nullptr);

std::string format_double(double v);

/// iter,loss,penalty,max_wave_speed,projected,rescale_factor,
/// max_wave_speed_after,bound,wall_time,diverged
void write_training_record(const std::filesystem::path& path, const TrainRecord& rec);

/// step,time,tv,max_wave_speed; the wave speed belongs to the step leaving
/// row n, so the last row holds nan.
void write_tv_history(const std::filesystem::path& path, const RolloutTrace& trace,
                      const Grid& grid);

/// x,q_1..q_d
void write_snapshot(const std::filesystem::path& path, const Field& q, const Grid& grid);

/// x,q_k,exact_k,error_k for every component k.
void write_comparison(const std::filesystem::path& path, const Field& q, const Field& exact,
                      const Grid& grid);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace tvdnn
