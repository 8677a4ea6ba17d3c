#include "tvdnn/io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace tvdnn {

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  return out;
}

std::string init_name(InitKind k) { return k == InitKind::xavier ? "xavier" : "xavier_zero_output"; }

InitKind init_from_name(const std::string& s) {
  if (s == "xavier") return InitKind::xavier;
  if (s == "xavier_zero_output") return InitKind::xavier_zero_output;
  throw ConfigError("checkpoint: unknown init kind '" + s + "'");
}

nlohmann::json matrix_rows(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> r(m.cols());
    for (Eigen::Index j = 0; j < m.cols(); ++j) r[j] = m(i, j);
    rows.push_back(r);
  }
  return rows;
}

Eigen::MatrixXd matrix_from_rows(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows) {
    throw ConfigError("checkpoint: matrix row count mismatch");
  }
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& r = j[i];
    if (!r.is_array() || static_cast<Eigen::Index>(r.size()) != cols) {
      throw ConfigError("checkpoint: matrix column count mismatch");
    }
    for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = r[k].get<double>();
  }
  return m;
}

}  // namespace

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

nlohmann::json model_to_json(const Model& m) {
  nlohmann::json j;
  j["flux"] = {{"kind", to_string(m.config.kind)},
               {"speed", to_string(m.config.speed)},
               {"eps_r", m.config.eps_r},
               {"nu_scale", m.config.nu_scale}};
  j["nets"] = nlohmann::json::array();
  for (const NNParams& p : m.nets) {
    nlohmann::json n;
    n["n_in"] = p.spec.n_in;
    n["n_hidden"] = p.spec.n_hidden;
    n["n_out"] = p.spec.n_out;
    n["init"] = init_name(p.spec.init);
    n["activation"] = p.spec.activation == Activation::tanh ? "tanh" : "identity";
    for (int l = 0; l < NNParams::kLayers; ++l) {
      n["W" + std::to_string(l)] = matrix_rows(p.W[l]);
      n["b" + std::to_string(l)] = std::vector<double>(p.b[l].data(), p.b[l].data() + p.b[l].size());
    }
    j["nets"].push_back(n);
  }
  return j;
}

Model model_from_json(const nlohmann::json& j) {
  try {
    Model m;
    const auto& f = j.at("flux");
    m.config.kind = flux_kind_from_string(f.at("kind").get<std::string>());
    m.config.speed = speed_mode_from_string(f.at("speed").get<std::string>());
    m.config.eps_r = f.at("eps_r").get<double>();
    m.config.nu_scale = f.at("nu_scale").get<double>();
    for (const auto& n : j.at("nets")) {
      NNSpec s;
      s.n_in = n.at("n_in").get<int>();
      s.n_hidden = n.at("n_hidden").get<int>();
      s.n_out = n.at("n_out").get<int>();
      s.init = init_from_name(n.at("init").get<std::string>());
      const std::string act = n.value("activation", std::string("tanh"));
      if (act != "tanh" && act != "identity") throw ConfigError("checkpoint: unknown activation");
      s.activation = act == "tanh" ? Activation::tanh : Activation::identity;
      NNParams p = NNParams::zeros(s);
      for (int l = 0; l < NNParams::kLayers; ++l) {
        p.W[l] = matrix_from_rows(n.at("W" + std::to_string(l)), p.W[l].rows(), p.W[l].cols());
        const auto b = n.at("b" + std::to_string(l)).get<std::vector<double>>();
        if (static_cast<Eigen::Index>(b.size()) != p.b[l].size()) {
          throw ConfigError("checkpoint: bias length mismatch");
        }
        p.b[l] = Eigen::Map<const Eigen::VectorXd>(b.data(), b.size());
      }
      m.nets.push_back(std::move(p));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint: malformed model: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Model& m,
                     const std::string& scenario) {
  nlohmann::json j;
  j["format"] = "tvdnn-checkpoint";
  j["version"] = kCheckpointVersion;
  j["scenario"] = scenario;
  j["model"] = model_to_json(m);
  write_json(path, j);
}

Model load_checkpoint(const std::filesystem::path& path, std::string* scenario) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read checkpoint " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("checkpoint " + path.string() + ": " + e.what());
  }
  if (j.value("format", std::string()) != "tvdnn-checkpoint") {
    throw ConfigError("checkpoint " + path.string() + ": not a tvdnn checkpoint");
  }
  if (j.value("version", -1) != kCheckpointVersion) {
    throw ConfigError("checkpoint " + path.string() + ": unsupported version");
  }
  if (scenario) *scenario = j.value("scenario", std::string());
  return model_from_json(j.at("model"));
}

void write_training_record(const std::filesystem::path& path, const TrainRecord& rec) {
  std::ofstream out = open_out(path);
  out << "iter,loss,penalty,max_wave_speed,projected,rescale_factor,max_wave_speed_after,"
         "bound,wall_time,diverged\n";
  for (const IterationRecord& r : rec.iterations) {
    out << r.iter << ',' << format_double(r.loss) << ',' << format_double(r.penalty) << ','
        << format_double(r.max_wave_speed) << ',' << (r.projected ? 1 : 0) << ','
        << format_double(r.rescale_factor) << ',' << format_double(r.max_wave_speed_after)
        << ',' << format_double(r.bound) << ',' << format_double(r.wall_time) << ','
        << (r.diverged ? 1 : 0) << '\n';
  }
}

void write_tv_history(const std::filesystem::path& path, const RolloutTrace& trace,
                      const Grid& grid) {
  std::ofstream out = open_out(path);
  out << "step,time,tv,max_wave_speed\n";
  for (std::size_t n = 0; n < trace.tv.size(); ++n) {
    const double a = n < trace.max_wave_speed.size() ? trace.max_wave_speed[n]
                                                     : std::numeric_limits<double>::quiet_NaN();
    out << n << ',' << format_double(grid.t0 + n * grid.dt) << ',' << format_double(trace.tv[n])
        << ',' << format_double(a) << '\n';
  }
}

void write_snapshot(const std::filesystem::path& path, const Field& q, const Grid& grid) {
  std::ofstream out = open_out(path);
  out << 'x';
  for (Eigen::Index k = 0; k < q.rows(); ++k) out << ",q_" << k + 1;
  out << '\n';
  for (Eigen::Index i = 0; i < q.cols(); ++i) {
    out << format_double(grid.x(static_cast<int>(i)));
    for (Eigen::Index k = 0; k < q.rows(); ++k) out << ',' << format_double(q(k, i));
    out << '\n';
  }
}

void write_comparison(const std::filesystem::path& path, const Field& q, const Field& exact,
                      const Grid& grid) {
  if (q.rows() != exact.rows() || q.cols() != exact.cols()) {
    throw ConfigError("write_comparison: shape mismatch");
  }
  std::ofstream out = open_out(path);
  out << 'x';
  for (Eigen::Index k = 0; k < q.rows(); ++k) {
    out << ",q_" << k + 1 << ",exact_" << k + 1 << ",error_" << k + 1;
  }
  out << '\n';
  for (Eigen::Index i = 0; i < q.cols(); ++i) {
    out << format_double(grid.x(static_cast<int>(i)));
    for (Eigen::Index k = 0; k < q.rows(); ++k) {
      out << ',' << format_double(q(k, i)) << ',' << format_double(exact(k, i)) << ','
          << format_double(q(k, i) - exact(k, i));
    }
    out << '\n';
  }
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out = open_out(path);
  out << j.dump(2) << '\n';
}

}  // namespace tvdnn
