#pragma once

#include <attnlab/attention.hpp>
#include <attnlab/erm.hpp>
#include <attnlab/gamp.hpp>
#include <attnlab/state_evolution.hpp>

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace attnlab {

using json = nlohmann::json;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shortest decimal form that round-trips: %.17g, with nan/inf spelled out.
inline std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline double parse_double(const std::string& s) {
  if (s == "nan") return std::nan("");
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw std::invalid_argument("not a number: '" + s + "'");
  return v;
}

/// Writes to a sibling temporary and renames, so readers never see a partial file.
inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    os << text;
    if (!os.flush()) throw IoError("write failed on " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void write_json(const std::filesystem::path& path, const json& j) { write_text_atomic(path, j.dump(2) + "\n"); }

inline json read_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Binary arrays
// ---------------------------------------------------------------------------

/**
 * Dataset file: one JSON header line followed by little-endian float64
 * arrays, sentences[n][L][d] then labels[n][L][d], each row-major.
 */
inline void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  json h = {{"d", ds.d},
            {"L", ds.L},
            {"n", ds.n()},
            {"seed", ds.seed},
            {"sigma", ds.sigma},
            {"dtype", "float64"},
            {"layout", "sentences[n][L][d], labels[n][L][d]"}};
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << h.dump() << '\n';
  std::vector<double> row(static_cast<std::size_t>(ds.d));
  for (const auto* block : {&ds.sentences, &ds.labels})
    for (const auto& x : *block)
      for (int l = 0; l < ds.L; ++l) {
        for (int j = 0; j < ds.d; ++j) row[j] = x(l, j);
        os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(double)));
      }
  if (!os.flush()) throw IoError("write failed on " + path.string());
}

/// Reads a dataset; mixings are recomputed when a teacher is supplied.
inline Dataset load_dataset(const std::filesystem::path& path, const TeacherSpec* teacher = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(is, line);
  json h;
  try {
    h = json::parse(line);
  } catch (const json::parse_error& e) {
    throw IoError(path.string() + ": bad header: " + e.what());
  }
  Dataset ds;
  const int n = h.at("n").get<int>();
  ds.d = h.at("d").get<int>();
  ds.L = h.at("L").get<int>();
  ds.seed = h.at("seed").get<std::uint64_t>();
  ds.sigma = h.value("sigma", 0.0);
  if (n < 0 || ds.d < 1 || ds.L < 1) throw IoError(path.string() + ": bad header dimensions");
  std::vector<double> row(static_cast<std::size_t>(ds.d));
  for (auto* block : {&ds.sentences, &ds.labels}) {
    block->reserve(n);
    for (int mu = 0; mu < n; ++mu) {
      Mat x(ds.L, ds.d);
      for (int l = 0; l < ds.L; ++l) {
        if (!is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(double))))
          throw IoError(path.string() + ": truncated payload");
        for (int j = 0; j < ds.d; ++j) x(l, j) = row[j];
      }
      block->push_back(std::move(x));
    }
  }
  if (is.peek() != std::char_traits<char>::eof()) throw IoError(path.string() + ": trailing bytes after payload");
  if (teacher) refresh_mixings(ds, *teacher);
  return ds;
}

/// Raw little-endian float64 weight vector.
inline void save_weights(const std::filesystem::path& path, const Vec& q) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(q.data()), static_cast<std::streamsize>(q.size() * sizeof(double)));
  if (!os.flush()) throw IoError("write failed on " + path.string());
}

inline Vec load_weights(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw IoError("cannot open " + path.string());
  const auto bytes = static_cast<std::size_t>(is.tellg());
  if (bytes % sizeof(double) != 0) throw IoError(path.string() + ": size is not a multiple of 8 bytes");
  Vec q(static_cast<Eigen::Index>(bytes / sizeof(double)));
  is.seekg(0);
  is.read(reinterpret_cast<char*>(q.data()), static_cast<std::streamsize>(bytes));
  return q;
}

// ---------------------------------------------------------------------------
// JSON views
// ---------------------------------------------------------------------------

inline json matrix_json(const Mat& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

inline TokenMatrix token_matrix_from_json(const json& j) {
  const int L = static_cast<int>(j.size());
  TokenMatrix m(L, L);
  for (int r = 0; r < L; ++r) {
    if (static_cast<int>(j[r].size()) != L) throw std::invalid_argument("matrix must be square");
    for (int c = 0; c < L; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

inline json to_json(const Estimate& e) { return {{"value", e.value}, {"std_error", e.std_error}}; }

inline json to_json(const ExperimentConfig& c) {
  json j = {{"d", c.d},           {"L", c.L},         {"r_s", c.r_s},
            {"r_t", c.r_t},       {"alpha", c.alpha}, {"omega", c.omega},
            {"sigma", c.sigma},   {"lambda", c.lambda}, {"A", matrix_json(c.A)},
            {"pos_scale", c.pos_scale_value()}, {"master_seed", c.master_seed}};
  j["explicit_encoding"] = c.pos_encoding.has_value();
  return j;
}

inline json to_json(const SummaryStats& s) {
  return {{"q", s.q}, {"m", s.m}, {"m_field", s.m_field}, {"theta", s.theta}, {"rho", s.rho}};
}

inline json to_json(const OrderParams& p) {
  return {{"q", p.q}, {"V", p.V}, {"m", p.m}, {"theta", p.theta}, {"rho", p.rho}};
}

inline json to_json(const ConjugateParams& c) {
  return {{"qhat", c.qhat}, {"Vhat", c.Vhat}, {"mhat", c.mhat}, {"thetahat", c.thetahat}};
}

inline json to_json(const SolverReport& r) {
  return {{"converged", r.converged}, {"iterations", r.iterations}, {"residuals", r.residuals},
          {"noise_floor", r.noise_floor}, {"label", label_name(r.label)}, {"n_mc", r.n_mc},
          {"wall_time", r.wall_time}, {"message", r.message}};
}

inline json to_json(const TrainLoss& t) {
  return {{"main_text", t.main_text}, {"appendix", t.appendix}, {"selected", t.selected}, {"std_error", t.std_error}};
}

inline json to_json(const SEConfig& c) {
  return {{"damping", c.damping},
          {"tol", c.tol},
          {"max_iter", c.max_iter},
          {"n_mc", c.n_mc},
          {"quadrature_nodes", c.quadrature_nodes},
          {"prox_restarts", c.prox_restarts},
          {"train_loss_variant", c.train_loss_variant == TrainLossVariant::MainText ? "main_text" : "appendix"},
          {"moreau_half_factor", c.moreau_half_factor},
          {"anderson_memory", c.anderson_memory},
          {"integration", c.integration == Integration::GaussHermite ? "gauss_hermite" : "monte_carlo"},
          {"grid_nodes", c.grid_nodes}};
}

inline json to_json(const OptimizerConfig& o) {
  json j = {{"kind", optimizer_name(o.kind)},
            {"learning_rate", o.learning_rate},
            {"epochs", o.epochs},
            {"risk", o.risk == RiskModel::Kind::Full ? "full" : "simplified"}};
  if (o.kind == OptimizerKind::Adam) {
    j["beta1"] = o.adam_beta1;
    j["beta2"] = o.adam_beta2;
    j["eps"] = o.adam_eps;
  }
  j["grad_tol"] = o.grad_tol ? json(*o.grad_tol) : json(nullptr);
  return j;
}

/// Final metrics of a training run; the weights go to a separate binary file.
inline json to_json(const TrainedModel& m) {
  return {{"init", init_name(m.init_used.kind)},
          {"optimizer", to_json(m.optimizer)},
          {"epochs_run", m.epochs_run},
          {"early_stopped", m.early_stopped},
          {"final_loss", m.final_loss()},
          {"initial_loss", m.loss_trace.empty() ? std::nan("") : m.loss_trace.front()},
          {"grad_norm_final", m.grad_norm_final},
          {"stats", to_json(m.stats)},
          {"test_mse", to_json(m.test_mse)},
          {"wall_time", m.wall_time}};
}

inline json to_json(const GampReport& r) {
  json traj = json::array();
  for (const auto& s : r.trajectory) traj.push_back(to_json(s));
  return {{"converged", r.converged},
          {"iterations", r.iterations},
          {"steps", r.steps},
          {"trajectory", traj},
          {"min_c_hat", r.min_c_hat},
          {"c_positive", r.c_positive},
          {"encoding_curvature", r.encoding_curvature},
          {"max_offdiag_V", r.max_offdiag_V},
          {"max_offdiag_V_normalized", r.max_offdiag_V_normalized},
          {"mean_diag_V", r.mean_diag_V},
          {"damping", r.damping},
          {"wall_time", r.wall_time},
          {"message", r.message}};
}

inline json to_json(const LinearFit& f) { return {{"W", matrix_json(f.W)}, {"std_error", matrix_json(f.std_error)}}; }

}  // namespace attnlab
