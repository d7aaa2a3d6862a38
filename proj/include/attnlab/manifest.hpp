#pragma once

#include <attnlab/calibration.hpp>
#include <attnlab/io.hpp>
#include <attnlab/phase.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace attnlab {

/// Schema violation in a manifest, located by line and field.
class ManifestError : public std::invalid_argument {
 public:
  ManifestError(const std::string& file, int line, const std::string& field, const std::string& msg)
      : std::invalid_argument(file + ":" + std::to_string(line) + ": " + (field.empty() ? "" : "field '" + field + "': ") +
                              msg),
        line_(line),
        field_(field) {}
  int line() const { return line_; }
  const std::string& field() const { return field_; }

 private:
  int line_;
  std::string field_;
};

struct TransitionSpec {
  std::vector<double> omegas;
  TransitionOptions options;
};

/// A parsed manifest: the sweep grid, the solver settings and optional transition searches.
struct Manifest {
  std::string name = "suite";
  SweepSpec sweep;
  std::optional<TransitionSpec> transitions;
  std::string text_hash;  // FNV-1a of the manifest text
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',' || c == ' ' || c == '\t') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

struct Entry {
  std::string value;
  int line = 0;
  bool used = false;
};

/// key = value entries grouped by [section]; reading an entry marks it used.
class KeyValueFile {
 public:
  KeyValueFile(const std::string& text, std::string file) : file_(std::move(file)) {
    std::istringstream is(text);
    std::string raw, section;
    int lineno = 0;
    while (std::getline(is, raw)) {
      ++lineno;
      std::string line = raw;
      if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw ManifestError(file_, lineno, "", "unterminated section header");
        section = trim(line.substr(1, line.size() - 2));
        if (section.empty()) throw ManifestError(file_, lineno, "", "empty section name");
        if (!sections_.emplace(section, lineno).second)
          throw ManifestError(file_, lineno, "", "duplicate section [" + section + "]");
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ManifestError(file_, lineno, "", "expected 'key = value'");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty()) throw ManifestError(file_, lineno, "", "missing key before '='");
      const std::string full = section.empty() ? key : section + "." + key;
      if (value.empty()) throw ManifestError(file_, lineno, full, "missing value");
      if (!entries_.emplace(full, Entry{value, lineno, false}).second)
        throw ManifestError(file_, lineno, full, "duplicate key");
    }
  }

  bool has_section(const std::string& s) const { return sections_.count(s) > 0; }
  int section_line(const std::string& s) const {
    const auto it = sections_.find(s);
    return it == sections_.end() ? 0 : it->second;
  }

  Entry* find(const std::string& key) {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return nullptr;
    it->second.used = true;
    return &it->second;
  }

  template <class T, class F>
  void read(const std::string& key, T& target, F&& convert) {
    Entry* e = find(key);
    if (!e) return;
    try {
      target = convert(e->value);
    } catch (const ManifestError&) {
      throw;
    } catch (const std::exception& ex) {
      throw ManifestError(file_, e->line, key, ex.what());
    }
  }

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    const auto it = entries_.find(key);
    throw ManifestError(file_, it == entries_.end() ? 0 : it->second.line, key, msg);
  }

  int line_of(const std::string& key) const {
    const auto it = entries_.find(key);
    return it == entries_.end() ? 0 : it->second.line;
  }

  void reject_unused() const {
    for (const auto& [k, e] : entries_)
      if (!e.used) throw ManifestError(file_, e.line, k, "unknown field");
  }

  const std::string& file() const { return file_; }

 private:
  std::string file_;
  std::map<std::string, Entry> entries_;
  std::map<std::string, int> sections_;
};

inline double to_double(const std::string& s) {
  const double v = parse_double(s);
  if (!std::isfinite(v)) throw std::invalid_argument("value must be finite");
  return v;
}

inline int to_int(const std::string& s) {
  std::size_t pos = 0;
  const long long v = std::stoll(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("not an integer: '" + s + "'");
  if (v < INT32_MIN || v > INT32_MAX) throw std::invalid_argument("integer out of range");
  return static_cast<int>(v);
}

inline std::uint64_t to_u64(const std::string& s) {
  if (s.empty() || s.front() == '-') throw std::invalid_argument("not a non-negative integer: '" + s + "'");
  std::size_t pos = 0;
  const unsigned long long v = std::stoull(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("not a non-negative integer: '" + s + "'");
  return v;
}

inline bool to_bool(const std::string& s) {
  if (s == "true" || s == "yes" || s == "1") return true;
  if (s == "false" || s == "no" || s == "0") return false;
  throw std::invalid_argument("expected true or false, got '" + s + "'");
}

/// Either an explicit list or "geometric lo hi n".
inline std::vector<double> to_grid(const std::string& s) {
  auto items = split_list(s);
  if (items.empty()) throw std::invalid_argument("empty list");
  if (items.front() == "geometric") {
    if (items.size() != 4) throw std::invalid_argument("expected 'geometric lo hi n'");
    return geometric_grid(to_double(items[1]), to_double(items[2]), to_int(items[3]));
  }
  std::vector<double> out;
  for (const auto& it : items) out.push_back(to_double(it));
  return out;
}

/// Square matrix written row by row with ';' between rows, e.g. "0.6 0.4; 0.4 0.6".
inline TokenMatrix to_matrix(const std::string& s) {
  std::vector<std::vector<double>> rows;
  std::stringstream ss(s);
  std::string row;
  while (std::getline(ss, row, ';')) {
    std::vector<double> r;
    for (const auto& it : split_list(row)) r.push_back(to_double(it));
    if (r.empty()) throw std::invalid_argument("empty matrix row");
    rows.push_back(r);
  }
  const int L = static_cast<int>(rows.size());
  if (L == 0) throw std::invalid_argument("empty matrix");
  TokenMatrix m(L, L);
  for (int i = 0; i < L; ++i) {
    if (static_cast<int>(rows[i].size()) != L) throw std::invalid_argument("matrix must be square");
    for (int j = 0; j < L; ++j) m(i, j) = rows[i][j];
  }
  return m;
}

inline std::string matrix_text(const TokenMatrix& m) {
  std::string s;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    if (i) s += "; ";
    for (Eigen::Index j = 0; j < m.cols(); ++j) s += (j ? " " : "") + format_double(m(i, j));
  }
  return s;
}

}  // namespace detail

/**
 * Parses the key-value manifest format:
 *
 *   name = fig2
 *   [experiment]  d, L, sigma, lambda, A, pos_scale, master_seed
 *   [sweep]       alphas, omegas, sources, branches, seeds, gamp_seeds, n_test, baseline_mc
 *   [theory]      integration, grid_nodes, n_mc, tol, max_iter, damping, anderson_memory,
 *                 prox_restarts, quadrature_nodes, train_loss_variant, tau_scale, test_mc, seed
 *   [gd]          learning_rate, epochs, grad_tol, risk
 *   [adam]        learning_rate, epochs, n_test
 *   [gamp]        max_iter, damping, tol, init, encoding_curvature, uniform_variance
 *   [transitions] omegas, lo, hi, resolution, scan_points, noise_sigmas, baseline_mc
 *
 * Lists are separated by spaces or commas; a grid may be "geometric lo hi n".
 * '#' starts a comment. Unknown or duplicate fields are errors.
 */
inline Manifest parse_manifest(const std::string& text, const std::string& file = "<manifest>") {
  using namespace detail;
  KeyValueFile kv(text, file);
  Manifest m;
  m.text_hash = fnv1a_hex(text);
  kv.read("name", m.name, [](const std::string& s) { return s; });

  SweepSpec& sp = m.sweep;
  ExperimentConfig& e = sp.base;
  kv.read("experiment.d", e.d, to_int);
  kv.read("experiment.L", e.L, to_int);
  kv.read("experiment.sigma", e.sigma, to_double);
  kv.read("experiment.lambda", e.lambda, to_double);
  kv.read("experiment.A", e.A, to_matrix);
  kv.read("experiment.pos_scale", e.pos_scale, [](const std::string& s) -> std::optional<double> { return to_double(s); });
  kv.read("experiment.master_seed", e.master_seed, to_u64);
  kv.read("experiment.alpha", e.alpha, to_double);
  kv.read("experiment.omega", e.omega, to_double);

  if (!kv.has_section("sweep")) throw ManifestError(file, 0, "sweep", "missing [sweep] section");
  const int sweep_line = kv.section_line("sweep");
  kv.read("sweep.alphas", sp.alphas, to_grid);
  kv.read("sweep.omegas", sp.omegas, to_grid);
  if (sp.alphas.empty()) throw ManifestError(file, sweep_line, "sweep.alphas", "empty sweep: no alphas given");
  if (sp.omegas.empty()) sp.omegas = {e.omega};
  kv.read("sweep.sources", sp.sources, [](const std::string& s) {
    std::vector<Source> v;
    for (const auto& it : split_list(s)) v.push_back(parse_source(it));
    return v;
  });
  if (sp.sources.empty()) throw ManifestError(file, sweep_line, "sweep.sources", "nothing to evaluate (empty source list)");
  kv.read("sweep.branches", sp.branches, [](const std::string& s) {
    std::vector<BranchInit::Kind> v;
    for (const auto& it : split_list(s)) v.push_back(parse_branch(it));
    return v;
  });
  kv.read("sweep.seeds", sp.seeds, to_int);
  kv.read("sweep.gamp_seeds", sp.gamp_seeds, to_int);
  kv.read("sweep.n_test", sp.n_test, to_int);
  kv.read("sweep.baseline_mc", sp.baseline_mc, to_int);

  TheorySettings& ts = sp.theory;
  kv.read("theory.integration", ts.se.integration, [](const std::string& s) {
    if (s == "gauss_hermite") return Integration::GaussHermite;
    if (s == "monte_carlo") return Integration::MonteCarlo;
    throw std::invalid_argument("expected gauss_hermite or monte_carlo");
  });
  kv.read("theory.grid_nodes", ts.se.grid_nodes, to_int);
  kv.read("theory.n_mc", ts.se.n_mc, to_int);
  kv.read("theory.tol", ts.se.tol, to_double);
  kv.read("theory.max_iter", ts.se.max_iter, to_int);
  kv.read("theory.damping", ts.se.damping, to_double);
  kv.read("theory.anderson_memory", ts.se.anderson_memory, to_int);
  kv.read("theory.prox_restarts", ts.se.prox_restarts, to_int);
  kv.read("theory.quadrature_nodes", ts.se.quadrature_nodes, to_int);
  kv.read("theory.train_loss_variant", ts.se.train_loss_variant, [](const std::string& s) {
    if (s == "main_text") return TrainLossVariant::MainText;
    if (s == "appendix") return TrainLossVariant::Appendix;
    throw std::invalid_argument("expected main_text or appendix");
  });
  kv.read("theory.tau_scale", ts.tau_scale, [](const std::string& s) {
    if (s == "field") return TauScale::Field;
    if (s == "per_dimension") return TauScale::PerDimension;
    throw std::invalid_argument("expected field or per_dimension");
  });
  kv.read("theory.test_mc", ts.test_mc, to_int);
  kv.read("theory.seed", ts.seed, to_u64);

  kv.read("gd.learning_rate", sp.gd.learning_rate, to_double);
  kv.read("gd.epochs", sp.gd.epochs, to_int);
  kv.read("gd.grad_tol", sp.gd.grad_tol, [](const std::string& s) -> std::optional<double> {
    if (s == "none") return std::nullopt;
    return to_double(s);
  });
  kv.read("gd.risk", sp.gd.risk, [](const std::string& s) {
    if (s == "full") return RiskModel::Kind::Full;
    if (s == "simplified") return RiskModel::Kind::Simplified;
    throw std::invalid_argument("expected full or simplified");
  });

  kv.read("adam.learning_rate", sp.adam.learning_rate, to_double);
  kv.read("adam.epochs", sp.adam.epochs, to_int);
  kv.read("adam.n_test", sp.adam.n_test, to_int);

  kv.read("gamp.max_iter", sp.gamp.max_iter, to_int);
  kv.read("gamp.damping", sp.gamp.damping, to_double);
  kv.read("gamp.tol", sp.gamp.tol, to_double);
  kv.read("gamp.encoding_curvature", sp.gamp.encoding_curvature, to_bool);
  kv.read("gamp.uniform_variance", sp.gamp.uniform_variance, to_bool);
  kv.read("gamp.init", sp.gamp.init, [](const std::string& s) {
    if (s == "random") return InitStrategy::random();
    if (s == "positional") return InitStrategy::positional();
    if (s == "semantic") return InitStrategy::semantic();
    throw std::invalid_argument("expected random, positional or semantic");
  });

  if (kv.has_section("transitions")) {
    TransitionSpec tr;
    tr.options.baseline_mc = sp.baseline_mc;
    kv.read("transitions.omegas", tr.omegas, to_grid);
    if (tr.omegas.empty()) tr.omegas = sp.omegas;
    kv.read("transitions.lo", tr.options.lo, to_double);
    kv.read("transitions.hi", tr.options.hi, to_double);
    kv.read("transitions.resolution", tr.options.resolution, to_double);
    kv.read("transitions.scan_points", tr.options.scan_points, to_int);
    kv.read("transitions.noise_sigmas", tr.options.noise_sigmas, to_double);
    kv.read("transitions.baseline_mc", tr.options.baseline_mc, to_int);
    if (!(tr.options.lo > 0.0 && tr.options.hi > tr.options.lo))
      throw ManifestError(file, kv.line_of("transitions.hi"), "transitions.hi", "need 0 < lo < hi");
    if (!(tr.options.resolution > 0.0))
      throw ManifestError(file, kv.line_of("transitions.resolution"), "transitions.resolution", "must be positive");
    if (tr.options.scan_points < 2)
      throw ManifestError(file, kv.line_of("transitions.scan_points"), "transitions.scan_points", "need at least 2");
    m.transitions = tr;
  }

  kv.reject_unused();
  // Cross-field checks, reported against the first field of the offending section.
  try {
    sp.validate();
  } catch (const std::invalid_argument& ex) {
    throw ManifestError(file, sweep_line, "sweep", ex.what());
  }
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_manifest(ss.str(), path.string());
}

/// Fully resolved settings, defaults included; the config hashes in records.csv derive from these.
inline json resolved_json(const Manifest& m) {
  const SweepSpec& sp = m.sweep;
  json sources = json::array(), branches = json::array();
  for (auto s : sp.sources) sources.push_back(source_name(s));
  for (auto b : sp.branches) branches.push_back(branch_name(b));
  json j = {{"name", m.name},
            {"manifest_hash", m.text_hash},
            {"experiment", to_json(sp.base)},
            {"sweep",
             {{"alphas", sp.alphas},
              {"omegas", sp.omegas},
              {"sources", sources},
              {"branches", branches},
              {"seeds", sp.seeds},
              {"gamp_seeds", sp.gamp_seeds},
              {"n_test", sp.n_test},
              {"baseline_mc", sp.baseline_mc}}},
            {"theory", sp.theory.to_json()},
            {"gd", to_json(sp.gd)},
            {"adam", {{"learning_rate", sp.adam.learning_rate}, {"epochs", sp.adam.epochs}, {"n_test", sp.adam.n_test}}},
            {"gamp",
             {{"max_iter", sp.gamp.max_iter},
              {"damping", sp.gamp.damping},
              {"tol", sp.gamp.tol},
              {"init", init_name(sp.gamp.init.kind)},
              {"encoding_curvature", sp.gamp.encoding_curvature},
              {"uniform_variance", sp.gamp.uniform_variance}}}};
  if (m.transitions) {
    const auto& o = m.transitions->options;
    j["transitions"] = {{"omegas", m.transitions->omegas}, {"lo", o.lo},
                        {"hi", o.hi},                      {"resolution", o.resolution},
                        {"scan_points", o.scan_points},    {"noise_sigmas", o.noise_sigmas},
                        {"baseline_mc", o.baseline_mc}};
  }
  return j;
}

// ---------------------------------------------------------------------------
// Suite runner
// ---------------------------------------------------------------------------

struct SuiteOptions {
  bool resume = false;
  bool strict = false;  // non-converged rows or flagged searches give exit status 3
  std::function<void(const std::string&)> log;
};

struct SuiteResult {
  std::vector<SweepRecord> records;
  std::vector<TransitionResult> transitions;
  int nonconverged = 0;
  int flagged = 0;
  int exit_status = 0;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitNonConvergence = 3;

inline std::string run_artifact_name(const SweepRecord& r) {
  return std::string(source_name(r.source)) + "-" + r.branch + "-" + r.config_hash + "-" + std::to_string(r.seed) +
         ".json";
}

inline json record_json(const SweepRecord& r) {
  json j = {{"alpha", r.alpha},
            {"omega", r.omega},
            {"d", r.d},
            {"branch", r.branch},
            {"source", source_name(r.source)},
            {"seed", r.seed},
            {"config_hash", r.config_hash},
            {"converged", r.converged},
            {"label", r.label},
            {"eps_t", r.eps_t},
            {"eps_t_se", r.eps_t_se},
            {"eps_g", r.eps_g},
            {"eps_g_se", r.eps_g_se},
            {"theta", r.theta},
            {"m", r.m},
            {"m_dim", r.m_dim},
            {"q", r.q},
            {"wall_time", r.wall_time}};
  if (!r.detail.is_null()) j["detail"] = r.detail;
  return j;
}

/**
 * Runs the sweep and transition searches of a manifest into out_dir:
 * records.csv, transitions.json, manifest.lock.json and one JSON file per record under runs/.
 */
inline SuiteResult run_experiment_suite(const Manifest& m, const std::filesystem::path& out_dir,
                                        const SuiteOptions& opt = {}) {
  auto log = [&](const std::string& s) {
    if (opt.log) opt.log(s);
  };
  std::filesystem::create_directories(out_dir / "runs");
  const json lock = {{"resolved", resolved_json(m)}, {"csv_columns", csv_columns()}, {"format_version", 1}};
  write_json(out_dir / "manifest.lock.json", lock);

  SuiteResult res;
  SweepOptions so;
  so.checkpoint = out_dir / "records.csv";
  so.resume = opt.resume;
  so.on_record = [&](const SweepRecord& r) {
    write_json(out_dir / "runs" / run_artifact_name(r), record_json(r));
    log(std::string(source_name(r.source)) + " " + r.branch + " alpha=" + format_double(r.alpha) +
        " omega=" + format_double(r.omega) + " seed=" + std::to_string(r.seed) + (r.converged ? "" : " [not converged]"));
  };
  res.records = sweep(m.sweep, so);
  sort_records(res.records);
  write_records_csv(out_dir / "records.csv", res.records);
  for (const auto& r : res.records) res.nonconverged += r.converged ? 0 : 1;

  json tj = json::array();
  if (m.transitions) {
    for (double omega : m.transitions->omegas) {
      log("transitions omega=" + format_double(omega));
      TransitionResult tr = locate_transitions(m.sweep.base, omega, m.sweep.theory, m.transitions->options);
      res.flagged += (tr.alpha_c.status == "flagged") + (tr.alpha_l.status == "flagged");
      tj.push_back(to_json(tr));
      res.transitions.push_back(std::move(tr));
    }
  }
  write_json(out_dir / "transitions.json", tj);
  res.exit_status = opt.strict && (res.nonconverged > 0 || res.flagged > 0) ? kExitNonConvergence : kExitOk;
  return res;
}

}  // namespace attnlab
