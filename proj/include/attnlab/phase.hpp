#pragma once

#include <attnlab/attention.hpp>
#include <attnlab/erm.hpp>
#include <attnlab/gamp.hpp>
#include <attnlab/io.hpp>
#include <attnlab/state_evolution.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace attnlab {

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

enum class Source { Theory, GD, Adam, GAMP, LinearBaseline };

inline const char* source_name(Source s) {
  switch (s) {
    case Source::Theory: return "theory";
    case Source::GD: return "gd";
    case Source::Adam: return "adam";
    case Source::GAMP: return "gamp";
    default: return "baseline";
  }
}

inline Source parse_source(const std::string& s) {
  for (Source v : {Source::Theory, Source::GD, Source::Adam, Source::GAMP, Source::LinearBaseline})
    if (s == source_name(v)) return v;
  throw std::invalid_argument("unknown source '" + s + "' (expected theory, gd, adam, gamp or baseline)");
}

inline BranchInit::Kind parse_branch(const std::string& s) {
  if (s == "positional") return BranchInit::Kind::Positional;
  if (s == "semantic") return BranchInit::Kind::Semantic;
  throw std::invalid_argument("unknown branch '" + s + "' (expected positional or semantic)");
}

/**
 * One evaluated (point, branch, source, seed). eps_t is the per-sample
 * simplified risk (the Q-independent constant dropped); m is the field-scale
 * overlap q.p/sqrt(d) and m_dim = q.p/d. Theory rows carry both train-loss
 * variants; other rows leave them NaN.
 */
struct SweepRecord {
  double alpha = 0.0;
  double omega = 0.0;
  int d = 0;
  std::string branch;
  Source source = Source::Theory;
  std::uint64_t seed = 0;
  std::string config_hash;
  bool converged = false;
  std::string label;
  double eps_t = std::nan("");
  double eps_t_se = std::nan("");
  double eps_t_main = std::nan("");
  double eps_t_appendix = std::nan("");
  double eps_g = std::nan("");
  double eps_g_se = std::nan("");
  double theta = std::nan("");
  double m = std::nan("");
  double m_dim = std::nan("");
  double q = std::nan("");
  double wall_time = 0.0;
  json detail;  // per-run artifact, not part of the CSV
};

inline const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> cols = {
      "alpha", "omega", "d",     "branch", "source",   "seed", "config_hash", "converged", "label",     "eps_t",
      "eps_t_se", "eps_t_main", "eps_t_appendix", "eps_g", "eps_g_se", "theta", "m", "m_dim", "q", "wall_time"};
  return cols;
}

inline std::string csv_row(const SweepRecord& r) {
  std::ostringstream os;
  const auto f = format_double;
  os << f(r.alpha) << ',' << f(r.omega) << ',' << r.d << ',' << r.branch << ',' << source_name(r.source) << ','
     << r.seed << ',' << r.config_hash << ',' << (r.converged ? 1 : 0) << ',' << r.label << ',' << f(r.eps_t) << ','
     << f(r.eps_t_se) << ',' << f(r.eps_t_main) << ',' << f(r.eps_t_appendix) << ',' << f(r.eps_g) << ','
     << f(r.eps_g_se) << ',' << f(r.theta) << ',' << f(r.m) << ',' << f(r.m_dim) << ',' << f(r.q) << ','
     << f(r.wall_time);
  return os.str();
}

inline std::string records_csv(const std::vector<SweepRecord>& records) {
  std::string out;
  const auto& cols = csv_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out += (i ? "," : "") + cols[i];
  out += '\n';
  for (const auto& r : records) out += csv_row(r) + '\n';
  return out;
}

inline std::vector<SweepRecord> parse_records_csv(std::istream& is, const std::string& name = "records.csv") {
  std::string line;
  if (!std::getline(is, line)) return {};
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header != csv_columns()) throw IoError(name + ": unexpected CSV header");
  std::vector<SweepRecord> out;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> c;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) c.push_back(cell);
    if (c.size() != header.size())
      throw IoError(name + ":" + std::to_string(lineno) + ": expected " + std::to_string(header.size()) + " fields");
    try {
      SweepRecord r;
      r.alpha = parse_double(c[0]);
      r.omega = parse_double(c[1]);
      r.d = std::stoi(c[2]);
      r.branch = c[3];
      r.source = parse_source(c[4]);
      r.seed = std::stoull(c[5]);
      r.config_hash = c[6];
      r.converged = c[7] == "1";
      r.label = c[8];
      double* dst[] = {&r.eps_t, &r.eps_t_se, &r.eps_t_main, &r.eps_t_appendix, &r.eps_g, &r.eps_g_se,
                       &r.theta, &r.m,        &r.m_dim,      &r.q,              &r.wall_time};
      for (int k = 0; k < 11; ++k) *dst[k] = parse_double(c[9 + k]);
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw IoError(name + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<SweepRecord> read_records_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  return parse_records_csv(is, path.string());
}

inline void write_records_csv(const std::filesystem::path& path, const std::vector<SweepRecord>& records) {
  write_text_atomic(path, records_csv(records));
}

/// Deterministic record order: omega, alpha, source, branch, seed.
inline void sort_records(std::vector<SweepRecord>& records) {
  std::stable_sort(records.begin(), records.end(), [](const SweepRecord& a, const SweepRecord& b) {
    return std::make_tuple(a.omega, a.alpha, static_cast<int>(a.source), a.branch, a.seed) <
           std::make_tuple(b.omega, b.alpha, static_cast<int>(b.source), b.branch, b.seed);
  });
}

/// FNV-1a 64-bit digest as 16 hex digits.
inline std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Hash of the canonical JSON dump (keys sorted by nlohmann::json).
inline std::string config_hash(const json& j) { return fnv1a_hex(j.dump()); }

/**
 * Delta eps_t = eps_t(semantic) - eps_t(positional) for every (alpha, omega,
 * seed) where both branches of one source are present.
 */
struct BranchPair {
  double alpha, omega;
  Source source;
  std::uint64_t seed;
  double delta_eps_t, delta_eps_g;
};

inline std::vector<BranchPair> pair_branches(const std::vector<SweepRecord>& records) {
  std::map<std::tuple<double, double, int, std::uint64_t>, std::pair<const SweepRecord*, const SweepRecord*>> by;
  for (const auto& r : records) {
    auto& slot = by[{r.omega, r.alpha, static_cast<int>(r.source), r.seed}];
    if (r.branch == "positional") slot.first = &r;
    if (r.branch == "semantic") slot.second = &r;
  }
  std::vector<BranchPair> out;
  for (const auto& [k, v] : by)
    if (v.first && v.second)
      out.push_back({std::get<1>(k), std::get<0>(k), static_cast<Source>(std::get<2>(k)), std::get<3>(k),
                     v.second->eps_t - v.first->eps_t, v.second->eps_g - v.first->eps_g});
  return out;
}

// ---------------------------------------------------------------------------
// Theory evaluation with continuation along alpha
// ---------------------------------------------------------------------------

struct TheorySettings {
  SEConfig se;
  TauScale tau_scale = TauScale::Field;
  int test_mc = 200000;
  std::uint64_t seed = 0;

  json to_json() const {
    json j = attnlab::to_json(se);
    j["tau_scale"] = tau_scale == TauScale::Field ? "field" : "per_dimension";
    j["test_mc"] = test_mc;
    j["seed"] = seed;
    return j;
  }
};

struct TheoryPoint {
  double alpha = 0.0;
  SolveResult solve;
  bool converged = false;
  double eps_t = std::nan("");
  double eps_t_se = std::nan("");
  double eps_t_main = std::nan("");
  double eps_t_appendix = std::nan("");
  Estimate eps_g{std::nan(""), std::nan("")};
  double wall_time = 0.0;
};

/// Solves one branch at cfg.alpha and evaluates eps_t (per sample) and eps_g.
inline TheoryPoint evaluate_theory(const ExperimentConfig& cfg, const TheorySettings& ts, const BranchInit& init) {
  const auto t0 = std::chrono::steady_clock::now();
  const SEProblem pb = se_problem(cfg, ts.tau_scale);
  const SESolver solver(pb, ts.se, ts.seed);
  TheoryPoint tp;
  tp.alpha = cfg.alpha;
  tp.solve = solver.solve(init);
  tp.converged = tp.solve.report.converged;
  try {
    const TrainLoss tl = solver.train_loss(tp.solve);
    tp.eps_t = tl.selected / pb.alpha;
    tp.eps_t_se = tl.std_error / pb.alpha;
    tp.eps_t_main = tl.main_text / pb.alpha;
    tp.eps_t_appendix = tl.appendix / pb.alpha;
  } catch (const std::exception&) {
    tp.converged = false;
  }
  try {
    tp.eps_g = theory_test_error(tp.solve.params, pb, ts.test_mc, derive_seed(ts.seed, "theory-test"));
  } catch (const std::exception&) {
    tp.converged = false;
  }
  tp.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return tp;
}

/**
 * Follows one branch along a list of alphas: positional in increasing
 * alpha, semantic in decreasing alpha, each solve seeded from the previous
 * converged fixed point. Results are returned in the input order.
 */
inline std::vector<TheoryPoint> theory_branch_chain(const ExperimentConfig& base, const std::vector<double>& alphas,
                                                    BranchInit::Kind kind, const TheorySettings& ts) {
  std::vector<std::size_t> order(alphas.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return kind == BranchInit::Kind::Semantic ? alphas[a] > alphas[b] : alphas[a] < alphas[b];
  });
  std::vector<TheoryPoint> out(alphas.size());
  BranchInit seed = kind == BranchInit::Kind::Semantic ? BranchInit::semantic() : BranchInit::positional();
  for (std::size_t i : order) {
    ExperimentConfig cfg = base;
    cfg.alpha = alphas[i];
    out[i] = evaluate_theory(cfg, ts, seed);
    if (out[i].converged) {
      seed = BranchInit::from(out[i].solve.params);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct SweepSpec {
  ExperimentConfig base;
  std::vector<double> alphas;
  std::vector<double> omegas;
  std::vector<Source> sources;
  std::vector<BranchInit::Kind> branches{BranchInit::Kind::Positional, BranchInit::Kind::Semantic};
  int seeds = 8;       // GD and Adam replicates per point
  int gamp_seeds = 1;  // GAMP replicates per point and branch
  TheorySettings theory;
  OptimizerConfig gd;
  AdamRandomOptions adam;
  GampConfig gamp;
  int n_test = 4096;
  int baseline_mc = 200000;

  void validate() const {
    if (sources.empty()) throw std::invalid_argument("sweep: nothing to evaluate (empty source list)");
    if (alphas.empty() || omegas.empty()) throw std::invalid_argument("sweep: empty grid");
    for (double a : alphas)
      if (!(a > 0.0) || !std::isfinite(a)) throw std::invalid_argument("sweep: alpha must be positive and finite");
    for (double w : omegas)
      if (!(w >= 0.0 && w <= 1.0)) throw std::invalid_argument("sweep: omega must lie in [0, 1]");
    if (branches.empty()) throw std::invalid_argument("sweep: no branches selected");
    if (seeds < 1 || gamp_seeds < 1) throw std::invalid_argument("sweep: seed counts must be positive");
    if (n_test < 1 || baseline_mc < 1) throw std::invalid_argument("sweep: Monte-Carlo sizes must be positive");
    base.validate();
    theory.se.validate();
    gd.validate();
    gamp.validate();
  }
};

class SweepIoError : public IoError {
 public:
  SweepIoError(const std::string& what, std::size_t kept)
      : IoError(what + " (" + std::to_string(kept) + " records kept; rerun with resume to continue)"), kept_(kept) {}
  std::size_t kept() const { return kept_; }

 private:
  std::size_t kept_;
};

struct SweepOptions {
  std::filesystem::path checkpoint;  // records.csv rewritten after each unit when set
  bool resume = false;               // skip (config_hash, seed) pairs already in the checkpoint
  std::function<void(const SweepRecord&)> on_record;
};

inline std::uint64_t replicate_seed(std::uint64_t master, int s) {
  return derive_seed(master, "replicate", static_cast<std::uint64_t>(s));
}

inline ExperimentConfig point_config(const ExperimentConfig& base, double alpha, double omega) {
  ExperimentConfig cfg = base;
  cfg.alpha = alpha;
  cfg.omega = omega;
  return cfg;
}

/// Hash identifying one (point, source, branch) evaluation independent of its seed.
inline std::string unit_hash(const SweepSpec& spec, double alpha, double omega, Source src, const std::string& branch) {
  json j;
  j["experiment"] = to_json(point_config(spec.base, alpha, omega));
  j["source"] = source_name(src);
  j["branch"] = branch;
  switch (src) {
    case Source::Theory: j["solver"] = spec.theory.to_json(); break;
    case Source::GD: j["solver"] = to_json(spec.gd); break;
    case Source::Adam:
      j["solver"] = {{"learning_rate", spec.adam.learning_rate}, {"epochs", spec.adam.epochs}};
      break;
    case Source::GAMP:
      j["solver"] = {{"max_iter", spec.gamp.max_iter}, {"damping", spec.gamp.damping}, {"tol", spec.gamp.tol},
                     {"encoding_curvature", spec.gamp.encoding_curvature},
                     {"uniform_variance", spec.gamp.uniform_variance}};
      break;
    case Source::LinearBaseline: j["solver"] = {{"n_mc", spec.baseline_mc}}; break;
  }
  if (src != Source::Theory && src != Source::LinearBaseline) j["n_test"] = spec.n_test;
  return config_hash(j);
}

namespace detail {

inline SweepRecord theory_record(const TheoryPoint& tp, double omega, int d, const std::string& branch,
                                 const std::string& hash, std::uint64_t seed) {
  SweepRecord r;
  r.alpha = tp.alpha;
  r.omega = omega;
  r.d = d;
  r.branch = branch;
  r.source = Source::Theory;
  r.seed = seed;
  r.config_hash = hash;
  r.converged = tp.converged;
  r.label = label_name(tp.solve.report.label);
  r.eps_t = tp.eps_t;
  r.eps_t_se = tp.eps_t_se;
  r.eps_t_main = tp.eps_t_main;
  r.eps_t_appendix = tp.eps_t_appendix;
  r.eps_g = tp.eps_g.value;
  r.eps_g_se = tp.eps_g.std_error;
  const auto& p = tp.solve.params;
  if (p.L() > 0) {
    r.theta = p.theta[0];
    r.m = p.m[0];
    r.m_dim = p.m[0] / std::sqrt(static_cast<double>(d));
    r.q = p.q[0];
  }
  r.wall_time = tp.wall_time;
  r.detail = {{"params", to_json(tp.solve.params)},
              {"conjugate", to_json(tp.solve.conj)},
              {"report", to_json(tp.solve.report)},
              {"eps_t_main", tp.eps_t_main},
              {"eps_t_appendix", tp.eps_t_appendix},
              {"eps_g", to_json(tp.eps_g)}};
  return r;
}

inline void fill_from_stats(SweepRecord& r, const SummaryStats& s) {
  r.theta = s.theta[0];
  r.m = s.m_field[0];
  r.m_dim = s.m[0];
  r.q = s.q[0];
}

}  // namespace detail

/**
 * Evaluates every (point, source, branch, seed) of the grid. Failures become
 * converged=false rows. Output is sorted by key, so it does not depend on
 * evaluation order.
 */
inline std::vector<SweepRecord> sweep(const SweepSpec& spec, const SweepOptions& opt = {}) {
  spec.validate();
  std::vector<SweepRecord> records;
  std::map<std::pair<std::string, std::uint64_t>, bool> done;
  if (opt.resume && !opt.checkpoint.empty() && std::filesystem::exists(opt.checkpoint)) {
    records = read_records_csv(opt.checkpoint);
    for (const auto& r : records) done[{r.config_hash, r.seed}] = true;
  }
  auto is_done = [&](const std::string& h, std::uint64_t s) { return done.count({h, s}) > 0; };
  auto emit = [&](SweepRecord r) {
    done[{r.config_hash, r.seed}] = true;
    if (opt.on_record) opt.on_record(r);
    records.push_back(std::move(r));
  };
  auto checkpoint = [&] {
    if (opt.checkpoint.empty()) return;
    std::vector<SweepRecord> sorted = records;
    sort_records(sorted);
    try {
      write_records_csv(opt.checkpoint, sorted);
    } catch (const std::exception& e) {
      throw SweepIoError(std::string("checkpoint write failed: ") + e.what(), records.size());
    }
  };
  const int d = spec.base.d;
  auto has = [&](Source s) { return std::find(spec.sources.begin(), spec.sources.end(), s) != spec.sources.end(); };

  for (double omega : spec.omegas) {
    if (has(Source::Theory)) {
      for (auto kind : spec.branches) {
        const std::string branch = branch_name(kind);
        const std::uint64_t seed = spec.theory.seed;
        bool all = true;
        for (double a : spec.alphas) all = all && is_done(unit_hash(spec, a, omega, Source::Theory, branch), seed);
        if (all) continue;
        // A partially finished chain is recomputed so that its seeding matches a fresh run.
        const auto chain = theory_branch_chain(point_config(spec.base, spec.alphas[0], omega), spec.alphas, kind,
                                               spec.theory);
        for (std::size_t i = 0; i < chain.size(); ++i) {
          const std::string h = unit_hash(spec, spec.alphas[i], omega, Source::Theory, branch);
          if (is_done(h, seed)) continue;
          emit(detail::theory_record(chain[i], omega, d, branch, h, seed));
        }
        checkpoint();
      }
    }
    for (double alpha : spec.alphas) {
      const ExperimentConfig cfg = point_config(spec.base, alpha, omega);
      const Mat p = positional_encoding(cfg);

      if (has(Source::GD)) {
        for (auto kind : spec.branches) {
          const std::string branch = branch_name(kind);
          const std::string h = unit_hash(spec, alpha, omega, Source::GD, branch);
          const InitStrategy init =
              kind == BranchInit::Kind::Positional ? InitStrategy::positional() : InitStrategy::semantic();
          for (int s = 0; s < spec.seeds; ++s) {
            const std::uint64_t seed = replicate_seed(cfg.master_seed, s);
            if (is_done(h, seed)) continue;
            SweepRecord r;
            r.alpha = alpha;
            r.omega = omega;
            r.d = d;
            r.branch = branch;
            r.source = Source::GD;
            r.seed = seed;
            r.config_hash = h;
            try {
              const TeacherSpec teacher = make_teacher(cfg, seed);
              const Dataset ds = sample_dataset(cfg, teacher, seed);
              const TrainedModel mdl = train(ds, teacher, p, cfg.lambda, init, spec.gd, seed, {spec.n_test});
              r.converged = true;
              r.label = label_name(classify_endpoint(mdl.stats));
              r.eps_t = RiskModel(ds, p, RiskModel::Kind::Simplified).value(mdl.q_hat, cfg.lambda) / ds.n();
              r.eps_g = mdl.test_mse.value;
              r.eps_g_se = mdl.test_mse.std_error;
              detail::fill_from_stats(r, mdl.stats);
              r.wall_time = mdl.wall_time;
              r.detail = to_json(mdl);
            } catch (const std::exception& e) {
              r.converged = false;
              r.label = "failed";
              r.detail = {{"error", e.what()}};
            }
            emit(std::move(r));
          }
          checkpoint();
        }
      }

      if (has(Source::Adam)) {
        const std::string h = unit_hash(spec, alpha, omega, Source::Adam, "random");
        for (int s = 0; s < spec.seeds; ++s) {
          const std::uint64_t seed = replicate_seed(cfg.master_seed, s);
          if (is_done(h, seed)) continue;
          SweepRecord r;
          r.alpha = alpha;
          r.omega = omega;
          r.d = d;
          r.branch = "random";
          r.source = Source::Adam;
          r.seed = seed;
          r.config_hash = h;
          try {
            const TeacherSpec teacher = make_teacher(cfg, seed);
            const Dataset ds = sample_dataset(cfg, teacher, seed);
            AdamRandomOptions ao = spec.adam;
            ao.n_test = spec.n_test;
            const AdamRandomResult res = train_adam_random(ds, teacher, p, cfg.lambda, seed, ao);
            r.converged = true;
            r.label = label_name(res.label);
            r.eps_t = RiskModel(ds, p, RiskModel::Kind::Simplified).value(res.model.q_hat, cfg.lambda) / ds.n();
            r.eps_g = res.model.test_mse.value;
            r.eps_g_se = res.model.test_mse.std_error;
            detail::fill_from_stats(r, res.model.stats);
            r.wall_time = res.model.wall_time;
            r.detail = to_json(res.model);
          } catch (const std::exception& e) {
            r.converged = false;
            r.label = "failed";
            r.detail = {{"error", e.what()}};
          }
          emit(std::move(r));
        }
        checkpoint();
      }

      if (has(Source::GAMP)) {
        for (auto kind : spec.branches) {
          const std::string branch = branch_name(kind);
          const std::string h = unit_hash(spec, alpha, omega, Source::GAMP, branch);
          for (int s = 0; s < spec.gamp_seeds; ++s) {
            const std::uint64_t seed = replicate_seed(cfg.master_seed, s);
            if (is_done(h, seed)) continue;
            SweepRecord r;
            r.alpha = alpha;
            r.omega = omega;
            r.d = d;
            r.branch = branch;
            r.source = Source::GAMP;
            r.seed = seed;
            r.config_hash = h;
            try {
              const TeacherSpec teacher = make_teacher(cfg, seed);
              const Dataset ds = sample_dataset(cfg, teacher, seed);
              GampConfig gc = spec.gamp;
              gc.seed = seed;
              gc.init = kind == BranchInit::Kind::Positional ? InitStrategy::positional() : InitStrategy::semantic();
              const GampResult res = gamp_run(ds, teacher, p, cfg.lambda, gc);
              const SummaryStats st = measure_summary_stats(res.q_hat, teacher, p, cfg.sigma);
              const Estimate mse = empirical_test_mse(res.q_hat, teacher, p, cfg.sigma, spec.n_test, seed);
              Vec grad;
              r.eps_t = RiskModel(ds, p, RiskModel::Kind::Simplified).value(res.q_hat, cfg.lambda, &grad) / ds.n();
              r.converged = res.report.converged;
              r.label = label_name(classify_endpoint(st));
              r.eps_g = mse.value;
              r.eps_g_se = mse.std_error;
              detail::fill_from_stats(r, st);
              r.wall_time = res.report.wall_time;
              r.detail = {{"report", to_json(res.report)}, {"simplified_grad_norm", grad.norm()}};
            } catch (const std::exception& e) {
              r.converged = false;
              r.label = "failed";
              r.detail = {{"error", e.what()}};
            }
            emit(std::move(r));
          }
          checkpoint();
        }
      }

      if (has(Source::LinearBaseline)) {
        const std::string h = unit_hash(spec, alpha, omega, Source::LinearBaseline, "linear");
        const std::uint64_t seed = cfg.master_seed;
        if (!is_done(h, seed)) {
          const auto t0 = std::chrono::steady_clock::now();
          TeacherSpec teacher;
          teacher.omega = omega;
          teacher.A = cfg.A;
          const LinearFit fit = linear_baseline_fit(teacher, cfg.sigma, spec.baseline_mc, seed);
          const Estimate mse = linear_baseline_mse(fit.W, teacher, cfg.sigma, spec.baseline_mc, seed);
          SweepRecord r;
          r.alpha = alpha;
          r.omega = omega;
          r.d = d;
          r.branch = "linear";
          r.source = Source::LinearBaseline;
          r.seed = seed;
          r.config_hash = h;
          r.converged = true;
          r.label = "linear";
          r.eps_g = mse.value;
          r.eps_g_se = mse.std_error;
          r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
          r.detail = to_json(fit);
          emit(std::move(r));
          checkpoint();
        }
      }
    }
  }
  sort_records(records);
  checkpoint();
  return records;
}

// ---------------------------------------------------------------------------
// Transition locators
// ---------------------------------------------------------------------------

/// Objective for the sign-change search: value with its standard error, or nullopt on failure.
using SignObjective = std::function<std::optional<Estimate>(double)>;

struct BracketEval {
  double alpha;
  double value;
  double std_error;
  bool ok;
};

/**
 * Outcome of a sign-change search. status is "root" (bracket at the
 * requested resolution), "interval" (|f| fell below noise_sigmas standard
 * errors, so [lo, hi] is an uncertainty band), "no bracket", or "flagged"
 * (an evaluation failed twice).
 */
struct RootBracket {
  std::string status = "no bracket";
  double lo = std::nan(""), hi = std::nan("");
  double f_lo = std::nan(""), f_hi = std::nan("");
  double estimate = std::nan("");
  std::vector<BracketEval> evaluations;
  std::string message;

  bool found() const { return status == "root" || status == "interval"; }
  double width() const { return hi - lo; }
};

/**
 * Geometric bisection on [lo, hi] for a sign change of f. Each failed
 * midpoint is retried once at the midpoint of the lower half; a second
 * failure flags the search and keeps the last valid bracket.
 */
inline RootBracket bisect_sign_change(const SignObjective& f, double lo, double hi, double resolution,
                                      double noise_sigmas = 3.0, int max_iter = 60) {
  if (!(lo > 0.0) || !(hi > lo)) throw std::invalid_argument("bisect_sign_change: need 0 < lo < hi");
  if (!(resolution > 0.0)) throw std::invalid_argument("bisect_sign_change: resolution must be positive");
  RootBracket out;
  auto eval = [&](double a) {
    const auto v = f(a);
    out.evaluations.push_back({a, v ? v->value : std::nan(""), v ? v->std_error : std::nan(""), v.has_value()});
    return v;
  };
  const auto flo = eval(lo), fhi = eval(hi);
  out.lo = lo;
  out.hi = hi;
  if (!flo || !fhi) {
    out.status = "flagged";
    out.message = "objective failed at a bracket end";
    return out;
  }
  out.f_lo = flo->value;
  out.f_hi = fhi->value;
  if (!(out.f_lo * out.f_hi < 0.0)) {
    out.status = "no bracket";
    out.message = "objective has the same sign at both ends";
    return out;
  }
  out.status = "root";
  for (int it = 0; it < max_iter && out.hi - out.lo > resolution; ++it) {
    double mid = std::sqrt(out.lo * out.hi);
    auto fm = eval(mid);
    if (!fm) {
      mid = std::sqrt(out.lo * mid);
      fm = eval(mid);
      if (!fm) {
        out.status = "flagged";
        out.message = "objective failed twice inside the bracket";
        break;
      }
    }
    if (fm->std_error > 0.0 && std::abs(fm->value) < noise_sigmas * fm->std_error) {
      out.status = "interval";
      out.message = "objective within noise at alpha = " + format_double(mid);
      out.estimate = mid;
      return out;
    }
    if (fm->value * out.f_lo < 0.0) {
      out.hi = mid;
      out.f_hi = fm->value;
    } else {
      out.lo = mid;
      out.f_lo = fm->value;
    }
  }
  // Secant point of the final bracket; it lies strictly inside because the end values differ in sign.
  out.estimate = out.lo + (out.hi - out.lo) * out.f_lo / (out.f_lo - out.f_hi);
  return out;
}

/**
 * Both theory branches at arbitrary alphas, seeded from the nearest
 * converged solution on the correct side (positional from below, semantic
 * from above).
 */
class BranchTracker {
 public:
  BranchTracker(ExperimentConfig base, TheorySettings ts) : base_(std::move(base)), ts_(std::move(ts)) {}

  const TheoryPoint& get(BranchInit::Kind kind, double alpha) {
    auto& cache = kind == BranchInit::Kind::Positional ? pos_ : sem_;
    if (auto it = cache.find(alpha); it != cache.end()) return it->second;
    BranchInit init = kind == BranchInit::Kind::Positional ? BranchInit::positional() : BranchInit::semantic();
    const TheoryPoint* neighbour = nullptr;
    for (const auto& [a, tp] : cache) {
      if (!tp.converged) continue;
      if (kind == BranchInit::Kind::Positional ? a < alpha : a > alpha) {
        if (!neighbour || std::abs(a - alpha) < std::abs(neighbour->alpha - alpha)) neighbour = &tp;
      }
    }
    if (neighbour) init = BranchInit::from(neighbour->solve.params);
    ExperimentConfig cfg = base_;
    cfg.alpha = alpha;
    return cache.emplace(alpha, evaluate_theory(cfg, ts_, init)).first->second;
  }

  /// eps_t(semantic) - eps_t(positional), with the combined standard error.
  std::optional<Estimate> delta_eps_t(double alpha) {
    const TheoryPoint& p = get(BranchInit::Kind::Positional, alpha);
    const TheoryPoint& s = get(BranchInit::Kind::Semantic, alpha);
    if (!p.converged || !s.converged || !distinct(p, s)) return std::nullopt;
    return Estimate{s.eps_t - p.eps_t, std::hypot(s.eps_t_se, p.eps_t_se)};
  }

  /// eps_g of the branch with the lower eps_t.
  std::optional<Estimate> global_eps_g(double alpha) {
    const TheoryPoint& p = get(BranchInit::Kind::Positional, alpha);
    const TheoryPoint& s = get(BranchInit::Kind::Semantic, alpha);
    if (!p.converged && !s.converged) return std::nullopt;
    if (!p.converged) return s.eps_g;
    if (!s.converged) return p.eps_g;
    return s.eps_t <= p.eps_t ? s.eps_g : p.eps_g;
  }

  /// False when both solves landed on the same fixed point (the branches do not coexist there).
  static bool distinct(const TheoryPoint& a, const TheoryPoint& b, double tol = 1e-4) {
    const OrderParams& x = a.solve.params;
    const OrderParams& y = b.solve.params;
    double gap = 0.0;
    for (std::size_t l = 0; l < x.q.size(); ++l)
      gap = std::max({gap, std::abs(x.q[l] - y.q[l]), std::abs(std::abs(x.m[l]) - std::abs(y.m[l])),
                      std::abs(std::abs(x.theta[l]) - std::abs(y.theta[l]))});
    return gap > tol;
  }

  const std::map<double, TheoryPoint>& positional() const { return pos_; }
  const std::map<double, TheoryPoint>& semantic() const { return sem_; }

 private:
  ExperimentConfig base_;
  TheorySettings ts_;
  std::map<double, TheoryPoint> pos_, sem_;
};

struct TransitionOptions {
  double lo = 0.2;
  double hi = 6.0;
  double resolution = 0.05;
  int scan_points = 8;  // geometric continuation scan that seeds the branches and finds the bracket
  double noise_sigmas = 3.0;
  int baseline_mc = 200000;
};

struct TransitionResult {
  double omega = 0.0;
  RootBracket alpha_c;
  RootBracket alpha_l;
  Estimate eps_g_linear;
  std::optional<bool> ordering_holds;  // alpha_l >= alpha_c, when both exist
  std::string method;
};

inline std::vector<double> geometric_grid(double lo, double hi, int n) {
  if (n < 2 || !(lo > 0.0) || !(hi > lo)) throw std::invalid_argument("geometric_grid: need n >= 2 and 0 < lo < hi");
  std::vector<double> g(n);
  for (int i = 0; i < n; ++i) g[i] = lo * std::pow(hi / lo, static_cast<double>(i) / (n - 1));
  return g;
}

/**
 * Scans the grid for the first sign change of f and bisects inside it. The
 * scan values are kept in the evaluation log.
 */
inline RootBracket scan_and_bisect(const SignObjective& f, const TransitionOptions& opt) {
  const auto grid = geometric_grid(opt.lo, opt.hi, opt.scan_points);
  std::vector<std::optional<Estimate>> vals;
  for (double a : grid) vals.push_back(f(a));
  RootBracket out;
  for (std::size_t i = 0; i < grid.size(); ++i)
    out.evaluations.push_back(
        {grid[i], vals[i] ? vals[i]->value : std::nan(""), vals[i] ? vals[i]->std_error : std::nan(""), vals[i].has_value()});
  for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
    if (!vals[i] || !vals[i + 1]) continue;
    if (vals[i]->value * vals[i + 1]->value < 0.0) {
      RootBracket b = bisect_sign_change(f, grid[i], grid[i + 1], opt.resolution, opt.noise_sigmas);
      b.evaluations.insert(b.evaluations.begin(), out.evaluations.begin(), out.evaluations.end());
      return b;
    }
  }
  out.lo = opt.lo;
  out.hi = opt.hi;
  const bool any_failed = std::any_of(vals.begin(), vals.end(), [](const auto& v) { return !v.has_value(); });
  out.status = "no bracket";
  out.message = any_failed ? "no sign change among converged scan points" : "no sign change on the scan grid";
  return out;
}

/// Phase transition alpha_c: sign change of eps_t(semantic) - eps_t(positional).
inline RootBracket locate_alpha_c(BranchTracker& tracker, const TransitionOptions& opt,
                                  const SignObjective* hook = nullptr) {
  const SignObjective f = hook ? *hook : SignObjective([&](double a) { return tracker.delta_eps_t(a); });
  return scan_and_bisect(f, opt);
}

/// Crossover alpha_l: sign change of eps_g(global branch) - eps_g(linear baseline).
inline RootBracket locate_alpha_l(BranchTracker& tracker, const Estimate& eps_g_linear, const TransitionOptions& opt,
                                  const SignObjective* hook = nullptr) {
  const SignObjective f = hook ? *hook : SignObjective([&](double a) -> std::optional<Estimate> {
    const auto e = tracker.global_eps_g(a);
    if (!e) return std::nullopt;
    return Estimate{e->value - eps_g_linear.value, std::hypot(e->std_error, eps_g_linear.std_error)};
  });
  return scan_and_bisect(f, opt);
}

/// Population risk of the dense linear baseline at (omega, sigma, A).
inline Estimate linear_baseline_eps_g(const ExperimentConfig& cfg, int n_mc, std::uint64_t seed) {
  TeacherSpec teacher;
  teacher.omega = cfg.omega;
  teacher.A = cfg.A;
  const LinearFit fit = linear_baseline_fit(teacher, cfg.sigma, n_mc, seed);
  return linear_baseline_mse(fit.W, teacher, cfg.sigma, n_mc, seed);
}

/// Both locators at one omega, sharing the branch solutions.
inline TransitionResult locate_transitions(const ExperimentConfig& base, double omega, const TheorySettings& ts,
                                           const TransitionOptions& opt) {
  ExperimentConfig cfg = base;
  cfg.omega = omega;
  BranchTracker tracker(cfg, ts);
  TransitionResult tr;
  tr.omega = omega;
  tr.method = "geometric scan (" + std::to_string(opt.scan_points) + " points) then geometric bisection to " +
              format_double(opt.resolution) + "; branches continued from converged neighbours";
  tr.alpha_c = locate_alpha_c(tracker, opt);
  tr.eps_g_linear = linear_baseline_eps_g(cfg, opt.baseline_mc, ts.seed);
  tr.alpha_l = locate_alpha_l(tracker, tr.eps_g_linear, opt);
  if (tr.alpha_c.found() && tr.alpha_l.found()) tr.ordering_holds = tr.alpha_l.hi >= tr.alpha_c.lo;
  return tr;
}

inline json to_json(const RootBracket& b) {
  json ev = json::array();
  for (const auto& e : b.evaluations)
    ev.push_back({{"alpha", e.alpha}, {"value", e.value}, {"std_error", e.std_error}, {"ok", e.ok}});
  return {{"status", b.status}, {"lo", b.lo}, {"hi", b.hi}, {"f_lo", b.f_lo}, {"f_hi", b.f_hi},
          {"estimate", b.estimate}, {"width", b.width()}, {"message", b.message}, {"evaluations", ev}};
}

inline json to_json(const TransitionResult& t) {
  return {{"omega", t.omega},
          {"alpha_c", to_json(t.alpha_c)},
          {"alpha_l", to_json(t.alpha_l)},
          {"eps_g_linear", to_json(t.eps_g_linear)},
          {"ordering_holds", t.ordering_holds ? json(*t.ordering_holds) : json(nullptr)},
          {"method", t.method}};
}

}  // namespace attnlab
