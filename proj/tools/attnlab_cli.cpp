// Command-line front end: single solves, single training runs, sweeps, transition searches and manifest suites.

#include <attnlab/attnlab.hpp>

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

namespace fs = std::filesystem;
using namespace attnlab;

namespace {

/// Results root: $ATTNLAB_RESULTS, else ./results.
fs::path results_root() {
  const char* env = std::getenv("ATTNLAB_RESULTS");
  return env && *env ? fs::path(env) : fs::path("results");
}

struct ExperimentFlags {
  ExperimentConfig cfg;
  std::string A;
  double pos_scale = std::nan("");

  void add(CLI::App* app) {
    app->add_option("--d", cfg.d, "Embedding dimension")->capture_default_str();
    app->add_option("--L", cfg.L, "Tokens per sentence")->capture_default_str();
    app->add_option("--alpha", cfg.alpha, "Samples per dimension, n = round(alpha d)")->capture_default_str();
    app->add_option("--omega", cfg.omega, "Weight of the positional part of the target")->capture_default_str();
    app->add_option("--sigma", cfg.sigma, "Token standard deviation")->capture_default_str();
    app->add_option("--lambda", cfg.lambda, "L2 regularization")->capture_default_str();
    app->add_option("--A", A, "Positional target, rows separated by ';' (default \"0.6 0.4; 0.4 0.6\")");
    app->add_option("--pos-scale", pos_scale, "Per-coordinate encoding magnitude (default 3/sqrt(d))");
    app->add_option("--seed", cfg.master_seed, "Master seed")->capture_default_str();
  }

  ExperimentConfig resolve() const {
    ExperimentConfig c = cfg;
    if (!A.empty()) c.A = detail::to_matrix(A);
    if (std::isfinite(pos_scale)) c.pos_scale = pos_scale;
    c.validate();
    return c;
  }
};

struct TheoryFlags {
  TheorySettings ts;
  std::string integration = "gauss_hermite";
  std::string variant = "main_text";
  std::string tau = "field";

  void add(CLI::App* app) {
    app->add_option("--integration", integration, "gauss_hermite or monte_carlo")->capture_default_str();
    app->add_option("--grid-nodes", ts.se.grid_nodes, "Gauss-Hermite nodes per coordinate")->capture_default_str();
    app->add_option("--n-mc", ts.se.n_mc, "Monte-Carlo samples per iteration")->capture_default_str();
    app->add_option("--tol", ts.se.tol, "Fixed-point tolerance")->capture_default_str();
    app->add_option("--max-iter", ts.se.max_iter, "Fixed-point iteration cap")->capture_default_str();
    app->add_option("--damping", ts.se.damping, "Damping of the plain update")->capture_default_str();
    app->add_option("--variant", variant, "Train-loss expression: main_text or appendix")->capture_default_str();
    app->add_option("--tau-scale", tau, "field or per_dimension")->capture_default_str();
    app->add_option("--test-mc", ts.test_mc, "Samples for the theory test error")->capture_default_str();
  }

  TheorySettings resolve(std::uint64_t seed) const {
    TheorySettings t = ts;
    t.seed = seed;
    if (integration == "gauss_hermite") t.se.integration = Integration::GaussHermite;
    else if (integration == "monte_carlo") t.se.integration = Integration::MonteCarlo;
    else throw std::invalid_argument("--integration must be gauss_hermite or monte_carlo");
    if (variant == "main_text") t.se.train_loss_variant = TrainLossVariant::MainText;
    else if (variant == "appendix") t.se.train_loss_variant = TrainLossVariant::Appendix;
    else throw std::invalid_argument("--variant must be main_text or appendix");
    if (tau == "field") t.tau_scale = TauScale::Field;
    else if (tau == "per_dimension") t.tau_scale = TauScale::PerDimension;
    else throw std::invalid_argument("--tau-scale must be field or per_dimension");
    t.se.validate();
    return t;
  }
};

InitStrategy parse_init(const std::string& s) {
  if (s == "positional") return InitStrategy::positional();
  if (s == "semantic") return InitStrategy::semantic();
  if (s == "random") return InitStrategy::random();
  throw std::invalid_argument("init must be positional, semantic or random");
}

void emit(const fs::path& path, const json& j, bool quiet) {
  write_json(path, j);
  if (!quiet) std::cout << j.dump(2) << "\n";
  std::cerr << "wrote " << path.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-layer phase experiments: asymptotic theory, training, message passing and sweeps"};
  app.require_subcommand(1);
  bool strict = false, quiet = false;
  app.add_flag("--strict", strict, "Exit with status 3 when a solver does not converge");
  app.add_flag("--quiet", quiet, "Do not echo reports to stdout");

  // theory
  auto* theory = app.add_subcommand("theory", "Solve the asymptotic equations for one branch");
  ExperimentFlags th_exp;
  TheoryFlags th_flags;
  std::string th_branch = "positional";
  th_exp.add(theory);
  th_flags.add(theory);
  theory->add_option("--branch", th_branch, "positional or semantic")->capture_default_str();

  // erm
  auto* erm = app.add_subcommand("erm", "Train one model on a fresh dataset");
  ExperimentFlags erm_exp;
  OptimizerConfig erm_opt;
  std::string erm_init = "positional", erm_kind = "gd", erm_risk = "full", erm_dataset;
  double erm_grad_tol = 0.0;
  int erm_n_test = 4096;
  erm_exp.add(erm);
  erm->add_option("--init", erm_init, "positional, semantic or random")->capture_default_str();
  erm->add_option("--optimizer", erm_kind, "gd or adam")->capture_default_str();
  erm->add_option("--lr", erm_opt.learning_rate, "Learning rate")->capture_default_str();
  erm->add_option("--epochs", erm_opt.epochs, "Full-batch epochs")->capture_default_str();
  erm->add_option("--grad-tol", erm_grad_tol, "Stop when the gradient norm falls below this (0: off)");
  erm->add_option("--risk", erm_risk, "full or simplified")->capture_default_str();
  erm->add_option("--n-test", erm_n_test, "Test samples for eps_g")->capture_default_str();
  erm->add_option("--save-dataset", erm_dataset, "Also write the training set to this file");

  // gamp
  auto* gamp = app.add_subcommand("gamp", "Run message passing on one fresh dataset");
  ExperimentFlags gp_exp;
  GampConfig gp_cfg;
  std::string gp_init = "random";
  gp_exp.add(gamp);
  gamp->add_option("--init", gp_init, "positional, semantic or random")->capture_default_str();
  gamp->add_option("--max-iter", gp_cfg.max_iter, "Iteration cap")->capture_default_str();
  gamp->add_option("--damping", gp_cfg.damping, "Damping")->capture_default_str();
  gamp->add_option("--tol", gp_cfg.tol, "Step tolerance")->capture_default_str();

  // baseline
  auto* baseline = app.add_subcommand("baseline", "Dense linear baseline: population fit and test error");
  ExperimentFlags bl_exp;
  int bl_mc = 200000;
  bl_exp.add(baseline);
  baseline->add_option("--n-mc", bl_mc, "Monte-Carlo samples")->capture_default_str();

  // sweep
  auto* sw = app.add_subcommand("sweep", "Evaluate a grid of (alpha, omega) points");
  ExperimentFlags sw_exp;
  TheoryFlags sw_theory;
  SweepSpec sw_spec;
  std::string sw_alphas = "0.5 1 2", sw_omegas = "0.3", sw_sources = "theory", sw_branches = "positional semantic";
  std::string sw_out;
  bool sw_resume = false;
  sw_exp.add(sw);
  sw_theory.add(sw);
  sw->add_option("--alphas", sw_alphas, "List or 'geometric lo hi n'")->capture_default_str();
  sw->add_option("--omegas", sw_omegas, "List or 'geometric lo hi n'")->capture_default_str();
  sw->add_option("--sources", sw_sources, "Any of theory gd adam gamp baseline")->capture_default_str();
  sw->add_option("--branches", sw_branches, "positional and/or semantic")->capture_default_str();
  sw->add_option("--seeds", sw_spec.seeds, "Replicates per point for gd and adam")->capture_default_str();
  sw->add_option("--gd-lr", sw_spec.gd.learning_rate, "GD learning rate")->capture_default_str();
  sw->add_option("--gd-epochs", sw_spec.gd.epochs, "GD epochs")->capture_default_str();
  sw->add_option("--out", sw_out, "Output directory (default $ATTNLAB_RESULTS/sweep)");
  sw->add_flag("--resume", sw_resume, "Skip records already present in the output");

  // transition
  auto* tr = app.add_subcommand("transition", "Locate alpha_c and alpha_l");
  ExperimentFlags tr_exp;
  TheoryFlags tr_theory;
  TransitionOptions tr_opt;
  std::string tr_omegas = "0.3", tr_out;
  tr_exp.add(tr);
  tr_theory.add(tr);
  tr->add_option("--omegas", tr_omegas, "List or 'geometric lo hi n'")->capture_default_str();
  tr->add_option("--lo", tr_opt.lo, "Lower end of the search")->capture_default_str();
  tr->add_option("--hi", tr_opt.hi, "Upper end of the search")->capture_default_str();
  tr->add_option("--resolution", tr_opt.resolution, "Bracket width")->capture_default_str();
  tr->add_option("--scan-points", tr_opt.scan_points, "Geometric scan points")->capture_default_str();
  tr->add_option("--out", tr_out, "Output file (default $ATTNLAB_RESULTS/transitions.json)");

  // suite
  auto* suite = app.add_subcommand("suite", "Run a manifest end to end");
  std::string su_manifest, su_out;
  bool su_resume = false;
  suite->add_option("manifest", su_manifest, "Manifest file")->required();
  suite->add_option("--out", su_out, "Results directory (default $ATTNLAB_RESULTS/<name>)");
  suite->add_flag("--resume", su_resume, "Skip records already present in the output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    const fs::path root = results_root();
    if (*theory) {
      const ExperimentConfig cfg = th_exp.resolve();
      const TheorySettings ts = th_flags.resolve(cfg.master_seed);
      const BranchInit::Kind kind = parse_branch(th_branch);
      const TheoryPoint tp =
          evaluate_theory(cfg, ts, kind == BranchInit::Kind::Semantic ? BranchInit::semantic() : BranchInit::positional());
      json j = {{"experiment", to_json(cfg)},
                {"theory", ts.to_json()},
                {"branch", th_branch},
                {"converged", tp.converged},
                {"eps_t", tp.eps_t},
                {"eps_t_main", tp.eps_t_main},
                {"eps_t_appendix", tp.eps_t_appendix},
                {"eps_g", to_json(tp.eps_g)},
                {"params", to_json(tp.solve.params)},
                {"conjugate", to_json(tp.solve.conj)},
                {"report", to_json(tp.solve.report)}};
      const std::string h = config_hash({{"e", j["experiment"]}, {"t", j["theory"]}, {"b", th_branch}});
      emit(root / "theory" / (th_branch + "-" + h + ".json"), j, quiet);
      return strict && !tp.converged ? kExitNonConvergence : kExitOk;
    }
    if (*erm) {
      const ExperimentConfig cfg = erm_exp.resolve();
      if (erm_kind == "gd") erm_opt.kind = OptimizerKind::GD;
      else if (erm_kind == "adam") erm_opt.kind = OptimizerKind::Adam;
      else throw std::invalid_argument("--optimizer must be gd or adam");
      if (erm_risk == "full") erm_opt.risk = RiskModel::Kind::Full;
      else if (erm_risk == "simplified") erm_opt.risk = RiskModel::Kind::Simplified;
      else throw std::invalid_argument("--risk must be full or simplified");
      if (erm_grad_tol > 0.0) erm_opt.grad_tol = erm_grad_tol;
      erm_opt.validate();
      const TeacherSpec teacher = make_teacher(cfg, cfg.master_seed);
      const Dataset ds = sample_dataset(cfg, teacher, cfg.master_seed);
      const Mat p = positional_encoding(cfg);
      const TrainedModel mdl = train(ds, teacher, p, cfg.lambda, parse_init(erm_init), erm_opt, cfg.master_seed,
                                     {erm_n_test});
      json j = to_json(mdl);
      j["experiment"] = to_json(cfg);
      j["seed"] = cfg.master_seed;
      j["label"] = label_name(classify_endpoint(mdl.stats));
      j["config_hash"] = config_hash({{"e", j["experiment"]}, {"o", to_json(erm_opt)}, {"i", erm_init}});
      const std::string stem = "erm-" + j["config_hash"].get<std::string>();
      save_weights(root / "erm" / (stem + ".weights.f64"), mdl.q_hat);
      j["weights_file"] = stem + ".weights.f64";
      if (!erm_dataset.empty()) save_dataset(erm_dataset, ds);
      emit(root / "erm" / (stem + ".json"), j, quiet);
      return kExitOk;
    }
    if (*gamp) {
      const ExperimentConfig cfg = gp_exp.resolve();
      gp_cfg.init = parse_init(gp_init);
      gp_cfg.seed = cfg.master_seed;
      const TeacherSpec teacher = make_teacher(cfg, cfg.master_seed);
      const Dataset ds = sample_dataset(cfg, teacher, cfg.master_seed);
      const Mat p = positional_encoding(cfg);
      bool converged = false;
      json j = {{"experiment", to_json(cfg)}, {"init", gp_init}};
      try {
        const GampResult res = gamp_run(ds, teacher, p, cfg.lambda, gp_cfg);
        converged = res.report.converged;
        j["report"] = to_json(res.report);
        j["final"] = to_json(measure_summary_stats(res.q_hat, teacher, p, cfg.sigma));
        j["gradient_norm"] = gradient(ds, res.q_hat, p, cfg.lambda).norm();
      } catch (const GampDivergence& e) {
        j["error"] = e.what();
      }
      j["converged"] = converged;
      const std::string h = config_hash({{"e", j["experiment"]}, {"i", gp_init}, {"it", gp_cfg.max_iter}});
      emit(root / "gamp" / ("gamp-" + h + ".json"), j, quiet);
      return strict && !converged ? kExitNonConvergence : kExitOk;
    }
    if (*baseline) {
      const ExperimentConfig cfg = bl_exp.resolve();
      TeacherSpec teacher;
      teacher.omega = cfg.omega;
      teacher.A = cfg.A;
      const LinearFit fit = linear_baseline_fit(teacher, cfg.sigma, bl_mc, cfg.master_seed);
      const Estimate mse = linear_baseline_mse(fit.W, teacher, cfg.sigma, bl_mc, cfg.master_seed);
      json j = {{"experiment", to_json(cfg)}, {"fit", to_json(fit)}, {"eps_g", to_json(mse)}, {"n_mc", bl_mc}};
      emit(root / "baseline" / ("baseline-" + config_hash(j["experiment"]) + ".json"), j, quiet);
      return kExitOk;
    }
    if (*sw) {
      sw_spec.base = sw_exp.resolve();
      sw_spec.theory = sw_theory.resolve(sw_spec.base.master_seed);
      sw_spec.alphas = detail::to_grid(sw_alphas);
      sw_spec.omegas = detail::to_grid(sw_omegas);
      sw_spec.sources.clear();
      for (const auto& s : detail::split_list(sw_sources)) sw_spec.sources.push_back(parse_source(s));
      sw_spec.branches.clear();
      for (const auto& b : detail::split_list(sw_branches)) sw_spec.branches.push_back(parse_branch(b));
      sw_spec.validate();
      const fs::path out = sw_out.empty() ? root / "sweep" : fs::path(sw_out);
      SweepOptions so;
      so.checkpoint = out / "records.csv";
      so.resume = sw_resume;
      so.on_record = [&](const SweepRecord& r) {
        write_json(out / "runs" / run_artifact_name(r), record_json(r));
        std::cerr << source_name(r.source) << " " << r.branch << " alpha=" << r.alpha << " omega=" << r.omega
                  << " seed=" << r.seed << (r.converged ? "" : " [not converged]") << "\n";
      };
      const auto records = sweep(sw_spec, so);
      int bad = 0;
      for (const auto& r : records) bad += r.converged ? 0 : 1;
      std::cerr << "wrote " << (out / "records.csv").string() << " (" << records.size() << " records, " << bad
                << " not converged)\n";
      return strict && bad > 0 ? kExitNonConvergence : kExitOk;
    }
    if (*tr) {
      const ExperimentConfig cfg = tr_exp.resolve();
      const TheorySettings ts = tr_theory.resolve(cfg.master_seed);
      json arr = json::array();
      bool flagged = false;
      for (double omega : detail::to_grid(tr_omegas)) {
        const TransitionResult res = locate_transitions(cfg, omega, ts, tr_opt);
        flagged = flagged || res.alpha_c.status == "flagged" || res.alpha_l.status == "flagged";
        arr.push_back(to_json(res));
      }
      emit(tr_out.empty() ? root / "transitions.json" : fs::path(tr_out), arr, quiet);
      return strict && flagged ? kExitNonConvergence : kExitOk;
    }
    if (*suite) {
      const Manifest m = load_manifest(su_manifest);
      const fs::path out = su_out.empty() ? root / m.name : fs::path(su_out);
      SuiteOptions so;
      so.resume = su_resume;
      so.strict = strict;
      so.log = [](const std::string& s) { std::cerr << s << "\n"; };
      const SuiteResult res = run_experiment_suite(m, out, so);
      std::cerr << "suite " << m.name << ": " << res.records.size() << " records, " << res.nonconverged
                << " not converged, " << res.transitions.size() << " transition searches -> " << out.string() << "\n";
      return res.exit_status;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const SweepIoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}
