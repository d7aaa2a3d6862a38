#pragma once

#include <attnlab/attention.hpp>
#include <attnlab/erm.hpp>
#include <attnlab/io.hpp>
#include <attnlab/phase.hpp>
#include <attnlab/state_evolution.hpp>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace attnlab {

/// Mean and standard error of GD endpoints over independent replicates.
struct ReplicateSummary {
  Estimate theta, m, q, eps_g, eps_t;
  double theta_sd = 0.0, m_sd = 0.0, eps_g_sd = 0.0;
  int replicates = 0;
  int failures = 0;
};

/**
 * GD from the given initialization on `seeds` independent (teacher, data)
 * draws. eps_t is the per-sample simplified risk at the endpoint; m is the
 * field-scale overlap, sign-aligned with the first encoding row.
 */
inline ReplicateSummary gd_replicates(const ExperimentConfig& cfg, const InitStrategy& init, const OptimizerConfig& opt,
                                      int seeds, int n_test) {
  RunningStats th, m, q, eg, et;
  ReplicateSummary out;
  const Mat p = positional_encoding(cfg);
  for (int s = 0; s < seeds; ++s) {
    const std::uint64_t seed = replicate_seed(cfg.master_seed, s);
    try {
      const TeacherSpec teacher = make_teacher(cfg, seed);
      const Dataset ds = sample_dataset(cfg, teacher, seed);
      const TrainedModel mdl = train(ds, teacher, p, cfg.lambda, init, opt, seed, {n_test});
      th.add(mdl.stats.theta[0]);
      m.add(mdl.stats.m_field[0]);
      q.add(mdl.stats.q[0]);
      eg.add(mdl.test_mse.value);
      et.add(RiskModel(ds, p, RiskModel::Kind::Simplified).value(mdl.q_hat, cfg.lambda) / ds.n());
    } catch (const DivergenceError&) {
      ++out.failures;
    }
  }
  out.theta = th.estimate();
  out.m = m.estimate();
  out.q = q.estimate();
  out.eps_g = eg.estimate();
  out.eps_t = et.estimate();
  out.theta_sd = th.stddev();
  out.m_sd = m.stddev();
  out.eps_g_sd = eg.stddev();
  out.replicates = static_cast<int>(th.count());
  return out;
}

inline json to_json(const ReplicateSummary& r) {
  return {{"theta", to_json(r.theta)}, {"m", to_json(r.m)},         {"q", to_json(r.q)},
          {"eps_g", to_json(r.eps_g)}, {"eps_t", to_json(r.eps_t)}, {"theta_sd", r.theta_sd},
          {"m_sd", r.m_sd},            {"eps_g_sd", r.eps_g_sd},    {"replicates", r.replicates},
          {"failures", r.failures}};
}

// ---------------------------------------------------------------------------
// tau-scale calibration
// ---------------------------------------------------------------------------

struct TauCandidate {
  TauScale scale;
  std::vector<double> tau;
  bool converged = false;
  double m = std::nan("");
  double eps_g = std::nan("");
  double discrepancy = std::nan("");  // |dm| / sd_m + |d eps_g| / sd_eps_g
};

struct TauCalibration {
  TauScale selected = TauScale::Field;
  bool degenerate = false;  // zero encoding: every candidate gives tau = 0
  std::vector<TauCandidate> candidates;
  ReplicateSummary gd;
  int d_probe = 0;
};

inline const char* tau_scale_name(TauScale s) { return s == TauScale::Field ? "field" : "per_dimension"; }

/**
 * Chooses how tau is read off the encoding by matching the positional
 * branch of the asymptotic equations to GD from Q0 = p_1 at d_probe. The
 * discrepancy is measured in units of the per-replicate standard deviation.
 */
inline TauCalibration calibrate_tau_scale(const ExperimentConfig& cfg, int d_probe, int seeds,
                                          const TheorySettings& ts, const OptimizerConfig& gd, int n_test = 2048) {
  if (d_probe < 1 || seeds < 2) throw std::invalid_argument("calibrate_tau_scale: need d_probe >= 1 and seeds >= 2");
  ExperimentConfig probe = cfg;
  probe.d = d_probe;
  if (probe.pos_encoding) throw std::invalid_argument("calibrate_tau_scale: explicit encodings are not rescaled");
  TauCalibration out;
  out.d_probe = d_probe;
  const Mat p = positional_encoding(probe);
  if (p.norm() == 0.0) {
    out.degenerate = true;
    for (TauScale s : {TauScale::Field, TauScale::PerDimension}) {
      TauCandidate c;
      c.scale = s;
      c.tau = tau_from_encoding(p, s);
      out.candidates.push_back(c);
    }
    return out;
  }
  out.gd = gd_replicates(probe, InitStrategy::positional(), gd, seeds, n_test);
  const double sd_m = std::max(out.gd.m_sd, 1e-12), sd_e = std::max(out.gd.eps_g_sd, 1e-12);
  double best = INFINITY;
  for (TauScale s : {TauScale::Field, TauScale::PerDimension}) {
    TheorySettings t = ts;
    t.tau_scale = s;
    const TheoryPoint tp = evaluate_theory(probe, t, BranchInit::positional());
    TauCandidate c;
    c.scale = s;
    c.tau = tau_from_encoding(p, s);
    c.converged = tp.converged;
    if (tp.converged) {
      c.m = std::abs(tp.solve.params.m[0]);
      c.eps_g = tp.eps_g.value;
      c.discrepancy = std::abs(c.m - std::abs(out.gd.m.value)) / sd_m + std::abs(c.eps_g - out.gd.eps_g.value) / sd_e;
      if (c.discrepancy < best) {
        best = c.discrepancy;
        out.selected = s;
      }
    }
    out.candidates.push_back(c);
  }
  return out;
}

inline json to_json(const TauCalibration& c) {
  json cands = json::array();
  for (const auto& k : c.candidates)
    cands.push_back({{"scale", tau_scale_name(k.scale)},
                     {"tau", k.tau},
                     {"converged", k.converged},
                     {"m", k.m},
                     {"eps_g", k.eps_g},
                     {"discrepancy", k.discrepancy}});
  return {{"selected", tau_scale_name(c.selected)}, {"degenerate", c.degenerate}, {"d_probe", c.d_probe},
          {"candidates", cands}, {"gd", to_json(c.gd)}};
}

// ---------------------------------------------------------------------------
// Train-loss variant arbitration
// ---------------------------------------------------------------------------

struct VariantArbitration {
  double eps_t_main = std::nan("");
  double eps_t_appendix = std::nan("");
  double theory_se = 0.0;
  Estimate empirical;  // per-sample simplified risk of converged GD
  double gap_main = std::nan(""), gap_appendix = std::nan("");  // in combined standard errors
  bool main_matches = false, appendix_matches = false;
  std::string verdict;  // "main_text", "appendix", "both" or "neither"
  TrainLossVariant selected = TrainLossVariant::MainText;
  bool theory_converged = false;
};

/**
 * Compares both train-loss expressions at a solved branch with the
 * simplified empirical risk of GD run to a gradient tolerance from the
 * matching initialization. A variant matches when its gap is within
 * `sigmas` combined standard errors.
 */
inline VariantArbitration arbitrate_train_loss_variant(const ExperimentConfig& cfg, BranchInit::Kind branch,
                                                       const TheorySettings& ts, const OptimizerConfig& gd,
                                                       int seeds, double sigmas = 3.0) {
  VariantArbitration out;
  const BranchInit init = branch == BranchInit::Kind::Positional ? BranchInit::positional() : BranchInit::semantic();
  const TheoryPoint tp = evaluate_theory(cfg, ts, init);
  out.theory_converged = tp.converged;
  out.eps_t_main = tp.eps_t_main;
  out.eps_t_appendix = tp.eps_t_appendix;
  out.theory_se = std::isfinite(tp.eps_t_se) ? tp.eps_t_se : 0.0;
  const InitStrategy gi =
      branch == BranchInit::Kind::Positional ? InitStrategy::positional() : InitStrategy::semantic();
  const ReplicateSummary rep = gd_replicates(cfg, gi, gd, seeds, 256);
  out.empirical = rep.eps_t;
  const double se = std::hypot(out.theory_se, out.empirical.std_error);
  out.gap_main = std::abs(out.eps_t_main - out.empirical.value) / se;
  out.gap_appendix = std::abs(out.eps_t_appendix - out.empirical.value) / se;
  out.main_matches = tp.converged && out.gap_main <= sigmas;
  out.appendix_matches = tp.converged && out.gap_appendix <= sigmas;
  if (out.main_matches && out.appendix_matches) out.verdict = "both";
  else if (out.main_matches) out.verdict = "main_text";
  else if (out.appendix_matches) out.verdict = "appendix";
  else out.verdict = "neither";
  out.selected = out.gap_appendix < out.gap_main ? TrainLossVariant::Appendix : TrainLossVariant::MainText;
  return out;
}

inline json to_json(const VariantArbitration& v) {
  return {{"eps_t_main", v.eps_t_main},
          {"eps_t_appendix", v.eps_t_appendix},
          {"theory_se", v.theory_se},
          {"empirical", to_json(v.empirical)},
          {"gap_main_sigmas", v.gap_main},
          {"gap_appendix_sigmas", v.gap_appendix},
          {"verdict", v.verdict},
          {"selected", v.selected == TrainLossVariant::MainText ? "main_text" : "appendix"},
          {"theory_converged", v.theory_converged}};
}

}  // namespace attnlab
