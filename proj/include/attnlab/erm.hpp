#pragma once

#include <attnlab/attention.hpp>
#include <attnlab/random.hpp>
#include <attnlab/tensor.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace attnlab {

enum class OptimizerKind { GD, Adam };

inline const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::GD ? "gd" : "adam"; }

/**
 * Full-batch optimizer settings. Steps act on the summed risk; the loss
 * trace stores the per-sample value.
 */
struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::GD;
  double learning_rate = 0.15;
  int epochs = 5000;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::optional<double> grad_tol;  // stop once |grad| of the summed risk drops below this
  RiskModel::Kind risk = RiskModel::Kind::Full;

  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
      throw std::invalid_argument("OptimizerConfig: learning_rate must be non-negative and finite");
    if (epochs < 0) throw std::invalid_argument("OptimizerConfig: epochs must be non-negative");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
      throw std::invalid_argument("OptimizerConfig: Adam betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw std::invalid_argument("OptimizerConfig: adam_eps must be positive");
    if (grad_tol && !(*grad_tol > 0.0)) throw std::invalid_argument("OptimizerConfig: grad_tol must be positive");
  }
};

struct InitStrategy {
  enum class Kind { Positional, Semantic, Random, Explicit };
  Kind kind = Kind::Semantic;
  Vec explicit_q;

  static InitStrategy positional() { return {Kind::Positional, {}}; }
  static InitStrategy semantic() { return {Kind::Semantic, {}}; }
  static InitStrategy random() { return {Kind::Random, {}}; }
  static InitStrategy from(Vec q) { return {Kind::Explicit, std::move(q)}; }
};

inline const char* init_name(InitStrategy::Kind k) {
  switch (k) {
    case InitStrategy::Kind::Positional: return "positional";
    case InitStrategy::Kind::Semantic: return "semantic";
    case InitStrategy::Kind::Random: return "random";
    default: return "explicit";
  }
}

/// Starting weights: p_1, Q_*, a standard normal draw, or an explicit vector.
inline Vec initial_weights(const InitStrategy& init, const TeacherSpec& teacher, const Mat& p, std::uint64_t seed) {
  const int d = teacher.d();
  switch (init.kind) {
    case InitStrategy::Kind::Positional:
      if (p.cols() != d || p.rows() < 1) throw std::invalid_argument("initial_weights: encoding has wrong shape");
      return p.row(0).transpose();
    case InitStrategy::Kind::Semantic: return teacher.q_star;
    case InitStrategy::Kind::Random: {
      Rng rng(derive_seed(seed, "init"));
      Vec q(d);
      for (int i = 0; i < d; ++i) q[i] = rng.normal();
      return q;
    }
    default:
      if (init.explicit_q.size() != d) throw std::invalid_argument("initial_weights: explicit vector has wrong length");
      return init.explicit_q;
  }
}

struct TrainedModel {
  Vec q_hat;
  std::vector<double> loss_trace;  // per-sample risk before each epoch, then at the end
  double grad_norm_final = 0.0;    // gradient of the summed risk
  SummaryStats stats;
  Estimate test_mse;
  InitStrategy init_used;
  OptimizerConfig optimizer;
  int epochs_run = 0;
  bool early_stopped = false;
  double wall_time = 0.0;

  double final_loss() const { return loss_trace.empty() ? std::nan("") : loss_trace.back(); }
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(int epoch, const std::string& what)
      : std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ": " + what), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

/// Exact gradient of empirical_risk (summed form) with respect to q.
inline Vec gradient(const Dataset& ds, const Vec& q, const Mat& p, double lambda) {
  check_problem(ds, q, p);
  Vec g;
  RiskModel(ds, p).value(q, lambda, &g);
  return g;
}

struct TrainOptions {
  int n_test = 4096;
};

/**
 * Runs the optimizer from the chosen initialization and measures the
 * endpoint. Deterministic in (dataset, init, opt, seed).
 */
inline TrainedModel train(const Dataset& ds, const TeacherSpec& teacher, const Mat& p, double lambda,
                          const InitStrategy& init, const OptimizerConfig& opt, std::uint64_t seed,
                          const TrainOptions& topt = {}) {
  opt.validate();
  if (!(lambda >= 0.0)) throw std::invalid_argument("train: lambda must be non-negative");
  const auto t0 = std::chrono::steady_clock::now();
  const RiskModel model(ds, p, opt.risk);
  const double inv_n = 1.0 / ds.n();

  TrainedModel out;
  out.init_used = init;
  out.optimizer = opt;
  Vec q = initial_weights(init, teacher, p, seed);
  check_problem(ds, q, p);
  out.loss_trace.reserve(static_cast<std::size_t>(opt.epochs) + 1);

  Vec g, m1, m2;
  if (opt.kind == OptimizerKind::Adam) {
    m1 = Vec::Zero(q.size());
    m2 = Vec::Zero(q.size());
  }
  double b1t = 1.0, b2t = 1.0;
  int epoch = 0;
  for (; epoch < opt.epochs; ++epoch) {
    const double loss = model.value(q, lambda, &g);
    if (!std::isfinite(loss) || !g.allFinite()) throw DivergenceError(epoch, "non-finite risk or gradient");
    out.loss_trace.push_back(loss * inv_n);
    if (opt.grad_tol && g.norm() < *opt.grad_tol) {
      out.early_stopped = true;
      break;
    }
    if (opt.kind == OptimizerKind::GD) {
      q -= opt.learning_rate * g;
    } else {
      b1t *= opt.adam_beta1;
      b2t *= opt.adam_beta2;
      m1 = opt.adam_beta1 * m1 + (1.0 - opt.adam_beta1) * g;
      m2 = opt.adam_beta2 * m2 + (1.0 - opt.adam_beta2) * g.cwiseAbs2();
      const Vec mh = m1 / (1.0 - b1t);
      const Vec vh = m2 / (1.0 - b2t);
      q -= opt.learning_rate * mh.cwiseQuotient((vh.cwiseSqrt().array() + opt.adam_eps).matrix());
    }
  }
  out.epochs_run = epoch;
  const double loss = model.value(q, lambda, &g);
  if (!std::isfinite(loss) || !g.allFinite()) throw DivergenceError(epoch, "non-finite risk or gradient");
  if (!out.early_stopped) out.loss_trace.push_back(loss * inv_n);
  out.grad_norm_final = g.norm();
  out.q_hat = std::move(q);
  out.stats = measure_summary_stats(out.q_hat, teacher, p, ds.sigma);
  out.test_mse = empirical_test_mse(out.q_hat, teacher, p, ds.sigma, topt.n_test, seed);
  out.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

struct AdamRandomOptions {
  double learning_rate = 0.01;
  int epochs = 2500;
  OverlapThresholds thresholds;
  int n_test = 4096;
};

struct AdamRandomResult {
  TrainedModel model;
  BranchLabel label = BranchLabel::Neither;
  OverlapThresholds thresholds;
};

/// Endpoint class from |theta|/sqrt(q rho) and |m_field|/sqrt(q).
inline BranchLabel classify_endpoint(const SummaryStats& st, const OverlapThresholds& thr = {}) {
  return classify_overlaps(st.q[0], st.m_field[0], st.theta[0], st.rho[0], thr);
}

/// Adam from a standard normal initialization, with the endpoint classified.
inline AdamRandomResult train_adam_random(const Dataset& ds, const TeacherSpec& teacher, const Mat& p, double lambda,
                                          std::uint64_t seed, const AdamRandomOptions& aopt = {}) {
  OptimizerConfig opt;
  opt.kind = OptimizerKind::Adam;
  opt.learning_rate = aopt.learning_rate;
  opt.epochs = aopt.epochs;
  AdamRandomResult r;
  r.model = train(ds, teacher, p, lambda, InitStrategy::random(), opt, seed, {aopt.n_test});
  r.thresholds = aopt.thresholds;
  r.label = classify_endpoint(r.model.stats, aopt.thresholds);
  return r;
}

struct LinearFit {
  TokenMatrix W;
  TokenMatrix std_error;
};

/**
 * Population minimizer of the dense positional baseline: W = E_h T[h] with
 * h_l ~ N(0, sigma^2) independent.
 */
inline LinearFit linear_baseline_fit(const TeacherSpec& teacher, double sigma, int n_mc, std::uint64_t seed) {
  if (n_mc < 1) throw std::invalid_argument("linear_baseline_fit: n_mc must be positive");
  const int L = static_cast<int>(teacher.A.rows());
  Rng rng(derive_seed(seed, "linear-fit"));
  TokenMatrix mean = TokenMatrix::Zero(L, L), m2 = TokenMatrix::Zero(L, L);
  TokenVector h(L);
  for (int s = 0; s < n_mc; ++s) {
    for (int l = 0; l < L; ++l) h[l] = sigma * rng.normal();
    const TokenMatrix T = teacher_mixing_from_fields(h, teacher.omega, teacher.A);
    const TokenMatrix delta = T - mean;
    mean += delta / (s + 1.0);
    m2 += delta.cwiseProduct(T - mean);
  }
  LinearFit fit;
  fit.W = mean;
  fit.std_error = n_mc > 1 ? TokenMatrix((m2 / ((n_mc - 1.0) * n_mc)).cwiseSqrt()) : TokenMatrix::Zero(L, L);
  return fit;
}

/// (sigma^2 / L) E ||W - T[h]||_F^2 over h_l ~ N(0, sigma^2).
inline Estimate linear_baseline_mse(const TokenMatrix& W, const TeacherSpec& teacher, double sigma, int n_mc,
                                    std::uint64_t seed) {
  if (n_mc < 1) throw std::invalid_argument("linear_baseline_mse: n_mc must be positive");
  const int L = static_cast<int>(teacher.A.rows());
  if (W.rows() != L || W.cols() != L) throw std::invalid_argument("linear_baseline_mse: W must be L x L");
  Rng rng(derive_seed(seed, "linear-mse"));
  RunningStats stats;
  TokenVector h(L);
  const double s2 = sigma * sigma;
  for (int s = 0; s < n_mc; ++s) {
    for (int l = 0; l < L; ++l) h[l] = sigma * rng.normal();
    const TokenMatrix T = teacher_mixing_from_fields(h, teacher.omega, teacher.A);
    stats.add(s2 * (W - T).squaredNorm() / L);
  }
  return stats.estimate();
}

}  // namespace attnlab
