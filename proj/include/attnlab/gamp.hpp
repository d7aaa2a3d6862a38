#pragma once

#include <attnlab/attention.hpp>
#include <attnlab/erm.hpp>
#include <attnlab/parallel.hpp>
#include <attnlab/prox.hpp>
#include <attnlab/random.hpp>

#include <Eigen/SVD>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace attnlab {

struct GampConfig {
  int max_iter = 500;
  double damping = 0.5;  // on the estimator and on the output messages f
  double tol = 1e-7;     // on |Q^{t+1} - Q^t| / sqrt(d)
  ProxOptions prox{4, 1.0, 1e-13, 100};
  double fd_step = 1e-5;  // central differences for g = d f / d omega
  InitStrategy init = InitStrategy::random();
  std::uint64_t seed = 0;
  unsigned workers = 1;
  // Precondition the estimator step with the exact curvature on span(p);
  // the fixed points lambda Q = X~^T f are unchanged.
  bool encoding_curvature = true;
  // Replace the per-coordinate curvature A_i by its mean over coordinates.
  bool uniform_variance = true;

  void validate() const {
    if (max_iter < 1) throw std::invalid_argument("GampConfig: max_iter must be positive");
    if (!(damping >= 0.0 && damping < 1.0)) throw std::invalid_argument("GampConfig: damping must lie in [0, 1)");
    if (!(tol > 0.0)) throw std::invalid_argument("GampConfig: tol must be positive");
    if (!(fd_step > 0.0)) throw std::invalid_argument("GampConfig: fd_step must be positive");
    if (prox.restarts < 1) throw std::invalid_argument("GampConfig: prox restarts must be positive");
  }
};

/// Iteration state of the message-passing estimator.
struct GampState {
  Vec q_hat;
  Vec c_hat;
  RowMat f;               // n x L output messages
  RowMat omega_fields;    // n x L
  std::vector<TokenMatrix> V;  // per-sample effective variances
  int iteration = 0;
};

struct GampReport {
  bool converged = false;
  int iterations = 0;
  std::vector<double> steps;              // |Q^{t+1} - Q^t| / sqrt(d)
  std::vector<SummaryStats> trajectory;   // overlaps of Q^t, t = 0..iterations
  double min_c_hat = 0.0;
  bool c_positive = true;
  bool encoding_curvature = false;
  double max_offdiag_V = 0.0;  // largest |V_lk|, l != k, at the last iteration
  double max_offdiag_V_normalized = 0.0;  // largest |V_lk| / sqrt(V_ll V_kk)
  double mean_diag_V = 0.0;
  double damping = 0.0;
  double wall_time = 0.0;
  std::string message;
};

struct GampResult {
  Vec q_hat;
  GampState state;
  GampReport report;
};

class GampDivergence : public std::runtime_error {
 public:
  GampDivergence(int iteration, const std::string& what)
      : std::runtime_error("gamp diverged at iteration " + std::to_string(iteration) + ": " + what),
        iteration_(iteration) {}
  int iteration() const { return iteration_; }

 private:
  int iteration_;
};

namespace detail {

/// Per-sample resolvent for the simplified loss with Gram rho = sigma^2 I.
inline ProxProblem gamp_prox_problem(const TokenVector& omega, const TokenMatrix& V, const TokenMatrix& mixing,
                                     double rho) {
  const int L = static_cast<int>(omega.size());
  ProxProblem pb;
  pb.center = omega;
  pb.precision = V.inverse();
  pb.precision = 0.5 * (pb.precision + pb.precision.transpose());
  pb.gram = TokenMatrix::Identity(L, L) * rho;
  pb.cross = rho * mixing.transpose();
  return pb;
}

inline TokenVector gamp_output(const ProxProblem& pb, const TokenVector& z) {
  return pb.precision * (z - pb.center);
}

}  // namespace detail

/**
 * Message passing for the simplified risk, with per-sample L x L variances,
 * a multistart resolvent and central-difference output derivatives.
 * The estimator step Q <- (lambda + P)^{-1} (X~^T f + P Q) uses P = diag(A),
 * optionally averaged over coordinates and corrected on span(p); every
 * choice of P leaves the fixed points lambda Q = X~^T f unchanged.
 * Returns the last iterate and converged=false when the step tolerance is
 * not reached.
 */
inline GampResult gamp_run(const Dataset& ds, const TeacherSpec& teacher, const Mat& p, double lambda,
                           const GampConfig& cfg) {
  cfg.validate();
  if (!(lambda > 0.0)) throw std::invalid_argument("gamp_run: lambda must be positive");
  if (ds.n() == 0) throw std::invalid_argument("gamp_run: empty dataset");
  if (static_cast<int>(ds.mixings.size()) != ds.n()) throw std::invalid_argument("gamp_run: dataset lacks mixings");
  if (p.rows() != ds.L || p.cols() != ds.d) throw std::invalid_argument("gamp_run: encoding has wrong shape");
  const auto t0 = std::chrono::steady_clock::now();
  const int n = ds.n(), L = ds.L, d = ds.d;
  const double rho = ds.sigma * ds.sigma;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  // X~_l: n x d, row mu = (x^mu_l + p_l) / sqrt(d).
  std::vector<RowMat> X(L, RowMat(n, d));
  for (int mu = 0; mu < n; ++mu)
    for (int l = 0; l < L; ++l) X[l].row(mu) = (ds.sentences[mu].row(l) + p.row(l)) * inv_sqrt_d;
  std::vector<std::vector<RowMat>> X2(L, std::vector<RowMat>(L));
  for (int l = 0; l < L; ++l)
    for (int k = l; k < L; ++k) X2[l][k] = X[l].cwiseProduct(X[k]);

  // Orthonormal basis of the encoding rows, with X~_l U precomputed per token.
  Mat U(d, 0);
  if (cfg.encoding_curvature && p.norm() > 0.0) {
    Eigen::JacobiSVD<Mat> svd(p.transpose(), Eigen::ComputeThinU);
    const auto& sv = svd.singularValues();
    int r = 0;
    while (r < sv.size() && sv[r] > 1e-12 * sv[0]) ++r;
    U = svd.matrixU().leftCols(r);
  }
  const int r = static_cast<int>(U.cols());
  std::vector<RowMat> XU(L);
  for (int l = 0; l < L; ++l) XU[l] = X[l] * U;

  GampResult out;
  GampState& st = out.state;
  st.q_hat = initial_weights(cfg.init, teacher, p, cfg.seed);
  st.c_hat = Vec::Ones(d);
  st.f = RowMat::Zero(n, L);
  st.omega_fields = RowMat::Zero(n, L);
  st.V.assign(n, TokenMatrix::Zero(L, L));
  GampReport& rep = out.report;
  rep.damping = cfg.damping;
  rep.encoding_curvature = r > 0;
  rep.trajectory.push_back(measure_summary_stats(st.q_hat, teacher, p, ds.sigma));

  RowMat warm = RowMat::Constant(n, L, std::numeric_limits<double>::quiet_NaN());
  std::vector<TokenMatrix> g(n, TokenMatrix::Zero(L, L));
  RowMat f_new(n, L);

  for (int t = 0; t < cfg.max_iter; ++t) {
    // Variances and fields.
    for (int l = 0; l < L; ++l)
      for (int k = l; k < L; ++k) {
        const Vec v = X2[l][k] * st.c_hat;
        for (int mu = 0; mu < n; ++mu) st.V[mu](l, k) = st.V[mu](k, l) = v[mu];
      }
    for (int l = 0; l < L; ++l) st.omega_fields.col(l) = X[l] * st.q_hat;
    for (int mu = 0; mu < n; ++mu)
      st.omega_fields.row(mu) -= (st.V[mu] * st.f.row(mu).transpose()).transpose();
    if (!st.omega_fields.allFinite()) throw GampDivergence(t, "non-finite fields");

    // Resolvent, outputs and their derivatives.
    for_each_chunk(static_cast<std::size_t>(n), 64, cfg.workers, [&](std::size_t, std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) {
        const int mu = static_cast<int>(i);
        const TokenVector om = st.omega_fields.row(mu).transpose();
        const ProxProblem pb = detail::gamp_prox_problem(om, st.V[mu], ds.mixings[mu], rho);
        Rng rng(derive_seed(cfg.seed, "gamp-prox", static_cast<std::uint64_t>(t) * n + mu));
        const TokenVector w = warm.row(mu).transpose();
        const ProxResult res = moreau_prox(pb, cfg.prox, rng, w.allFinite() ? &w : nullptr);
        warm.row(mu) = res.z.transpose();
        f_new.row(mu) = detail::gamp_output(pb, res.z).transpose();
        for (int l = 0; l < L; ++l) {
          const double h = cfg.fd_step * (1.0 + std::abs(om[l]));
          TokenVector fp, fm;
          for (int sgn : {1, -1}) {
            ProxProblem shifted = pb;
            shifted.center[l] += sgn * h;
            const ProxResult r = minimize_from(shifted, {res.z}, cfg.prox);
            (sgn > 0 ? fp : fm) = detail::gamp_output(shifted, r.z);
          }
          g[mu].row(l) = ((fp - fm) / (2.0 * h)).transpose();
        }
      }
    });
    if (!f_new.allFinite()) throw GampDivergence(t, "non-finite output messages");
    st.f = t == 0 ? f_new : RowMat(cfg.damping * st.f + (1.0 - cfg.damping) * f_new);

    // Estimator update.
    Vec A = Vec::Zero(d);
    for (int l = 0; l < L; ++l)
      for (int k = 0; k < L; ++k) {
        Vec glk(n);
        for (int mu = 0; mu < n; ++mu) glk[mu] = g[mu](l, k);
        A -= X2[std::min(l, k)][std::max(l, k)].transpose() * glk;
      }
    if (cfg.uniform_variance) A.setConstant(A.mean());
    Vec b = A.cwiseProduct(st.q_hat);
    for (int l = 0; l < L; ++l) b += X[l].transpose() * st.f.col(l);
    const Vec denom = A.array() + lambda;
    rep.min_c_hat = denom.minCoeff() > 0.0 ? 1.0 / denom.maxCoeff() : 0.0;
    if (!(denom.minCoeff() > 0.0)) {
      rep.c_positive = false;
      rep.message = "lambda + A is not positive at iteration " + std::to_string(t);
      break;
    }
    Vec q_new = b.cwiseQuotient(denom);
    if (r > 0) {
      // K = U^T H U - U^T diag(A) U with H = -sum_mu X~_mu^T g_mu X~_mu; solve (D + U K U^T) q = b + U K U^T q.
      Mat K = Mat::Zero(r, r);
      for (int mu = 0; mu < n; ++mu) {
        Mat Y(L, r);
        for (int l = 0; l < L; ++l) Y.row(l) = XU[l].row(mu);
        const Mat gs = 0.5 * (g[mu] + g[mu].transpose());
        K -= Y.transpose() * gs * Y;
      }
      K -= U.transpose() * A.asDiagonal() * U;
      const Vec rhs = b + U * (K * (U.transpose() * st.q_hat));
      const Vec Dr = rhs.cwiseQuotient(denom);
      const Mat DU = denom.cwiseInverse().asDiagonal() * U;
      const Mat inner = Mat::Identity(r, r) + (U.transpose() * DU) * K;
      const Mat schur = (U.transpose() * DU).inverse() + K;
      Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (schur + schur.transpose()));
      if (!(es.eigenvalues().minCoeff() > 0.0)) {
        rep.c_positive = false;
        rep.message = "preconditioner is not positive on the encoding span at iteration " + std::to_string(t);
        break;
      }
      q_new = Dr - DU * (K * inner.lu().solve(U.transpose() * Dr));
    }
    if (!q_new.allFinite()) throw GampDivergence(t, "non-finite estimator");
    const Vec q_next = cfg.damping * st.q_hat + (1.0 - cfg.damping) * q_new;
    const double step = (q_next - st.q_hat).norm() * inv_sqrt_d;
    st.q_hat = q_next;
    st.c_hat = denom.cwiseInverse();
    st.iteration = t + 1;
    rep.steps.push_back(step);
    rep.iterations = t + 1;
    rep.trajectory.push_back(measure_summary_stats(st.q_hat, teacher, p, ds.sigma));
    if (step < cfg.tol) {
      rep.converged = true;
      break;
    }
  }
  if (!rep.converged && rep.message.empty()) rep.message = "max_iter reached";

  double off = 0.0, off_n = 0.0, diag = 0.0;
  for (const auto& V : st.V)
    for (int l = 0; l < L; ++l) {
      diag += V(l, l);
      for (int k = 0; k < L; ++k)
        if (k != l) {
          off = std::max(off, std::abs(V(l, k)));
          off_n = std::max(off_n, std::abs(V(l, k)) / std::sqrt(V(l, l) * V(k, k)));
        }
    }
  rep.max_offdiag_V = off;
  rep.max_offdiag_V_normalized = off_n;
  rep.mean_diag_V = diag / (static_cast<double>(n) * L);
  rep.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.q_hat = st.q_hat;
  return out;
}

/// Overlaps of every iterate, starting from the initialization.
inline const std::vector<SummaryStats>& gamp_summary_trajectory(const GampResult& run) {
  return run.report.trajectory;
}

}  // namespace attnlab
