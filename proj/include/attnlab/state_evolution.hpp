#pragma once

#include <attnlab/attention.hpp>
#include <attnlab/parallel.hpp>
#include <attnlab/prox.hpp>
#include <attnlab/quadrature.hpp>
#include <attnlab/random.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace attnlab {

// ---------------------------------------------------------------------------
// Spectral measure
// ---------------------------------------------------------------------------

struct SpectralAtom {
  std::vector<double> gamma;
  std::vector<double> tau;
  double pi = 0.0;
  double weight = 1.0;
};

/**
 * Joint law of (gamma, tau, pi) over covariance eigendirections.
 *
 * Isotropic: gamma_l = gamma for every token, tau deterministic, pi standard
 * normal (integrated by Gauss-Hermite). Empirical: a finite list of weighted
 * atoms.
 */
class SpectralMeasure {
 public:
  enum class Kind { Isotropic, Empirical };

  static SpectralMeasure isotropic(double gamma, std::vector<double> tau) {
    if (!(gamma > 0.0)) throw std::invalid_argument("SpectralMeasure: gamma must be positive");
    SpectralMeasure nu;
    nu.kind_ = Kind::Isotropic;
    nu.gamma_ = gamma;
    nu.tau_ = std::move(tau);
    return nu;
  }

  static SpectralMeasure empirical(std::vector<SpectralAtom> atoms) {
    if (atoms.empty()) throw std::invalid_argument("SpectralMeasure: no atoms");
    const std::size_t L = atoms.front().gamma.size();
    double total = 0.0;
    for (const auto& a : atoms) {
      if (a.gamma.size() != L || a.tau.size() != L) throw std::invalid_argument("SpectralMeasure: ragged atoms");
      if (!(a.weight >= 0.0)) throw std::invalid_argument("SpectralMeasure: negative weight");
      total += a.weight;
    }
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("SpectralMeasure: weights must sum to 1");
    SpectralMeasure nu;
    nu.kind_ = Kind::Empirical;
    nu.atoms_ = std::move(atoms);
    return nu;
  }

  Kind kind() const { return kind_; }
  int L() const { return static_cast<int>(kind_ == Kind::Isotropic ? tau_.size() : atoms_.front().gamma.size()); }
  double gamma() const { return gamma_; }
  const std::vector<double>& tau() const { return tau_; }
  const std::vector<SpectralAtom>& atoms() const { return atoms_; }

  /**
   * Calls fn(gamma, tau, pi, weight) over the support. Isotropic measures
   * use an n-node Gauss-Hermite rule in pi.
   */
  template <class Fn>
  void for_each(int quadrature_nodes, Fn&& fn) const {
    if (kind_ == Kind::Empirical) {
      for (const auto& a : atoms_) fn(a.gamma, a.tau, a.pi, a.weight);
      return;
    }
    const GaussHermite gh(quadrature_nodes);
    const std::vector<double> gam(tau_.size(), gamma_);
    for (int i = 0; i < gh.size(); ++i) fn(gam, tau_, gh.nodes()[i], gh.weights()[i]);
  }

  /// Diagonal of rho_Sigma: the integral of gamma_l.
  std::vector<double> rho_sigma() const {
    std::vector<double> r(L(), 0.0);
    for_each(2, [&](const auto& g, const auto&, double, double w) {
      for (int l = 0; l < L(); ++l) r[l] += w * g[l];
    });
    return r;
  }

  /// Teacher field variance: the integral of gamma_l pi^2.
  std::vector<double> rho() const {
    std::vector<double> r(L(), 0.0);
    for_each(2, [&](const auto& g, const auto&, double pi, double w) {
      for (int l = 0; l < L(); ++l) r[l] += w * g[l] * pi * pi;
    });
    return r;
  }

 private:
  Kind kind_ = Kind::Isotropic;
  double gamma_ = 1.0;
  std::vector<double> tau_;
  std::vector<SpectralAtom> atoms_;
};

// ---------------------------------------------------------------------------
// Order parameters and configuration
// ---------------------------------------------------------------------------

struct OrderParams {
  std::vector<double> q, V, m, theta, rho;

  int L() const { return static_cast<int>(q.size()); }
};

struct ConjugateParams {
  std::vector<double> qhat, Vhat, mhat, thetahat;

  int L() const { return static_cast<int>(qhat.size()); }
  static ConjugateParams zeros(int L) {
    return {std::vector<double>(L, 0.0), std::vector<double>(L, 0.0), std::vector<double>(L, 0.0),
            std::vector<double>(L, 0.0)};
  }
};

enum class TrainLossVariant { MainText, Appendix };

/// How the resolvent averages over (xi, zeta) are taken.
enum class Integration { MonteCarlo, GaussHermite };

struct SEConfig {
  double damping = 0.9;
  double tol = 1e-7;
  int max_iter = 600;
  int n_mc = 20000;
  int quadrature_nodes = 8;
  int prox_restarts = 8;
  TrainLossVariant train_loss_variant = TrainLossVariant::MainText;
  bool moreau_half_factor = true;
  // Between full multistart sweeps the prox is warm-started from the previous iterate.
  int full_restart_every = 10;
  unsigned workers = 1;
  double q_floor = 1e-12;
  // Anderson mixing over the last few iterates; 0 gives plain damped iteration.
  int anderson_memory = 5;
  // Consecutive backtracks allowed when an iterate leaves the domain D > 0.
  int max_backtracks = 30;
  Integration integration = Integration::GaussHermite;
  int grid_nodes = 12;  // per coordinate of (xi, zeta) for Integration::GaussHermite

  void validate() const {
    if (!(damping >= 0.0 && damping < 1.0)) throw std::invalid_argument("SEConfig: damping must lie in [0, 1)");
    if (!(tol > 0.0)) throw std::invalid_argument("SEConfig: tol must be positive");
    if (n_mc < 1) throw std::invalid_argument("SEConfig: n_mc must be positive");
    if (max_iter < 1) throw std::invalid_argument("SEConfig: max_iter must be positive");
    if (quadrature_nodes < 1) throw std::invalid_argument("SEConfig: quadrature_nodes must be positive");
    if (prox_restarts < 1) throw std::invalid_argument("SEConfig: prox_restarts must be positive");
    if (full_restart_every < 1) throw std::invalid_argument("SEConfig: full_restart_every must be positive");
    if (anderson_memory < 0) throw std::invalid_argument("SEConfig: anderson_memory must be non-negative");
    if (max_backtracks < 0) throw std::invalid_argument("SEConfig: max_backtracks must be non-negative");
    if (grid_nodes < 1) throw std::invalid_argument("SEConfig: grid_nodes must be positive");
  }
};

/// Asymptotic problem: teacher mixing, token variance, regularization, sample ratio, spectral law.
struct SEProblem {
  double alpha = 1.0;
  double omega = 0.3;
  double sigma = 0.5;
  double lambda = 1e-3;
  TokenMatrix A = default_positional_target();
  SpectralMeasure nu = SpectralMeasure::isotropic(0.25, {kDefaultEncodingNorm, -kDefaultEncodingNorm});

  int L() const { return nu.L(); }
};

/**
 * How the deterministic positional projections tau are read off an encoding.
 *
 * Field: tau_l = sqrt(d) * mean(p_l), the scale at which the theory's m is
 * the mean of the token field (x_l + p_l).q/sqrt(d). PerDimension: tau_l =
 * mean(p_l), matching m = q.p/d.
 */
enum class TauScale { Field, PerDimension };

inline std::vector<double> tau_from_encoding(const Mat& p, TauScale scale) {
  std::vector<double> tau(p.rows());
  const double d = static_cast<double>(p.cols());
  for (Eigen::Index l = 0; l < p.rows(); ++l) {
    const double mean = p.row(l).mean();
    tau[l] = scale == TauScale::Field ? std::sqrt(d) * mean : mean;
  }
  return tau;
}

inline SEProblem se_problem(const ExperimentConfig& cfg, TauScale scale = TauScale::Field) {
  cfg.validate();
  SEProblem pb;
  pb.alpha = cfg.alpha;
  pb.omega = cfg.omega;
  pb.sigma = cfg.sigma;
  pb.lambda = cfg.lambda;
  pb.A = cfg.A;
  pb.nu = SpectralMeasure::isotropic(cfg.sigma * cfg.sigma, tau_from_encoding(positional_encoding(cfg), scale));
  return pb;
}

struct BranchInit {
  enum class Kind { Positional, Semantic, Explicit };
  Kind kind = Kind::Positional;
  double m0 = 0.5;
  double theta_fraction = 0.5;  // theta0 = theta_fraction * sqrt(rho * q0)
  std::optional<double> q0;     // defaults to rho
  double V0 = 1.0;
  OrderParams explicit_params;

  static BranchInit positional() { return {}; }
  static BranchInit semantic() {
    BranchInit b;
    b.kind = Kind::Semantic;
    return b;
  }
  static BranchInit from(OrderParams p) {
    BranchInit b;
    b.kind = Kind::Explicit;
    b.explicit_params = std::move(p);
    return b;
  }
};

inline const char* branch_name(BranchInit::Kind k) {
  switch (k) {
    case BranchInit::Kind::Positional: return "positional";
    case BranchInit::Kind::Semantic: return "semantic";
    default: return "explicit";
  }
}

inline OrderParams initial_params(const BranchInit& b, const SEProblem& pb) {
  if (b.kind == BranchInit::Kind::Explicit) return b.explicit_params;
  const int L = pb.L();
  const auto rho = pb.nu.rho();
  const auto& tau = pb.nu.tau();
  OrderParams p;
  p.rho = rho;
  for (int l = 0; l < L; ++l) {
    const double q0 = b.q0.value_or(rho[l]);
    p.q.push_back(q0);
    p.V.push_back(b.V0);
    if (b.kind == BranchInit::Kind::Positional) {
      double s = l % 2 == 0 ? 1.0 : -1.0;
      if (pb.nu.kind() == SpectralMeasure::Kind::Isotropic && tau[l] != 0.0) s = tau[l] > 0 ? 1.0 : -1.0;
      p.m.push_back(s * b.m0);
      p.theta.push_back(0.0);
    } else {
      p.m.push_back(0.0);
      p.theta.push_back(b.theta_fraction * std::sqrt(rho[l] * q0));
    }
  }
  return p;
}

inline void check_order_params(const OrderParams& p, int L) {
  if (p.L() != L || static_cast<int>(p.V.size()) != L || static_cast<int>(p.m.size()) != L ||
      static_cast<int>(p.theta.size()) != L || static_cast<int>(p.rho.size()) != L)
    throw std::invalid_argument("OrderParams: wrong number of tokens");
  for (int l = 0; l < L; ++l) {
    if (!(p.q[l] >= 0.0) || !(p.V[l] > 0.0) || !std::isfinite(p.m[l]) || !std::isfinite(p.theta[l]))
      throw std::invalid_argument("OrderParams: require q >= 0, V > 0 and finite m, theta");
  }
}

// ---------------------------------------------------------------------------
// Non-hat update: integrals over the spectral measure
// ---------------------------------------------------------------------------

namespace detail {

struct NonhatIntegrals {
  OrderParams params;
  double reg_inverse_square = 0.0;  // integral of (sum gamma qhat + s^2) / D^2
  double reg_inverse = 0.0;         // same with D^-1
};

inline NonhatIntegrals nonhat_integrals(const ConjugateParams& c, const SpectralMeasure& nu, double lambda,
                                        int quadrature_nodes) {
  const int L = nu.L();
  if (c.L() != L) throw std::invalid_argument("nonhat_update: conjugate params have wrong size");
  NonhatIntegrals out;
  auto& p = out.params;
  p.q.assign(L, 0.0);
  p.V.assign(L, 0.0);
  p.m.assign(L, 0.0);
  p.theta.assign(L, 0.0);
  p.rho = nu.rho();
  int atom = 0;
  nu.for_each(quadrature_nodes, [&](const std::vector<double>& g, const std::vector<double>& tau, double pi,
                                    double w) {
    double D = lambda, gq = 0.0, s = 0.0;
    for (int k = 0; k < L; ++k) {
      D += g[k] * c.Vhat[k];
      gq += g[k] * c.qhat[k];
      s += c.mhat[k] * tau[k] + g[k] * c.thetahat[k] * pi;
    }
    if (!(D > 0.0) || !std::isfinite(D))
      throw std::domain_error("nonhat_update: lambda + sum gamma Vhat = " + std::to_string(D) +
                              " is not positive at atom " + std::to_string(atom));
    const double num = gq + s * s;
    for (int l = 0; l < L; ++l) {
      p.V[l] += w * g[l] / D;
      p.m[l] += w * tau[l] * s / D;
      p.theta[l] += w * g[l] * s * pi / D;
      p.q[l] += w * g[l] * num / (D * D);
    }
    out.reg_inverse_square += w * num / (D * D);
    out.reg_inverse += w * num / D;
    ++atom;
  });
  return out;
}

}  // namespace detail

inline OrderParams nonhat_update(const ConjugateParams& conj, const SpectralMeasure& nu, double lambda,
                                 int quadrature_nodes = 8) {
  return detail::nonhat_integrals(conj, nu, lambda, quadrature_nodes).params;
}

// ---------------------------------------------------------------------------
// Resolvent for one (xi, u) draw
// ---------------------------------------------------------------------------

inline ProxProblem se_prox_problem(const TokenVector& xi, const TokenVector& u, const OrderParams& params,
                                   const std::vector<double>& rho_sigma, double omega, const TokenMatrix& A) {
  const int L = static_cast<int>(xi.size());
  ProxProblem pb;
  pb.center.resize(L);
  pb.precision = TokenMatrix::Zero(L, L);
  pb.gram = TokenMatrix::Zero(L, L);
  for (int l = 0; l < L; ++l) {
    pb.center[l] = std::sqrt(params.q[l]) * xi[l] + params.m[l];
    pb.precision(l, l) = 1.0 / params.V[l];
    pb.gram(l, l) = rho_sigma[l];
  }
  pb.cross = pb.gram * teacher_mixing_from_fields(u, omega, A).transpose();
  return pb;
}

/// Minimizer of the Moreau envelope for one draw (xi, u).
inline ProxResult moreau_prox(const TokenVector& xi, const TokenVector& u, const OrderParams& params,
                              const std::vector<double>& rho_sigma, double omega, const TokenMatrix& A,
                              const ProxOptions& opt, Rng& rng, double loss_weight = 1.0) {
  ProxProblem pb = se_prox_problem(xi, u, params, rho_sigma, omega, A);
  pb.loss_weight = loss_weight;
  return moreau_prox(pb, opt, rng);
}

// ---------------------------------------------------------------------------
// Common-random-number pool
// ---------------------------------------------------------------------------

/**
 * Fixed (xi, zeta) pool with per-draw restart offsets.
 *
 * Monte Carlo: each base draw is expanded into 8 images under token
 * reversal, a global sign flip and a sign flip of the teacher noise alone.
 * All images have the same law as the base draw, and symmetric problems see
 * exactly symmetric estimates. Groups are equally weighted.
 *
 * Gauss-Hermite: a tensor grid over the 2L coordinates of (xi, zeta), one
 * node per group with the product weight. The grid is symmetric, so no
 * images are added.
 */
class MonteCarloPool {
 public:
  static constexpr int kImages = 8;

  MonteCarloPool(int L, int n_mc, int restarts, std::uint64_t seed)
      : L_(L), restarts_(std::max(1, restarts)), images_(kImages) {
    base_ = std::max(1, (n_mc + kImages - 1) / kImages);
    const int n = base_ * kImages;
    const int R = restarts_ - 1;
    xi_.resize(n, L);
    zeta_.resize(n, L);
    pert_.resize(static_cast<Eigen::Index>(n) * std::max(R, 1), L);
    pert_.setZero();
    for (int b = 0; b < base_; ++b) {
      Rng rng(derive_seed(seed, "se-pool", static_cast<std::uint64_t>(b)));
      Eigen::RowVectorXd xi(L), zeta(L);
      for (int l = 0; l < L; ++l) xi[l] = rng.normal();
      for (int l = 0; l < L; ++l) zeta[l] = rng.normal();
      Eigen::MatrixXd pert(std::max(R, 1), L);
      pert.setZero();
      for (int k = 0; k < R; ++k)
        for (int l = 0; l < L; ++l) pert(k, l) = rng.normal();
      for (int g = 0; g < kImages; ++g) {
        const bool flip_u = g & 1, flip_all = g & 2, reverse = g & 4;
        const double sa = flip_all ? -1.0 : 1.0;
        const double su = flip_u ? -1.0 : 1.0;
        const int i = b * kImages + g;
        for (int l = 0; l < L; ++l) {
          const int src = reverse ? L - 1 - l : l;
          xi_(i, l) = sa * xi[src];
          zeta_(i, l) = sa * su * zeta[src];
          for (int k = 0; k < R; ++k) pert_(static_cast<Eigen::Index>(i) * std::max(R, 1) + k, l) = sa * pert(k, src);
        }
      }
    }
  }

  /// Tensor Gauss-Hermite grid with nodes^(2L) points.
  static MonteCarloPool gauss_hermite(int L, int nodes, int restarts, std::uint64_t seed) {
    if (nodes < 1) throw std::invalid_argument("MonteCarloPool: need at least one node per coordinate");
    const GaussHermite gh(nodes);
    const int dims = 2 * L;
    long long n = 1;
    for (int k = 0; k < dims; ++k) {
      n *= nodes;
      if (n > 50'000'000) throw std::invalid_argument("MonteCarloPool: quadrature grid too large");
    }
    MonteCarloPool pool(L, restarts);
    pool.images_ = 1;
    pool.base_ = static_cast<int>(n);
    const int R = pool.restarts_ - 1;
    pool.xi_.resize(n, L);
    pool.zeta_.resize(n, L);
    pool.pert_.setZero(static_cast<Eigen::Index>(n) * std::max(R, 1), L);
    pool.weights_.resize(n);
    std::vector<int> idx(dims, 0);
    for (long long i = 0; i < n; ++i) {
      long long rem = i;
      double w = 1.0;
      for (int k = 0; k < dims; ++k) {
        idx[k] = static_cast<int>(rem % nodes);
        rem /= nodes;
        w *= gh.weights()[idx[k]];
      }
      for (int l = 0; l < L; ++l) {
        pool.xi_(i, l) = gh.nodes()[idx[l]];
        pool.zeta_(i, l) = gh.nodes()[idx[L + l]];
      }
      pool.weights_[i] = w;
      Rng rng(derive_seed(seed, "se-grid", static_cast<std::uint64_t>(i)));
      for (int k = 0; k < R; ++k)
        for (int l = 0; l < L; ++l) pool.pert_(static_cast<Eigen::Index>(i) * std::max(R, 1) + k, l) = rng.normal();
    }
    return pool;
  }

  /// Groups carry explicit weights (quadrature) instead of equal ones.
  bool weighted() const { return !weights_.empty(); }
  double group_weight(int g) const { return weighted() ? weights_[g] : 1.0 / base_; }
  int images() const { return images_; }
  int L() const { return L_; }
  int size() const { return base_ * images_; }
  int groups() const { return base_; }
  int restarts() const { return restarts_; }
  auto xi(int i) const { return xi_.row(i); }
  auto zeta(int i) const { return zeta_.row(i); }
  auto perturbation(int i, int k) const { return pert_.row(static_cast<Eigen::Index>(i) * std::max(restarts_ - 1, 1) + k); }

 private:
  MonteCarloPool(int L, int restarts) : L_(L), restarts_(std::max(1, restarts)), images_(1), base_(0) {}

  int L_, restarts_, images_, base_;
  RowMat xi_, zeta_, pert_;
  std::vector<double> weights_;
};

// ---------------------------------------------------------------------------
// Hat update
// ---------------------------------------------------------------------------

/// Hatted parameters plus the per-group Monte-Carlo material behind them.
struct HatEvaluation {
  ConjugateParams conj;
  ConjugateParams conj_stderr;
  Estimate moreau;                    // E[M] with the 1/2 convention
  std::vector<double> moreau_groups;  // per base-draw means of M
};

namespace detail {

inline double conditional_variance(const OrderParams& p, int l, double q_floor) {
  const double q = std::max(p.q[l], q_floor);
  const double cv = p.rho[l] - p.theta[l] * p.theta[l] / q;
  if (cv < -1e-12 * std::max(1.0, p.rho[l]))
    throw std::domain_error("hat_update: negative conditional teacher variance " + std::to_string(cv) +
                            " at token " + std::to_string(l));
  return std::max(cv, 0.0);
}

}  // namespace detail

/**
 * Evaluates the resolvent over a pool. warm (optional, one row per pool
 * sample) supplies and receives warm starts; full selects the complete
 * multistart set instead of {warm, center}.
 */
inline HatEvaluation evaluate_hats(const OrderParams& params, const SEProblem& pb, const SEConfig& cfg,
                                   const MonteCarloPool& pool, RowMat* warm, bool full) {
  const int L = pb.L();
  check_order_params(params, L);
  const auto rho_sigma = pb.nu.rho_sigma();
  std::vector<double> sq(L), cv_sqrt(L), tq(L);
  double qmax = 0.0;
  for (int l = 0; l < L; ++l) {
    const double q = std::max(params.q[l], cfg.q_floor);
    sq[l] = std::sqrt(q);
    tq[l] = params.theta[l] / sq[l];
    cv_sqrt[l] = std::sqrt(detail::conditional_variance(params, l, cfg.q_floor));
    qmax = std::max(qmax, q);
  }
  OrderParams safe = params;
  for (int l = 0; l < L; ++l) safe.q[l] = std::max(params.q[l], cfg.q_floor);

  ProxOptions popt;
  popt.restarts = pool.restarts();
  const double scale = std::max(1.0, std::sqrt(qmax));

  const int G = pool.groups();
  const int K = pool.images();
  // Per group: for each token, E[g^2], E[g], E[g zeta], E[g xi]; then M.
  const int stride = 4 * L + 1;
  std::vector<double> group(static_cast<std::size_t>(G) * stride, 0.0);

  for_each_chunk(static_cast<std::size_t>(G), 32, cfg.workers, [&](std::size_t, std::size_t gb, std::size_t ge) {
    std::vector<TokenVector> starts;
    for (std::size_t gi = gb; gi < ge; ++gi) {
      double* acc = &group[gi * stride];
      for (int k = 0; k < K; ++k) {
        const int i = static_cast<int>(gi) * K + k;
        const TokenVector xi = pool.xi(i).transpose();
        const TokenVector zeta = pool.zeta(i).transpose();
        TokenVector u(L);
        for (int l = 0; l < L; ++l) u[l] = tq[l] * xi[l] + cv_sqrt[l] * zeta[l];
        const ProxProblem pr = se_prox_problem(xi, u, safe, rho_sigma, pb.omega, pb.A);

        starts.clear();
        const bool have_warm = warm && warm->rows() == pool.size() && warm->row(i).allFinite();
        if (have_warm) starts.push_back(warm->row(i).transpose());
        starts.push_back(pr.center);
        if (full || !have_warm) {
          for (int r = 0; r + 1 < pool.restarts(); ++r)
            starts.push_back(pr.center + scale * TokenVector(pool.perturbation(i, r).transpose()));
        }
        const ProxResult res = minimize_from(pr, starts, popt);
        if (warm && warm->rows() == pool.size()) warm->row(i) = res.z.transpose();

        for (int l = 0; l < L; ++l) {
          const double g = (res.z[l] - pr.center[l]) / safe.V[l];
          acc[4 * l + 0] += g * g / K;
          acc[4 * l + 1] += g / K;
          acc[4 * l + 2] += g * zeta[l] / K;
          acc[4 * l + 3] += g * xi[l] / K;
        }
        acc[4 * L] += res.value / K;
      }
    }
  });

  std::vector<Estimate> stats(stride);
  if (pool.weighted()) {
    for (int j = 0; j < stride; ++j) {
      double v = 0.0;
      for (int gi = 0; gi < G; ++gi) v += pool.group_weight(gi) * group[static_cast<std::size_t>(gi) * stride + j];
      stats[j] = {v, 0.0};
    }
  } else {
    std::vector<RunningStats> rs(stride);
    for (int gi = 0; gi < G; ++gi)
      for (int j = 0; j < stride; ++j) rs[j].add(group[static_cast<std::size_t>(gi) * stride + j]);
    for (int j = 0; j < stride; ++j) stats[j] = rs[j].estimate();
  }

  HatEvaluation ev;
  ev.conj = ConjugateParams::zeros(L);
  ev.conj_stderr = ConjugateParams::zeros(L);
  const double a = pb.alpha;
  for (int l = 0; l < L; ++l) {
    const auto g2 = stats[4 * l + 0];
    const auto g1 = stats[4 * l + 1];
    const auto gz = stats[4 * l + 2];
    const auto gx = stats[4 * l + 3];
    ev.conj.qhat[l] = a * g2.value;
    ev.conj.mhat[l] = a * g1.value;
    const double th = cv_sqrt[l] > 0.0 ? a * gz.value / cv_sqrt[l] : 0.0;
    ev.conj.thetahat[l] = th;
    ev.conj.Vhat[l] = th * params.theta[l] / safe.q[l] - a * gx.value / sq[l];

    ev.conj_stderr.qhat[l] = a * g2.std_error;
    ev.conj_stderr.mhat[l] = a * g1.std_error;
    const double th_se = cv_sqrt[l] > 0.0 ? a * gz.std_error / cv_sqrt[l] : 0.0;
    ev.conj_stderr.thetahat[l] = th_se;
    ev.conj_stderr.Vhat[l] = std::hypot(th_se * params.theta[l] / safe.q[l], a * gx.std_error / sq[l]);
  }
  ev.moreau = stats[4 * L];
  ev.moreau_groups.resize(G);
  for (int gi = 0; gi < G; ++gi) ev.moreau_groups[gi] = group[static_cast<std::size_t>(gi) * stride + 4 * L];
  return ev;
}

/// Monte-Carlo pool or quadrature grid, as selected by cfg.integration.
inline MonteCarloPool make_pool(int L, const SEConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (cfg.integration == Integration::GaussHermite)
    return MonteCarloPool::gauss_hermite(L, cfg.grid_nodes, cfg.prox_restarts, seed);
  return MonteCarloPool(L, cfg.n_mc, cfg.prox_restarts, seed);
}

/// One evaluation of the four hatted equations from a fresh pool.
inline ConjugateParams hat_update(const OrderParams& params, const SEProblem& pb, const SEConfig& cfg,
                                  std::uint64_t seed) {
  const MonteCarloPool pool = make_pool(pb.L(), cfg, seed);
  return evaluate_hats(params, pb, cfg, pool, nullptr, true).conj;
}

// ---------------------------------------------------------------------------
// Fixed-point solve
// ---------------------------------------------------------------------------

struct SolverReport {
  bool converged = false;
  int iterations = 0;
  std::vector<double> residuals;
  double noise_floor = 0.0;
  BranchLabel label = BranchLabel::Neither;
  int n_mc = 0;
  double wall_time = 0.0;
  std::string message;
};

struct TrainLoss {
  double main_text = 0.0;  // regularization integral with D^-2
  double appendix = 0.0;   // regularization integral with D^-1
  double selected = 0.0;
  double std_error = 0.0;  // Monte-Carlo error of the alpha E[M] term
};

struct SolveResult {
  OrderParams params;
  ConjugateParams conj;
  SolverReport report;
  HatEvaluation last;  // resolvent statistics at params
};

namespace detail {

inline double max_abs_diff(const OrderParams& a, const OrderParams& b) {
  double r = 0.0;
  for (int l = 0; l < a.L(); ++l) {
    r = std::max({r, std::abs(a.q[l] - b.q[l]), std::abs(a.V[l] - b.V[l]), std::abs(a.m[l] - b.m[l]),
                  std::abs(a.theta[l] - b.theta[l])});
  }
  return r;
}

inline OrderParams blend(const OrderParams& old, const OrderParams& fresh, double damping) {
  OrderParams out = fresh;
  for (int l = 0; l < old.L(); ++l) {
    out.q[l] = damping * old.q[l] + (1 - damping) * fresh.q[l];
    out.V[l] = damping * old.V[l] + (1 - damping) * fresh.V[l];
    out.m[l] = damping * old.m[l] + (1 - damping) * fresh.m[l];
    out.theta[l] = damping * old.theta[l] + (1 - damping) * fresh.theta[l];
  }
  return out;
}

inline Vec pack(const OrderParams& p) {
  const int L = p.L();
  Vec x(4 * L);
  for (int l = 0; l < L; ++l) {
    x[l] = p.q[l];
    x[L + l] = p.V[l];
    x[2 * L + l] = p.m[l];
    x[3 * L + l] = p.theta[l];
  }
  return x;
}

inline OrderParams unpack(const Vec& x, const std::vector<double>& rho) {
  const int L = static_cast<int>(rho.size());
  OrderParams p{std::vector<double>(L), std::vector<double>(L), std::vector<double>(L), std::vector<double>(L), rho};
  for (int l = 0; l < L; ++l) {
    p.q[l] = x[l];
    p.V[l] = x[L + l];
    p.m[l] = x[2 * L + l];
    p.theta[l] = x[3 * L + l];
  }
  return p;
}

/// Whether an iterate can be fed to the resolvent: q >= 0, V > 0, theta^2 <= q rho.
inline bool admissible(const OrderParams& p) {
  for (int l = 0; l < p.L(); ++l) {
    if (!(p.q[l] >= 0.0) || !(p.V[l] > 0.0) || !std::isfinite(p.m[l]) || !std::isfinite(p.theta[l])) return false;
    if (p.theta[l] * p.theta[l] > p.q[l] * p.rho[l] * (1.0 + 1e-9)) return false;
  }
  return true;
}

/**
 * Anderson mixing for x = F(x) on residuals g = F(x) - x. Keeps the last
 * `memory` differences and returns x + beta g - (dX + beta dG) gamma with
 * gamma the ridge-regularized least-squares coefficients.
 */
class AndersonMixer {
 public:
  AndersonMixer(int memory, double beta) : memory_(memory), beta_(beta) {}

  void reset() {
    dx_.clear();
    dg_.clear();
    have_last_ = false;
  }

  Vec step(const Vec& x, const Vec& g) {
    if (have_last_) {
      dx_.push_back(x - last_x_);
      dg_.push_back(g - last_g_);
      if (static_cast<int>(dx_.size()) > memory_) {
        dx_.erase(dx_.begin());
        dg_.erase(dg_.begin());
      }
    }
    last_x_ = x;
    last_g_ = g;
    have_last_ = true;
    Vec out = x + beta_ * g;
    const int k = static_cast<int>(dg_.size());
    if (memory_ == 0 || k == 0) return out;
    Mat DG(g.size(), k), DX(x.size(), k);
    for (int j = 0; j < k; ++j) {
      DG.col(j) = dg_[j];
      DX.col(j) = dx_[j];
    }
    const Mat N = DG.transpose() * DG;
    const double ridge = 1e-10 * std::max(1e-300, N.diagonal().maxCoeff());
    const Vec gamma = (N + ridge * Mat::Identity(k, k)).ldlt().solve(DG.transpose() * g);
    if (!gamma.allFinite()) return out;
    out -= (DX + beta_ * DG) * gamma;
    return out;
  }

 private:
  int memory_;
  double beta_;
  std::vector<Vec> dx_, dg_;
  Vec last_x_, last_g_;
  bool have_last_ = false;
};

/// Spread of the non-hat map induced by one standard error in each hatted input.
inline double noise_floor(const ConjugateParams& c, const ConjugateParams& se, const SEProblem& pb, int nodes) {
  OrderParams base;
  try {
    base = nonhat_update(c, pb.nu, pb.lambda, nodes);
  } catch (const std::domain_error&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
  double total = 0.0;
  auto probe = [&](std::vector<double> ConjugateParams::*field, int l) {
    ConjugateParams cc = c;
    const double delta = (se.*field)[l];
    if (delta == 0.0) return;
    (cc.*field)[l] += delta;
    try {
      const double diff = max_abs_diff(nonhat_update(cc, pb.nu, pb.lambda, nodes), base);
      total += diff * diff;
    } catch (const std::domain_error&) {
    }
  };
  for (int l = 0; l < c.L(); ++l) {
    probe(&ConjugateParams::qhat, l);
    probe(&ConjugateParams::Vhat, l);
    probe(&ConjugateParams::mhat, l);
    probe(&ConjugateParams::thetahat, l);
  }
  return std::sqrt(total);
}

}  // namespace detail

/**
 * Fixed-point iteration params = F(params), F = nonhat_update o hat_update,
 * on one common-random-number pool. Steps are Anderson-mixed with mixing
 * 1 - damping; an inadmissible mixed step falls back to the damped update,
 * and an iterate with lambda + sum gamma Vhat <= 0 is pulled halfway back
 * to the last good one. Convergence is only declared on an iteration that
 * used the full multistart set.
 */
class SESolver {
 public:
  SESolver(SEProblem problem, SEConfig cfg, std::uint64_t seed)
      : pb_(std::move(problem)), cfg_(cfg), pool_(make_pool(pb_.L(), cfg, seed)) {}

  const SEProblem& problem() const { return pb_; }
  const SEConfig& config() const { return cfg_; }
  const MonteCarloPool& pool() const { return pool_; }

  SolveResult solve(const BranchInit& branch, const std::function<void(int, double)>& on_iter = {}) const {
    const auto t0 = std::chrono::steady_clock::now();
    const int L = pb_.L();
    SolveResult out;
    OrderParams cur = initial_params(branch, pb_);
    cur.rho = pb_.nu.rho();
    check_order_params(cur, L);
    RowMat warm = RowMat::Constant(pool_.size(), L, std::numeric_limits<double>::quiet_NaN());

    detail::AndersonMixer mixer(cfg_.anderson_memory, 1.0 - cfg_.damping);
    OrderParams accepted = cur;
    int backtracks = 0;
    bool force_full = true;
    for (int it = 0; it < cfg_.max_iter; ++it) {
      const bool full = force_full || it % cfg_.full_restart_every == 0;
      force_full = false;
      HatEvaluation ev = evaluate_hats(cur, pb_, cfg_, pool_, &warm, full);
      OrderParams next;
      try {
        next = nonhat_update(ev.conj, pb_.nu, pb_.lambda, cfg_.quadrature_nodes);
      } catch (const std::domain_error& e) {
        // The iterate left the region where lambda + sum gamma Vhat > 0: retreat toward the last good point.
        out.report.iterations = it + 1;
        if (++backtracks > cfg_.max_backtracks || it == 0) {
          out.report.message = e.what();
          out.params = cur;
          out.conj = ev.conj;
          out.last = std::move(ev);
          break;
        }
        cur = detail::blend(accepted, cur, 0.5);
        cur.rho = pb_.nu.rho();
        mixer.reset();
        force_full = true;
        continue;
      }
      backtracks = 0;
      accepted = cur;
      const double res = detail::max_abs_diff(next, cur);
      out.report.residuals.push_back(res);
      out.report.iterations = it + 1;
      if (on_iter) on_iter(it, res);
      const bool finite = std::all_of(next.q.begin(), next.q.end(), [](double v) { return std::isfinite(v); });
      if (!finite) {
        out.report.message = "non-finite order parameters";
        out.params = cur;
        out.conj = ev.conj;
        out.last = std::move(ev);
        break;
      }
      if (res < cfg_.tol) {
        if (full) {
          out.report.converged = true;
          out.params = cur;
          out.conj = ev.conj;
          out.report.noise_floor = detail::noise_floor(ev.conj, ev.conj_stderr, pb_, cfg_.quadrature_nodes);
          out.last = std::move(ev);
          break;
        }
        force_full = true;
      }
      out.params = cur;
      out.conj = ev.conj;
      out.last = std::move(ev);
      const Vec x = detail::pack(cur);
      OrderParams cand = detail::unpack(mixer.step(x, detail::pack(next) - x), pb_.nu.rho());
      if (!detail::admissible(cand)) {
        mixer.reset();
        cand = detail::blend(cur, next, cfg_.damping);
        cand.rho = pb_.nu.rho();
      }
      cur = std::move(cand);
    }
    if (!out.report.converged) {
      if (out.report.message.empty()) out.report.message = "max_iter reached";
      out.report.noise_floor =
          detail::noise_floor(out.last.conj, out.last.conj_stderr, pb_, cfg_.quadrature_nodes);
    }
    out.report.n_mc = pool_.size();
    out.report.label = classify_overlaps(out.params.q[0], out.params.m[0], out.params.theta[0], out.params.rho[0]);
    out.report.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
  }

  /// Training loss at a solved point, reusing the resolvent values of the final iterate.
  TrainLoss train_loss(const SolveResult& s) const { return train_loss_from(s.params, s.conj, s.last); }

  TrainLoss train_loss_from(const OrderParams& params, const ConjugateParams& conj, const HatEvaluation& ev) const {
    const auto integ = detail::nonhat_integrals(conj, pb_.nu, pb_.lambda, cfg_.quadrature_nodes);
    const double half = cfg_.moreau_half_factor ? 1.0 : 2.0;
    double base = pb_.alpha * half * ev.moreau.value;
    for (int l = 0; l < params.L(); ++l) base -= 0.5 * conj.qhat[l] * params.V[l];
    TrainLoss t;
    t.main_text = base + 0.5 * pb_.lambda * integ.reg_inverse_square;
    t.appendix = base + 0.5 * pb_.lambda * integ.reg_inverse;
    t.selected = cfg_.train_loss_variant == TrainLossVariant::MainText ? t.main_text : t.appendix;
    t.std_error = pb_.alpha * half * ev.moreau.std_error;
    return t;
  }

 private:
  SEProblem pb_;
  SEConfig cfg_;
  MonteCarloPool pool_;
};

inline SolveResult solve_fixed_point(const BranchInit& branch, const SEConfig& cfg, const SEProblem& pb,
                                     std::uint64_t seed = 0) {
  return SESolver(pb, cfg, seed).solve(branch);
}

/**
 * Training loss at (params, conj), with a fresh pool for the resolvent
 * average. Both exponent variants are returned.
 */
inline TrainLoss theory_train_loss(const OrderParams& params, const ConjugateParams& conj, const SEProblem& pb,
                                   const SEConfig& cfg, std::uint64_t seed) {
  const SESolver solver(pb, cfg, seed);
  const HatEvaluation ev = evaluate_hats(params, pb, cfg, solver.pool(), nullptr, true);
  return solver.train_loss_from(params, conj, ev);
}

/**
 * Test error from the joint Gaussian law of student and teacher fields,
 * (h_l, h*_l) ~ N((m_l, 0), [[q, theta], [theta, rho]]).
 */
inline Estimate theory_test_error(const OrderParams& params, const SEProblem& pb, int n_mc, std::uint64_t seed) {
  const int L = pb.L();
  if (n_mc < 1) throw std::invalid_argument("theory_test_error: n_mc must be positive");
  const auto rho_sigma = pb.nu.rho_sigma();
  std::vector<double> sq(L), tq(L), cs(L);
  for (int l = 0; l < L; ++l) {
    const double det = params.q[l] * params.rho[l] - params.theta[l] * params.theta[l];
    if (det < -1e-10 || params.q[l] < 0.0 || params.rho[l] < 0.0)
      throw std::domain_error("theory_test_error: field covariance is not positive semi-definite");
    sq[l] = std::sqrt(params.q[l]);
    tq[l] = params.q[l] > 0.0 ? params.theta[l] / sq[l] : 0.0;
    cs[l] = std::sqrt(std::max(0.0, params.q[l] > 0.0 ? params.rho[l] - tq[l] * tq[l] : params.rho[l]));
  }
  Rng rng(derive_seed(seed, "test-error"));
  RunningStats stats;
  TokenVector h(L), hs(L);
  for (int s = 0; s < n_mc; ++s) {
    for (int l = 0; l < L; ++l) {
      const double a = rng.normal(), b = rng.normal();
      h[l] = params.m[l] + sq[l] * a;
      hs[l] = tq[l] * a + cs[l] * b;
    }
    const TokenMatrix D = field_attention(h) - teacher_mixing_from_fields(hs, pb.omega, pb.A);
    double v = 0.0;
    for (int r = 0; r < L; ++r)
      for (int c = 0; c < L; ++c) v += rho_sigma[c] * D(r, c) * D(r, c);
    stats.add(v / L);
  }
  return stats.estimate();
}

}  // namespace attnlab
