#pragma once

#include <attnlab/random.hpp>
#include <attnlab/tensor.hpp>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace attnlab {

/**
 * Low-dimensional proximal problem over token fields z in R^L:
 *
 *   F(z) = 1/2 (z - c)^T P (z - c) + w * 1/2 [Tr S G S^T - 2 Tr(S C)],
 *   S = softmax_rows(z z^T).
 *
 * The state-evolution resolvent uses diagonal P = diag(1/V), G = rho and
 * C = rho T(u)^T; the message-passing resolvent uses a full P = V^{-1}.
 */
struct ProxProblem {
  TokenVector center;
  TokenMatrix precision;
  TokenMatrix gram;
  TokenMatrix cross;
  double loss_weight = 1.0;

  int L() const { return static_cast<int>(center.size()); }
};

/// 1/2 [Tr S G S^T - 2 Tr(S C)] and its gradient in z.
inline double attention_loss(const TokenVector& z, const TokenMatrix& G, const TokenMatrix& C,
                             TokenVector* grad = nullptr) {
  const TokenMatrix S = field_attention(z);
  const TokenMatrix SG = S * G;
  const double v = 0.5 * SG.cwiseProduct(S).sum() - S.cwiseProduct(C.transpose()).sum();
  if (grad) {
    const TokenMatrix Gb = softmax_rows_backward(S, SG - C.transpose());
    *grad = (Gb + Gb.transpose()) * z;
  }
  return v;
}

inline double prox_objective(const ProxProblem& pb, const TokenVector& z, TokenVector* grad = nullptr) {
  const TokenVector r = z - pb.center;
  const TokenVector Pr = pb.precision * r;
  double v = 0.5 * r.dot(Pr);
  if (grad) *grad = Pr;
  if (pb.loss_weight != 0.0) {
    TokenVector gl;
    v += pb.loss_weight * attention_loss(z, pb.gram, pb.cross, grad ? &gl : nullptr);
    if (grad) *grad += pb.loss_weight * gl;
  }
  return v;
}

struct ProxOptions {
  int restarts = 8;                 // starting points, the quadratic center included
  double perturbation_scale = 1.0;  // std of the random restart offsets
  double step_tol = 1e-13;
  int max_iter = 100;
};

struct ProxResult {
  TokenVector z;
  double value = std::numeric_limits<double>::infinity();
  int successful_starts = 0;
  int iterations = 0;
};

class ProxFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct LocalRun {
  TokenVector z;
  double value;
  bool ok;
  int iterations;
};

/// Hessian of F: exact quadratic part plus central differences of the loss gradient.
inline TokenMatrix prox_hessian(const ProxProblem& pb, const TokenVector& z) {
  const int L = pb.L();
  TokenMatrix H = pb.precision;
  if (pb.loss_weight == 0.0) return H;
  TokenMatrix Hl(L, L);
  TokenVector gp, gm, zp = z, zm = z;
  for (int i = 0; i < L; ++i) {
    const double h = 1e-5 * (1.0 + std::abs(z[i]));
    zp[i] = z[i] + h;
    zm[i] = z[i] - h;
    attention_loss(zp, pb.gram, pb.cross, &gp);
    attention_loss(zm, pb.gram, pb.cross, &gm);
    Hl.col(i) = (gp - gm) / (2.0 * h);
    zp[i] = zm[i] = z[i];
  }
  H += pb.loss_weight * 0.5 * (Hl + Hl.transpose());
  return H;
}

/// Newton steps on a positive-definite modification of the Hessian, with Armijo backtracking.
inline LocalRun local_minimize(const ProxProblem& pb, TokenVector z, const ProxOptions& opt) {
  const int L = pb.L();
  TokenVector g;
  double f = prox_objective(pb, z, &g);
  const double pscale = std::max(1.0, pb.precision.cwiseAbs().maxCoeff());
  for (int it = 0; it < opt.max_iter; ++it) {
    if (g.norm() <= 1e-13 * pscale * (1.0 + z.norm())) return {z, f, true, it};
    const TokenMatrix H = prox_hessian(pb, z);
    Eigen::SelfAdjointEigenSolver<TokenMatrix> es(H);
    TokenVector ev = es.eigenvalues();
    const double floor = 1e-10 * std::max(1.0, ev.cwiseAbs().maxCoeff());
    for (int i = 0; i < L; ++i) ev[i] = std::max(std::abs(ev[i]), floor);
    TokenVector dir = -(es.eigenvectors() * (es.eigenvectors().transpose() * g).cwiseQuotient(ev));

    double slope = g.dot(dir);
    if (!(slope < 0.0)) {
      dir = -g;
      slope = -g.squaredNorm();
    }
    double t = 1.0;
    bool accepted = false;
    TokenVector zn, gn;
    double fn = f;
    for (int k = 0; k < 60; ++k) {
      zn = z + t * dir;
      fn = prox_objective(pb, zn, &gn);
      if (fn <= f + 1e-4 * t * slope) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) {
      // No decrease representable in floating point: accept as stationary if the gradient is small.
      const bool stationary = g.norm() <= 1e-6 * pscale * (1.0 + z.norm());
      return {z, f, stationary, it};
    }
    const double step = (zn - z).norm();
    z = zn;
    f = fn;
    g = gn;
    if (step <= opt.step_tol * (1.0 + z.norm())) return {z, f, true, it + 1};
  }
  return {z, f, g.norm() <= 1e-6 * pscale * (1.0 + z.norm()), opt.max_iter};
}

}  // namespace detail

/// Best local minimum over an explicit list of starting points.
inline ProxResult minimize_from(const ProxProblem& pb, const std::vector<TokenVector>& starts,
                                const ProxOptions& opt) {
  ProxResult best;
  double best_any = std::numeric_limits<double>::infinity();
  TokenVector z_any;
  for (const auto& s : starts) {
    const detail::LocalRun run = detail::local_minimize(pb, s, opt);
    best.iterations += run.iterations;
    if (run.value < best_any) {
      best_any = run.value;
      z_any = run.z;
    }
    if (!run.ok) continue;
    ++best.successful_starts;
    if (run.value < best.value) {
      best.value = run.value;
      best.z = run.z;
    }
  }
  if (best.successful_starts == 0) {
    std::ostringstream os;
    os << "moreau_prox: all " << starts.size() << " local searches stalled; best value " << best_any
       << " at z = [" << z_any.transpose() << "], center = [" << pb.center.transpose() << "]";
    throw ProxFailure(os.str());
  }
  return best;
}

/**
 * Multistart minimization of the proximal objective: one start at the
 * quadratic center, an optional warm start, and restarts - 1 Gaussian
 * perturbations of the center.
 */
inline ProxResult moreau_prox(const ProxProblem& pb, const ProxOptions& opt, Rng& rng,
                              const TokenVector* warm = nullptr) {
  std::vector<TokenVector> starts;
  starts.push_back(pb.center);
  if (warm) starts.push_back(*warm);
  for (int k = 1; k < opt.restarts; ++k) {
    TokenVector s = pb.center;
    for (int i = 0; i < pb.L(); ++i) s[i] += opt.perturbation_scale * rng.normal();
    starts.push_back(s);
  }
  return minimize_from(pb, starts, opt);
}

}  // namespace attnlab
