#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace attnlab {

/// Upper bound on the sentence length; token-level matrices live on the stack.
inline constexpr int kMaxTokens = 8;

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using TokenMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxTokens, kMaxTokens>;
using TokenVector = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxTokens, 1>;

/// Monte-Carlo estimate with its standard error.
struct Estimate {
  double value = 0.0;
  double std_error = 0.0;
};

/// Running mean / variance (Welford).
class RunningStats {
 public:
  void add(double x) {
    ++n_;
    const double delta = x - mean_;
    mean_ += delta / static_cast<double>(n_);
    m2_ += delta * (x - mean_);
  }
  long long count() const { return n_; }
  double mean() const { return mean_; }
  double variance() const { return n_ > 1 ? m2_ / static_cast<double>(n_ - 1) : 0.0; }
  double stddev() const { return std::sqrt(variance()); }
  double standard_error() const { return n_ > 0 ? std::sqrt(variance() / static_cast<double>(n_)) : 0.0; }
  Estimate estimate() const { return {mean(), standard_error()}; }

 private:
  long long n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

template <class Derived>
void require_finite(const Eigen::DenseBase<Derived>& m, const char* what) {
  if (!m.allFinite()) throw std::invalid_argument(std::string(what) + " contains non-finite entries");
}

/**
 * Row-wise softmax, stabilized by subtracting each row's maximum.
 */
template <class Derived>
typename Derived::PlainObject softmax_rows(const Eigen::MatrixBase<Derived>& M) {
  typename Derived::PlainObject S(M.rows(), M.cols());
  for (Eigen::Index r = 0; r < M.rows(); ++r) {
    const double mx = M.row(r).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index c = 0; c < M.cols(); ++c) {
      const double e = std::exp(M(r, c) - mx);
      S(r, c) = e;
      sum += e;
    }
    S.row(r) /= sum;
  }
  return S;
}

/**
 * Pullback through softmax_rows: given S = softmax_rows(M) and dL/dS,
 * returns dL/dM = S .* (dS - rowsum(S .* dS)).
 */
template <class D1, class D2>
typename D1::PlainObject softmax_rows_backward(const Eigen::MatrixBase<D1>& S,
                                               const Eigen::MatrixBase<D2>& dS) {
  typename D1::PlainObject out(S.rows(), S.cols());
  for (Eigen::Index r = 0; r < S.rows(); ++r) {
    double dot = 0.0;
    for (Eigen::Index c = 0; c < S.cols(); ++c) dot += S(r, c) * dS(r, c);
    for (Eigen::Index c = 0; c < S.cols(); ++c) out(r, c) = S(r, c) * (dS(r, c) - dot);
  }
  return out;
}

/// softmax_rows(z z^T) for a vector of scalar token fields.
template <class Derived>
TokenMatrix field_attention(const Eigen::MatrixBase<Derived>& z) {
  const TokenMatrix scores = z * z.transpose();
  return softmax_rows(scores);
}

}  // namespace attnlab
