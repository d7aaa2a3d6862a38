#pragma once

#include <Eigen/Eigenvalues>

#include <cmath>
#include <stdexcept>
#include <vector>

namespace attnlab {

/**
 * Gauss-Hermite rule for expectations under the standard normal density,
 * built with the Golub-Welsch eigenvalue method. An n-node rule is exact for
 * polynomials of degree up to 2n - 1.
 */
class GaussHermite {
 public:
  explicit GaussHermite(int nodes) {
    if (nodes < 1) throw std::invalid_argument("GaussHermite: need at least one node");
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(nodes, nodes);
    for (int k = 1; k < nodes; ++k) J(k, k - 1) = J(k - 1, k) = std::sqrt(static_cast<double>(k));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
    nodes_.resize(nodes);
    weights_.resize(nodes);
    for (int i = 0; i < nodes; ++i) {
      nodes_[i] = es.eigenvalues()[i];
      const double v = es.eigenvectors()(0, i);
      weights_[i] = v * v;
    }
  }

  int size() const { return static_cast<int>(nodes_.size()); }
  const std::vector<double>& nodes() const { return nodes_; }
  const std::vector<double>& weights() const { return weights_; }

  template <class F>
  auto expect(F&& f) const {
    auto acc = weights_[0] * f(nodes_[0]);
    for (std::size_t i = 1; i < nodes_.size(); ++i) acc += weights_[i] * f(nodes_[i]);
    return acc;
  }

 private:
  std::vector<double> nodes_;
  std::vector<double> weights_;
};

}  // namespace attnlab
