#pragma once

#include <attnlab/random.hpp>
#include <attnlab/tensor.hpp>

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace attnlab {

/// Norm of each default positional encoding row, |p_l|.
inline constexpr double kDefaultEncodingNorm = 3.0;

inline TokenMatrix default_positional_target() {
  TokenMatrix A(2, 2);
  A << 0.6, 0.4, 0.4, 0.6;
  return A;
}

/**
 * A full problem instance: dimensions, teacher mixing, regularization and
 * seeds.
 *
 * The positional encoding is p_l = c * s_l * 1_d with s = (+1, -1, +1, ...).
 * When pos_scale is unset, c = kDefaultEncodingNorm / sqrt(d), so |p_l| stays
 * of order one as d grows.
 */
struct ExperimentConfig {
  int d = 500;
  int L = 2;
  int r_s = 1;
  int r_t = 1;
  double alpha = 1.0;
  double omega = 0.3;
  double sigma = 0.5;
  double lambda = 1e-3;
  TokenMatrix A = default_positional_target();
  std::optional<double> pos_scale;
  std::optional<Mat> pos_encoding;
  std::uint64_t master_seed = 0;

  int n() const { return static_cast<int>(std::llround(alpha * d)); }

  double pos_scale_value() const { return pos_scale ? *pos_scale : kDefaultEncodingNorm / std::sqrt(static_cast<double>(d)); }

  void validate() const {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("ExperimentConfig: " + msg); };
    if (d < 1) fail("d must be positive");
    if (L < 1 || L > kMaxTokens) fail("L must lie in [1, " + std::to_string(kMaxTokens) + "]");
    if (r_s != 1 || r_t != 1) fail("only rank-one student and teacher are supported");
    if (!(alpha > 0.0) || !std::isfinite(alpha)) fail("alpha must be positive and finite");
    if (!(omega >= 0.0 && omega <= 1.0)) fail("omega must lie in [0, 1]");
    if (!(sigma > 0.0) || !std::isfinite(sigma)) fail("sigma must be positive and finite");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) fail("lambda must be non-negative and finite");
    if (A.rows() != L || A.cols() != L) fail("A must be L x L");
    if (!A.allFinite()) fail("A has non-finite entries");
    if (pos_scale && !std::isfinite(*pos_scale)) fail("pos_scale must be finite");
    if (pos_encoding) {
      if (pos_encoding->rows() != L || pos_encoding->cols() != d) fail("explicit encoding must be L x d");
      if (!pos_encoding->allFinite()) fail("explicit encoding has non-finite entries");
    }
    if (n() < 1) fail("round(alpha * d) must be at least 1");
  }
};

inline Mat positional_encoding(const ExperimentConfig& cfg) {
  if (cfg.pos_encoding) return *cfg.pos_encoding;
  const double c = cfg.pos_scale_value();
  Mat p(cfg.L, cfg.d);
  for (int l = 0; l < cfg.L; ++l) p.row(l).setConstant(l % 2 == 0 ? c : -c);
  return p;
}

struct TeacherSpec {
  Vec q_star;
  double omega = 0.0;
  TokenMatrix A;

  int d() const { return static_cast<int>(q_star.size()); }
};

/// Teacher weights drawn i.i.d. standard normal from a derived stream.
inline TeacherSpec make_teacher(const ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, "teacher"));
  TeacherSpec t;
  t.q_star.resize(cfg.d);
  for (int i = 0; i < cfg.d; ++i) t.q_star[i] = rng.normal();
  t.omega = cfg.omega;
  t.A = cfg.A;
  return t;
}

using Sentence = Mat;

/// T[h] = (1 - omega) softmax_rows(h h^T) + omega A for token fields h.
template <class Derived>
TokenMatrix teacher_mixing_from_fields(const Eigen::MatrixBase<Derived>& h, double omega, const TokenMatrix& A) {
  return (1.0 - omega) * field_attention(h) + omega * A;
}

inline TokenMatrix teacher_mixing(const Sentence& x, const TeacherSpec& teacher) {
  const TokenVector h = (x * teacher.q_star) / std::sqrt(static_cast<double>(x.cols()));
  return teacher_mixing_from_fields(h, teacher.omega, teacher.A);
}

inline Mat teacher_forward(const Sentence& x, const TeacherSpec& teacher, TokenMatrix* mixing = nullptr) {
  if (x.cols() != teacher.d() || x.rows() != teacher.A.rows())
    throw std::invalid_argument("teacher_forward: dimension mismatch");
  require_finite(x, "teacher_forward input");
  const TokenMatrix T = teacher_mixing(x, teacher);
  if (mixing) *mixing = T;
  return T * x;
}

inline Mat student_forward(const Sentence& x, const Vec& q, const Mat& p, TokenMatrix* attention = nullptr) {
  if (x.cols() != q.size() || p.rows() != x.rows() || p.cols() != x.cols())
    throw std::invalid_argument("student_forward: dimension mismatch");
  require_finite(q, "student weights");
  const Mat xt = x + p;
  const TokenVector z = (xt * q) / std::sqrt(static_cast<double>(x.cols()));
  const TokenMatrix S = field_attention(z);
  if (attention) *attention = S;
  return S * xt;
}

/**
 * Training set with cached labels and teacher mixing matrices.
 */
struct Dataset {
  int d = 0;
  int L = 0;
  double sigma = 0.0;
  std::uint64_t seed = 0;
  std::vector<Sentence> sentences;
  std::vector<Mat> labels;
  std::vector<TokenMatrix> mixings;

  int n() const { return static_cast<int>(sentences.size()); }
};

inline Sentence sample_sentence(int L, int d, double sigma, Rng& rng) {
  Sentence x(L, d);
  for (int l = 0; l < L; ++l)
    for (int j = 0; j < d; ++j) x(l, j) = sigma * rng.normal();
  return x;
}

inline Dataset sample_dataset(const ExperimentConfig& cfg, const TeacherSpec& teacher, std::uint64_t seed) {
  if (!std::isfinite(cfg.sigma)) throw std::invalid_argument("sample_dataset: sigma must be finite");
  cfg.validate();
  if (teacher.d() != cfg.d || teacher.A.rows() != cfg.L)
    throw std::invalid_argument("sample_dataset: teacher does not match config");
  const int n = cfg.n();
  if (n < 1) throw std::invalid_argument("sample_dataset: empty dataset");

  Dataset ds;
  ds.d = cfg.d;
  ds.L = cfg.L;
  ds.sigma = cfg.sigma;
  ds.seed = seed;
  ds.sentences.reserve(n);
  ds.labels.reserve(n);
  ds.mixings.reserve(n);
  Rng rng(derive_seed(seed, "dataset"));
  for (int mu = 0; mu < n; ++mu) {
    ds.sentences.push_back(sample_sentence(cfg.L, cfg.d, cfg.sigma, rng));
    TokenMatrix T;
    ds.labels.push_back(teacher_forward(ds.sentences.back(), teacher, &T));
    ds.mixings.push_back(T);
  }
  return ds;
}

/// Recomputes the cached mixing matrices from the teacher.
inline void refresh_mixings(Dataset& ds, const TeacherSpec& teacher) {
  ds.mixings.clear();
  for (const auto& x : ds.sentences) ds.mixings.push_back(teacher_mixing(x, teacher));
}

enum class RiskScale { Sum, PerSample };

inline void check_problem(const Dataset& ds, const Vec& q, const Mat& p) {
  if (ds.n() == 0) throw std::invalid_argument("risk: empty dataset");
  if (q.size() != ds.d || p.rows() != ds.L || p.cols() != ds.d)
    throw std::invalid_argument("risk: dimension mismatch");
}

/**
 * Sum over samples of (1/2d)||y - f_q(x)||^2 plus (lambda/2)||q||^2,
 * evaluated directly from the forward passes.
 */
inline double empirical_risk(const Dataset& ds, const Vec& q, const Mat& p, double lambda,
                             RiskScale scale = RiskScale::Sum) {
  check_problem(ds, q, p);
  double data = 0.0;
  for (int mu = 0; mu < ds.n(); ++mu)
    data += (ds.labels[mu] - student_forward(ds.sentences[mu], q, p)).squaredNorm();
  data /= 2.0 * ds.d;
  double total = data + 0.5 * lambda * q.squaredNorm();
  if (scale == RiskScale::PerSample) total /= ds.n();
  return total;
}

/**
 * Risk evaluator in token-field form.
 *
 * With z = (x + p) q / sqrt(d) and S = softmax_rows(z z^T), each sample
 * contributes 1/2 [c - 2 Tr(S C) + Tr(S G S^T)]. The full risk uses the
 * sentence Grams G = x~ x~^T/d, C = x~ y^T/d, c = |y|^2/d; the simplified
 * risk uses G = sigma^2 I, C = sigma^2 T^T and c = 0.
 */
class RiskModel {
 public:
  enum class Kind { Full, Simplified };

  RiskModel(const Dataset& ds, const Mat& p, Kind kind = Kind::Full)
      : d_(ds.d), L_(ds.L), n_(ds.n()), kind_(kind) {
    if (n_ == 0) throw std::invalid_argument("RiskModel: empty dataset");
    if (p.rows() != L_ || p.cols() != d_) throw std::invalid_argument("RiskModel: encoding has wrong shape");
    if (kind == Kind::Simplified && static_cast<int>(ds.mixings.size()) != n_)
      throw std::invalid_argument("RiskModel: simplified risk needs cached mixing matrices");
    xt_.resize(static_cast<Eigen::Index>(n_) * L_, d_);
    gram_.resize(n_);
    cross_.resize(n_);
    label_norm_.assign(n_, 0.0);
    const double inv_d = 1.0 / d_;
    const double rho = ds.sigma * ds.sigma;
    for (int mu = 0; mu < n_; ++mu) {
      const Mat xt = ds.sentences[mu] + p;
      xt_.middleRows(static_cast<Eigen::Index>(mu) * L_, L_) = xt;
      if (kind == Kind::Full) {
        gram_[mu] = (xt * xt.transpose()) * inv_d;
        cross_[mu] = (xt * ds.labels[mu].transpose()) * inv_d;
        label_norm_[mu] = ds.labels[mu].squaredNorm() * inv_d;
      } else {
        gram_[mu] = TokenMatrix::Identity(L_, L_) * rho;
        cross_[mu] = rho * ds.mixings[mu].transpose();
      }
    }
  }

  int d() const { return d_; }
  int n() const { return n_; }
  Kind kind() const { return kind_; }

  /// Data term (sum over samples); fills grad with its q-gradient if non-null.
  double data_term(const Vec& q, Vec* grad = nullptr) const {
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_));
    const Vec z = (xt_ * q) * scale;
    Vec dz;
    if (grad) dz.resize(z.size());
    double total = 0.0;
    for (int mu = 0; mu < n_; ++mu) {
      const auto zmu = z.segment(static_cast<Eigen::Index>(mu) * L_, L_);
      const TokenMatrix S = field_attention(zmu);
      const TokenMatrix& G = gram_[mu];
      const TokenMatrix& C = cross_[mu];
      const TokenMatrix SG = S * G;
      total += 0.5 * (label_norm_[mu] - 2.0 * (S.cwiseProduct(C.transpose())).sum() + SG.cwiseProduct(S).sum());
      if (grad) {
        const TokenMatrix dS = SG - C.transpose();
        const TokenMatrix Gb = softmax_rows_backward(S, dS);
        dz.segment(static_cast<Eigen::Index>(mu) * L_, L_) = (Gb + Gb.transpose()) * zmu;
      }
    }
    if (grad) *grad = (xt_.transpose() * dz) * scale;
    return total;
  }

  double value(const Vec& q, double lambda, Vec* grad = nullptr) const {
    const double data = data_term(q, grad);
    if (grad) *grad += lambda * q;
    return data + 0.5 * lambda * q.squaredNorm();
  }

 private:
  int d_, L_, n_;
  Kind kind_;
  RowMat xt_;
  std::vector<TokenMatrix> gram_;
  std::vector<TokenMatrix> cross_;
  std::vector<double> label_norm_;
};

inline double empirical_risk_simplified(const Dataset& ds, const Vec& q, const Mat& p, double lambda,
                                        RiskScale scale = RiskScale::Sum) {
  check_problem(ds, q, p);
  const double v = RiskModel(ds, p, RiskModel::Kind::Simplified).value(q, lambda);
  return scale == RiskScale::PerSample ? v / ds.n() : v;
}

/**
 * Overlaps of a learnt weight vector. m uses the per-dimension
 * normalization q.p/d; m_field = q.p/sqrt(d) is the mean of the token field
 * (x_l + p_l).q/sqrt(d), which is what the asymptotic equations track.
 */
struct SummaryStats {
  std::vector<double> q, m, m_field, theta, rho;
};

inline SummaryStats measure_summary_stats(const Vec& q_hat, const TeacherSpec& teacher, const Mat& p, double sigma) {
  const int L = static_cast<int>(p.rows());
  const double d = static_cast<double>(q_hat.size());
  if (teacher.q_star.size() != q_hat.size() || p.cols() != q_hat.size())
    throw std::invalid_argument("measure_summary_stats: dimension mismatch");
  const double s2 = sigma * sigma;
  const double qv = s2 * q_hat.squaredNorm() / d;
  const double th = s2 * q_hat.dot(teacher.q_star) / d;
  const double rh = s2 * teacher.q_star.squaredNorm() / d;
  SummaryStats st;
  for (int l = 0; l < L; ++l) {
    const double proj = q_hat.dot(p.row(l).transpose());
    st.q.push_back(qv);
    st.theta.push_back(th);
    st.rho.push_back(rh);
    st.m.push_back(proj / d);
    st.m_field.push_back(proj / std::sqrt(d));
  }
  return st;
}

/// Monte-Carlo estimate of (1/dL) E||y(x) - f(x)||^2 over fresh sentences.
inline Estimate empirical_test_mse(const Vec& q_hat, const TeacherSpec& teacher, const Mat& p, double sigma,
                                   int n_test, std::uint64_t seed) {
  if (n_test < 1) throw std::invalid_argument("empirical_test_mse: n_test must be positive");
  const int L = static_cast<int>(p.rows());
  const int d = static_cast<int>(q_hat.size());
  Rng rng(derive_seed(seed, "test-set"));
  RunningStats stats;
  for (int k = 0; k < n_test; ++k) {
    const Sentence x = sample_sentence(L, d, sigma, rng);
    const Mat y = teacher_forward(x, teacher);
    stats.add((y - student_forward(x, q_hat, p)).squaredNorm() / (static_cast<double>(d) * L));
  }
  return stats.estimate();
}

enum class BranchLabel { Positional, Semantic, Neither, Trivial };

inline const char* label_name(BranchLabel b) {
  switch (b) {
    case BranchLabel::Positional: return "positional";
    case BranchLabel::Semantic: return "semantic";
    case BranchLabel::Trivial: return "trivial";
    default: return "neither";
  }
}

struct OverlapThresholds {
  double semantic = 0.5;    // on |theta| / sqrt(q rho)
  double positional = 0.5;  // on |m_1| / sqrt(q)
};

/// Classifies an endpoint by its normalized overlaps with teacher and encoding.
inline BranchLabel classify_overlaps(double q, double m1, double theta, double rho,
                                     const OverlapThresholds& thr = {}) {
  if (q < 1e-10) return BranchLabel::Trivial;
  const double sem = std::abs(theta) / std::sqrt(q * rho);
  const double pos = std::abs(m1) / std::sqrt(q);
  const bool s = sem >= thr.semantic, p = pos >= thr.positional;
  if (s && p) return sem >= pos ? BranchLabel::Semantic : BranchLabel::Positional;
  if (s) return BranchLabel::Semantic;
  if (p) return BranchLabel::Positional;
  return BranchLabel::Neither;
}

}  // namespace attnlab
