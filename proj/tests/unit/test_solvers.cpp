#include <attnlab/attnlab.hpp>

#include <gtest/gtest.h>

#include "oracles.hpp"

#include <cmath>

using namespace attnlab;

// ---------------------------------------------------------------------------
// Proximal operator
// ---------------------------------------------------------------------------

TEST(Prox, MatchesGridSearchOnRandomInstances) {
  Rng rng(2024);
  for (int k = 0; k < 20; ++k) {
    const ProxProblem pb = oracle::random_prox_problem(rng);
    ProxOptions opt;
    opt.restarts = 8;
    const ProxResult res = moreau_prox(pb, opt, rng);
    const double grid = oracle::grid_minimum(pb);
    EXPECT_LT(std::abs(res.value - grid), 1e-4) << "instance " << k;
  }
}

TEST(Prox, ZeroLossWeightReturnsTheCenter) {
  Rng rng(1);
  ProxProblem pb = oracle::random_prox_problem(rng);
  pb.loss_weight = 0.0;
  const ProxResult res = moreau_prox(pb, ProxOptions{}, rng);
  EXPECT_LT((res.z - pb.center).norm(), 1e-8);
}

TEST(Prox, ObjectiveGradientMatchesFiniteDifferences) {
  Rng rng(5);
  for (int k = 0; k < 10; ++k) {
    const ProxProblem pb = oracle::random_prox_problem(rng);
    TokenVector z(2);
    z << rng.normal(), rng.normal();
    TokenVector g;
    prox_objective(pb, z, &g);
    for (int i = 0; i < 2; ++i) {
      TokenVector a = z, b = z;
      a[i] += 1e-6;
      b[i] -= 1e-6;
      EXPECT_NEAR(g[i], (prox_objective(pb, a) - prox_objective(pb, b)) / 2e-6, 1e-6);
    }
  }
}

// ---------------------------------------------------------------------------
// Asymptotic equations
// ---------------------------------------------------------------------------

TEST(StateEvolution, ConfigValidation) {
  SEConfig c;
  c.damping = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = SEConfig{};
  c.grid_nodes = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = SEConfig{};
  c.tol = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(StateEvolution, NonhatUpdateClosedFormOnIsotropicMeasure) {
  // Isotropic law: fixed gamma and tau, teacher coordinate pi ~ N(0, 1). With
  // D = lambda + gamma sum Vhat, a = sum tau mhat and b = gamma sum thetahat:
  // V = gamma/D, m_l = tau_l a/D, theta = gamma b/D, q = gamma (gamma sum qhat + a^2 + b^2)/D^2.
  const double gamma = 0.25, lambda = 0.01;
  const std::vector<double> tau{3.0, -3.0};
  const SpectralMeasure nu = SpectralMeasure::isotropic(gamma, tau);
  ConjugateParams c;
  c.qhat = {0.3, 0.2};
  c.Vhat = {1.5, 0.5};
  c.mhat = {0.4, -0.1};
  c.thetahat = {0.2, 0.6};
  const OrderParams p = nonhat_update(c, nu, lambda);
  const double D = lambda + gamma * (c.Vhat[0] + c.Vhat[1]);
  const double a = tau[0] * c.mhat[0] + tau[1] * c.mhat[1];
  const double b = gamma * (c.thetahat[0] + c.thetahat[1]);
  const double sq = gamma * (c.qhat[0] + c.qhat[1]);
  for (int l = 0; l < 2; ++l) {
    EXPECT_NEAR(p.V[l], gamma / D, 1e-12);
    EXPECT_NEAR(p.m[l], tau[l] * a / D, 1e-12);
    EXPECT_NEAR(p.theta[l], gamma * b / D, 1e-12);
    EXPECT_NEAR(p.q[l], gamma * (sq + a * a + b * b) / (D * D), 1e-10);
    EXPECT_NEAR(p.rho[l], gamma, 1e-12);
  }
}

TEST(StateEvolution, GaussHermitePoolWeightsFormAProbability) {
  SEConfig cfg;
  cfg.integration = Integration::GaussHermite;
  cfg.grid_nodes = 3;
  const MonteCarloPool pool = make_pool(2, cfg, 0);
  ASSERT_TRUE(pool.weighted());
  double total = 0.0;
  for (int g = 0; g < pool.groups(); ++g) total += pool.group_weight(g);
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(StateEvolution, SemanticBranchConvergesWithSemanticSignature) {
  ExperimentConfig cfg;
  cfg.alpha = 4.0;
  TheorySettings ts;
  ts.se.grid_nodes = 5;
  ts.test_mc = 20000;
  const TheoryPoint tp = evaluate_theory(cfg, ts, BranchInit::semantic());
  ASSERT_TRUE(tp.converged) << tp.solve.report.message;
  EXPECT_EQ(tp.solve.report.label, BranchLabel::Semantic);
  EXPECT_NEAR(tp.solve.params.m[0], 0.0, 1e-6);
  EXPECT_GT(tp.solve.params.theta[0], 0.0);
  // Cauchy-Schwarz on the field covariance.
  EXPECT_LE(tp.solve.params.theta[0] * tp.solve.params.theta[0],
            tp.solve.params.q[0] * tp.solve.params.rho[0] * (1 + 1e-9));
}

TEST(StateEvolution, TheoryTestErrorMatchesFiniteSizeEstimateAtTheTeacher) {
  // At Q = Q*, the overlaps fully determine the test error of the field law. The encoding
  // contributes an O(|p|^2/d) term absent from the limit, so it is switched off here.
  ExperimentConfig cfg;
  cfg.d = 3000;
  cfg.pos_scale = 0.0;
  const TeacherSpec t = make_teacher(cfg, 4);
  const Mat p = positional_encoding(cfg);
  const SummaryStats st = measure_summary_stats(t.q_star, t, p, cfg.sigma);
  OrderParams op;
  for (int l = 0; l < 2; ++l) {
    op.q.push_back(st.q[l]);
    op.V.push_back(1.0);
    op.m.push_back(st.m_field[l]);
    op.theta.push_back(st.theta[l]);
    op.rho.push_back(st.rho[l]);
  }
  const SEProblem pb = se_problem(cfg);
  const Estimate th = theory_test_error(op, pb, 40000, 1);
  const Estimate em = empirical_test_mse(t.q_star, t, p, cfg.sigma, 4000, 1);
  EXPECT_NEAR(th.value, em.value, 5 * std::hypot(th.std_error, em.std_error) + 0.05 * em.value);
}

// ---------------------------------------------------------------------------
// Training and baseline
// ---------------------------------------------------------------------------

TEST(Erm, LinearBaselineRecoversTargetAtOmegaOne) {
  TeacherSpec t;
  t.omega = 1.0;
  t.A = default_positional_target();
  const LinearFit fit = linear_baseline_fit(t, 0.5, 20000, 3);
  EXPECT_LT((fit.W - t.A).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT(linear_baseline_mse(fit.W, t, 0.5, 20000, 3).value, 1e-8);
}

TEST(Erm, TrainingIsDeterministic) {
  ExperimentConfig cfg;
  cfg.d = 40;
  cfg.alpha = 1.0;
  const TeacherSpec t = make_teacher(cfg, 1);
  const Dataset ds = sample_dataset(cfg, t, 1);
  OptimizerConfig opt;
  opt.epochs = 50;
  const Mat p = positional_encoding(cfg);
  const TrainedModel a = train(ds, t, p, cfg.lambda, InitStrategy::random(), opt, 9, {64});
  const TrainedModel b = train(ds, t, p, cfg.lambda, InitStrategy::random(), opt, 9, {64});
  EXPECT_EQ((a.q_hat - b.q_hat).norm(), 0.0);
  EXPECT_LE(a.final_loss(), a.loss_trace.front());
}

TEST(Erm, ZeroEpochsKeepsInitialization) {
  ExperimentConfig cfg;
  cfg.d = 30;
  const TeacherSpec t = make_teacher(cfg, 2);
  const Dataset ds = sample_dataset(cfg, t, 2);
  OptimizerConfig opt;
  opt.epochs = 0;
  const Mat p = positional_encoding(cfg);
  const TrainedModel m = train(ds, t, p, cfg.lambda, InitStrategy::semantic(), opt, 0, {16});
  EXPECT_EQ((m.q_hat - t.q_star).norm(), 0.0);
}

TEST(Erm, OptimizerValidation) {
  OptimizerConfig o;
  o.learning_rate = -1.0;
  EXPECT_THROW(o.validate(), std::invalid_argument);
  o = OptimizerConfig{};
  o.epochs = -1;
  EXPECT_THROW(o.validate(), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Message passing
// ---------------------------------------------------------------------------

TEST(Gamp, RandomInitializationHasTokenVarianceOverlap) {
  ExperimentConfig cfg;
  cfg.d = 400;
  cfg.alpha = 1.0;
  const TeacherSpec t = make_teacher(cfg, 3);
  const Dataset ds = sample_dataset(cfg, t, 3);
  GampConfig g;
  g.max_iter = 1;
  g.seed = 3;
  const Mat p = positional_encoding(cfg);
  const GampResult r = gamp_run(ds, t, p, cfg.lambda, g);
  ASSERT_FALSE(r.report.trajectory.empty());
  EXPECT_NEAR(r.report.trajectory.front().q[0], cfg.sigma * cfg.sigma, 0.05);
}

TEST(Gamp, HeavyRegularizationDrivesEstimateToZero) {
  ExperimentConfig cfg;
  cfg.d = 100;
  cfg.alpha = 1.0;
  const TeacherSpec t = make_teacher(cfg, 5);
  const Dataset ds = sample_dataset(cfg, t, 5);
  GampConfig g;
  g.max_iter = 50;
  const Mat p = positional_encoding(cfg);
  const GampResult r = gamp_run(ds, t, p, 1e6, g);
  EXPECT_LT(r.q_hat.norm() / std::sqrt(100.0), 1e-4);
}

TEST(Gamp, RejectsNonPositiveLambda) {
  ExperimentConfig cfg;
  cfg.d = 20;
  const TeacherSpec t = make_teacher(cfg, 1);
  const Dataset ds = sample_dataset(cfg, t, 1);
  EXPECT_THROW(gamp_run(ds, t, positional_encoding(cfg), 0.0, GampConfig{}), std::invalid_argument);
}
