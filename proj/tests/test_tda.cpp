#include <gtest/gtest.h>

#include <cmath>

#include <Eigen/Dense>

#include "test_util.hpp"
#include "tdaens/cg.hpp"
#include "tdaens/data.hpp"
#include "tdaens/errors.hpp"
#include "tdaens/models.hpp"
#include "tdaens/rng.hpp"
#include "tdaens/tda.hpp"
#include "tdaens/training.hpp"

using namespace tdaens;
using namespace tdaens::testing;

namespace {

Tensor2 gaussian(std::size_t r, std::size_t c, std::uint64_t seed) {
  Tensor2 t(r, c);
  for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = standard_normal(hash_key({seed, i}));
  return t;
}

FeaturePack random_pack(std::size_t ntr, std::size_t nte, std::size_t k, std::uint64_t seed, double lambda) {
  FeaturePack p;
  p.proj_dim = k;
  p.Phi = gaussian(ntr, k, seed);
  p.phi_test = gaussian(nte, k, seed + 1);
  p.Q.resize(ntr);
  for (std::size_t j = 0; j < ntr; ++j) p.Q[j] = uniform01(hash_key({seed, 99, j}));
  p.lambda = lambda;
  return p;
}

// Dense reference: Q .* (phi_test * pinv(Phi))', with the pseudo-inverse from
// an SVD rather than a Gram solve.
RowMatrix pinv_oracle(const FeaturePack& p) {
  const Eigen::MatrixXd Phi = p.Phi.mat();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(Phi, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd s = svd.singularValues();
  Eigen::VectorXd inv = s;
  for (Eigen::Index i = 0; i < s.size(); ++i) inv[i] = s[i] > 1e-12 * s[0] ? 1.0 / s[i] : 0.0;
  const Eigen::MatrixXd pinv = svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
  Eigen::MatrixXd term = (Eigen::MatrixXd(p.phi_test.mat()) * pinv).transpose();
  for (Eigen::Index j = 0; j < term.rows(); ++j) term.row(j) *= p.Q[static_cast<std::size_t>(j)];
  return term;
}

double rel(const RowMatrix& a, const Tensor2& b) { return (a - RowMatrix(b.mat())).norm() / a.norm(); }

struct LinearProblem {
  ModelSpec spec;
  ParamVector params;
  Dataset train, test;
};

LinearProblem logistic(std::uint64_t seed, std::size_t n = 40, std::size_t dim = 4) {
  LinearProblem lp;
  const Dataset all = gen_synthetic_classification(n + 10, dim, 2, 2.0, 0.1, seed);
  lp.train = all.slice(0, n);
  lp.test = all.slice(n, n + 10);
  lp.spec = build_linear(dim, 2);
  TrainConfig c;
  c.epochs = 30;
  c.seed = seed;
  lp.params = train_member(lp.spec, lp.train, c, 0).params;
  return lp;
}

}  // namespace

TEST(TrakSingle, MatchesPseudoInverseOracle) {
  const FeaturePack p = random_pack(100, 7, 20, 3, 0.0);
  EXPECT_LT(rel(pinv_oracle(p), trak_single(p).scores), 1e-8);
}

TEST(TrakSingle, LargeLambdaTendsToWeightedGradDot) {
  const FeaturePack p = random_pack(30, 4, 8, 5, 1e8);
  RowMatrix expect = (RowMatrix(p.phi_test.mat()) * RowMatrix(p.Phi.mat()).transpose()).transpose() / 1e8;
  for (Eigen::Index j = 0; j < expect.rows(); ++j) expect.row(j) *= p.Q[static_cast<std::size_t>(j)];
  EXPECT_LT(rel(expect, trak_single(p).scores), 1e-6);
}

TEST(TrakSingle, ZeroTestFeaturesGiveZeroColumn) {
  FeaturePack p = random_pack(20, 3, 5, 7, 1e-3);
  for (double& v : p.phi_test.row(1)) v = 0.0;
  const Tensor2 s = trak_single(p).scores;
  for (std::size_t j = 0; j < s.rows; ++j) EXPECT_EQ(s(j, 1), 0.0);
}

TEST(TrakSingle, SingularGramIsNumericError) {
  FeaturePack p = random_pack(3, 2, 6, 9, 0.0);
  EXPECT_THROW(trak_single(p), NumericError);
}

TEST(TrakAggregate, SinglePackEqualsTrakSingle) {
  const FeaturePack p = random_pack(25, 4, 6, 11, 1e-4);
  const FeaturePack packs[] = {p};
  EXPECT_EQ(trak_aggregate(packs), trak_single(p));
}

TEST(TrakAggregate, IdenticalPacksEqualSingle) {
  const FeaturePack p = random_pack(25, 4, 6, 12, 1e-4);
  const FeaturePack packs[] = {p, p};
  EXPECT_LT(rel_error(trak_aggregate(packs).scores, trak_single(p).scores), 1e-14);
}

TEST(TrakAggregate, TwoPackAverageOracle) {
  const FeaturePack a = random_pack(40, 5, 6, 13, 1e-3);
  const FeaturePack b = random_pack(40, 5, 6, 14, 2e-3);
  auto term = [](const FeaturePack& p) {
    const Eigen::MatrixXd Phi = p.Phi.mat();
    const Eigen::MatrixXd G = Phi.transpose() * Phi + p.lambda * Eigen::MatrixXd::Identity(Phi.cols(), Phi.cols());
    return Eigen::MatrixXd(Phi * G.inverse() * Eigen::MatrixXd(p.phi_test.mat()).transpose());
  };
  Eigen::MatrixXd expect = 0.5 * (term(a) + term(b));
  for (Eigen::Index j = 0; j < expect.rows(); ++j)
    expect.row(j) *= 0.5 * (a.Q[static_cast<std::size_t>(j)] + b.Q[static_cast<std::size_t>(j)]);
  const FeaturePack packs[] = {a, b};
  EXPECT_LT(rel(expect, trak_aggregate(packs).scores), 1e-10);
}

TEST(Projection, IdentityHookReturnsRawGradients) {
  const LinearProblem lp = logistic(1);
  ModelView v{&lp.spec, &lp.params};
  const Tensor2 raw = per_sample_grads(v, lp.train, OutputFnKind::Margin);
  const Tensor2 proj = project_grads(v, lp.train, OutputFnKind::Margin, {ProjectionKind::Identity, v.grad_dim()}, 5);
  EXPECT_EQ(raw, proj);
}

TEST(Projection, MatchesExplicitMatrixAndIsThreadInvariant) {
  const ModelSpec spec = build_mlp(6, {5}, 3, 0.1);
  const ParamVector p = initialize_params(spec, 2);
  const Dataset d = gen_synthetic_classification(30, 6, 3, 1.0, 0.0, 3);
  ModelView v{&spec, &p};
  const std::size_t k = 70;
  const Tensor2 g = per_sample_grads(v, d, OutputFnKind::Loss);
  RowMatrix P(g.cols, k);
  for (std::size_t i = 0; i < g.cols; ++i)
    for (std::size_t c = 0; c < k; ++c) P(i, c) = projection_entry(77, i, c, k);
  const RowMatrix expect = RowMatrix(g.mat()) * P;
  const Tensor2 one = project_grads(v, d, OutputFnKind::Loss, {ProjectionKind::Gaussian, k}, 77, 1);
  const Tensor2 four = project_grads(v, d, OutputFnKind::Loss, {ProjectionKind::Gaussian, k}, 77, 4);
  EXPECT_LT(rel(expect, one), 1e-12);
  EXPECT_EQ(one, four);
}

TEST(Projection, PreservesSquaredNormInExpectation) {
  const std::size_t p = 50, k = 64, draws = 1000;
  double mean = 0;
  for (std::size_t d = 0; d < draws; ++d) {
    std::vector<double> g(p);
    for (std::size_t i = 0; i < p; ++i) g[i] = standard_normal(hash_key({4242, d, i}));
    const double n = norm2(g);
    for (double& x : g) x /= n;
    double sq = 0;
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0;
      for (std::size_t i = 0; i < p; ++i) s += projection_entry(1000 + d, i, c, k) * g[i];
      sq += s * s;
    }
    mean += sq / draws;
  }
  EXPECT_NEAR(mean, 1.0, 0.05);
}

TEST(ComputeQ, CertainPredictionGivesZero) {
  const ModelSpec spec = build_linear(1, 2);
  ParamVector p = initialize_params(spec, 0);
  p.data.assign({1000.0, -1000.0, 0.0, 0.0});
  Dataset d;
  d.inputs = Tensor2::from_rows({{1.0}});
  d.targets = {0};
  d.num_classes = 2;
  const auto q = compute_q({&spec, &p}, d);
  EXPECT_EQ(q[0], 0.0);
}

TEST(ComputeQ, UniformPredictorGivesNineTenths) {
  const ModelSpec spec = build_linear(3, 10);
  ParamVector p = initialize_params(spec, 0);
  std::fill(p.data.begin(), p.data.end(), 0.0);
  const Dataset d = gen_synthetic_classification(20, 3, 10, 1.0, 0.0, 1);
  for (double q : compute_q({&spec, &p}, d)) EXPECT_NEAR(q, 0.9, 1e-15);
}

TEST(ComputeQ, UntrainedBinaryModelNearChance) {
  double mean = 0;
  for (std::uint64_t s = 0; s < 3; ++s) {
    const ModelSpec spec = build_mlp(5, {16}, 2, 0.1);
    const ParamVector p = initialize_params(spec, s);
    const Dataset d = gen_synthetic_classification(200, 5, 2, 2.0, 0.0, s);
    for (double q : compute_q({&spec, &p}, d)) mean += q / 600;
  }
  EXPECT_GE(mean, 0.4);
  EXPECT_LE(mean, 0.6);
}

TEST(ConjugateGradient, DiagonalClosedForm) {
  const LinearOperator A = [](std::span<const double> x, std::span<double> y) {
    y[0] = 2 * x[0];
    y[1] = 4 * x[1];
  };
  const std::vector<double> b{2, 4};
  const CgResult r = conjugate_gradient(A, b, 10, 1e-12);
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(r.x[0], 1.0, 1e-14);
  EXPECT_NEAR(r.x[1], 1.0, 1e-14);
}

TEST(ConjugateGradient, ResidualBoundHolds) {
  const std::size_t n = 30;
  const Tensor2 M = gaussian(n, n, 21);
  const RowMatrix S = RowMatrix(M.mat()).transpose() * RowMatrix(M.mat()) + 0.1 * RowMatrix::Identity(n, n);
  const LinearOperator A = [&](std::span<const double> x, std::span<double> y) {
    Eigen::Map<Eigen::VectorXd>(y.data(), y.size()) = S * Eigen::Map<const Eigen::VectorXd>(x.data(), x.size());
  };
  std::vector<double> b(n);
  for (std::size_t i = 0; i < n; ++i) b[i] = standard_normal(hash_key({5, i}));
  for (double tol : {1e-3, 1e-6, 1e-9}) {
    const CgResult r = conjugate_gradient(A, b, 500, tol);
    ASSERT_TRUE(r.converged);
    std::vector<double> Ax(n);
    A(r.x, Ax);
    for (std::size_t i = 0; i < n; ++i) Ax[i] -= b[i];
    EXPECT_LE(norm2(Ax), tol * norm2(b));
  }
}

TEST(ConjugateGradient, NegativeCurvatureIsNumericError) {
  const LinearOperator A = [](std::span<const double> x, std::span<double> y) {
    y[0] = -x[0];
    y[1] = x[1];
  };
  const std::vector<double> b{1, 1};
  EXPECT_THROW(conjugate_gradient(A, b, 10, 1e-10), NumericError);
}

TEST(ConjugateGradient, IdentityReturnsRhs) {
  const LinearOperator A = [](std::span<const double> x, std::span<double> y) { std::copy(x.begin(), x.end(), y.begin()); };
  const std::vector<double> b{3, -1, 2};
  const CgResult r = conjugate_gradient(A, b, 10, 1e-12);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(r.x[i], b[i]);
}

TEST(InfluenceCg, MatchesDenseGaussNewtonSolve) {
  const LinearProblem lp = logistic(4);
  ModelView v{&lp.spec, &lp.params};
  InfluenceConfig cfg;
  cfg.damping = 1e-2;
  cfg.tol = 1e-12;
  cfg.max_iters = 500;
  const AttributionMatrix got = influence_cg(v, lp.train, lp.test, cfg);

  // Explicit Gauss-Newton matrix of the mean cross-entropy of a linear softmax
  // model: (1/n) sum (diag(p) - p p') kron [x;1][x;1]', in W-then-b layout.
  const std::size_t d = lp.train.inputs.cols, C = 2, P = C * d + C;
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(P, P);
  const Tensor2 logits = forward(lp.spec, lp.params, lp.train.inputs);
  auto index = [&](std::size_t c, std::size_t j) { return j < d ? c * d + j : C * d + c; };
  for (std::size_t s = 0; s < lp.train.size(); ++s) {
    const double m = std::max(logits(s, 0), logits(s, 1));
    const double e0 = std::exp(logits(s, 0) - m), e1 = std::exp(logits(s, 1) - m);
    const double p[2] = {e0 / (e0 + e1), e1 / (e0 + e1)};
    std::vector<double> x(lp.train.inputs.row(s).begin(), lp.train.inputs.row(s).end());
    x.push_back(1.0);
    for (std::size_t a = 0; a < C; ++a)
      for (std::size_t b = 0; b < C; ++b) {
        const double h = (a == b ? p[a] : 0.0) - p[a] * p[b];
        for (std::size_t i = 0; i <= d; ++i)
          for (std::size_t j = 0; j <= d; ++j) H(index(a, i), index(b, j)) += h * x[i] * x[j] / lp.train.size();
      }
  }
  H += cfg.damping * Eigen::MatrixXd::Identity(P, P);
  const Tensor2 gtr = per_sample_grads(v, lp.train, OutputFnKind::Margin);
  const Tensor2 gte = per_sample_grads(v, lp.test, OutputFnKind::Margin);
  const Eigen::MatrixXd expect =
      Eigen::MatrixXd(gtr.mat()) * H.ldlt().solve(Eigen::MatrixXd(gte.mat()).transpose());
  EXPECT_LT((expect - Eigen::MatrixXd(got.scores.mat())).norm() / expect.norm(), 1e-8);
  EXPECT_EQ(got.flags.count("cg_not_converged"), 0u);
}

TEST(InfluenceCg, HugeDampingApproachesScaledGradDot) {
  const LinearProblem lp = logistic(5);
  ModelView v{&lp.spec, &lp.params};
  InfluenceConfig cfg;
  cfg.damping = 1e8;
  cfg.tol = 1e-12;
  Tensor2 scaled = influence_cg(v, lp.train, lp.test, cfg).scores;
  for (double& s : scaled.data) s *= cfg.damping;
  EXPECT_LT(rel_error(scaled, grad_dot(v, lp.train, lp.test, OutputFnKind::Margin).scores), 1e-6);
}

TEST(InfluenceCg, NonConvergenceIsFlagged) {
  const LinearProblem lp = logistic(6);
  ModelView v{&lp.spec, &lp.params};
  InfluenceConfig cfg;
  cfg.damping = 1e-6;
  cfg.tol = 1e-15;
  cfg.max_iters = 1;
  const AttributionMatrix m = influence_cg(v, lp.train, lp.test, cfg);
  EXPECT_GT(m.flags.at("cg_not_converged"), 0u);
  EXPECT_TRUE(m.scores.all_finite());
}

TEST(InfluenceCg, ThreadCountDoesNotChangeBits) {
  const LinearProblem lp = logistic(7);
  ModelView v{&lp.spec, &lp.params};
  EXPECT_EQ(influence_cg(v, lp.train, lp.test, {}, 1), influence_cg(v, lp.train, lp.test, {}, 3));
}

TEST(GradDot, HandArithmetic) {
  EXPECT_EQ(grad_dot_from(Tensor2::from_rows({{1, 2}}), Tensor2::from_rows({{3, 4}})).scores(0, 0), 11.0);
  EXPECT_EQ(grad_dot_from(Tensor2::from_rows({{1, 0}}), Tensor2::from_rows({{0, 5}})).scores(0, 0), 0.0);
}

TEST(GradCos, HandArithmetic) {
  const double s = grad_cos_from(Tensor2::from_rows({{1, 2}}), Tensor2::from_rows({{3, 4}})).scores(0, 0);
  EXPECT_NEAR(s, 11.0 / (std::sqrt(5.0) * 5.0), 1e-15);
  EXPECT_NEAR(s, 0.98387, 1e-5);
  EXPECT_DOUBLE_EQ(grad_cos_from(Tensor2::from_rows({{1, 2}}), Tensor2::from_rows({{2, 4}})).scores(0, 0), 1.0);
}

TEST(GradCos, ScaleInvariantAndBounded) {
  const Tensor2 a = gaussian(12, 5, 1), b = gaussian(4, 5, 2);
  Tensor2 a10 = a;
  for (double& x : a10.data) x *= 10;
  const Tensor2 s = grad_cos_from(a, b).scores;
  EXPECT_LT(rel_error(s, grad_cos_from(a10, b).scores), 1e-15);
  for (double x : s.data) {
    EXPECT_LE(x, 1.0);
    EXPECT_GE(x, -1.0);
  }
}

TEST(GradCos, ZeroNormEntriesAreFlagged) {
  const AttributionMatrix m = grad_cos_from(Tensor2::from_rows({{0, 0}, {1, 1}}), Tensor2::from_rows({{3, 4}}));
  EXPECT_EQ(m.scores(0, 0), 0.0);
  EXPECT_GT(m.flags.at("zero_norm_gradient_entries"), 0u);
}

TEST(GradMethods, ModelPathMatchesExplicitGradients) {
  const LinearProblem lp = logistic(8);
  ModelView v{&lp.spec, &lp.params};
  const Tensor2 gtr = per_sample_grads(v, lp.train, OutputFnKind::Loss);
  const Tensor2 gte = per_sample_grads(v, lp.test, OutputFnKind::Loss);
  EXPECT_LT(rel_error(grad_dot(v, lp.train, lp.test, OutputFnKind::Loss, 2).scores, grad_dot_from(gtr, gte).scores),
            1e-14);
  EXPECT_LT(rel_error(grad_cos(v, lp.train, lp.test, OutputFnKind::Loss, 2).scores, grad_cos_from(gtr, gte).scores),
            1e-14);
  CostLedger l;
  grad_dot(v, lp.train, lp.test, OutputFnKind::Loss, 1, &l);
  EXPECT_EQ(l.serve_backward, lp.train.size() + lp.test.size());
}

TEST(BuildFeaturePack, DefaultLambdaAndDeterminism) {
  const LinearProblem lp = logistic(9);
  ModelView v{&lp.spec, &lp.params};
  TrakConfig cfg;
  cfg.projection.dim = 16;
  CostLedger l;
  const FeaturePack a = build_feature_pack(v, lp.train, lp.test, cfg, 3, 1, &l);
  const FeaturePack b = build_feature_pack(v, lp.train, lp.test, cfg, 3, 2);
  EXPECT_EQ(a, b);
  double tr = 0;
  for (double x : a.Phi.data) tr += x * x;
  EXPECT_DOUBLE_EQ(a.lambda, 1e-6 * tr / 16);
  for (double q : a.Q) EXPECT_TRUE(q >= 0 && q <= 1);
  EXPECT_EQ(l.serve_backward, lp.train.size() + lp.test.size());
  EXPECT_EQ(l.serve_forward, lp.train.size());
  EXPECT_NE(build_feature_pack(v, lp.train, lp.test, cfg, 4).Phi, a.Phi);
}
