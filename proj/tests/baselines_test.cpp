#include "qpproj/baselines.hpp"

#include <set>

#include <gtest/gtest.h>

#include "qpproj/datasets.hpp"
#include "test_util.hpp"

namespace qpproj {
namespace {

TEST(RandProjectionTest, SelectionProperties) {
  const ProjectionMatrix P = rand_projection(10, 3, 0);
  std::set<Eigen::Index> rows;
  for (Eigen::Index j = 0; j < 3; ++j) {
    int nonzeros = 0;
    for (Eigen::Index i = 0; i < 10; ++i) {
      if (P.matrix()(i, j) != 0.0) {
        EXPECT_EQ(P.matrix()(i, j), 1.0);
        rows.insert(i);
        ++nonzeros;
      }
    }
    EXPECT_EQ(nonzeros, 1);
  }
  EXPECT_EQ(rows.size(), 3u);
  EXPECT_EQ(P.matrix(), rand_projection(10, 3, 0).matrix());
  EXPECT_NE(P.matrix(), rand_projection(10, 3, 1).matrix());
}

TEST(RandProjectionTest, FullSizeIsPermutation) {
  const Matrix P = rand_projection(6, 6, 4).matrix();
  EXPECT_EQ(P.colwise().sum(), Eigen::RowVectorXd::Ones(6));
  EXPECT_EQ(P.rowwise().sum(), Vector::Ones(6));
  EXPECT_THROW(rand_projection(3, 4, 0), DimensionError);
}

TEST(PcaProjectionTest, RankOneSolutions) {
  Vector v(4);
  v << 1.0, -2.0, 0.5, 3.0;
  Matrix S(5, 4);
  for (int d = 0; d < 5; ++d) S.row(d) = v.transpose();
  const PcaProjection p = pca_projection(S, 1);
  EXPECT_FALSE(p.padded);
  EXPECT_EQ(p.rank, 1);
  const Vector col = p.P.matrix().col(0);
  EXPECT_LE(std::min((col - v.normalized()).norm(), (col + v.normalized()).norm()), 1e-12);

  const PcaProjection q = pca_projection(S, 3);
  EXPECT_TRUE(q.padded);
  EXPECT_LE(ProjectionMatrix::orthonormality_error(q.P.matrix()), 1e-12);
}

// Unconstrained instances whose optima lie in a fixed 2-dimensional span.
TEST(PcaProjectionTest, SubspaceContainment) {
  SplitMix64 rng(3);
  const Matrix basis = testing::random_orthonormal(rng, 7, 2);
  auto make = [&](const Vector& coeff) {
    const Matrix G = testing::random_matrix(rng, 7, 7);
    const Matrix Q = G.transpose() * G + 0.1 * Matrix::Identity(7, 7);
    const Vector x = basis * coeff;
    // Loose box keeps x = 0 feasible and the optimum interior.
    Matrix A(14, 7);
    A << Matrix::Identity(7, 7), -Matrix::Identity(7, 7);
    return QpInstance(Q, -Q * x, A, Vector::Constant(14, 100.0));
  };
  Matrix S(6, 7);
  for (int d = 0; d < 6; ++d) S.row(d) = (basis * testing::random_vector(rng, 2)).transpose();
  const PcaProjection p = pca_projection(S, 2);
  EXPECT_EQ(p.rank, 2);
  for (int t = 0; t < 5; ++t) {
    const QpInstance inst = make(testing::random_vector(rng, 2));
    const double full = solve_full(inst).objective;
    const ProjectedSolve ps = solve_projected(inst, p.P.matrix());
    ASSERT_TRUE(ps.solved);
    EXPECT_NEAR(ps.objective, full, 1e-7);
  }
}

TEST(SharedProjectionTest, ZeroPaddingKeepsOrthonormality) {
  SplitMix64 rng(4);
  const SharedProjection s{testing::random_orthonormal(rng, 5, 2)};
  const ProjectionMatrix big = s.for_size(9);
  EXPECT_EQ(big.n(), 9);
  EXPECT_EQ(big.matrix().bottomRows(4).norm(), 0.0);
  EXPECT_EQ(big.matrix().topRows(5), s.P);
  const ProjectionMatrix small = s.for_size(4);
  EXPECT_LE(ProjectionMatrix::orthonormality_error(small.matrix()), 1e-12);
  EXPECT_THROW(s.for_size(1), DimensionError);
}

// Loose box around 0: every projection keeps a nontrivial feasible cone.
TEST(SharedProjectionTest, SingleInstanceImprovesOnRandomStart) {
  SplitMix64 rng(5);
  const Matrix G = testing::random_matrix(rng, 10, 10);
  Matrix A(20, 10);
  A << Matrix::Identity(10, 10), -Matrix::Identity(10, 10);
  const QpInstance inst(G.transpose() * G + 0.1 * Matrix::Identity(10, 10), testing::random_vector(rng, 10), A,
                        Vector::Constant(20, 100.0));
  TrainConfig c;
  c.K = 2;
  c.batch_size = 1;
  c.max_epochs = 150;
  c.learning_rate = 2e-2;
  FullSolveCache cache;
  const auto [sp, rep] = sharedp_train({inst}, {inst}, c, cache);
  EXPECT_LE(ProjectionMatrix::orthonormality_error(sp.P), 1e-10);
  const double learned = solve_projected(inst, sp.P).objective;
  const double start = solve_projected(inst, rand_projection(10, 2, c.seed).matrix()).objective;
  EXPECT_LT(learned, start - 1e-3);
  EXPECT_LT(rep.epochs[static_cast<std::size_t>(rep.best_epoch - 1)].val_loss, rep.epochs.front().val_loss);
}

TEST(SharedProjectionTest, RejectsMixedSizes) {
  TrainConfig c;
  c.K = 2;
  c.batch_size = 1;
  FullSolveCache cache;
  EXPECT_THROW(sharedp_train({gen_regression(5, 2, 10, 0), gen_regression(6, 2, 12, 1)}, {}, c, cache), DimensionError);
}

TEST(DirectLossTest, Examples) {
  const QpInstance inst(Matrix::Identity(1, 1), Vector::Zero(1), Matrix::Ones(1, 1), Vector::Zero(1));
  const Vector x = Vector::Constant(1, 2.0);
  EXPECT_DOUBLE_EQ(direct_loss(inst, x, x, 10.0), 20.0);
  const Vector xf = Vector::Constant(1, -1.0);
  EXPECT_EQ(direct_loss(inst, xf, xf, 10.0), 0.0);
}

TEST(DirectLossTest, ThetaGradientMatchesFiniteDifferences) {
  SplitMix64 rng(6);
  const QpInstance inst = testing::random_pd_instance(rng, 4, 3);
  const Vector x_star = testing::random_vector(rng, 4);
  ModelParams p = init_params(2, 3, 1, 1, 4);
  p.visit([&rng](const std::string&, auto& t, int, bool is_bias) {
    if (is_bias)
      for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-0.3, 0.3);
  });
  auto loss = [&](const ModelParams& q) { return direct_loss(inst, forward_raw(q, inst).first.col(0), x_star, 3.0); };
  const auto [raw, tape] = forward_raw(p, inst);
  Vector gx;
  direct_loss(inst, raw.col(0), x_star, 3.0, &gx);
  const Vector g = backward_raw(tape, p, gx).flatten();
  const Vector base = p.flatten();
  for (Eigen::Index i = 0; i < base.size(); ++i) {
    ModelParams pp = p, pm = p;
    Vector e = Vector::Zero(base.size());
    e(i) = 1e-5;
    pp.unflatten(base + e);
    pm.unflatten(base - e);
    const double fd = (loss(pp) - loss(pm)) / 2e-5;
    EXPECT_LE(std::abs(fd - g(i)), 1e-4 * std::max({std::abs(fd), std::abs(g(i)), 1e-6})) << "entry " << i;
  }
}

TEST(DirectTrainTest, SelectsPenaltyAndPredictsLengthN) {
  std::vector<QpInstance> tr, va;
  for (int d = 0; d < 6; ++d) tr.push_back(gen_regression(8, 2, 16, static_cast<std::uint64_t>(d)));
  for (int d = 0; d < 3; ++d) va.push_back(gen_regression(8, 2, 16, 50 + static_cast<std::uint64_t>(d)));
  TrainConfig c;
  c.H = 4;
  c.L = 1;
  c.Hg = 4;
  c.batch_size = 3;
  c.max_epochs = 3;
  FullSolveCache cache;
  const DirectTrainResult r = direct_train(tr, va, c, cache, {0.1, 10.0});
  ASSERT_EQ(r.lambda_val_loss.size(), 2u);
  EXPECT_TRUE(r.model.lambda_pen == 0.1 || r.model.lambda_pen == 10.0);
  EXPECT_EQ(r.model.params.K, 1);
  EXPECT_EQ(direct_predict(r.model, gen_regression(13, 2, 26, 9)).size(), 13);
  EXPECT_THROW(direct_train(tr, {}, c, cache), ConfigError);
}

TEST(BaselineArtifactTest, JsonRoundTrips) {
  SplitMix64 rng(7);
  const SharedProjection s{testing::random_orthonormal(rng, 6, 2)};
  EXPECT_EQ(shared_projection_from_json(json::parse(shared_projection_to_json(s).dump())).P, s.P);
  Matrix S = testing::random_matrix(rng, 4, 6);
  const PcaProjection p = pca_projection(S, 3);
  const PcaProjection q = pca_projection_from_json(json::parse(pca_projection_to_json(p).dump()));
  EXPECT_EQ(q.P.matrix(), p.P.matrix());
  EXPECT_EQ(q.rank, p.rank);
  const DirectModel m{init_params(1, 3, 1, 1, 3), 10.0};
  const DirectModel n = direct_model_from_json(json::parse(direct_model_to_json(m).dump()));
  EXPECT_EQ(n.lambda_pen, 10.0);
  EXPECT_EQ(n.params.flatten(), m.params.flatten());
  EXPECT_THROW(shared_projection_from_json(pca_projection_to_json(p)), IoError);
}

}  // namespace
}  // namespace qpproj
