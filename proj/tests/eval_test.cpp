#include "qpproj/eval.hpp"

#include <gtest/gtest.h>

#include "qpproj/datasets.hpp"
#include "qpproj/experiment.hpp"
#include "test_util.hpp"

namespace qpproj {
namespace {

std::vector<std::string> ids_for(std::size_t n) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back("inst" + std::to_string(i));
  return ids;
}

std::vector<QpInstance> regression_set(int count, Eigen::Index N, std::uint64_t base) {
  std::vector<QpInstance> out;
  for (int d = 0; d < count; ++d) out.push_back(gen_regression(N, 3, 2 * N, base + static_cast<std::uint64_t>(d)));
  return out;
}

EvalSettings untimed() {
  EvalSettings s;
  s.record_timing = false;
  return s;
}

TEST(RelativeErrorTest, Examples) {
  EXPECT_EQ(relative_error(-1.0, -1.0, 0.0), 0.0);
  EXPECT_EQ(relative_error(0.0, -1.0, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(relative_error(-0.5, -1.0, 0.0), 0.5);
  EXPECT_THROW(relative_error(-1.0, -1.0, -1.0), InvalidInput);
}

TEST(EvaluateMethodTest, FullScoresZero) {
  const auto set = regression_set(4, 10, 0);
  FullSolveCache cache;
  const auto recs = evaluate_method(Method::Full, set, ids_for(4), 0, {}, cache, untimed());
  ASSERT_EQ(recs.size(), 4u);
  for (const auto& r : recs) {
    EXPECT_EQ(r.relative_error, 0.0);
    EXPECT_TRUE(r.feasible);
    EXPECT_EQ(r.method, "full");
    EXPECT_EQ(r.total_time_s, 0.0);
  }
}

TEST(EvaluateMethodTest, IdentityProjectionIsExact) {
  const auto set = regression_set(4, 8, 10);
  FullSolveCache cache;
  // Rand with K = N selects every variable.
  const auto recs = evaluate_method(Method::Rand, set, ids_for(4), 8, {}, cache, untimed());
  for (const auto& r : recs) {
    EXPECT_TRUE(r.feasible);
    EXPECT_LE(r.relative_error, 1e-6);
  }
  MethodArtifacts a;
  a.sharedp = SharedProjection{Matrix::Identity(8, 8)};
  for (const auto& r : evaluate_method(Method::SharedP, set, ids_for(4), 8, a, cache, untimed()))
    EXPECT_LE(r.relative_error, 1e-6);
}

TEST(EvaluateMethodTest, RecordInvariants) {
  const auto set = regression_set(5, 12, 20);
  FullSolveCache cache;
  EvalSettings s;
  s.repeats = 3;
  for (Method m : {Method::Rand, Method::Full}) {
    for (const auto& r : evaluate_method(m, set, ids_for(5), 3, {}, cache, s)) {
      EXPECT_GE(r.relative_error, 0.0);
      EXPECT_EQ(r.total_time_s, r.projection_time_s + r.solve_time_s);
      EXPECT_GT(r.solve_time_s, 0.0);
      if (!r.feasible) {
        EXPECT_EQ(r.relative_error, 1.0);
      }
    }
  }
}

TEST(EvaluateMethodTest, InfeasibleDirectPredictionScoresOne) {
  // Box x ≤ 0.1 that the untrained direct head overshoots in at least one instance.
  const QpInstance inst(Matrix::Identity(3, 3), -Vector::Ones(3), Matrix::Identity(3, 3), Vector::Constant(3, 0.1));
  DirectModel m{init_params(0, 4, 1, 1, 4), 1.0};
  m.params.g3(0) = 5.0;
  MethodArtifacts a;
  a.direct = m;
  FullSolveCache cache;
  const auto recs = evaluate_method(Method::Direct, {inst}, {"box"}, 1, a, cache, untimed());
  EXPECT_FALSE(recs[0].feasible);
  EXPECT_EQ(recs[0].relative_error, 1.0);
}

TEST(EvaluateMethodTest, RejectsMissingArtifactsAndBadK) {
  const auto set = regression_set(2, 6, 30);
  FullSolveCache cache;
  EXPECT_THROW(evaluate_method(Method::Ours, set, ids_for(2), 2, {}, cache), ConfigError);
  MethodArtifacts a;
  a.ours = init_params(0, 4, 1, 3, 4);
  EXPECT_THROW(evaluate_method(Method::Ours, set, ids_for(2), 2, a, cache), ConfigError);
  EXPECT_THROW(evaluate_method(Method::Rand, set, ids_for(2), 7, {}, cache), DimensionError);
  EXPECT_THROW(evaluate_method(Method::Rand, set, ids_for(1), 2, {}, cache), InvalidInput);
  EXPECT_THROW(method_from_string("random"), ConfigError);
}

TEST(EvaluateMethodTest, UntimedRunsAreBitIdentical) {
  const auto set = regression_set(4, 10, 40);
  MethodArtifacts a;
  a.ours = init_params(3, 4, 1, 3, 4);
  FullSolveCache c1, c2;
  EvalSettings s = untimed();
  const std::string one = records_to_csv(evaluate_method(Method::Ours, set, ids_for(4), 3, a, c1, s));
  s.threads = 3;
  const std::string two = records_to_csv(evaluate_method(Method::Ours, set, ids_for(4), 3, a, c2, s));
  EXPECT_EQ(one, two);
}

TEST(EvalCsvTest, RoundTripAndHeader) {
  EXPECT_EQ(records_to_csv({}), std::string(kEvalCsvHeader) + "\n");
  EXPECT_EQ(std::string(kEvalCsvHeader),
            "instance_id,method,K,relative_error,feasible,projection_time_s,solve_time_s,total_time_s,objective,u_star");
  EvalRecord r{"a", "rand", 4, 0.125, true, 1e-4, 2e-3, 1e-4 + 2e-3, -3.5, -4.0};
  EvalRecord f{"b", "rand", 4, 1.0, false, 0.0, 0.0, 0.0, std::numeric_limits<double>::quiet_NaN(), -1.0};
  const std::string csv = records_to_csv({r, f});
  const auto back = records_from_csv(csv);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(records_to_csv(back), csv);
  EXPECT_EQ(back[0].relative_error, 0.125);
  EXPECT_TRUE(std::isnan(back[1].objective));
}

TEST(SummaryTest, MeanAndStandardError) {
  const auto [m, se] = mean_stderr({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(m, 2.5);
  // sample std = sqrt(5/3), divided by sqrt(4)
  EXPECT_NEAR(se, std::sqrt(5.0 / 3.0) / 2.0, 1e-15);
  EXPECT_EQ(mean_stderr({7.0}).second, 0.0);
}

ExperimentRow row(const std::string& sweep, const std::string& param, const std::string& value, const std::string& tr,
                  const std::string& te, const std::string& method, int K, double err) {
  return ExperimentRow{sweep, param, value, tr, te, EvalRecord{"i", method, K, err, err < 1.0, 0, 0, 0, 0, -1}};
}

TEST(SummaryTest, RecomputedFromCsvAlone) {
  std::vector<ExperimentRow> rows;
  for (double e : {0.1, 0.3}) rows.push_back(row("ks", "K", "5", "regression", "regression", "rand", 5, e));
  for (double e : {0.05, 0.07}) rows.push_back(row("ks", "K", "20", "regression", "regression", "rand", 20, e));
  const auto direct = summarize(rows);
  const auto via_csv = summarize(experiment_rows_from_csv(experiment_rows_to_csv(rows)));
  EXPECT_EQ(summary_to_csv(direct), summary_to_csv(via_csv));
  ASSERT_EQ(direct.size(), 2u);
  EXPECT_DOUBLE_EQ(direct[0].mean_error, 0.2);
  const auto mono = k_monotonicity(direct);
  ASSERT_EQ(mono.size(), 1u);
  EXPECT_TRUE(mono[0].monotone);
  EXPECT_EQ(mono[0].K, (std::vector<int>{5, 20}));
}

TEST(SummaryTest, MonotoneDiagnosticFlagsClearIncrease) {
  std::vector<ExperimentRow> rows;
  for (double e : {0.10, 0.11}) rows.push_back(row("ks", "K", "5", "regression", "regression", "ours", 5, e));
  for (double e : {0.50, 0.51}) rows.push_back(row("ks", "K", "10", "regression", "regression", "ours", 10, e));
  EXPECT_FALSE(k_monotonicity(summarize(rows))[0].monotone);
}

TEST(SummaryTest, CrossMatrixIsThreeByThreeWithDiagonal) {
  const std::vector<std::string> fam{"regression", "portfolio", "control"};
  std::vector<ExperimentRow> rows;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      rows.push_back(row("cross", "cross", fam[i] + ">" + fam[j], fam[i], fam[j], "ours", 10,
                         i == j ? 0.1 : (j == 2 ? 0.05 : 0.4)));
  const auto mats = cross_matrices(summarize(rows));
  ASSERT_EQ(mats.size(), 1u);
  EXPECT_EQ(mats[0].families.size(), 3u);
  EXPECT_TRUE(mats[0].diagonal_best(0));
  EXPECT_TRUE(mats[0].diagonal_best(1));
  EXPECT_FALSE(mats[0].diagonal_best(2));
  EXPECT_EQ(mats[0].diagonal_wins(), 2);
  const std::string text = summary_text(summarize(rows), {});
  EXPECT_NE(text.find("[0.1 ± 0]*"), std::string::npos);
}

json tiny_spec(const json& methods) {
  return json{{"seed", 3},
              {"methods", methods},
              {"timing", false},
              {"train", {{"max_epochs", 2}, {"batch_size", 2}, {"H", 4}, {"L", 1}, {"H_g", 4}}},
              {"sweeps",
               json::array({json{{"name", "ks"},
                                 {"type", "K"},
                                 {"family", "regression"},
                                 {"sizes", {{"N", 8}, {"M", 2}}},
                                 {"counts", {{"train", 4}, {"val", 2}, {"test", 3}}},
                                 {"values", {2, 4}}}})}};
}

TEST(ExperimentTest, EmptyMethodListGivesHeaderOnlyCsv) {
  FullSolveCache cache;
  const auto res = run_experiment(experiment_spec_from_json(tiny_spec(json::array())), cache);
  EXPECT_TRUE(res.rows.empty());
  EXPECT_EQ(experiment_rows_to_csv(res.rows), std::string(kExperimentCsvPrefix) + kEvalCsvHeader + "\n");
}

TEST(ExperimentTest, SweepRowsAndDeterminism) {
  const ExperimentSpec spec = experiment_spec_from_json(tiny_spec({"rand", "pca", "ours", "full"}));
  FullSolveCache c1, c2;
  const auto a = run_experiment(spec, c1);
  const auto b = run_experiment(spec, c2);
  EXPECT_TRUE(a.notes.empty());
  EXPECT_EQ(a.rows.size(), 2u * 4u * 3u);
  EXPECT_EQ(experiment_rows_to_csv(a.rows), experiment_rows_to_csv(b.rows));
  for (const auto& r : a.rows)
    if (r.record.method == "full") {
      EXPECT_EQ(r.record.relative_error, 0.0);
    }
}

TEST(ExperimentTest, MissingCheckpointIsReportedPerCell) {
  json j = tiny_spec({"ours", "rand"});
  j["sweeps"][0]["checkpoints"] = {{"ours", "/nonexistent/ours_K{K}.json"}};
  FullSolveCache cache;
  const auto res = run_experiment(experiment_spec_from_json(j), cache);
  ASSERT_EQ(res.notes.size(), 2u);
  EXPECT_NE(res.notes[0].find("/nonexistent/ours_K2.json"), std::string::npos);
  EXPECT_NE(res.notes[1].find("/nonexistent/ours_K4.json"), std::string::npos);
  EXPECT_EQ(res.rows.size(), 2u * 3u);
}

TEST(ExperimentTest, RejectsBadSpecs) {
  json j = tiny_spec({"rand"});
  j["bogus"] = 1;
  EXPECT_THROW(experiment_spec_from_json(j), ConfigError);
  json k = tiny_spec({"nope"});
  EXPECT_THROW(experiment_spec_from_json(k), ConfigError);
  json m = tiny_spec({"rand"});
  m["sweeps"][0]["type"] = "M";
  m["sweeps"][0]["family"] = "portfolio";
  EXPECT_THROW(experiment_spec_from_json(m), ConfigError);
}

}  // namespace
}  // namespace qpproj
