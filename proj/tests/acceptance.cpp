// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <CLI11.hpp>

#include "qpproj/baselines.hpp"
#include "qpproj/datasets.hpp"
#include "qpproj/eval.hpp"
#include "qpproj/theory.hpp"
#include "qpproj/training.hpp"
#include "test_util.hpp"

#ifndef QPPROJ_CLI_PATH
#define QPPROJ_CLI_PATH "qpproj"
#endif

namespace fs = std::filesystem;
using namespace qpproj;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

double elapsed(std::chrono::steady_clock::time_point t0) { return detail::seconds_since(t0); }

int g_epochs = 100;
const std::vector<std::uint64_t> kSeeds{0, 1, 2};

DatasetSizes desk_sizes(Family f) {
  DatasetSizes s;
  switch (f) {
    case Family::Regression: s.N = 100; s.M = 20; s.T = 200; break;
    case Family::Portfolio: s.N = 100; break;
    case Family::Control: s.S = 10; s.V = 10; s.T = 5; break;
  }
  return s;
}

const std::vector<Family> kFamilies{Family::Regression, Family::Portfolio, Family::Control};

/// Desk-scale datasets and trained models, built on first use and shared across criteria.
struct Shared {
  std::map<std::pair<int, std::uint64_t>, Dataset> data;
  std::map<std::tuple<int, std::uint64_t, int>, ModelParams> models;
  FullSolveCache cache;

  const Dataset& dataset(Family f, std::uint64_t seed) {
    const auto key = std::make_pair(static_cast<int>(f), seed);
    auto it = data.find(key);
    if (it == data.end())
      it = data.emplace(key, generate_dataset(f, desk_sizes(f), SplitCounts{60, 20, 20}, 1000 * seed)).first;
    return it->second;
  }

  const ModelParams& model(Family f, std::uint64_t seed, int K) {
    const auto key = std::make_tuple(static_cast<int>(f), seed, K);
    auto it = models.find(key);
    if (it != models.end()) return it->second;
    const Dataset& ds = dataset(f, seed);
    TrainConfig c;
    c.K = K;
    c.seed = seed;
    c.max_epochs = g_epochs;
    c.record_timing = false;
    const auto t0 = std::chrono::steady_clock::now();
    auto [p, rep] = train(ds.train, ds.val, c, cache);
    std::printf("  trained %s seed %llu K=%d: best epoch %d, val loss %s (%.0f s)\n", to_string(f).c_str(),
                static_cast<unsigned long long>(seed), K, rep.best_epoch,
                num(rep.epochs[static_cast<std::size_t>(rep.best_epoch - 1)].val_loss).c_str(), elapsed(t0));
    std::fflush(stdout);
    return models.emplace(key, std::move(p)).first->second;
  }

  double mean_error(Method m, const Dataset& ds, int K, const MethodArtifacts& a, std::uint64_t seed) {
    EvalSettings s;
    s.record_timing = false;
    s.seed = seed;
    return qpproj::mean_error(evaluate_method(m, ds.test, ds.test_ids, K, a, cache, s));
  }
};

Shared& shared() {
  static Shared s;
  return s;
}

Outcome c1_solver_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  SplitMix64 rng(20240601);
  const SolverSettings s;
  double worst = 0.0;
  int kkt_bad = 0, unsolved = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = 1 + static_cast<Eigen::Index>(rng.below(6));
    const auto m = static_cast<Eigen::Index>(rng.below(9));
    const QpInstance inst = testing::random_pd_instance(rng, n, m);
    const SolveResult r = solve_qp(inst, s);
    if (!r.solved()) {
      ++unsolved;
      continue;
    }
    const auto oracle = testing::active_set_oracle(inst);
    worst = std::max(worst, oracle ? std::abs(r.objective - oracle->objective) : 1e300);
    const bool dual_ok = r.lambda_star.size() == 0 || r.lambda_star.minCoeff() >= -1e-10;
    if (!KktTolerances(inst, s).met(kkt_residuals(inst, r.y_star, r.lambda_star)) || !dual_ok) ++kkt_bad;
  }
  const double t = elapsed(t0);
  return {unsolved == 0 && worst <= 1e-6 && kkt_bad == 0 && t < 30.0,
          "max |u - u_oracle| " + num(worst) + ", KKT failures " + std::to_string(kkt_bad) + ", unsolved " +
              std::to_string(unsolved) + ", " + num(t) + " s"};
}

Outcome c2_envelope_gradient() {
  const auto t0 = std::chrono::steady_clock::now();
  SplitMix64 rng(77);
  int compared = 0, agreed = 0, explained = 0, unexplained = 0, unsolved = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto n = 3 + static_cast<Eigen::Index>(rng.below(6));
    const auto k = 1 + static_cast<Eigen::Index>(rng.below(3));
    const auto m = 2 + static_cast<Eigen::Index>(rng.below(7));
    const QpInstance inst = testing::random_pd_instance(rng, n, m);
    const auto chk = testing::envelope_fd_check(inst, testing::random_orthonormal(rng, n, k));
    unsolved += chk.base_solved ? 0 : 1;
    compared += chk.compared;
    agreed += chk.agreed;
    explained += chk.explained;
    unexplained += chk.unexplained;
  }
  const double t = elapsed(t0);
  return {unsolved == 0 && compared > 0 && agreed >= 0.95 * compared && unexplained == 0 && t < 120.0,
          std::to_string(agreed) + "/" + std::to_string(compared) + " entries agree, " + std::to_string(explained) +
              " mismatches at active-set changes, " + std::to_string(unexplained) + " unexplained, " + num(t) + " s"};
}

Outcome c3_theta_gradient() {
  const auto t0 = std::chrono::steady_clock::now();
  SplitMix64 rng(31);
  const QpInstance inst = testing::random_pd_instance(rng, 8, 6);
  const ModelParams p = init_params(4, 8, 2, 3, 8);
  const Vector g = testing::model_objective_grad(p, inst);
  double worst = 0.0;
  for (int dir = 0; dir < 20; ++dir) {
    Vector d(g.size());
    for (Eigen::Index i = 0; i < d.size(); ++i) d(i) = rng.normal();
    d.normalize();
    ModelParams pp = p, pm = p;
    const double h = 1e-5;
    pp.unflatten(p.flatten() + h * d);
    pm.unflatten(p.flatten() - h * d);
    const double fd = (testing::model_objective(pp, inst) - testing::model_objective(pm, inst)) / (2 * h);
    const double an = g.dot(d);
    worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-12}));
  }
  const double t = elapsed(t0);
  return {worst <= 1e-2 && t < 120.0, "max relative error " + num(worst) + " over 20 directions, " + num(t) + " s"};
}

Outcome c4_feasibility() {
  Shared& sh = shared();
  int checked = 0, bad = 0, unsolved = 0;
  double worst = 0.0;
  for (Family f : kFamilies) {
    const Dataset& ds = sh.dataset(f, 0);
    TrainConfig c;
    c.K = 10;
    c.max_epochs = std::max(10, g_epochs / 4);
    c.record_timing = false;
    const SharedProjection sp = sharedp_train(ds.train, ds.val, c, sh.cache).first;
    const PcaProjection pca = pca_train(ds.train, 10, sh.cache);
    std::vector<std::function<Matrix(const QpInstance&, std::size_t)>> gens{
        [&](const QpInstance& inst, std::size_t) { return forward(sh.model(f, 0, 10), inst).first.matrix(); },
        [&](const QpInstance& inst, std::size_t d) { return rand_projection(inst.n_vars(), 10, d).matrix(); },
        [&](const QpInstance&, std::size_t) { return pca.P.matrix(); },
        [&](const QpInstance&, std::size_t) { return sp.P; }};
    for (const auto& gen : gens) {
      for (std::size_t d = 0; d < ds.test.size(); ++d) {
        const ProjectedSolve ps = solve_projected(ds.test[d], gen(ds.test[d], d));
        if (!ps.solved) {
          ++unsolved;
          continue;
        }
        ++checked;
        worst = std::max(worst, ps.max_violation);
        bad += ps.max_violation <= 1e-6 ? 0 : 1;
      }
    }
  }
  return {bad == 0 && checked > 0,
          std::to_string(checked - bad) + "/" + std::to_string(checked) + " solved recoveries within 1e-6 (max violation " +
              num(worst) + "), " + std::to_string(unsolved) + " unsolved projected QPs"};
}

Outcome c5_identity() {
  Shared& sh = shared();
  double worst = 0.0;
  int n = 0;
  for (Family f : kFamilies) {
    const Dataset& ds = sh.dataset(f, 0);
    for (const auto& inst : ds.test) {
      const ProjectedSolve ps = solve_projected(inst, ProjectionMatrix::identity(inst.n_vars()).matrix());
      const bool ok = ps.solved && ps.feasible;
      worst = std::max(worst, scored_error(ok, ps.objective, sh.cache.get(inst).u_star, trivial_objective(inst)));
      ++n;
    }
  }
  return {worst <= 1e-6, "max relative error " + num(worst) + " over " + std::to_string(n) + " instances (3 families)"};
}

Outcome c6_quality() {
  Shared& sh = shared();
  double ours = 0.0, rnd = 0.0;
  std::string per_seed;
  for (std::uint64_t seed : kSeeds) {
    const Dataset& ds = sh.dataset(Family::Regression, seed);
    MethodArtifacts a;
    a.ours = sh.model(Family::Regression, seed, 10);
    const double o = sh.mean_error(Method::Ours, ds, 10, a, seed);
    const double r = sh.mean_error(Method::Rand, ds, 10, {}, seed);
    per_seed += " [seed " + std::to_string(seed) + ": " + num(o) + " vs " + num(r) + "]";
    ours += o / static_cast<double>(kSeeds.size());
    rnd += r / static_cast<double>(kSeeds.size());
  }
  return {ours < rnd && ours <= 0.5 * rnd, "Ours " + num(ours) + " vs Rand " + num(rnd) + per_seed};
}

Outcome c7_k_trend() {
  Shared& sh = shared();
  const Dataset& ds = sh.dataset(Family::Regression, 0);
  MethodArtifacts a5, a20;
  a5.ours = sh.model(Family::Regression, 0, 5);
  a20.ours = sh.model(Family::Regression, 0, 20);
  const double o5 = sh.mean_error(Method::Ours, ds, 5, a5, 0);
  const double o20 = sh.mean_error(Method::Ours, ds, 20, a20, 0);
  const double r5 = sh.mean_error(Method::Rand, ds, 5, {}, 0);
  const double r20 = sh.mean_error(Method::Rand, ds, 20, {}, 0);
  return {o20 <= o5 + 0.02 && r20 <= r5 + 0.02,
          "Ours K=5 " + num(o5) + " K=20 " + num(o20) + "; Rand K=5 " + num(r5) + " K=20 " + num(r20)};
}

Outcome c8_cross_dataset() {
  Shared& sh = shared();
  double mean[3][3] = {};
  for (std::uint64_t seed : kSeeds) {
    for (std::size_t i = 0; i < 3; ++i) {
      MethodArtifacts a;
      a.ours = sh.model(kFamilies[i], seed, 10);
      for (std::size_t j = 0; j < 3; ++j)
        mean[i][j] += sh.mean_error(Method::Ours, sh.dataset(kFamilies[j], seed), 10, a, seed) /
                      static_cast<double>(kSeeds.size());
    }
  }
  int wins = 0;
  std::string table;
  for (std::size_t j = 0; j < 3; ++j) {
    bool best = true;
    for (std::size_t i = 0; i < 3; ++i) best = best && (i == j || mean[j][j] <= mean[i][j]);
    wins += best ? 1 : 0;
  }
  for (std::size_t i = 0; i < 3; ++i) {
    table += " " + to_string(kFamilies[i]) + ":";
    for (std::size_t j = 0; j < 3; ++j) table += (i == j ? " [" + num(mean[i][j]) + "]" : " " + num(mean[i][j]));
  }
  return {wins >= 2, std::to_string(wins) + "/3 diagonal cells best; rows train, cols test:" + table};
}

Outcome c9_speedup() {
  DatasetSizes sz;
  sz.N = 500;
  sz.M = 50;
  sz.T = 1000;
  std::vector<QpInstance> set;
  std::vector<std::string> ids;
  for (int d = 0; d < 5; ++d) {
    set.push_back(gen_regression(sz.N, sz.M, sz.T, 9000 + static_cast<std::uint64_t>(d)));
    ids.push_back("r" + std::to_string(d));
  }
  FullSolveCache cache;
  EvalSettings s;
  s.repeats = 3;
  MethodArtifacts a;
  a.ours = init_params(0, 32, 4, 30, 32);
  auto med = [](const std::vector<EvalRecord>& recs) {
    std::vector<double> t;
    for (const auto& r : recs) t.push_back(r.total_time_s);
    return median(t);
  };
  const double ours = med(evaluate_method(Method::Ours, set, ids, 30, a, cache, s));
  const double full = med(evaluate_method(Method::Full, set, ids, 30, {}, cache, s));
  return {ours < full, "median total time Ours(K=30) " + num(ours) + " s vs Full " + num(full) + " s (N=500)"};
}

Outcome c10_elimination() {
  SplitMix64 rng(1010);
  double worst_obj = 0.0, worst_eq = 0.0;
  int unsolved = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto n = 2 + static_cast<Eigen::Index>(rng.below(29));
    Vector u0;
    const EqQpInstance e = portfolio_eq_instance(n, 7000 + static_cast<std::uint64_t>(trial), &u0);
    const SolveResult rd = solve_qp(eliminate_eq_doubling(e));
    const auto [ns, rec] = eliminate_eq_nullspace(e, u0);
    const SolveResult rn = solve_qp(ns);
    if (!rd.solved() || !rn.solved()) {
      ++unsolved;
      continue;
    }
    worst_obj = std::max(worst_obj, std::abs(rd.objective - (rn.objective + rec.constant)));
    const Vector un = rec.apply(rn.y_star);
    worst_eq = std::max({worst_eq, (e.A_E * un - e.b_E).lpNorm<Eigen::Infinity>(),
                         (e.A_E * rd.y_star - e.b_E).lpNorm<Eigen::Infinity>()});
  }
  return {unsolved == 0 && worst_obj <= 1e-5 && worst_eq <= 1e-6,
          "max |u_doubling - u_nullspace| " + num(worst_obj) + ", max equality residual " + num(worst_eq) + ", unsolved " +
              std::to_string(unsolved)};
}

Outcome c11_theory() {
  auto rel = [](double got, double want) { return std::abs(got - want) / std::abs(want); };
  AssumptionConstants k;
  k.N = 4;
  k.K = 2;
  k.Q0 = 1.0;
  k.c0 = 1.0;
  k.sigma_Q = 2.0;
  k.B = 3.0;
  const double Y = 1.0 + std::sqrt(13.0);
  const auto L = lipschitz_consts(k);
  AssumptionConstants z;
  const double worst = std::max({rel(y_max(k), Y), rel(L.c_prime, 8.0 * Y * Y + Y), rel(L.c, std::sqrt(8.0) * (8.0 * Y * Y + Y)),
                                 rel(gen_bound(0.01, 0.05, 100, 1.0, 50.0, 10.0),
                                     0.1 + 2.0 + std::sqrt(2.0 * std::log(40.0) / 100.0))});
  const bool zeros = y_max(z) == 0.0 && lipschitz_consts(z).c == 0.0;

  Shared& sh = shared();
  const ModelParams& p = sh.model(Family::Regression, 0, 10);
  std::vector<QpInstance> set;
  std::vector<std::string> ids;
  for (int d = 0; d < 50; ++d) {
    set.push_back(gen_regression(100, 20, 200, 5000 + static_cast<std::uint64_t>(d)));
    ids.push_back("r" + std::to_string(d));
  }
  const auto rep = validate_norm_bound(set, ids, [&](std::size_t d) { return forward(p, set[d]).first.matrix(); });
  return {worst <= 1e-12 && zeros && rep.violations == 0 && rep.checked == 50,
          "formula max relative deviation " + num(worst) + "; norm bound on 50 regression instances: " +
              std::to_string(rep.violations) + " violations, " + std::to_string(rep.skipped) + " skipped, min margin " +
              num(rep.min_margin())};
}

int run(const std::string& cmd) {
  const int rc = std::system((cmd + " > /dev/null 2>&1").c_str());
  return rc;
}

Outcome c12_determinism() {
  const fs::path root = fs::temp_directory_path() / ("qpproj_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  io::write_json(root / "train.json", json{{"K", 4}, {"H", 8}, {"L", 2}, {"H_g", 8}, {"max_epochs", 4}, {"batch_size", 4},
                                           {"learning_rate", 1e-2}, {"seed", 5}});
  const std::string cli = QPPROJ_CLI_PATH;
  std::vector<std::string> files{"train_report.csv", "model.json", "eval_ours.csv", "eval_rand.csv"};
  std::vector<std::map<std::string, std::string>> runs;
  for (int r = 0; r < 2; ++r) {
    const fs::path dir = root / ("run" + std::to_string(r));
    const std::string data = (dir / "data").string(), out = (dir / "out").string();
    const std::vector<std::string> cmds{
        cli + " --seed 11 --out " + data + " gen-data --family regression --N 20 --M 5 --train 12 --val 4 --test 6",
        cli + " --no-timing --config " + (root / "train.json").string() + " --out " + out + " train --data " + data,
        cli + " --no-timing --out " + out + " eval --method ours --data " + data + " --checkpoint " + out + "/model.json",
        cli + " --no-timing --seed 3 --out " + out + " eval --method rand --K 4 --data " + data};
    for (const auto& c : cmds)
      if (run(c) != 0) return {false, "command failed: " + c};
    std::map<std::string, std::string> contents;
    for (const auto& f : files) contents[f] = io::read_text(fs::path(out) / f);
    for (const auto& m : read_manifest(fs::path(data) / "manifest.json").files)
      contents["data/" + m.path] = io::read_text(fs::path(data) / m.path);
    runs.push_back(std::move(contents));
  }
  fs::remove_all(root);
  int differ = 0;
  for (const auto& [name, text] : runs[0]) differ += runs[1].count(name) && runs[1].at(name) == text ? 0 : 1;
  return {differ == 0 && runs[0].size() == runs[1].size(),
          std::to_string(runs[0].size() - static_cast<std::size_t>(differ)) + "/" + std::to_string(runs[0].size()) +
              " output files bit-identical across two CLI runs"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  app.add_option("--epochs", g_epochs, "Training epochs for the learned models (<= 200)")->check(CLI::Range(1, 200));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"solver oracle equivalence", c1_solver_oracle},
      {"envelope gradient vs finite differences", c2_envelope_gradient},
      {"end-to-end parameter gradient", c3_theta_gradient},
      {"feasibility of projected recoveries", c4_feasibility},
      {"identity projection sanity", c5_identity},
      {"desk-scale quality ordering", c6_quality},
      {"K-monotonicity trend", c7_k_trend},
      {"cross-dataset diagonal", c8_cross_dataset},
      {"speedup direction", c9_speedup},
      {"equality-elimination round trip", c10_elimination},
      {"theory formulas and norm bound", c11_theory},
      {"CLI determinism", c12_determinism},
  };
  const std::set<int> wanted(only.begin(), only.end());
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!wanted.empty() && !wanted.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::printf("%s criterion %d (%s): %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(),
                o.detail.c_str(), elapsed(t0));
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
