#pragma once

// Per-instance evaluation of every method with timing, and the long-format
// CSV those records are written to.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "qpproj/baselines.hpp"
#include "qpproj/common.hpp"
#include "qpproj/gnn.hpp"
#include "qpproj/io.hpp"
#include "qpproj/metrics.hpp"
#include "qpproj/qp.hpp"
#include "qpproj/solver.hpp"
#include "qpproj/training.hpp"

namespace qpproj {

enum class Method { Ours, Rand, Pca, SharedP, Direct, Full };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::Ours: return "ours";
    case Method::Rand: return "rand";
    case Method::Pca: return "pca";
    case Method::SharedP: return "sharedp";
    case Method::Direct: return "direct";
    case Method::Full: return "full";
  }
  return "unknown";
}

inline Method method_from_string(const std::string& s) {
  for (Method m : {Method::Ours, Method::Rand, Method::Pca, Method::SharedP, Method::Direct, Method::Full})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown method '" + s + "' (expected ours|rand|pca|sharedp|direct|full)");
}

inline bool is_projection_method(Method m) { return m != Method::Direct && m != Method::Full; }

/// Methods whose evaluation needs a trained artifact.
inline bool is_learned(Method m) { return m == Method::Ours || m == Method::Pca || m == Method::SharedP || m == Method::Direct; }

struct EvalRecord {
  std::string instance_id;
  std::string method;
  int K = 0;
  double relative_error = 1.0;
  bool feasible = false;
  double projection_time_s = 0.0;
  double solve_time_s = 0.0;
  double total_time_s = 0.0;
  double objective = std::numeric_limits<double>::quiet_NaN();
  double u_star = 0.0;
};

inline constexpr const char* kEvalCsvHeader =
    "instance_id,method,K,relative_error,feasible,projection_time_s,solve_time_s,total_time_s,objective,u_star";

inline std::string eval_csv_fields(const EvalRecord& r) {
  return r.instance_id + "," + r.method + "," + std::to_string(r.K) + "," + io::fmt(r.relative_error) + "," +
         (r.feasible ? "1" : "0") + "," + io::fmt(r.projection_time_s) + "," + io::fmt(r.solve_time_s) + "," +
         io::fmt(r.total_time_s) + "," + io::fmt(r.objective) + "," + io::fmt(r.u_star);
}

inline std::string records_to_csv(const std::vector<EvalRecord>& records) {
  std::string out = std::string(kEvalCsvHeader) + "\n";
  for (const auto& r : records) out += eval_csv_fields(r) + "\n";
  return out;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s) {
  if (s == "nan" || s == "-nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw IoError("CSV: bad number '" + s + "'");
  }
  if (used != s.size()) throw IoError("CSV: bad number '" + s + "'");
  return v;
}

/// Parses the ten EvalRecord fields starting at `cells[first]`.
inline EvalRecord record_from_cells(const std::vector<std::string>& cells, std::size_t first) {
  if (cells.size() < first + 10) throw IoError("CSV: short row");
  EvalRecord r;
  r.instance_id = cells[first];
  r.method = cells[first + 1];
  r.K = static_cast<int>(parse_double(cells[first + 2]));
  r.relative_error = parse_double(cells[first + 3]);
  r.feasible = cells[first + 4] == "1";
  r.projection_time_s = parse_double(cells[first + 5]);
  r.solve_time_s = parse_double(cells[first + 6]);
  r.total_time_s = parse_double(cells[first + 7]);
  r.objective = parse_double(cells[first + 8]);
  r.u_star = parse_double(cells[first + 9]);
  return r;
}

}  // namespace detail

inline std::vector<EvalRecord> records_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kEvalCsvHeader) throw IoError("eval CSV: unexpected header");
  std::vector<EvalRecord> out;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(detail::record_from_cells(detail::split_csv_line(line), 0));
  return out;
}

/// Trained artifacts; only the one matching the evaluated method is read.
struct MethodArtifacts {
  std::optional<ModelParams> ours;
  std::optional<PcaProjection> pca;
  std::optional<SharedProjection> sharedp;
  std::optional<DirectModel> direct;
};

struct EvalSettings {
  SolverSettings solver;
  /// When false every time column is 0 and instances may run in parallel.
  bool record_timing = true;
  int repeats = 3;
  int threads = 1;
  /// Rand draws its selection for test instance d from seed + d.
  std::uint64_t seed = 0;
};

namespace detail {

/// Median wall time of `repeats` runs of f (0 and a single run when timing is off).
template <class F>
double timed(const EvalSettings& s, F&& f) {
  if (!s.record_timing) {
    f();
    return 0.0;
  }
  std::vector<double> t;
  for (int r = 0; r < std::max(s.repeats, 1); ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    t.push_back(seconds_since(t0));
  }
  std::sort(t.begin(), t.end());
  const std::size_t m = t.size() / 2;
  return t.size() % 2 ? t[m] : 0.5 * (t[m - 1] + t[m]);
}

inline void require_artifact(Method m, const MethodArtifacts& a) {
  const bool have = (m == Method::Ours && a.ours) || (m == Method::Pca && a.pca) || (m == Method::SharedP && a.sharedp) ||
                    (m == Method::Direct && a.direct) || !is_learned(m);
  if (!have) throw ConfigError("evaluate_method: method '" + to_string(m) + "' needs a trained artifact");
}

inline Matrix make_projection(Method m, const MethodArtifacts& a, const QpInstance& inst, int K, std::uint64_t seed) {
  switch (m) {
    case Method::Ours: return forward(*a.ours, inst).first.matrix();
    case Method::Rand: return rand_projection(inst.n_vars(), K, seed).matrix();
    case Method::Pca: return SharedProjection{a.pca->P.matrix()}.for_size(inst.n_vars()).matrix();
    case Method::SharedP: return a.sharedp->for_size(inst.n_vars()).matrix();
    default: break;
  }
  throw InvalidInput("make_projection: not a projection method");
}

/// Relative error of candidate x; feasibility is recomputed from x.
inline void score(EvalRecord& r, const QpInstance& inst, const Vector* x, double u_star) {
  r.u_star = u_star;
  r.feasible = x != nullptr && x->allFinite() && is_feasible(inst, *x);
  r.objective = x != nullptr && x->allFinite() ? objective(inst, *x) : std::numeric_limits<double>::quiet_NaN();
  r.relative_error = scored_error(r.feasible, r.objective, u_star, trivial_objective(inst));
}

}  // namespace detail

/// One record per test instance. u* comes from `cache` and is never timed.
inline std::vector<EvalRecord> evaluate_method(Method method, const std::vector<QpInstance>& test_set,
                                               const std::vector<std::string>& ids, int K,
                                               const MethodArtifacts& artifacts, FullSolveCache& cache,
                                               const EvalSettings& settings = {}) {
  if (ids.size() != test_set.size()) throw InvalidInput("evaluate_method: one id per instance required");
  detail::require_artifact(method, artifacts);
  if (method == Method::Ours && artifacts.ours->K != K)
    throw ConfigError("evaluate_method: model was trained for K = " + std::to_string(artifacts.ours->K));
  if (is_projection_method(method)) {
    if (method == Method::Pca) K = static_cast<int>(artifacts.pca->P.k());
    if (method == Method::SharedP) K = static_cast<int>(artifacts.sharedp->P.cols());
    for (const auto& inst : test_set)
      if (inst.n_vars() < K) throw DimensionError("evaluate_method: K exceeds an instance's variable count");
  }

  std::vector<double> u_star(test_set.size());
  detail::parallel_for(test_set.size(), settings.threads, [&](std::size_t d) { u_star[d] = cache.get(test_set[d]).u_star; });

  std::vector<EvalRecord> out(test_set.size());
  auto one = [&](std::size_t d) {
    const QpInstance& inst = test_set[d];
    EvalRecord& r = out[d];
    r.instance_id = ids[d];
    r.method = to_string(method);
    r.K = K;
    if (method == Method::Full) {
      SolveResult res;
      r.solve_time_s = detail::timed(settings, [&] { res = solve_full(inst, settings.solver); });
      detail::score(r, inst, res.solved() ? &res.y_star : nullptr, u_star[d]);
    } else if (method == Method::Direct) {
      Vector x;
      r.projection_time_s = detail::timed(settings, [&] { x = direct_predict(*artifacts.direct, inst); });
      detail::score(r, inst, &x, u_star[d]);
    } else {
      Matrix P;
      const std::uint64_t seed = settings.seed + d;
      r.projection_time_s = detail::timed(settings, [&] { P = detail::make_projection(method, artifacts, inst, K, seed); });
      ProjectedSolve ps;
      r.solve_time_s = detail::timed(settings, [&] { ps = solve_projected(inst, P, settings.solver); });
      detail::score(r, inst, ps.solved ? &ps.x : nullptr, u_star[d]);
    }
    r.total_time_s = r.projection_time_s + r.solve_time_s;
  };
  detail::parallel_for(test_set.size(), settings.record_timing ? 1 : settings.threads, one);
  return out;
}

inline std::pair<double, double> mean_stderr(const std::vector<double>& v) {
  if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  return {mean, sd / std::sqrt(static_cast<double>(v.size()))};
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

inline double mean_error(const std::vector<EvalRecord>& records) {
  std::vector<double> e;
  for (const auto& r : records) e.push_back(r.relative_error);
  return mean_stderr(e).first;
}

}  // namespace qpproj
