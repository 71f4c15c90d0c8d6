#pragma once

// Relative error, projected solves, and a cache of full-problem optima.

#include <algorithm>
#include <cmath>
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "qpproj/common.hpp"
#include "qpproj/io.hpp"
#include "qpproj/qp.hpp"
#include "qpproj/solver.hpp"

namespace qpproj {

/// (û − u*) / (u0 − u*). Requires u0 > u*.
inline double relative_error(double u_hat, double u_star, double u0) {
  if (!(u0 > u_star)) throw InvalidInput("relative_error: degenerate denominator (u0 <= u*)");
  return (u_hat - u_star) / (u0 - u_star);
}

/// Objective of the trivial point x = 0.
inline double trivial_objective(const QpInstance& inst) { return inst.constant(); }

struct ProjectedSolve {
  SolveResult result;
  /// Recovered point P y* (empty unless the reduced problem was solved).
  Vector x;
  bool solved = false;
  /// Recomputed from x against the original constraints.
  bool feasible = false;
  double objective = 0.0;
  double max_violation = 0.0;
};

inline ProjectedSolve solve_projected(const QpInstance& inst, const Matrix& P, const SolverSettings& settings = {}) {
  ProjectedSolve out;
  out.result = solve_qp(project(inst, P), settings);
  out.solved = out.result.solved();
  if (!out.solved) return out;
  out.x = recover(P, out.result.y_star);
  out.max_violation = max_violation(inst, out.x);
  out.feasible = out.max_violation <= feasibility_tol(inst);
  out.objective = objective(inst, out.x);
  return out;
}

/// Relative error of a candidate point; failures (unsolved or infeasible) score exactly 1.
/// Solver round-off below u* is clipped to 0. When x = 0 is itself optimal the
/// ratio is undefined and the point scores 0 if it attains u*, else 1.
inline double scored_error(bool ok, double u_hat, double u_star, double u0) {
  if (!ok) return 1.0;
  const double tol = 1e-9 * (1.0 + std::abs(u_star));
  if (u0 - u_star <= tol) return u_hat <= u_star + tol ? 0.0 : 1.0;
  return std::max(0.0, relative_error(u_hat, u_star, u0));
}

struct FullSolution {
  double u_star = 0.0;
  Vector x_star;
};

/// Full-problem optima keyed by instance hash, optionally persisted as JSON.
class FullSolveCache {
 public:
  FullSolveCache() = default;
  explicit FullSolveCache(std::filesystem::path path, SolverSettings settings = {})
      : path_(std::move(path)), settings_(settings) {
    if (!path_.empty() && std::filesystem::exists(path_)) load();
  }

  void set_settings(const SolverSettings& s) { settings_ = s; }

  /// Solves on first use; throws InvalidInput if the full problem cannot be solved.
  FullSolution get(const QpInstance& inst) {
    const std::uint64_t h = instance_hash(inst);
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto it = entries_.find(h);
      if (it != entries_.end() && it->second.x_star.size() == inst.n_vars()) return it->second;
    }
    const SolveResult r = solve_full(inst, settings_);
    if (!r.solved()) throw InvalidInput(std::string("full solve failed: ") + to_string(r.status) + " " + r.message);
    FullSolution s{r.objective, r.y_star};
    std::lock_guard<std::mutex> lock(mu_);
    entries_[h] = s;
    dirty_ = true;
    return s;
  }

  std::size_t size() const { return entries_.size(); }

  void save() {
    if (path_.empty() || !dirty_) return;
    json arr = json::array();
    for (const auto& [h, s] : entries_) {
      arr.push_back(json{{"hash", hex(h)}, {"u_star", s.u_star}, {"x_star", io::vector_to_json(s.x_star)}});
    }
    io::write_json(path_, json{{"entries", arr}});
    dirty_ = false;
  }

 private:
  static std::string hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
    return buf;
  }

  void load() {
    const json j = io::read_json(path_);
    try {
      for (const auto& e : j.at("entries")) {
        const std::uint64_t h = std::stoull(e.at("hash").get<std::string>(), nullptr, 16);
        entries_[h] = FullSolution{e.at("u_star").get<double>(), io::vector_from_json(e.at("x_star"), -1, "cache.x_star")};
      }
    } catch (const json::exception& e) {
      throw IoError("u* cache " + path_.string() + ": " + e.what());
    }
  }

  std::filesystem::path path_;
  SolverSettings settings_;
  std::map<std::uint64_t, FullSolution> entries_;
  std::mutex mu_;
  bool dirty_ = false;
};

}  // namespace qpproj
