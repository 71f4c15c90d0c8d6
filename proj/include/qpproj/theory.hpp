#pragma once

// Solution-norm bound, Lipschitz constants of u in P, the generalization
// bound, and an empirical check of the norm bound on projected optima.

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "qpproj/common.hpp"
#include "qpproj/io.hpp"
#include "qpproj/metrics.hpp"
#include "qpproj/qp.hpp"
#include "qpproj/solver.hpp"

namespace qpproj {

struct AssumptionConstants {
  double sigma_Q = 1.0;  // lower bound on the Hessian's smallest eigenvalue
  double sigma_P = 1.0;  // lower bound on P's smallest singular value
  double Q0 = 0.0;       // ℓ₁ bound on Q
  double c0 = 0.0;       // ℓ₁ bound on c
  double B = 0.0;        // bound on |objective|
  long long N = 1;
  long long K = 1;

  void validate() const {
    if (!(sigma_Q > 0) || !(sigma_P > 0)) throw ConfigError("theory: sigma_Q and sigma_P must be positive");
    if (!(Q0 >= 0) || !(c0 >= 0) || !(B >= 0)) throw ConfigError("theory: Q0, c0 and B must be nonnegative");
    if (!std::isfinite(Q0) || !std::isfinite(c0) || !std::isfinite(B) || !std::isfinite(sigma_Q))
      throw ConfigError("theory: constants must be finite");
    if (N < 1 || K < 1 || K > N) throw ConfigError("theory: need 1 <= K <= N");
  }
};

/// √N (c₀ + √(c₀² + 2σ_Q B)) / σ_Q
inline double y_max(const AssumptionConstants& k) {
  k.validate();
  return std::sqrt(static_cast<double>(k.N)) * (k.c0 + std::sqrt(k.c0 * k.c0 + 2.0 * k.sigma_Q * k.B)) / k.sigma_Q;
}

struct LipschitzConstants {
  double c_prime = 0.0;
  double c = 0.0;
};

/// C′ = Q₀·NK·Y² + c₀·Y, and C = √(NK)·C′ in the max norm.
inline LipschitzConstants lipschitz_consts(const AssumptionConstants& k) {
  const double Y = y_max(k);
  const double nk = static_cast<double>(k.N) * static_cast<double>(k.K);
  const double cp = k.Q0 * nk * Y * Y + k.c0 * Y;
  return {cp, std::sqrt(nk) * cp};
}

/// C·ε + √(8B² log N_cover / D) + √(2B² log(2/δ) / D)
inline double gen_bound(double epsilon, double delta, long long D, double B, double log_n_cover, double C) {
  if (!(epsilon >= 0) || !(delta > 0 && delta < 1) || D < 1 || !(B >= 0) || !(log_n_cover >= 0) || !(C >= 0))
    throw ConfigError("gen_bound: need epsilon >= 0, delta in (0,1), D >= 1 and nonnegative B, log N, C");
  const double d = static_cast<double>(D);
  return C * epsilon + std::sqrt(8.0 * B * B * log_n_cover / d) + std::sqrt(2.0 * B * B * std::log(2.0 / delta) / d);
}

inline json theory_json(const AssumptionConstants& k, double epsilon, double delta, long long D, double log_n_cover) {
  const double Y = y_max(k);
  const LipschitzConstants L = lipschitz_consts(k);
  return json{{"y_max", Y}, {"c_prime", L.c_prime}, {"c", L.c}, {"bound", gen_bound(epsilon, delta, D, k.B, log_n_cover, L.c)}};
}

struct NormBoundRow {
  std::string instance_id;
  bool checked = false;  // false when unsolved or the projected Hessian is singular
  double l1_norm = 0.0;
  double y_max = 0.0;
  double margin = 0.0;  // y_max − ‖y*‖₁; negative means violated
  double sigma = 0.0;
  double c0 = 0.0;
  double B = 0.0;
};

struct NormBoundReport {
  std::vector<NormBoundRow> rows;
  int checked = 0;
  int skipped = 0;
  int violations = 0;

  std::string to_csv() const {
    std::string out = "instance,l1_norm,y_max,margin\n";
    for (const auto& r : rows)
      if (r.checked) out += r.instance_id + "," + io::fmt(r.l1_norm) + "," + io::fmt(r.y_max) + "," + io::fmt(r.margin) + "\n";
    return out;
  }

  double min_margin() const {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& r : rows)
      if (r.checked) m = std::min(m, r.margin);
    return m;
  }
};

/// Per-instance constants: σ = λ_min(PᵀQP), c₀ = ‖Pᵀc‖₁, B = |½y*ᵀPᵀQPy* + cᵀPy*| (B_scale
/// multiplies B for falsification runs). The √ factor uses the dimension K of y.
inline NormBoundRow check_norm_bound(const QpInstance& inst, const Matrix& P, const std::string& id,
                                     const SolverSettings& settings = {}, double B_scale = 1.0) {
  NormBoundRow row;
  row.instance_id = id;
  const QpInstance proj = project(inst, P);
  const Eigen::SelfAdjointEigenSolver<Matrix> eig(proj.Q(), Eigen::EigenvaluesOnly);
  row.sigma = eig.eigenvalues().minCoeff();
  const double tiny = 1e-12 * std::max(1.0, eig.eigenvalues().cwiseAbs().maxCoeff());
  if (!(row.sigma > tiny)) return row;
  const SolveResult r = solve_qp(proj, settings);
  if (!r.solved()) return row;
  const Vector& y = r.y_star;
  row.c0 = proj.c().lpNorm<1>();
  row.B = B_scale * std::abs(0.5 * y.dot(proj.Q() * y) + proj.c().dot(y));
  AssumptionConstants k;
  k.sigma_Q = row.sigma;
  k.c0 = row.c0;
  k.B = row.B;
  k.N = k.K = P.cols();
  row.y_max = y_max(k);
  row.l1_norm = y.lpNorm<1>();
  row.margin = row.y_max - row.l1_norm;
  row.checked = true;
  return row;
}

/// Checks ‖y*‖₁ ≤ Y_max on each instance under the projection from `projection(d)`.
/// Violations are counted beyond a relative slack of 1e-6 for solver tolerance.
inline NormBoundReport validate_norm_bound(const std::vector<QpInstance>& set, const std::vector<std::string>& ids,
                                           const std::function<Matrix(std::size_t)>& projection,
                                           const SolverSettings& settings = {}, double B_scale = 1.0) {
  if (ids.size() != set.size()) throw InvalidInput("validate_norm_bound: one id per instance required");
  NormBoundReport rep;
  for (std::size_t d = 0; d < set.size(); ++d) {
    NormBoundRow row = check_norm_bound(set[d], projection(d), ids[d], settings, B_scale);
    if (row.checked) {
      ++rep.checked;
      if (row.margin < -1e-6 * std::max(1.0, row.y_max)) ++rep.violations;
    } else {
      ++rep.skipped;
    }
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

}  // namespace qpproj
