#pragma once

// Comparison methods: random variable selection, PCA of training optima, a
// single learned projection shared across instances, and a GNN that predicts
// the solution directly. The full solve is solve_full.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "qpproj/common.hpp"
#include "qpproj/gnn.hpp"
#include "qpproj/io.hpp"
#include "qpproj/metrics.hpp"
#include "qpproj/qp.hpp"
#include "qpproj/rng.hpp"
#include "qpproj/solver.hpp"
#include "qpproj/training.hpp"

namespace qpproj {

/// Columns of I_N at K distinct indices drawn uniformly (partial Fisher-Yates).
inline ProjectionMatrix rand_projection(Eigen::Index N, Eigen::Index K, std::uint64_t seed) {
  if (K < 1 || K > N) throw DimensionError("rand_projection: need 1 <= K <= N");
  SplitMix64 rng(seed);
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(N));
  std::iota(idx.begin(), idx.end(), 0);
  for (Eigen::Index k = 0; k < K; ++k) {
    const auto j = k + static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(N - k)));
    std::swap(idx[static_cast<std::size_t>(k)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(K));
  return ProjectionMatrix::selection(N, idx);
}

struct PcaProjection {
  ProjectionMatrix P;
  /// True when K exceeded the numerical rank and columns were completed arbitrarily.
  bool padded = false;
  Eigen::Index rank = 0;
};

namespace detail {

/// Extends orthonormal columns U (N×r) to N×K with a fixed orthonormal complement.
inline Matrix complete_basis(const Matrix& U, Eigen::Index K) {
  const auto n = U.rows();
  const auto r = U.cols();
  if (r >= K) return U.leftCols(K);
  SplitMix64 rng(0xC0FFEEULL);
  Matrix G(n, K);
  G.leftCols(r) = U;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = r; j < K; ++j) G(i, j) = rng.normal();
  // Gram-Schmidt the random columns against U and each other (twice for stability).
  for (Eigen::Index j = r; j < K; ++j) {
    for (int pass = 0; pass < 2; ++pass)
      for (Eigen::Index i = 0; i < j; ++i) G.col(j) -= G.col(i).dot(G.col(j)) * G.col(i);
    G.col(j).normalize();
  }
  return G;
}

}  // namespace detail

/// Top-K left singular vectors of the uncentered N×D solution matrix.
/// `solutions` holds one optimum per row (D×N).
inline PcaProjection pca_projection(const Matrix& solutions, Eigen::Index K) {
  if (solutions.rows() < 1) throw InvalidInput("pca_projection: need at least one solution");
  const auto n = solutions.cols();
  if (K < 1 || K > n) throw DimensionError("pca_projection: need 1 <= K <= N");
  const Matrix X = solutions.transpose();
  Eigen::JacobiSVD<Matrix> svd(X, Eigen::ComputeThinU);
  const Vector& s = svd.singularValues();
  Eigen::Index rank = 0;
  const double cutoff = s.size() > 0 ? 1e-10 * s(0) : 0.0;
  while (rank < s.size() && s(rank) > cutoff) ++rank;
  Matrix U = svd.matrixU().leftCols(std::min(rank, K));
  // Sign convention: the largest-magnitude entry of each column is positive.
  for (Eigen::Index j = 0; j < U.cols(); ++j) {
    Eigen::Index arg = 0;
    U.col(j).cwiseAbs().maxCoeff(&arg);
    if (U(arg, j) < 0) U.col(j) *= -1.0;
  }
  PcaProjection out;
  out.rank = rank;
  out.padded = rank < K;
  out.P = ProjectionMatrix(detail::complete_basis(U, K));
  return out;
}

/// PCA of the full-problem optima of a training set.
inline PcaProjection pca_train(const std::vector<QpInstance>& train_set, Eigen::Index K, FullSolveCache& cache) {
  if (train_set.empty()) throw ConfigError("pca_train: empty training set");
  const auto n = train_set.front().n_vars();
  Matrix S(static_cast<Eigen::Index>(train_set.size()), n);
  for (std::size_t d = 0; d < train_set.size(); ++d) {
    if (train_set[d].n_vars() != n) throw DimensionError("pca_train: instances differ in N");
    S.row(static_cast<Eigen::Index>(d)) = cache.get(train_set[d]).x_star.transpose();
  }
  return pca_projection(S, K);
}

/// One N_train×K matrix used for every instance.
struct SharedProjection {
  Matrix P;

  Eigen::Index n_train() const { return P.rows(); }

  /// Zero-padded to N rows when N ≥ N_train; for smaller N the first N rows are
  /// kept and re-orthogonalized.
  ProjectionMatrix for_size(Eigen::Index N) const {
    const auto k = P.cols();
    if (N < k) throw DimensionError("SharedProjection: K exceeds the instance size");
    if (N >= P.rows()) {
      Matrix out = Matrix::Zero(N, k);
      out.topRows(P.rows()) = P;
      return ProjectionMatrix(std::move(out));
    }
    Matrix Qf, Rf;
    detail::thin_qr(P.topRows(N), Qf, Rf);
    return ProjectionMatrix(std::move(Qf));
  }
};

namespace detail {

inline void require_same_n(const std::vector<QpInstance>& set, const char* what) {
  for (const auto& inst : set)
    if (inst.n_vars() != set.front().n_vars()) throw DimensionError(std::string(what) + ": instances differ in N");
}

/// Penalized relative-error loss of a fixed projection over a set.
inline double projection_validation_loss(const ProjectionMatrix& P, const std::vector<QpInstance>& set,
                                         const TrainConfig& config, FullSolveCache& cache,
                                         const SolverSettings& settings) {
  std::vector<double> errors(set.size());
  std::vector<char> failed(set.size(), 0);
  std::vector<double> u_star(set.size());
  for (std::size_t d = 0; d < set.size(); ++d) u_star[d] = cache.get(set[d]).u_star;
  parallel_for(set.size(), config.threads, [&](std::size_t d) {
    const ProjectedSolve ps = solve_projected(set[d], P.matrix(), settings);
    const bool ok = ps.solved && ps.feasible;
    errors[d] = scored_error(ok, ps.objective, u_star[d], trivial_objective(set[d]));
    failed[d] = ok ? 0 : 1;
  });
  return penalized_loss(errors, static_cast<int>(std::count(failed.begin(), failed.end(), 1)),
                        config.validation_penalty);
}

}  // namespace detail

/// Learns one projection by Adam on the envelope gradient, re-orthogonalizing
/// after every step. Starts from rand_projection(N, K, seed): a dense random
/// start typically admits only y = 0 under sign constraints, where the
/// envelope gradient vanishes.
inline std::pair<SharedProjection, TrainReport> sharedp_train(const std::vector<QpInstance>& train_set,
                                                              const std::vector<QpInstance>& val_set,
                                                              const TrainConfig& config, FullSolveCache& cache,
                                                              const SolverSettings& settings = {},
                                                              const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  detail::check_train_inputs(train_set, config, config.K);
  detail::require_same_n(train_set, "sharedp_train");
  const auto n = train_set.front().n_vars();
  const auto k = static_cast<Eigen::Index>(config.K);

  Matrix P = rand_projection(n, k, config.seed).matrix();
  Matrix R;
  SharedProjection best{P};

  Vector theta = Eigen::Map<const Vector>(P.data(), P.size());
  detail::LoopHooks hooks;
  hooks.step = [&](std::size_t d) {
    detail::StepOutcome out;
    const QpInstance& inst = train_set[d];
    out.objective = trivial_objective(inst);
    const ProjectedSolve ps = solve_projected(inst, P, settings);
    if (!ps.solved) return out;
    const Matrix g = envelope_grad(inst, P, ps.result);
    out.grad = Eigen::Map<const Vector>(g.data(), g.size());
    out.ok = ps.feasible;
    if (ps.feasible) out.objective = ps.objective;
    return out;
  };
  hooks.sync = [&](Vector& t) {
    detail::thin_qr(Eigen::Map<const Matrix>(t.data(), n, k), P, R);
    t = Eigen::Map<const Vector>(P.data(), P.size());
  };
  if (!val_set.empty()) {
    hooks.validate = [&] {
      return detail::projection_validation_loss(SharedProjection{P}.for_size(val_set.front().n_vars()), val_set,
                                                config, cache, settings);
    };
    detail::require_same_n(val_set, "sharedp_train (validation)");
  }
  hooks.keep_best = [&] { best.P = P; };
  TrainReport report = detail::run_training_loop(train_set.size(), theta, config, hooks, on_epoch);
  return {best, report};
}

struct DirectModel {
  ModelParams params;
  double lambda_pen = 1.0;
};

/// ‖x* − x‖² + λ‖max(Ax − b, 0)‖₂, with its gradient in x.
inline double direct_loss(const QpInstance& inst, const Vector& x, const Vector& x_star, double lambda_pen,
                          Vector* grad = nullptr) {
  detail::require_dim(x.size() == inst.n_vars() && x_star.size() == inst.n_vars(), "direct_loss: dimension mismatch");
  const Vector r = (inst.A() * x - inst.b()).cwiseMax(0.0);
  const double rn = r.norm();
  const Vector diff = x - x_star;
  if (grad) {
    *grad = 2.0 * diff;
    if (rn > 0.0) *grad += lambda_pen * inst.A().transpose() * (r / rn);
  }
  return diff.squaredNorm() + lambda_pen * rn;
}

inline Vector direct_predict(const DirectModel& model, const QpInstance& inst) {
  return forward_raw(model.params, inst).first.col(0);
}

/// Candidate scored as-is: infeasible predictions are failures.
inline InstanceOutcome direct_evaluate(const DirectModel& model, const QpInstance& inst, double u_star) {
  const Vector x = direct_predict(model, inst);
  const bool ok = x.allFinite() && is_feasible(inst, x);
  return {ok, scored_error(ok, ok ? objective(inst, x) : 0.0, u_star, trivial_objective(inst))};
}

inline double direct_validation_loss(const DirectModel& model, const std::vector<QpInstance>& set,
                                     const TrainConfig& config, FullSolveCache& cache) {
  std::vector<double> errors(set.size());
  int failures = 0;
  for (std::size_t d = 0; d < set.size(); ++d) {
    const InstanceOutcome o = direct_evaluate(model, set[d], cache.get(set[d]).u_star);
    errors[d] = o.error;
    failures += o.ok ? 0 : 1;
  }
  return penalized_loss(errors, failures, config.validation_penalty);
}

struct DirectTrainResult {
  DirectModel model;
  TrainReport report;
  /// Best validation loss per candidate penalty weight, in `lambdas` order.
  std::vector<double> lambda_val_loss;
};

/// Trains one backbone per penalty weight and keeps the one with the lowest
/// validation loss. config.K is ignored: the head emits one value per variable.
inline DirectTrainResult direct_train(const std::vector<QpInstance>& train_set, const std::vector<QpInstance>& val_set,
                                      const TrainConfig& config, FullSolveCache& cache,
                                      const std::vector<double>& lambdas = {1e-1, 1.0, 10.0, 1e2}) {
  detail::check_train_inputs(train_set, config, 1);
  if (lambdas.empty()) throw ConfigError("direct_train: empty penalty list");
  if (val_set.empty()) throw ConfigError("direct_train: penalty selection needs a validation set");
  std::vector<Vector> x_star(train_set.size());
  for (std::size_t d = 0; d < train_set.size(); ++d) x_star[d] = cache.get(train_set[d]).x_star;

  DirectTrainResult result;
  double best_overall = std::numeric_limits<double>::infinity();
  for (double lam : lambdas) {
    DirectModel model{init_params(config.seed, config.H, config.L, 1, config.Hg), lam};
    DirectModel best = model;
    double best_val = std::numeric_limits<double>::infinity();
    Vector theta = model.params.flatten();
    detail::LoopHooks hooks;
    hooks.step = [&](std::size_t d) {
      detail::StepOutcome out;
      const QpInstance& inst = train_set[d];
      const auto [raw, tape] = forward_raw(model.params, inst);
      Vector gx;
      out.objective = direct_loss(inst, raw.col(0), x_star[d], lam, &gx);
      out.ok = std::isfinite(out.objective);
      if (out.ok) out.grad = backward_raw(tape, model.params, gx).flatten();
      return out;
    };
    hooks.sync = [&](Vector& t) { model.params.unflatten(t); };
    hooks.validate = [&] {
      const double v = direct_validation_loss(model, val_set, config, cache);
      best_val = std::min(best_val, v);
      return v;
    };
    hooks.keep_best = [&] { best = model; };
    TrainReport report = detail::run_training_loop(train_set.size(), theta, config, hooks, {});
    result.lambda_val_loss.push_back(best_val);
    if (best_val < best_overall) {
      best_overall = best_val;
      result.model = best;
      result.report = report;
    }
  }
  return result;
}

inline json shared_projection_to_json(const SharedProjection& s) {
  return json{{"method", "sharedp"}, {"P", io::shaped_matrix_to_json(s.P)}};
}

inline SharedProjection shared_projection_from_json(const json& j) {
  if (j.value("method", std::string()) != "sharedp") throw IoError("baseline artifact: expected method 'sharedp'");
  SharedProjection s{io::shaped_matrix_from_json(j.at("P"), "sharedp.P")};
  if (ProjectionMatrix::orthonormality_error(s.P) > ProjectionMatrix::kOrthTol)
    throw IoError("sharedp.P: columns are not orthonormal");
  return s;
}

inline json pca_projection_to_json(const PcaProjection& p) {
  return json{{"method", "pca"}, {"padded", p.padded}, {"rank", p.rank}, {"P", io::shaped_matrix_to_json(p.P.matrix())}};
}

inline PcaProjection pca_projection_from_json(const json& j) {
  if (j.value("method", std::string()) != "pca") throw IoError("baseline artifact: expected method 'pca'");
  try {
    return PcaProjection{ProjectionMatrix(io::shaped_matrix_from_json(j.at("P"), "pca.P")), j.at("padded").get<bool>(),
                         j.at("rank").get<Eigen::Index>()};
  } catch (const json::exception& e) {
    throw IoError(std::string("pca artifact: ") + e.what());
  } catch (const InvalidInput& e) {
    throw IoError(std::string("pca artifact: ") + e.what());
  }
}

inline json direct_model_to_json(const DirectModel& m) {
  return json{{"method", "direct"}, {"lambda_pen", m.lambda_pen}, {"model", params_to_json(m.params)}};
}

inline DirectModel direct_model_from_json(const json& j) {
  if (j.value("method", std::string()) != "direct") throw IoError("baseline artifact: expected method 'direct'");
  try {
    return DirectModel{params_from_json(j.at("model")), j.at("lambda_pen").get<double>()};
  } catch (const json::exception& e) {
    throw IoError(std::string("direct artifact: ") + e.what());
  }
}

}  // namespace qpproj
