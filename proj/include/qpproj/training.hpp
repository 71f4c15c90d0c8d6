#pragma once

// Bilevel training of the projection generator.
//
// The outer gradient of u(P) = min_y ½yᵀPᵀQPy + cᵀPy  s.t. APy ≤ b
// comes from the envelope theorem: ∂u/∂P = (QPy* + c + Aᵀλ*) y*ᵀ.
// Chaining it through gnn backward gives the parameter gradient without
// differentiating the inner solver.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "qpproj/common.hpp"
#include "qpproj/gnn.hpp"
#include "qpproj/io.hpp"
#include "qpproj/metrics.hpp"
#include "qpproj/qp.hpp"
#include "qpproj/rng.hpp"
#include "qpproj/solver.hpp"

namespace qpproj {

struct TrainConfig {
  int batch_size = 8;
  double learning_rate = 1e-3;
  int max_epochs = 500;
  int K = 10;
  int H = 32;
  int L = 4;
  int Hg = 32;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  double validation_penalty = 1e6;
  /// Only "zero-gradient" is supported: failed inner solves add nothing and count as a failure.
  std::string skip_policy = "zero-gradient";
  int threads = 1;
  /// When false the seconds column is written as 0 so reports compare bitwise.
  bool record_timing = true;

  void validate() const {
    if (batch_size < 1 || max_epochs < 1 || K < 1 || H < 1 || L < 0 || Hg < 1 || threads < 1)
      throw ConfigError("TrainConfig: sizes and counts must be positive");
    if (!(learning_rate > 0) || !(adam_eps > 0) || !(validation_penalty >= 0))
      throw ConfigError("TrainConfig: learning_rate and adam_eps must be positive");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("TrainConfig: betas must lie in [0, 1)");
    if (skip_policy != "zero-gradient") throw ConfigError("TrainConfig: unknown skip_policy '" + skip_policy + "'");
  }
};

inline json train_config_to_json(const TrainConfig& c) {
  return json{{"batch_size", c.batch_size},   {"learning_rate", c.learning_rate},
              {"max_epochs", c.max_epochs},   {"K", c.K},
              {"H", c.H},                     {"L", c.L},
              {"H_g", c.Hg},                  {"beta1", c.beta1},
              {"beta2", c.beta2},             {"adam_eps", c.adam_eps},
              {"seed", c.seed},               {"validation_penalty", c.validation_penalty},
              {"skip_policy", c.skip_policy}, {"threads", c.threads},
              {"record_timing", c.record_timing}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "max_epochs") c.max_epochs = v.get<int>();
      else if (key == "K") c.K = v.get<int>();
      else if (key == "H") c.H = v.get<int>();
      else if (key == "L") c.L = v.get<int>();
      else if (key == "H_g") c.Hg = v.get<int>();
      else if (key == "beta1") c.beta1 = v.get<double>();
      else if (key == "beta2") c.beta2 = v.get<double>();
      else if (key == "adam_eps") c.adam_eps = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "validation_penalty") c.validation_penalty = v.get<double>();
      else if (key == "skip_policy") c.skip_policy = v.get<std::string>();
      else if (key == "threads") c.threads = v.get<int>();
      else if (key == "record_timing") c.record_timing = v.get<bool>();
      else throw ConfigError("train config: unknown key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

struct EpochRecord {
  int epoch = 0;
  /// Mean inner objective u over the epoch's training solves (failures count as u at x = 0).
  double train_loss = 0.0;
  double val_loss = 0.0;
  int failures = 0;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;

  std::string to_csv() const {
    std::ostringstream os;
    os << "epoch,train_loss,val_loss,failures,seconds\n";
    for (const auto& e : epochs) {
      os << e.epoch << ',' << io::fmt(e.train_loss) << ',' << io::fmt(e.val_loss) << ',' << e.failures << ','
         << io::fmt(e.seconds) << '\n';
    }
    return os.str();
  }
};

/// ∂u/∂P = (QPy* + c + Aᵀλ*) y*ᵀ.
inline Matrix envelope_grad(const QpInstance& inst, const Matrix& P, const Vector& y_star, const Vector& lambda_star) {
  detail::require_dim(P.rows() == inst.n_vars(), "envelope_grad: P must have N rows");
  detail::require_dim(y_star.size() == P.cols(), "envelope_grad: dim(y*) != K");
  detail::require_dim(lambda_star.size() == inst.n_cons(), "envelope_grad: dim(lambda*) != M");
  const Vector g = inst.Q() * (P * y_star) + inst.c() + inst.A().transpose() * lambda_star;
  return g * y_star.transpose();
}

inline Matrix envelope_grad(const QpInstance& inst, const Matrix& P, const SolveResult& r) {
  if (!r.solved()) throw InvalidInput("envelope_grad: inner problem was not solved");
  return envelope_grad(inst, P, r.y_star, r.lambda_star);
}

/// ⟨G, P⟩ with G = envelope_grad held constant; its P-gradient is G.
inline double surrogate_loss(const QpInstance& inst, const Matrix& P, const Vector& y_star, const Vector& lambda_star) {
  return envelope_grad(inst, P, y_star, lambda_star).cwiseProduct(P).sum();
}

inline double surrogate_loss(const QpInstance& inst, const Matrix& P, const SolveResult& r) {
  if (!r.solved()) throw InvalidInput("surrogate_loss: inner problem was not solved");
  return surrogate_loss(inst, P, r.y_star, r.lambda_star);
}

class Adam {
 public:
  Adam(Eigen::Index n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : m_(Vector::Zero(n)), v_(Vector::Zero(n)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(Vector& theta, const Vector& grad) {
    detail::require_dim(theta.size() == m_.size() && grad.size() == m_.size(), "Adam: size mismatch");
    ++t_;
    m_ = b1_ * m_ + (1.0 - b1_) * grad;
    v_ = b2_ * v_ + (1.0 - b2_) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    theta.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
  }

  int steps() const { return t_; }

 private:
  Vector m_, v_;
  double lr_, b1_, b2_, eps_;
  int t_ = 0;
};

namespace detail {

/// Runs f(i) for i in [0, n) on up to `threads` workers; worker w takes i ≡ w (mod threads).
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& f) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) f(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Stream for minibatch shuffling, decorrelated from the parameter-init stream.
inline SplitMix64 shuffle_stream(std::uint64_t seed) { return SplitMix64(seed ^ 0xD1B54A32D192ED03ULL); }

inline std::vector<std::vector<std::size_t>> minibatches(std::size_t n, int batch_size, SplitMix64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  shuffle(order, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size))
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + static_cast<std::size_t>(batch_size))));
  return out;
}

}  // namespace detail

/// Σ errors + (failures / count) · penalty.
inline double penalized_loss(const std::vector<double>& errors, int failures, double penalty) {
  if (errors.empty()) return 0.0;
  const double sum = std::accumulate(errors.begin(), errors.end(), 0.0);
  return sum + penalty * static_cast<double>(failures) / static_cast<double>(errors.size());
}

struct InstanceOutcome {
  bool ok = false;
  double error = 1.0;
};

/// Forward, project, solve and score one instance; failures score error 1.
inline InstanceOutcome evaluate_params(const ModelParams& p, const QpInstance& inst, double u_star,
                                       const SolverSettings& settings) {
  const auto [P, tape] = forward(p, inst);
  const ProjectedSolve ps = solve_projected(inst, P.matrix(), settings);
  const bool ok = ps.solved && ps.feasible;
  return {ok, scored_error(ok, ps.objective, u_star, trivial_objective(inst))};
}

/// Σ_d relative_error_d + failure_rate · penalty, failures counted with error 1.
inline double validation_loss(const ModelParams& p, const std::vector<QpInstance>& val_set, const TrainConfig& config,
                              FullSolveCache& cache, const SolverSettings& settings = {}, int* failures_out = nullptr) {
  std::vector<double> errors(val_set.size());
  std::vector<char> failed(val_set.size(), 0);
  std::vector<double> u_star(val_set.size());
  for (std::size_t d = 0; d < val_set.size(); ++d) u_star[d] = cache.get(val_set[d]).u_star;
  detail::parallel_for(val_set.size(), config.threads, [&](std::size_t d) {
    const InstanceOutcome o = evaluate_params(p, val_set[d], u_star[d], settings);
    errors[d] = o.error;
    failed[d] = o.ok ? 0 : 1;
  });
  const int failures = static_cast<int>(std::count(failed.begin(), failed.end(), 1));
  if (failures_out) *failures_out = failures;
  return penalized_loss(errors, failures, config.validation_penalty);
}

namespace detail {

struct StepOutcome {
  bool ok = false;
  double objective = 0.0;
  Vector grad;
};

inline StepOutcome gnn_step(const ModelParams& p, const QpInstance& inst, const SolverSettings& settings) {
  StepOutcome out;
  out.objective = trivial_objective(inst);
  const auto [P, tape] = forward(p, inst);
  const ProjectedSolve ps = solve_projected(inst, P.matrix(), settings);
  if (!ps.solved) return out;
  const Matrix G = envelope_grad(inst, P.matrix(), ps.result);
  out.grad = backward(tape, p, G).flatten();
  out.ok = ps.feasible;
  if (ps.feasible) out.objective = ps.objective;
  return out;
}

}  // namespace detail

namespace detail {

/// Shared epoch loop: seeded minibatches, per-instance steps (possibly in
/// parallel), batch-averaged Adam update, validation and best-epoch tracking.
/// `theta` is the flat parameter vector; `sync` pushes it into the model after
/// each update; `keep_best` snapshots the model when validation improves.
struct LoopHooks {
  std::function<StepOutcome(std::size_t)> step;
  std::function<void(Vector&)> sync;
  std::function<double()> validate;
  std::function<void()> keep_best;
};

inline TrainReport run_training_loop(std::size_t n_train, Vector& theta, const TrainConfig& config,
                                     const LoopHooks& hooks,
                                     const std::function<void(const EpochRecord&)>& on_epoch) {
  Adam adam(theta.size(), config.learning_rate, config.beta1, config.beta2, config.adam_eps);
  SplitMix64 rng = shuffle_stream(config.seed);
  TrainReport report;
  double best_loss = std::numeric_limits<double>::infinity();
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    double u_sum = 0.0;
    for (const auto& batch : minibatches(n_train, config.batch_size, rng)) {
      std::vector<StepOutcome> outs(batch.size());
      parallel_for(batch.size(), config.threads, [&](std::size_t i) { outs[i] = hooks.step(batch[i]); });
      Vector grad = Vector::Zero(theta.size());
      for (const auto& o : outs) {
        if (o.grad.size() > 0) grad += o.grad;
        if (!o.ok) ++rec.failures;
        u_sum += o.objective;
      }
      grad /= static_cast<double>(batch.size());
      adam.step(theta, grad);
      hooks.sync(theta);
    }
    rec.train_loss = u_sum / static_cast<double>(n_train);
    rec.val_loss = hooks.validate ? hooks.validate() : rec.train_loss;
    rec.seconds = config.record_timing ? seconds_since(t0) : 0.0;
    if (rec.val_loss < best_loss) {
      best_loss = rec.val_loss;
      hooks.keep_best();
      report.best_epoch = epoch;
    }
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return report;
}

inline void check_train_inputs(const std::vector<QpInstance>& train_set, const TrainConfig& config, int K) {
  config.validate();
  if (train_set.empty()) throw ConfigError("train: empty training set");
  if (static_cast<std::size_t>(config.batch_size) > train_set.size())
    throw ConfigError("train: batch_size exceeds the training set size");
  for (const auto& inst : train_set)
    if (inst.n_vars() < K) throw ConfigError("train: K exceeds the variable count of a training instance");
}

}  // namespace detail

/// Minibatch training with best-validation-epoch selection.
inline std::pair<ModelParams, TrainReport> train(const std::vector<QpInstance>& train_set,
                                                 const std::vector<QpInstance>& val_set, const TrainConfig& config,
                                                 FullSolveCache& cache, const SolverSettings& settings = {},
                                                 const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  detail::check_train_inputs(train_set, config, config.K);
  ModelParams params = init_params(config.seed, config.H, config.L, config.K, config.Hg);
  ModelParams best = params;
  Vector theta = params.flatten();
  detail::LoopHooks hooks;
  hooks.step = [&](std::size_t d) { return detail::gnn_step(params, train_set[d], settings); };
  hooks.sync = [&](Vector& t) { params.unflatten(t); };
  if (!val_set.empty()) hooks.validate = [&] { return validation_loss(params, val_set, config, cache, settings); };
  hooks.keep_best = [&] { best = params; };
  TrainReport report = detail::run_training_loop(train_set.size(), theta, config, hooks, on_epoch);
  return {best, report};
}

inline std::pair<ModelParams, TrainReport> train(const std::vector<QpInstance>& train_set,
                                                 const std::vector<QpInstance>& val_set, const TrainConfig& config,
                                                 const SolverSettings& settings = {}) {
  FullSolveCache cache;
  return train(train_set, val_set, config, cache, settings);
}

}  // namespace qpproj
