#pragma once

// Dense convex QP solver: operator-splitting ADMM on
//   min ½yᵀQy + cᵀy  s.t.  Ay + s = b, s ≥ 0
// with Ruiz equilibration, a cached factorization of Q + σI + ρAᵀA, adaptive ρ,
// infeasibility certificates, and an active-set polish that solves the
// equality-constrained KKT system on the detected active set.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Cholesky>

#include "qpproj/common.hpp"
#include "qpproj/qp.hpp"

namespace qpproj {

struct SolverSettings {
  double eps_abs = 1e-8;
  double eps_rel = 1e-8;
  int max_iter = 20000;
  double rho = 0.1;
  double sigma = 1e-6;
  bool polish = true;
  double alpha = 1.6;
  int adaptive_rho_interval = 100;
  double adaptive_rho_tolerance = 5.0;
  int scaling_iters = 10;
  int check_interval = 25;
  double eps_prim_inf = 1e-5;
  double eps_dual_inf = 1e-5;
  int polish_refine_iters = 8;
  int polish_max_passes = 50;

  void validate() const {
    if (!(eps_abs > 0) || !(eps_rel > 0) || !(rho > 0) || !(sigma > 0) || !(alpha > 0 && alpha < 2) ||
        !(eps_prim_inf > 0) || !(eps_dual_inf > 0)) {
      throw ConfigError("SolverSettings: tolerances and penalties must be positive (alpha in (0,2))");
    }
    if (max_iter < 1 || check_interval < 1 || adaptive_rho_interval < 1) {
      throw ConfigError("SolverSettings: iteration counts must be >= 1");
    }
  }
};

enum class SolveStatus { Solved, MaxIterReached, PrimalInfeasible, DualInfeasible };

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::Solved: return "Solved";
    case SolveStatus::MaxIterReached: return "MaxIterReached";
    case SolveStatus::PrimalInfeasible: return "PrimalInfeasible";
    case SolveStatus::DualInfeasible: return "DualInfeasible";
  }
  return "Unknown";
}

struct SolveResult {
  Vector y_star;
  Vector lambda_star;
  SolveStatus status = SolveStatus::MaxIterReached;
  double objective = 0.0;
  int iterations = 0;
  bool polished = false;
  double prim_res = 0.0;
  double dual_res = 0.0;
  double comp_res = 0.0;
  std::string message;

  bool solved() const { return status == SolveStatus::Solved; }
};

/// KKT residuals of (y, λ) for the unscaled problem.
struct KktResiduals {
  double prim = 0.0;  // ‖max(Ay − b, 0)‖∞
  double dual = 0.0;  // ‖Qy + c + Aᵀλ‖∞
  double comp = 0.0;  // max_m |λ_m (Ay − b)_m|
};

inline KktResiduals kkt_residuals(const QpInstance& inst, const Vector& y, const Vector& lambda) {
  KktResiduals r;
  Vector grad = inst.Q() * y + inst.c();
  if (inst.n_cons() > 0) {
    const Vector slack = inst.A() * y - inst.b();
    r.prim = std::max(0.0, slack.maxCoeff());
    r.comp = lambda.cwiseProduct(slack).cwiseAbs().maxCoeff();
    grad.noalias() += inst.A().transpose() * lambda;
  }
  r.dual = detail::inf_norm(grad);
  return r;
}

/// Tolerances a Solved result must meet.
struct KktTolerances {
  double prim;
  double dual;
  double comp;

  KktTolerances(const QpInstance& inst, const SolverSettings& s)
      : prim(s.eps_abs + s.eps_rel * detail::inf_norm(inst.b())),
        dual(s.eps_abs + s.eps_rel * detail::inf_norm(inst.c())),
        comp(10.0 * prim) {}

  bool met(const KktResiduals& r) const { return r.prim <= prim && r.dual <= dual && r.comp <= comp; }
};

namespace detail {

class AdmmSolver {
 public:
  AdmmSolver(const QpInstance& inst, const SolverSettings& settings)
      : inst_(inst), s_(settings), n_(inst.n_vars()), m_(inst.n_cons()), tol_(inst, settings) {}

  SolveResult run() {
    SolveResult res;
    if (n_ == 0) {
      res.y_star = Vector(0);
      res.lambda_star = Vector::Zero(m_);
      if (m_ > 0 && inst_.b().minCoeff() < -tol_.prim) {
        res.status = SolveStatus::PrimalInfeasible;
        res.message = "empty variable set with negative right-hand side";
      } else {
        res.status = SolveStatus::Solved;
      }
      res.objective = inst_.constant();
      return res;
    }

    equilibrate();
    rho_ = s_.rho;
    factorize();

    Vector x = Vector::Zero(n_), z = Vector::Zero(m_), y = Vector::Zero(m_);
    Vector x_prev = x, y_prev = y;
    Vector rhs(n_), xt(n_), zt(m_), v(m_);
    std::vector<char> prev_guess, last_polished;
    bool have_prev_guess = false;

    int k = 0;
    for (k = 1; k <= s_.max_iter; ++k) {
      x_prev = x;
      y_prev = y;

      rhs = s_.sigma * x - q_;
      if (m_ > 0) rhs.noalias() += As_.transpose() * (rho_ * z - y);
      xt = llt_.solve(rhs);
      x = s_.alpha * xt + (1.0 - s_.alpha) * x;
      if (m_ > 0) {
        zt.noalias() = As_ * xt;
        v = s_.alpha * zt + (1.0 - s_.alpha) * z;
        z = (v + y / rho_).cwiseMin(bs_);
        y += rho_ * (v - z);
      }

      const bool check = (k % s_.check_interval == 0) || k == s_.max_iter;
      if (check) {
        const Vector xu = E_x_.cwiseProduct(x);
        const Vector yu = E_z_.cwiseProduct(y) / cost_scale_;
        const KktResiduals r = kkt_residuals(inst_, xu, yu);
        if (tol_.met(r)) {
          if (s_.polish) {
            std::vector<char> guess = active_guess(z, y);
            SolveResult pol;
            if (try_polish(guess, yu, xu, &pol)) {
              pol.iterations = k;
              return pol;
            }
          }
          return finish(xu, yu, r, SolveStatus::Solved, k, "");
        }

        std::string cert;
        if (primal_infeasible(y - y_prev, &cert)) {
          return finish(xu, yu, r, SolveStatus::PrimalInfeasible, k, cert);
        }
        if (dual_infeasible(x - x_prev, &cert)) {
          return finish(xu, yu, r, SolveStatus::DualInfeasible, k, cert);
        }

        if (s_.polish) {
          std::vector<char> guess = active_guess(z, y);
          if (have_prev_guess && guess == prev_guess && guess != last_polished) {
            last_polished = guess;
            SolveResult pol;
            if (try_polish(guess, yu, xu, &pol)) {
              pol.iterations = k;
              return pol;
            }
          }
          prev_guess = std::move(guess);
          have_prev_guess = true;
        }

        if (k == s_.max_iter) {
          return finish(xu, yu, r, SolveStatus::MaxIterReached, k, "iteration limit reached");
        }
      }

      if (m_ > 0 && k % s_.adaptive_rho_interval == 0) update_rho(x, z, y);
    }
    // Unreachable: the last iteration is always a check.
    return res;
  }

 private:
  // --- scaling ------------------------------------------------------------
  static double limit_scaling(double v) {
    if (v < 1e-4) return 1.0;
    return std::min(v, 1e4);
  }

  void equilibrate() {
    Qs_ = inst_.Q();
    q_ = inst_.c();
    As_ = inst_.A();
    bs_ = inst_.b();
    E_x_ = Vector::Ones(n_);
    E_z_ = Vector::Ones(m_);
    cost_scale_ = 1.0;
    Vector dx(n_), dz(m_);
    for (int it = 0; it < s_.scaling_iters; ++it) {
      for (Eigen::Index j = 0; j < n_; ++j) {
        double nrm = Qs_.col(j).cwiseAbs().maxCoeff();
        if (m_ > 0) nrm = std::max(nrm, As_.col(j).cwiseAbs().maxCoeff());
        dx(j) = 1.0 / std::sqrt(limit_scaling(nrm));
      }
      for (Eigen::Index i = 0; i < m_; ++i) dz(i) = 1.0 / std::sqrt(limit_scaling(As_.row(i).cwiseAbs().maxCoeff()));
      Qs_ = dx.asDiagonal() * Qs_ * dx.asDiagonal();
      q_ = dx.cwiseProduct(q_);
      if (m_ > 0) As_ = dz.asDiagonal() * As_ * dx.asDiagonal();
      E_x_ = E_x_.cwiseProduct(dx);
      E_z_ = E_z_.cwiseProduct(dz);

      double mean_col = 0.0;
      for (Eigen::Index j = 0; j < n_; ++j) mean_col += Qs_.col(j).cwiseAbs().maxCoeff();
      mean_col /= static_cast<double>(n_);
      const double gamma = 1.0 / limit_scaling(std::max(mean_col, inf_norm(q_)));
      Qs_ *= gamma;
      q_ *= gamma;
      cost_scale_ *= gamma;
    }
    if (m_ > 0) bs_ = E_z_.cwiseProduct(inst_.b());
  }

  void factorize() {
    Matrix K = Qs_;
    K.diagonal().array() += s_.sigma;
    if (m_ > 0) K.noalias() += rho_ * As_.transpose() * As_;
    llt_.compute(K);
  }

  void update_rho(const Vector& x, const Vector& z, const Vector& y) {
    const Vector Ax = As_ * x;
    const Vector Qx = Qs_ * x;
    const Vector Aty = As_.transpose() * y;
    const double rp = inf_norm(Ax - z);
    const double rd = inf_norm(Qx + q_ + Aty);
    const double pn = std::max(inf_norm(Ax), inf_norm(z));
    const double dn = std::max({inf_norm(Qx), inf_norm(Aty), inf_norm(q_)});
    const double ratio = (rp / (pn + 1e-30)) / (rd / (dn + 1e-30) + 1e-30);
    double rho_new = rho_ * std::sqrt(ratio);
    rho_new = std::clamp(rho_new, 1e-6, 1e6);
    if (rho_new > s_.adaptive_rho_tolerance * rho_ || rho_new < rho_ / s_.adaptive_rho_tolerance) {
      rho_ = rho_new;
      factorize();
    }
  }

  // --- certificates -------------------------------------------------------
  bool primal_infeasible(const Vector& dy_scaled, std::string* msg) const {
    if (m_ == 0) return false;
    const Vector dy = E_z_.cwiseProduct(dy_scaled) / cost_scale_;
    const double nrm = inf_norm(dy);
    if (nrm < 1e-30) return false;
    const double eps = s_.eps_prim_inf * nrm;
    if (dy.minCoeff() < -eps) return false;
    const double btd = inst_.b().dot(dy.cwiseMax(0.0));
    if (btd >= -eps) return false;
    const double atd = inf_norm(inst_.A().transpose() * dy);
    if (atd > eps) return false;
    *msg = "primal infeasibility certificate: delta_lambda >= 0 with ||A^T delta_lambda||_inf = " +
           std::to_string(atd / nrm) + "*||delta_lambda|| and b^T delta_lambda = " + std::to_string(btd / nrm) +
           "*||delta_lambda||";
    return true;
  }

  bool dual_infeasible(const Vector& dx_scaled, std::string* msg) const {
    const Vector dx = E_x_.cwiseProduct(dx_scaled);
    const double nrm = inf_norm(dx);
    if (nrm < 1e-30) return false;
    const double eps = s_.eps_dual_inf * nrm;
    const double ctd = inst_.c().dot(dx);
    if (ctd >= -eps) return false;
    if (inf_norm(inst_.Q() * dx) > eps) return false;
    if (m_ > 0 && (inst_.A() * dx).maxCoeff() > eps) return false;
    *msg = "dual infeasibility (unbounded) certificate: direction d with Qd ~ 0, Ad <= 0, c^T d = " +
           std::to_string(ctd / nrm) + "*||d||";
    return true;
  }

  // --- polish -------------------------------------------------------------
  std::vector<char> active_guess(const Vector& z, const Vector& y) const {
    std::vector<char> act(static_cast<std::size_t>(m_), 0);
    for (Eigen::Index i = 0; i < m_; ++i) act[static_cast<std::size_t>(i)] = (bs_(i) - z(i) < y(i)) ? 1 : 0;
    return act;
  }

  /// Solves [Q+δI  Aₐᵀ; Aₐ  −δI] with iterative refinement toward δ = 0.
  bool solve_reduced_kkt(const std::vector<Eigen::Index>& act, Vector* x_out, Vector* y_out) {
    const auto a = static_cast<Eigen::Index>(act.size());
    if (!hfact_ready_) {
      const double qscale = std::max(1.0, inst_.Q().diagonal().cwiseAbs().maxCoeff());
      delta_ = 1e-9 * qscale;
      Matrix H = inst_.Q();
      H.diagonal().array() += delta_;
      hllt_.compute(H);
      if (hllt_.info() != Eigen::Success) return false;
      hfact_ready_ = true;
    }
    Matrix Aa(a, n_);
    Vector ba(a);
    for (Eigen::Index i = 0; i < a; ++i) {
      Aa.row(i) = inst_.A().row(act[static_cast<std::size_t>(i)]);
      ba(i) = inst_.b()(act[static_cast<std::size_t>(i)]);
    }
    Eigen::LLT<Matrix> sllt;
    Matrix W;
    if (a > 0) {
      W = hllt_.solve(Matrix(Aa.transpose()));
      Matrix S = Aa * W;
      // Scaled to S, not Q: nearly dependent active rows leave S with tiny
      // eigenvalues that a Q-sized shift would swamp, stalling refinement.
      const double smax = S.diagonal().maxCoeff();
      S.diagonal().array() += smax > 0.0 ? 1e-13 * smax : delta_;
      sllt.compute(S);
      if (sllt.info() != Eigen::Success) return false;
    }
    auto solve_reg = [&](const Vector& r1, const Vector& r2, Vector* dx, Vector* dy) {
      const Vector h1 = hllt_.solve(r1);
      if (a > 0) {
        *dy = sllt.solve(Vector(Aa * h1 - r2));
        *dx = h1 - W * (*dy);
      } else {
        *dy = Vector(0);
        *dx = h1;
      }
    };
    Vector x = Vector::Zero(n_), y = Vector::Zero(a), dx, dy;
    const Vector r1_0 = -inst_.c();
    for (int it = 0; it <= s_.polish_refine_iters; ++it) {
      Vector r1 = r1_0 - inst_.Q() * x;
      Vector r2 = ba;
      if (a > 0) {
        r1.noalias() -= Aa.transpose() * y;
        r2.noalias() -= Aa * x;
      }
      const double rn = std::max(inf_norm(r1), inf_norm(r2));
      if (it > 0 && rn <= 1e-14 * (1.0 + inf_norm(r1_0) + inf_norm(ba))) break;
      solve_reg(r1, r2, &dx, &dy);
      x += dx;
      y += dy;
    }
    if (!x.allFinite() || !y.allFinite()) return false;
    *x_out = std::move(x);
    *y_out = std::move(y);
    return true;
  }

  /// Masked rows taken in decreasing multiplier order, skipping any that are
  /// numerically dependent on rows already kept.
  std::vector<Eigen::Index> independent_rows(const std::vector<char>& mask, const Vector& weight) const {
    std::vector<Eigen::Index> cand;
    for (Eigen::Index i = 0; i < m_; ++i)
      if (mask[static_cast<std::size_t>(i)]) cand.push_back(i);
    std::stable_sort(cand.begin(), cand.end(), [&](Eigen::Index a, Eigen::Index b) { return weight(a) > weight(b); });
    Matrix basis(n_, std::min<Eigen::Index>(n_, static_cast<Eigen::Index>(cand.size())));
    Eigen::Index r = 0;
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i : cand) {
      if (r == n_) break;
      Vector v = inst_.A().row(i).transpose();
      const double nrm = v.norm();
      if (nrm == 0.0) continue;
      for (int rep = 0; rep < 2; ++rep) v -= basis.leftCols(r) * (basis.leftCols(r).transpose() * v);
      if (v.norm() <= 1e-7 * nrm) continue;
      basis.col(r++) = v.normalized();
      keep.push_back(i);
    }
    std::sort(keep.begin(), keep.end());
    return keep;
  }

  /// Primal active-set refinement from the ADMM point: solve the equality QP on
  /// the working set, step toward it until the first blocking row, and drop a
  /// negative multiplier only once the working-set optimum is reached.
  bool polish_primal(std::vector<char> act_mask, const Vector& weight, const Vector& x_start, SolveResult* out) {
    Vector x = x_start;
    Vector prio = weight;
    const double top = std::max(1.0, prio.size() > 0 ? prio.maxCoeff() : 0.0);
    std::vector<char> in_act(static_cast<std::size_t>(m_));
    const Vector row_norm = m_ > 0 ? Vector(inst_.A().rowwise().norm()) : Vector();
    for (int pass = 0; pass < s_.polish_max_passes; ++pass) {
      const std::vector<Eigen::Index> act = independent_rows(act_mask, prio);
      Vector xw, ya;
      if (!solve_reduced_kkt(act, &xw, &ya)) return false;

      if (m_ > 0) {
        std::fill(in_act.begin(), in_act.end(), 0);
        for (Eigen::Index i : act) in_act[static_cast<std::size_t>(i)] = 1;
        const Vector p = xw - x;
        const Vector ap = inst_.A() * p;
        const Vector slack = inst_.b() - inst_.A() * x;
        const double pn = p.norm();
        double alpha = 1.0;
        Eigen::Index block = -1;
        for (Eigen::Index i = 0; i < m_; ++i) {
          if (in_act[static_cast<std::size_t>(i)] || ap(i) <= 1e-13 * row_norm(i) * pn) continue;
          const double t = std::max(0.0, slack(i)) / ap(i);
          if (t < alpha) {
            alpha = t;
            block = i;
          }
        }
        if (block >= 0) {
          x += alpha * p;
          act_mask[static_cast<std::size_t>(block)] = 1;
          // Newest rows win the independence filter so the step can proceed.
          prio(block) = top * (2.0 + pass);
          continue;
        }
      }
      x = xw;

      Eigen::Index worst = -1;
      const double lam_tol = 1e-10 * std::max(1.0, inf_norm(ya));
      for (Eigen::Index j = 0; j < ya.size(); ++j)
        if (ya(j) < -lam_tol && (worst < 0 || ya(j) < ya(worst))) worst = j;
      if (worst >= 0) {
        act_mask[static_cast<std::size_t>(act[static_cast<std::size_t>(worst)])] = 0;
        continue;
      }

      return accept(x, act, ya, out);
    }
    return false;
  }

  /// Exchange refinement: re-solve on the working set, one change per pass (the
  /// most negative multiplier leaves, else the most violated row joins).
  bool polish_exchange(std::vector<char> act_mask, const Vector& weight, SolveResult* out) {
    for (int pass = 0; pass < s_.polish_max_passes; ++pass) {
      const std::vector<Eigen::Index> act = independent_rows(act_mask, weight);
      Vector x, ya;
      if (!solve_reduced_kkt(act, &x, &ya)) return false;
      Eigen::Index worst = -1;
      const double lam_tol = 1e-10 * std::max(1.0, inf_norm(ya));
      for (Eigen::Index j = 0; j < ya.size(); ++j)
        if (ya(j) < -lam_tol && (worst < 0 || ya(j) < ya(worst))) worst = j;
      if (worst >= 0) {
        act_mask[static_cast<std::size_t>(act[static_cast<std::size_t>(worst)])] = 0;
        continue;
      }
      if (m_ > 0) {
        const Vector slack = inst_.A() * x - inst_.b();
        Eigen::Index add = -1;
        for (Eigen::Index i = 0; i < m_; ++i)
          if (!act_mask[static_cast<std::size_t>(i)] && slack(i) > tol_.prim && (add < 0 || slack(i) > slack(add))) add = i;
        if (add >= 0) {
          act_mask[static_cast<std::size_t>(add)] = 1;
          continue;
        }
      }
      return accept(x, act, ya, out);
    }
    return false;
  }

  bool accept(const Vector& x, const std::vector<Eigen::Index>& act, const Vector& ya, SolveResult* out) const {
    Vector lambda = Vector::Zero(m_);
    for (std::size_t i = 0; i < act.size(); ++i) lambda(act[i]) = std::max(0.0, ya(static_cast<Eigen::Index>(i)));
    const KktResiduals r = kkt_residuals(inst_, x, lambda);
    if (!tol_.met(r)) return false;
    *out = finish(x, lambda, r, SolveStatus::Solved, 0, "");
    out->polished = true;
    return true;
  }

  bool try_polish(const std::vector<char>& guess, const Vector& weight, const Vector& x_start, SolveResult* out) {
    // The step-controlled method is the more reliable of the two; on nearly
    // degenerate vertices the exchange method sometimes recovers where it stalls.
    return polish_primal(guess, weight, x_start, out) || polish_exchange(guess, weight, out);
  }

  SolveResult finish(const Vector& x, const Vector& lambda, const KktResiduals& r, SolveStatus st, int iters,
                     std::string msg) const {
    SolveResult res;
    res.y_star = x;
    res.lambda_star = lambda;
    res.status = st;
    res.objective = objective(inst_, x);
    res.iterations = iters;
    res.prim_res = r.prim;
    res.dual_res = r.dual;
    res.comp_res = r.comp;
    res.message = std::move(msg);
    return res;
  }

  const QpInstance& inst_;
  SolverSettings s_;
  Eigen::Index n_, m_;
  KktTolerances tol_;

  Matrix Qs_, As_;
  Vector q_, bs_, E_x_, E_z_;
  double cost_scale_ = 1.0;
  double rho_ = 0.1;
  Eigen::LLT<Matrix> llt_;

  bool hfact_ready_ = false;
  double delta_ = 0.0;
  Eigen::LLT<Matrix> hllt_;
};

}  // namespace detail

/// Solves a convex QP; never throws for infeasible/unbounded problems (see `status`).
inline SolveResult solve_qp(const QpInstance& inst, const SolverSettings& settings = {}) {
  settings.validate();
  detail::AdmmSolver solver(inst, settings);
  return solver.run();
}

/// Solves the original (unprojected) QP.
inline SolveResult solve_full(const QpInstance& inst, const SolverSettings& settings = {}) {
  return solve_qp(inst, settings);
}

}  // namespace qpproj
