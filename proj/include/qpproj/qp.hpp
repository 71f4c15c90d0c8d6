#pragma once

// Core QP data model: inequality-form instances, projection/recovery, and the
// two equality-elimination transforms.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "qpproj/common.hpp"

namespace qpproj {

/// min ½xᵀQx + cᵀx + constant  s.t.  Ax ≤ b.
///
/// Immutable after construction. Q is symmetrized and checked to be positive
/// semidefinite (smallest eigenvalue ≥ −1e-8·‖Q‖₂).
class QpInstance {
 public:
  QpInstance() : QpInstance(Matrix(0, 0), Vector(0), Matrix(0, 0), Vector(0)) {}

  QpInstance(Matrix Q, Vector c, Matrix A, Vector b, double constant = 0.0)
      : QpInstance(std::move(Q), std::move(c), std::move(A), std::move(b), constant, true) {}

  /// Skips the eigenvalue check. Only for Hessians that are PSD by construction (congruence
  /// transforms of an already validated instance).
  static QpInstance trusted(Matrix Q, Vector c, Matrix A, Vector b, double constant = 0.0) {
    return QpInstance(std::move(Q), std::move(c), std::move(A), std::move(b), constant, false);
  }

  const Matrix& Q() const { return Q_; }
  const Vector& c() const { return c_; }
  const Matrix& A() const { return A_; }
  const Vector& b() const { return b_; }
  double constant() const { return constant_; }
  Eigen::Index n_vars() const { return c_.size(); }
  Eigen::Index n_cons() const { return b_.size(); }

 private:
  QpInstance(Matrix Q, Vector c, Matrix A, Vector b, double constant, bool check_psd)
      : Q_(std::move(Q)), c_(std::move(c)), A_(std::move(A)), b_(std::move(b)), constant_(constant) {
    const auto n = c_.size();
    detail::require_dim(Q_.rows() == n && Q_.cols() == n, "QpInstance: Q must be N x N with N = dim(c)");
    detail::require_dim(A_.rows() == b_.size(), "QpInstance: A must have dim(b) rows");
    detail::require_dim(A_.cols() == n || (A_.rows() == 0), "QpInstance: A must have N columns");
    if (A_.rows() == 0) A_.resize(0, n);
    if (!Q_.allFinite() || !c_.allFinite() || !A_.allFinite() || !b_.allFinite() || !std::isfinite(constant_)) {
      throw InvalidInput("QpInstance: non-finite data");
    }
    Q_ = (0.5 * (Q_ + Q_.transpose())).eval();
    if (check_psd && n > 0) {
      Eigen::SelfAdjointEigenSolver<Matrix> es(Q_, Eigen::EigenvaluesOnly);
      const Vector& ev = es.eigenvalues();
      const double norm2 = std::max(std::abs(ev(0)), std::abs(ev(n - 1)));
      if (ev(0) < -1e-8 * norm2) {
        throw InvalidInput("QpInstance: Q is not positive semidefinite (min eigenvalue " + std::to_string(ev(0)) +
                           ")");
      }
    }
  }

  Matrix Q_;
  Vector c_;
  Matrix A_;
  Vector b_;
  double constant_;
};

/// min ½uᵀQ′u + c′ᵀu  s.t.  A_I u ≤ b_I,  A_E u = b_E.
struct EqQpInstance {
  Matrix Qp;
  Vector cp;
  Matrix A_I;
  Vector b_I;
  Matrix A_E;
  Vector b_E;

  Eigen::Index n_vars() const { return cp.size(); }

  void validate() const {
    const auto n = cp.size();
    detail::require_dim(Qp.rows() == n && Qp.cols() == n, "EqQpInstance: Q' must be N x N");
    detail::require_dim(A_I.rows() == b_I.size() && (A_I.cols() == n || A_I.rows() == 0),
                        "EqQpInstance: A_I/b_I shape");
    detail::require_dim(A_E.rows() == b_E.size() && (A_E.cols() == n || A_E.rows() == 0),
                        "EqQpInstance: A_E/b_E shape");
  }
};

/// Maps a solution x of the eliminated QP back to u = D x + u0.
struct AffineRecovery {
  Matrix D;
  Vector u0;
  double constant = 0.0;
  /// Number of equality rows found numerically dependent and dropped.
  Eigen::Index dropped_rows = 0;
  std::vector<std::string> warnings;

  Vector apply(const Vector& x) const {
    detail::require_dim(x.size() == D.cols(), "AffineRecovery: dimension mismatch");
    return D * x + u0;
  }
};

/// N×K matrix with orthonormal columns.
class ProjectionMatrix {
 public:
  static constexpr double kOrthTol = 1e-8;

  ProjectionMatrix() = default;

  /// Checks ‖PᵀP − I‖_F ≤ 1e-8 and K ≤ N.
  explicit ProjectionMatrix(Matrix P) : P_(std::move(P)) {
    detail::require_dim(P_.cols() <= P_.rows(), "ProjectionMatrix: K must not exceed N");
    if (orthonormality_error(P_) > kOrthTol) throw InvalidInput("ProjectionMatrix: columns are not orthonormal");
  }

  static double orthonormality_error(const Matrix& P) {
    return (P.transpose() * P - Matrix::Identity(P.cols(), P.cols())).norm();
  }

  /// Identity columns selected by `indices`.
  static ProjectionMatrix selection(Eigen::Index n, const std::vector<Eigen::Index>& indices) {
    Matrix P = Matrix::Zero(n, static_cast<Eigen::Index>(indices.size()));
    for (std::size_t k = 0; k < indices.size(); ++k) P(indices[k], static_cast<Eigen::Index>(k)) = 1.0;
    return ProjectionMatrix(std::move(P));
  }

  static ProjectionMatrix identity(Eigen::Index n) { return ProjectionMatrix(Matrix::Identity(n, n)); }

  const Matrix& matrix() const { return P_; }
  Eigen::Index n() const { return P_.rows(); }
  Eigen::Index k() const { return P_.cols(); }

 private:
  Matrix P_;
};

/// ½xᵀQx + cᵀx + constant.
inline double objective(const QpInstance& inst, const Vector& x) {
  detail::require_dim(x.size() == inst.n_vars(), "objective: dim(x) != N");
  return 0.5 * x.dot(inst.Q() * x) + inst.c().dot(x) + inst.constant();
}

/// max(0, max_m (Ax − b)_m).
inline double max_violation(const QpInstance& inst, const Vector& x) {
  detail::require_dim(x.size() == inst.n_vars(), "max_violation: dim(x) != N");
  if (inst.n_cons() == 0) return 0.0;
  return std::max(0.0, (inst.A() * x - inst.b()).maxCoeff());
}

/// Default feasibility tolerance 1e-6·(1 + ‖b‖∞).
inline double feasibility_tol(const QpInstance& inst) { return 1e-6 * (1.0 + detail::inf_norm(inst.b())); }

inline bool is_feasible(const QpInstance& inst, const Vector& x) {
  return max_violation(inst, x) <= feasibility_tol(inst);
}

/// Projected QP (PᵀQP, Pᵀc, AP, b) with K variables.
inline QpInstance project(const QpInstance& inst, const Matrix& P) {
  detail::require_dim(P.rows() == inst.n_vars(), "project: P must have N rows");
  Matrix QP = inst.Q() * P;
  Matrix Qt = P.transpose() * QP;
  return QpInstance::trusted(std::move(Qt), P.transpose() * inst.c(), inst.A() * P, inst.b(), inst.constant());
}

inline QpInstance project(const QpInstance& inst, const ProjectionMatrix& P) { return project(inst, P.matrix()); }

/// Lifts a reduced solution: x = P y.
inline Vector recover(const Matrix& P, const Vector& y) {
  detail::require_dim(y.size() == P.cols(), "recover: dim(y) != K");
  return P * y;
}

inline Vector recover(const ProjectionMatrix& P, const Vector& y) { return recover(P.matrix(), y); }

/// Equalities rewritten as pairs of inequalities: A = [A_I; A_E; −A_E], b = [b_I; b_E; −b_E].
inline QpInstance eliminate_eq_doubling(const EqQpInstance& e) {
  e.validate();
  const auto n = e.n_vars();
  const auto mi = e.A_I.rows();
  const auto me = e.A_E.rows();
  Matrix A(mi + 2 * me, n);
  Vector b(mi + 2 * me);
  if (mi > 0) A.topRows(mi) = e.A_I;
  if (me > 0) {
    A.middleRows(mi, me) = e.A_E;
    A.bottomRows(me) = -e.A_E;
  }
  b << e.b_I, e.b_E, -e.b_E;
  return QpInstance(e.Qp, e.cp, std::move(A), std::move(b));
}

namespace detail {

/// D = I − A⁺A built from the right singular vectors with σ > cutoff·σ_max.
inline Matrix nullspace_projector(const Matrix& A_E, Eigen::Index n, Eigen::Index* rank_out) {
  Matrix D = Matrix::Identity(n, n);
  *rank_out = 0;
  if (A_E.rows() == 0) return D;
  Eigen::JacobiSVD<Matrix> svd(A_E, Eigen::ComputeFullV);
  const Vector& s = svd.singularValues();
  if (s.size() == 0 || s(0) == 0.0) return D;
  const double cutoff = 1e-10 * s(0);
  Eigen::Index r = 0;
  while (r < s.size() && s(r) > cutoff) ++r;
  const auto V = svd.matrixV().leftCols(r);
  D.noalias() -= V * V.transpose();
  *rank_out = r;
  return D;
}

}  // namespace detail

/// Shifts around a feasible u0 and parametrizes the null space of A_E:
/// u = D x + u0 with D = I − A_E⁺A_E. The returned instance has x = 0 feasible;
/// objective(out, x) + recovery.constant equals the original objective at D x + u0.
inline std::pair<QpInstance, AffineRecovery> eliminate_eq_nullspace(const EqQpInstance& e, const Vector& u0) {
  e.validate();
  const auto n = e.n_vars();
  detail::require_dim(u0.size() == n, "eliminate_eq_nullspace: dim(u0) != N");

  if (e.A_I.rows() > 0) {
    const double viol = (e.A_I * u0 - e.b_I).maxCoeff();
    if (viol > 1e-10 * (1.0 + detail::inf_norm(e.b_I))) {
      throw InvalidInput("eliminate_eq_nullspace: u0 violates the inequalities by " + std::to_string(viol));
    }
  }
  if (e.A_E.rows() > 0) {
    const double eq_res = detail::inf_norm(e.A_E * u0 - e.b_E);
    if (eq_res > 1e-8) {
      throw InvalidInput("eliminate_eq_nullspace: u0 violates the equalities by " + std::to_string(eq_res));
    }
  }

  AffineRecovery rec;
  Eigen::Index rank = 0;
  rec.D = detail::nullspace_projector(e.A_E, n, &rank);
  rec.u0 = u0;
  rec.dropped_rows = e.A_E.rows() - rank;
  if (rec.dropped_rows > 0) {
    rec.warnings.push_back("A_E is rank deficient: dropped " + std::to_string(rec.dropped_rows) +
                           " numerically dependent row(s)");
  }
  const Vector Qu0 = e.Qp * u0;
  rec.constant = 0.5 * u0.dot(Qu0) + e.cp.dot(u0);

  const Matrix& D = rec.D;
  Matrix Q = D.transpose() * e.Qp * D;
  Vector c = D.transpose() * (e.cp + Qu0);
  Matrix A = e.A_I.rows() > 0 ? Matrix(e.A_I * D) : Matrix(0, n);
  Vector b = e.A_I.rows() > 0 ? Vector(e.b_I - e.A_I * u0) : Vector(0);
  // Removes round-off below the feasibility check so that x = 0 is exactly feasible.
  for (Eigen::Index m = 0; m < b.size(); ++m) {
    if (b(m) < 0.0 && b(m) > -1e-10 * (1.0 + detail::inf_norm(e.b_I))) b(m) = 0.0;
  }
  return {QpInstance(std::move(Q), std::move(c), std::move(A), std::move(b)), std::move(rec)};
}

}  // namespace qpproj
