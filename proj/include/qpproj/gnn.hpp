#pragma once

// Graph neural network that maps a QP instance to an N×K projection matrix.
//
// Variable node n starts from c_n, constraint node m from b_m. Each layer
// updates both node types synchronously from the previous layer:
//
//   zV' = relu(W_V zV + W_VV mean_{n'}(Q_{n'n} zV_{n'}) + W_CV mean_m(A_{mn} zC_m))
//   zC' = relu(W_C zC + W_VC mean_n(A_{mn} zV_n))
//
// A shared three-layer head maps each final variable embedding to a row of
// P_raw, and P is the Q factor of a thin QR of P_raw with diag(R) ≥ 0.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "qpproj/common.hpp"
#include "qpproj/io.hpp"
#include "qpproj/qp.hpp"
#include "qpproj/rng.hpp"

namespace qpproj {

using SparseRowMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

struct ModelParams {
  int H = 32;
  int L = 4;
  int K = 10;
  int Hg = 32;
  std::uint64_t seed = 0;

  Vector w0V, s0V, w0C, s0C;
  std::vector<Matrix> W_V, W_VV, W_CV, W_C, W_VC;
  Matrix G1, G2, G3;
  Vector g1, g2, g3;

  /// Zero tensors with the shapes implied by (H, L, K, Hg).
  static ModelParams zeros(int H, int L, int K, int Hg) {
    if (H <= 0 || L < 0 || K <= 0 || Hg <= 0) throw ConfigError("ModelParams: dimensions must be positive");
    ModelParams p;
    p.H = H;
    p.L = L;
    p.K = K;
    p.Hg = Hg;
    p.w0V = p.s0V = p.w0C = p.s0C = Vector::Zero(H);
    for (auto* layer : {&p.W_V, &p.W_VV, &p.W_CV, &p.W_C, &p.W_VC}) layer->assign(L, Matrix::Zero(H, H));
    p.G1 = Matrix::Zero(Hg, H);
    p.g1 = Vector::Zero(Hg);
    p.G2 = Matrix::Zero(Hg, Hg);
    p.g2 = Vector::Zero(Hg);
    p.G3 = Matrix::Zero(K, Hg);
    p.g3 = Vector::Zero(K);
    return p;
  }

  ModelParams zeros_like() const {
    ModelParams z = zeros(H, L, K, Hg);
    z.seed = seed;
    return z;
  }

  /// Calls f(name, tensor, fan_in, is_bias) for every tensor in a fixed order.
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  std::size_t size() const {
    std::size_t n = 0;
    visit([&n](const std::string&, const auto& t, int, bool) { n += static_cast<std::size_t>(t.size()); });
    return n;
  }

  static std::size_t count(int H, int L, int K, int Hg) {
    const auto h = static_cast<std::size_t>(H), l = static_cast<std::size_t>(L), k = static_cast<std::size_t>(K),
               g = static_cast<std::size_t>(Hg);
    return 4 * h + 5 * l * h * h + (g * h + g) + (g * g + g) + (k * g + k);
  }

  Vector flatten() const {
    Vector v(static_cast<Eigen::Index>(size()));
    Eigen::Index off = 0;
    visit([&](const std::string&, const auto& t, int, bool) {
      v.segment(off, t.size()) = Eigen::Map<const Vector>(t.data(), t.size());
      off += t.size();
    });
    return v;
  }

  void unflatten(const Vector& v) {
    detail::require_dim(v.size() == static_cast<Eigen::Index>(size()), "ModelParams::unflatten: size mismatch");
    Eigen::Index off = 0;
    visit([&](const std::string&, auto& t, int, bool) {
      Eigen::Map<Vector>(t.data(), t.size()) = v.segment(off, t.size());
      off += t.size();
    });
  }

  bool all_finite() const { return flatten().allFinite(); }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& p, F& f) {
    f("w0V", p.w0V, 1, false);
    f("s0V", p.s0V, 1, true);
    f("w0C", p.w0C, 1, false);
    f("s0C", p.s0C, 1, true);
    for (int l = 0; l < p.L; ++l) {
      const std::string pre = "layer" + std::to_string(l) + ".";
      f(pre + "W_V", p.W_V[l], p.H, false);
      f(pre + "W_VV", p.W_VV[l], p.H, false);
      f(pre + "W_CV", p.W_CV[l], p.H, false);
      f(pre + "W_C", p.W_C[l], p.H, false);
      f(pre + "W_VC", p.W_VC[l], p.H, false);
    }
    f("head.G1", p.G1, p.H, false);
    f("head.g1", p.g1, p.H, true);
    f("head.G2", p.G2, p.Hg, false);
    f("head.g2", p.g2, p.Hg, true);
    f("head.G3", p.G3, p.Hg, false);
    f("head.g3", p.g3, p.Hg, true);
  }
};

/// Weights ~ U(−√(1/fan_in), √(1/fan_in)) drawn in visit order (row-major
/// within each tensor); biases zero.
inline ModelParams init_params(std::uint64_t seed, int H, int L, int K, int Hg = 32) {
  ModelParams p = ModelParams::zeros(H, L, K, Hg);
  p.seed = seed;
  SplitMix64 rng(seed);
  p.visit([&rng](const std::string&, auto& t, int fan_in, bool is_bias) {
    if (is_bias) return;
    const double a = std::sqrt(1.0 / fan_in);
    for (Eigen::Index i = 0; i < t.rows(); ++i)
      for (Eigen::Index j = 0; j < t.cols(); ++j) t(i, j) = rng.uniform(-a, a);
  });
  return p;
}

struct QpGraph {
  using Edge = std::pair<Eigen::Index, double>;

  /// var_var[n]: (n′, Q_{n′n}) for Q_{n′n} ≠ 0, ascending n′ (self edge included).
  std::vector<std::vector<Edge>> var_var;
  /// var_con[n]: (m, A_{mn}) for A_{mn} ≠ 0, ascending m.
  std::vector<std::vector<Edge>> var_con;
  /// con_var[m]: (n, A_{mn}) for A_{mn} ≠ 0, ascending n.
  std::vector<std::vector<Edge>> con_var;
  Vector c, b;

  Eigen::Index n_vars() const { return c.size(); }
  Eigen::Index n_cons() const { return b.size(); }
};

inline QpGraph build_graph(const QpInstance& inst) {
  const auto n = inst.n_vars();
  const auto m = inst.n_cons();
  const Matrix& Q = inst.Q();
  const Matrix& A = inst.A();
  QpGraph g;
  g.c = inst.c();
  g.b = inst.b();
  g.var_var.resize(static_cast<std::size_t>(n));
  g.var_con.resize(static_cast<std::size_t>(n));
  g.con_var.resize(static_cast<std::size_t>(m));
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i < n; ++i)
      if (Q(i, j) != 0.0) g.var_var[j].emplace_back(i, Q(i, j));
    for (Eigen::Index r = 0; r < m; ++r)
      if (A(r, j) != 0.0) g.var_con[j].emplace_back(r, A(r, j));
  }
  for (Eigen::Index r = 0; r < m; ++r)
    for (Eigen::Index j = 0; j < n; ++j)
      if (A(r, j) != 0.0) g.con_var[r].emplace_back(j, A(r, j));
  return g;
}

namespace detail {

/// Row i holds weight/|list_i| at each neighbor column; empty lists give a zero row.
inline SparseRowMatrix mean_operator(const std::vector<std::vector<QpGraph::Edge>>& lists, Eigen::Index cols) {
  std::vector<Eigen::Triplet<double>> trips;
  for (std::size_t i = 0; i < lists.size(); ++i) {
    const double inv = lists[i].empty() ? 0.0 : 1.0 / static_cast<double>(lists[i].size());
    for (const auto& [j, w] : lists[i]) trips.emplace_back(static_cast<int>(i), static_cast<int>(j), w * inv);
  }
  SparseRowMatrix S(static_cast<Eigen::Index>(lists.size()), cols);
  S.setFromTriplets(trips.begin(), trips.end());
  return S;
}

inline double leaky(double x) { return x > 0.0 ? x : 0.01 * x; }
inline double leaky_grad(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? 0.01 : 0.0); }
inline double relu_grad(double x) { return x > 0.0 ? 1.0 : 0.0; }

/// Deterministic orthonormal N×K columns used to repair rank-deficient head outputs.
inline Matrix fallback_columns(Eigen::Index n, Eigen::Index k) {
  SplitMix64 rng(0x5EEDC0DEULL);
  Matrix G(n, k);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < k; ++j) G(i, j) = rng.normal();
  Eigen::HouseholderQR<Matrix> qr(G);
  return qr.householderQ() * Matrix::Identity(n, k);
}

/// Thin QR with diag(R) ≥ 0.
inline void thin_qr(const Matrix& A, Matrix& Qf, Matrix& Rf) {
  const auto n = A.rows();
  const auto k = A.cols();
  Eigen::HouseholderQR<Matrix> qr(A);
  Qf = qr.householderQ() * Matrix::Identity(n, k);
  Rf = qr.matrixQR().topRows(k).template triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < k; ++j) {
    if (Rf(j, j) < 0.0) {
      Qf.col(j) *= -1.0;
      Rf.row(j) *= -1.0;
    }
  }
}

/// Reverse-mode through A = Q R (thin, diag R > 0) when only Q is consumed.
inline Matrix qr_backward(const Matrix& Qf, const Matrix& Rf, const Matrix& dQ) {
  const Matrix M = -(dQ.transpose() * Qf);
  Matrix copyltu = M.triangularView<Eigen::Lower>();
  copyltu += M.triangularView<Eigen::StrictlyLower>().transpose();
  const Matrix X = dQ + Qf * copyltu;
  // X R⁻ᵀ
  return Rf.triangularView<Eigen::Upper>().solve(X.transpose()).transpose();
}

}  // namespace detail

struct ForwardTape {
  SparseRowMatrix Avv, Acv, Avc;
  Vector c, b;
  /// ZV[l], ZC[l]: post-activation embeddings, l = 0..L.
  std::vector<Matrix> ZV, ZC;
  /// Pre-activations and neighbor aggregates of layer l = 0..L−1 (producing ZV[l+1]).
  std::vector<Matrix> preV, preC, aggVV, aggCV, aggVC;
  Matrix A1, X1, A2, X2;
  /// Head output before and after the rank-deficiency repair.
  Matrix P_raw, P_in;
  Matrix Qf, Rf;
  bool fallback = false;
  bool orthogonalized = true;
};

namespace detail {

inline ForwardTape forward_embed(const ModelParams& p, const QpInstance& inst) {
  if (!p.all_finite()) throw InvalidInput("forward: parameters must be finite");
  const QpGraph g = build_graph(inst);
  const auto n = g.n_vars();
  const auto m = g.n_cons();
  ForwardTape t;
  t.c = g.c;
  t.b = g.b;
  t.Avv = mean_operator(g.var_var, n);
  t.Acv = mean_operator(g.var_con, m);
  t.Avc = mean_operator(g.con_var, n);

  t.ZV.push_back(g.c * p.w0V.transpose() + Vector::Ones(n) * p.s0V.transpose());
  t.ZC.push_back(g.b * p.w0C.transpose() + Vector::Ones(m) * p.s0C.transpose());
  for (int l = 0; l < p.L; ++l) {
    const Matrix& zv = t.ZV.back();
    const Matrix& zc = t.ZC.back();
    Matrix aVV = t.Avv * zv;
    Matrix aCV = t.Acv * zc;
    Matrix aVC = t.Avc * zv;
    Matrix pv = zv * p.W_V[l].transpose() + aVV * p.W_VV[l].transpose() + aCV * p.W_CV[l].transpose();
    Matrix pc = zc * p.W_C[l].transpose() + aVC * p.W_VC[l].transpose();
    Matrix nv = pv.cwiseMax(0.0);
    Matrix nc = pc.cwiseMax(0.0);
    t.aggVV.push_back(std::move(aVV));
    t.aggCV.push_back(std::move(aCV));
    t.aggVC.push_back(std::move(aVC));
    t.preV.push_back(std::move(pv));
    t.preC.push_back(std::move(pc));
    t.ZV.push_back(std::move(nv));
    t.ZC.push_back(std::move(nc));
  }

  const Vector ones = Vector::Ones(n);
  t.A1 = t.ZV.back() * p.G1.transpose() + ones * p.g1.transpose();
  t.X1 = t.A1.unaryExpr(&leaky);
  t.A2 = t.X1 * p.G2.transpose() + ones * p.g2.transpose();
  t.X2 = t.A2.unaryExpr(&leaky);
  t.P_raw = t.X2 * p.G3.transpose() + ones * p.g3.transpose();
  return t;
}

/// Gradient of the head and message-passing stack given dL/dP_raw.
inline ModelParams backward_embed(const ForwardTape& t, const ModelParams& p, const Matrix& dPraw) {
  ModelParams gr = p.zeros_like();
  gr.G3 = dPraw.transpose() * t.X2;
  gr.g3 = dPraw.colwise().sum().transpose();
  const Matrix dA2 = (dPraw * p.G3).cwiseProduct(t.A2.unaryExpr(&leaky_grad));
  gr.G2 = dA2.transpose() * t.X1;
  gr.g2 = dA2.colwise().sum().transpose();
  const Matrix dA1 = (dA2 * p.G2).cwiseProduct(t.A1.unaryExpr(&leaky_grad));
  gr.G1 = dA1.transpose() * t.ZV.back();
  gr.g1 = dA1.colwise().sum().transpose();

  Matrix dZV = dA1 * p.G1;
  Matrix dZC = Matrix::Zero(t.ZC.back().rows(), p.H);
  for (int l = p.L - 1; l >= 0; --l) {
    const Matrix dPV = dZV.cwiseProduct(t.preV[l].unaryExpr(&relu_grad));
    const Matrix dPC = dZC.cwiseProduct(t.preC[l].unaryExpr(&relu_grad));
    gr.W_V[l] = dPV.transpose() * t.ZV[l];
    gr.W_VV[l] = dPV.transpose() * t.aggVV[l];
    gr.W_CV[l] = dPV.transpose() * t.aggCV[l];
    gr.W_C[l] = dPC.transpose() * t.ZC[l];
    gr.W_VC[l] = dPC.transpose() * t.aggVC[l];
    Matrix nV = dPV * p.W_V[l];
    nV += t.Avv.transpose() * (dPV * p.W_VV[l]);
    nV += t.Avc.transpose() * (dPC * p.W_VC[l]);
    Matrix nC = dPC * p.W_C[l];
    nC += t.Acv.transpose() * (dPV * p.W_CV[l]);
    dZV = std::move(nV);
    dZC = std::move(nC);
  }
  gr.w0V = dZV.transpose() * t.c;
  gr.s0V = dZV.colwise().sum().transpose();
  gr.w0C = dZC.transpose() * t.b;
  gr.s0C = dZC.colwise().sum().transpose();
  return gr;
}

}  // namespace detail

/// Head output without orthogonalization (used by models that emit points directly).
inline std::pair<Matrix, ForwardTape> forward_raw(const ModelParams& p, const QpInstance& inst) {
  ForwardTape t = detail::forward_embed(p, inst);
  t.orthogonalized = false;
  Matrix out = t.P_raw;
  return {std::move(out), std::move(t)};
}

inline ModelParams backward_raw(const ForwardTape& t, const ModelParams& p, const Matrix& dPraw) {
  detail::require_dim(dPraw.rows() == t.P_raw.rows() && dPraw.cols() == t.P_raw.cols(),
                      "backward_raw: gradient shape mismatch");
  return detail::backward_embed(t, p, dPraw);
}

inline std::pair<ProjectionMatrix, ForwardTape> forward(const ModelParams& p, const QpInstance& inst) {
  const auto n = inst.n_vars();
  detail::require_dim(p.K <= n, "forward: K must not exceed N");
  ForwardTape t = detail::forward_embed(p, inst);
  t.P_in = t.P_raw;
  detail::thin_qr(t.P_in, t.Qf, t.Rf);
  const double scale = t.P_raw.norm();
  const double min_r = t.Rf.diagonal().cwiseAbs().minCoeff();
  if (scale == 0.0 || min_r < 1e-10 * scale) {
    t.fallback = true;
    t.P_in = t.P_raw + 1e-6 * std::max(scale, 1.0) * detail::fallback_columns(n, p.K);
    detail::thin_qr(t.P_in, t.Qf, t.Rf);
  }
  ProjectionMatrix P(t.Qf);
  return {std::move(P), std::move(t)};
}

inline std::pair<ProjectionMatrix, ForwardTape> forward(const ModelParams& p, const QpInstance& inst, int K) {
  if (K != p.K) throw DimensionError("forward: K does not match the model head");
  return forward(p, inst);
}

/// Gradient of a scalar loss with respect to every parameter, given dL/dP.
inline ModelParams backward(const ForwardTape& t, const ModelParams& p, const Matrix& dL_dP) {
  detail::require_dim(t.orthogonalized, "backward: tape was recorded without orthogonalization");
  detail::require_dim(dL_dP.rows() == t.Qf.rows() && dL_dP.cols() == t.Qf.cols(), "backward: dL/dP shape mismatch");
  const Matrix dPin = detail::qr_backward(t.Qf, t.Rf, dL_dP);
  return detail::backward_embed(t, p, dPin);
}

inline json params_to_json(const ModelParams& p, const json& extra = json::object()) {
  json tensors = json::object();
  p.visit([&tensors](const std::string& name, const auto& t, int, bool) {
    tensors[name] = io::shaped_matrix_to_json(Matrix(t));
  });
  return json{{"format", "qpproj-gnn"},
              {"H", p.H},
              {"L", p.L},
              {"K", p.K},
              {"H_g", p.Hg},
              {"seed", p.seed},
              {"n_params", p.size()},
              {"extra", extra},
              {"params", tensors}};
}

inline ModelParams params_from_json(const json& j, json* extra = nullptr) {
  try {
    if (j.value("format", std::string()) != "qpproj-gnn") throw IoError("checkpoint: unknown format");
    ModelParams p = ModelParams::zeros(j.at("H").get<int>(), j.at("L").get<int>(), j.at("K").get<int>(),
                                       j.at("H_g").get<int>());
    p.seed = j.value("seed", std::uint64_t{0});
    const json& tensors = j.at("params");
    p.visit([&tensors](const std::string& name, auto& t, int, bool) {
      const Matrix M = io::shaped_matrix_from_json(tensors.at(name), "checkpoint." + name);
      if (M.rows() != t.rows() || M.cols() != t.cols()) throw IoError("checkpoint." + name + ": shape mismatch");
      t = M;
    });
    if (!p.all_finite()) throw IoError("checkpoint: non-finite parameter");
    if (extra) *extra = j.value("extra", json::object());
    return p;
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& p, const json& extra = json::object()) {
  io::write_json(path, params_to_json(p, extra));
}

inline ModelParams load_checkpoint(const std::filesystem::path& path, json* extra = nullptr) {
  return params_from_json(io::read_json(path), extra);
}

}  // namespace qpproj
