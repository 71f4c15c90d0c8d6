#pragma once

// Seeded generators for the Regression, Portfolio and Control QP families,
// split generation, and the dataset manifest.
//
// Every draw comes from one SplitMix64 stream per instance (seed = base_seed + d).
// Draw order per family:
//   Regression: Φ (T×N row-major), β (T), A′ (M×N row-major), b′ (M)
//   Portfolio:  Q₀ (N×N row-major, normals), μ (N)
//   Control:    s_lo (S), s_hi (S), v_lo (V), v_hi (V), s* (S), s̃ (S), μ, R (S×V row-major)

#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qpproj/io.hpp"
#include "qpproj/qp.hpp"
#include "qpproj/rng.hpp"

namespace qpproj {

inline constexpr const char* kGeneratorVersion = "1";

enum class Family { Regression, Portfolio, Control };

enum class EqTransform { Nullspace, Doubling };

inline std::string to_string(Family f) {
  switch (f) {
    case Family::Regression: return "regression";
    case Family::Portfolio: return "portfolio";
    case Family::Control: return "control";
  }
  return "unknown";
}

inline Family family_from_string(const std::string& s) {
  if (s == "regression") return Family::Regression;
  if (s == "portfolio") return Family::Portfolio;
  if (s == "control") return Family::Control;
  throw ConfigError("unknown dataset family '" + s + "' (expected regression|portfolio|control)");
}

inline std::string to_string(EqTransform t) { return t == EqTransform::Nullspace ? "nullspace" : "doubling"; }

inline EqTransform eq_transform_from_string(const std::string& s) {
  if (s == "nullspace") return EqTransform::Nullspace;
  if (s == "doubling") return EqTransform::Doubling;
  throw ConfigError("unknown equality transform '" + s + "' (expected nullspace|doubling)");
}

/// Size parameters; zero means "family default".
struct DatasetSizes {
  Eigen::Index N = 500;  // Regression/Portfolio variables
  Eigen::Index M = 50;   // Regression extra constraints
  Eigen::Index T = 0;    // Regression data points (default 2N); Control horizon (default 5)
  Eigen::Index S = 50;   // Control state dimension
  Eigen::Index V = 50;   // Control input dimension
};

struct SplitCounts {
  int train = 120;
  int val = 40;
  int test = 40;
  int total() const { return train + val + test; }
};

/// Instance plus its generation metadata.
struct GeneratedInstance {
  QpInstance inst;
  json meta;
};

inline QpInstance gen_regression(Eigen::Index N, Eigen::Index M, Eigen::Index T, std::uint64_t seed) {
  if (N < 1 || M < 0 || T < 1) throw ConfigError("gen_regression: need N >= 1, M >= 0, T >= 1");
  SplitMix64 rng(seed);
  Matrix Phi(T, N);
  for (Eigen::Index i = 0; i < T; ++i)
    for (Eigen::Index j = 0; j < N; ++j) Phi(i, j) = rng.uniform(-1.0, 1.0);
  Vector beta(T);
  for (Eigen::Index i = 0; i < T; ++i) beta(i) = rng.uniform(-1.0, 1.0);
  Matrix Ap(M, N);
  for (Eigen::Index i = 0; i < M; ++i)
    for (Eigen::Index j = 0; j < N; ++j) Ap(i, j) = rng.uniform();
  Vector bp(M);
  for (Eigen::Index i = 0; i < M; ++i) bp(i) = rng.uniform() * static_cast<double>(N);

  Matrix Q = 2.0 * Phi.transpose() * Phi;
  Vector c = -2.0 * Phi.transpose() * beta;
  Matrix A(M + N, N);
  A.topRows(M) = Ap;
  A.bottomRows(N) = -Matrix::Identity(N, N);
  Vector b = Vector::Zero(M + N);
  b.head(M) = bp;
  return QpInstance(std::move(Q), std::move(c), std::move(A), std::move(b));
}

/// Mean-variance portfolio with budget, target return and no-short constraints, in
/// equality form, together with the uniform feasible portfolio 1/N.
inline EqQpInstance portfolio_eq_instance(Eigen::Index N, std::uint64_t seed, Vector* u0) {
  if (N < 1) throw ConfigError("gen_portfolio: need N >= 1");
  SplitMix64 rng(seed);
  Matrix Q0(N, N);
  for (Eigen::Index i = 0; i < N; ++i)
    for (Eigen::Index j = 0; j < N; ++j) Q0(i, j) = rng.normal();
  Vector mu(N);
  for (Eigen::Index i = 0; i < N; ++i) mu(i) = rng.uniform(-0.2, 0.2);
  const double R = mu.sum() / static_cast<double>(N);

  EqQpInstance e;
  e.Qp = Q0.transpose() * Q0 + 1e-2 * Matrix::Identity(N, N);
  e.cp = Vector::Zero(N);
  e.A_I = Matrix(N + 1, N);
  e.A_I.topRows(N) = -Matrix::Identity(N, N);
  e.A_I.row(N) = -mu.transpose();
  e.b_I = Vector::Zero(N + 1);
  e.b_I(N) = -R;
  e.A_E = Matrix::Ones(1, N);
  e.b_E = Vector::Ones(1);
  *u0 = Vector::Constant(N, 1.0 / static_cast<double>(N));
  return e;
}

/// Linear-dynamics optimal control with box constraints, in equality form, with
/// the feasible trajectory s_t = s̃, v_t = 0. Variables are stacked per step as (s_t, v_t).
inline EqQpInstance control_eq_instance(Eigen::Index S, Eigen::Index V, Eigen::Index T, std::uint64_t seed,
                                        Vector* u0) {
  if (S < 1 || V < 1 || T < 1) throw ConfigError("gen_control: need S, V, T >= 1");
  SplitMix64 rng(seed);
  Vector s_lo(S), s_hi(S), v_lo(V), v_hi(V), s_star(S), s_init(S);
  for (Eigen::Index i = 0; i < S; ++i) s_lo(i) = rng.uniform(-1.0, 0.0);
  for (Eigen::Index i = 0; i < S; ++i) s_hi(i) = rng.uniform(0.0, 1.0);
  for (Eigen::Index i = 0; i < V; ++i) v_lo(i) = rng.uniform(-1.0, 0.0);
  for (Eigen::Index i = 0; i < V; ++i) v_hi(i) = rng.uniform(0.0, 1.0);
  for (Eigen::Index i = 0; i < S; ++i) s_star(i) = rng.uniform(s_lo(i), s_hi(i));
  for (Eigen::Index i = 0; i < S; ++i) s_init(i) = rng.uniform(s_lo(i), s_hi(i));
  const double mu = rng.uniform(0.0, 2.0);
  Matrix R(S, V);
  for (Eigen::Index i = 0; i < S; ++i)
    for (Eigen::Index j = 0; j < V; ++j) R(i, j) = rng.uniform(-1.0, 1.0);

  const Eigen::Index W = S + V;
  const Eigen::Index N = W * T;
  auto s_off = [W](Eigen::Index t) { return t * W; };
  auto v_off = [W, S](Eigen::Index t) { return t * W + S; };

  EqQpInstance e;
  e.Qp = Matrix::Zero(N, N);
  e.cp = Vector::Zero(N);
  for (Eigen::Index t = 0; t < T; ++t) {
    e.Qp.block(s_off(t), s_off(t), S, S) = Matrix::Identity(S, S);
    e.Qp.block(v_off(t), v_off(t), V, V) = mu * Matrix::Identity(V, V);
    e.cp.segment(s_off(t), S) = -s_star;
  }

  // Box constraints: s ≤ s_hi, −s ≤ −s_lo, v ≤ v_hi, −v ≤ −v_lo for every step.
  e.A_I = Matrix::Zero(2 * N, N);
  e.b_I = Vector::Zero(2 * N);
  Eigen::Index row = 0;
  for (Eigen::Index t = 0; t < T; ++t) {
    for (Eigen::Index i = 0; i < S; ++i) {
      e.A_I(row, s_off(t) + i) = 1.0;
      e.b_I(row++) = s_hi(i);
      e.A_I(row, s_off(t) + i) = -1.0;
      e.b_I(row++) = -s_lo(i);
    }
    for (Eigen::Index i = 0; i < V; ++i) {
      e.A_I(row, v_off(t) + i) = 1.0;
      e.b_I(row++) = v_hi(i);
      e.A_I(row, v_off(t) + i) = -1.0;
      e.b_I(row++) = -v_lo(i);
    }
  }

  // s_1 = s̃ and s_{t+1} − s_t − R v_t = 0.
  e.A_E = Matrix::Zero(S * T, N);
  e.b_E = Vector::Zero(S * T);
  e.A_E.block(0, s_off(0), S, S) = Matrix::Identity(S, S);
  e.b_E.head(S) = s_init;
  for (Eigen::Index t = 0; t + 1 < T; ++t) {
    const Eigen::Index r0 = S * (t + 1);
    e.A_E.block(r0, s_off(t + 1), S, S) = Matrix::Identity(S, S);
    e.A_E.block(r0, s_off(t), S, S) = -Matrix::Identity(S, S);
    e.A_E.block(r0, v_off(t), S, V) = -R;
  }

  *u0 = Vector::Zero(N);
  for (Eigen::Index t = 0; t < T; ++t) u0->segment(s_off(t), S) = s_init;
  return e;
}

namespace detail {

inline GeneratedInstance eliminate(const EqQpInstance& e, const Vector& u0, EqTransform tr, json meta) {
  meta["eq_transform"] = to_string(tr);
  if (tr == EqTransform::Doubling) {
    meta["recovery_constant"] = 0.0;
    return {eliminate_eq_doubling(e), std::move(meta)};
  }
  auto [inst, rec] = eliminate_eq_nullspace(e, u0);
  meta["recovery_constant"] = rec.constant;
  meta["dropped_eq_rows"] = rec.dropped_rows;
  return {std::move(inst), std::move(meta)};
}

}  // namespace detail

inline QpInstance gen_portfolio(Eigen::Index N, std::uint64_t seed, EqTransform tr = EqTransform::Nullspace) {
  Vector u0;
  return detail::eliminate(portfolio_eq_instance(N, seed, &u0), u0, tr, json::object()).inst;
}

inline QpInstance gen_control(Eigen::Index S, Eigen::Index V, Eigen::Index T, std::uint64_t seed,
                              EqTransform tr = EqTransform::Nullspace) {
  Vector u0;
  return detail::eliminate(control_eq_instance(S, V, T, seed, &u0), u0, tr, json::object()).inst;
}

/// Generates one instance of `family` with its metadata.
inline GeneratedInstance generate_instance(Family family, const DatasetSizes& sz, std::uint64_t seed,
                                           EqTransform tr = EqTransform::Nullspace) {
  json meta{{"family", to_string(family)}, {"seed", seed}, {"generator_version", kGeneratorVersion}};
  switch (family) {
    case Family::Regression: {
      const Eigen::Index T = sz.T > 0 ? sz.T : 2 * sz.N;
      meta["sizes"] = json{{"N", sz.N}, {"M", sz.M}, {"T", T}};
      return {gen_regression(sz.N, sz.M, T, seed), std::move(meta)};
    }
    case Family::Portfolio: {
      meta["sizes"] = json{{"N", sz.N}};
      Vector u0;
      return detail::eliminate(portfolio_eq_instance(sz.N, seed, &u0), u0, tr, std::move(meta));
    }
    case Family::Control: {
      const Eigen::Index T = sz.T > 0 ? sz.T : 5;
      meta["sizes"] = json{{"S", sz.S}, {"V", sz.V}, {"T", T}, {"N", (sz.S + sz.V) * T}};
      Vector u0;
      return detail::eliminate(control_eq_instance(sz.S, sz.V, T, seed, &u0), u0, tr, std::move(meta));
    }
  }
  throw ConfigError("unknown family");
}

struct DatasetFile {
  std::string split;  // train | val | test
  int index = 0;
  std::uint64_t seed = 0;
  std::string path;  // relative to the manifest directory
};

struct DatasetManifest {
  Family family = Family::Regression;
  DatasetSizes sizes;
  SplitCounts counts;
  std::uint64_t base_seed = 0;
  EqTransform transform = EqTransform::Nullspace;
  std::string rng_name = SplitMix64::kName;
  std::string generator_version = kGeneratorVersion;
  std::vector<DatasetFile> files;
  std::filesystem::path dir;  // directory holding the manifest (not serialized)
};

inline json manifest_to_json(const DatasetManifest& m) {
  json files = json::array();
  for (const auto& f : m.files) {
    files.push_back(json{{"split", f.split}, {"index", f.index}, {"seed", f.seed}, {"path", f.path}});
  }
  return json{{"family", to_string(m.family)},
              {"sizes", json{{"N", m.sizes.N}, {"M", m.sizes.M}, {"T", m.sizes.T}, {"S", m.sizes.S}, {"V", m.sizes.V}}},
              {"counts", json{{"train", m.counts.train}, {"val", m.counts.val}, {"test", m.counts.test}}},
              {"base_seed", m.base_seed},
              {"eq_transform", to_string(m.transform)},
              {"rng_name", m.rng_name},
              {"generator_version", m.generator_version},
              {"files", files}};
}

inline DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  try {
    m.family = family_from_string(j.at("family").get<std::string>());
    const json& s = j.at("sizes");
    m.sizes.N = s.value("N", m.sizes.N);
    m.sizes.M = s.value("M", m.sizes.M);
    m.sizes.T = s.value("T", m.sizes.T);
    m.sizes.S = s.value("S", m.sizes.S);
    m.sizes.V = s.value("V", m.sizes.V);
    const json& c = j.at("counts");
    m.counts = SplitCounts{c.at("train").get<int>(), c.at("val").get<int>(), c.at("test").get<int>()};
    m.base_seed = j.at("base_seed").get<std::uint64_t>();
    m.transform = eq_transform_from_string(j.value("eq_transform", std::string("nullspace")));
    m.rng_name = j.value("rng_name", std::string(SplitMix64::kName));
    m.generator_version = j.value("generator_version", std::string(kGeneratorVersion));
    for (const auto& f : j.at("files")) {
      m.files.push_back(DatasetFile{f.at("split").get<std::string>(), f.at("index").get<int>(),
                                    f.at("seed").get<std::uint64_t>(), f.at("path").get<std::string>()});
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("manifest: ") + e.what());
  }
  if (m.counts.train < 1 || m.counts.val < 0 || m.counts.test < 0) throw IoError("manifest: invalid counts");
  return m;
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  DatasetManifest m = manifest_from_json(io::read_json(path));
  m.dir = path.parent_path();
  for (const auto& f : m.files) {
    if (!std::filesystem::exists(m.dir / f.path)) throw IoError("manifest lists missing file " + f.path);
  }
  return m;
}

/// In-memory split: instance d of the concatenated (train, val, test) sequence uses seed base_seed + d.
struct Dataset {
  Family family = Family::Regression;
  std::vector<QpInstance> train, val, test;
  std::vector<std::string> train_ids, val_ids, test_ids;
};

namespace detail {

inline const char* split_name(int d, const SplitCounts& counts) {
  if (d < counts.train) return "train";
  if (d < counts.train + counts.val) return "val";
  return "test";
}

inline std::string instance_id(Family f, const std::string& split, int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d", index);
  return to_string(f) + "_" + split + "_" + buf;
}

inline void push_split(Dataset& ds, const std::string& split, QpInstance inst, std::string id) {
  if (split == "train") {
    ds.train.push_back(std::move(inst));
    ds.train_ids.push_back(std::move(id));
  } else if (split == "val") {
    ds.val.push_back(std::move(inst));
    ds.val_ids.push_back(std::move(id));
  } else {
    ds.test.push_back(std::move(inst));
    ds.test_ids.push_back(std::move(id));
  }
}

}  // namespace detail

inline Dataset generate_dataset(Family family, const DatasetSizes& sizes, const SplitCounts& counts,
                                std::uint64_t base_seed, EqTransform tr = EqTransform::Nullspace) {
  Dataset ds;
  ds.family = family;
  int idx[3] = {0, 0, 0};
  for (int d = 0; d < counts.total(); ++d) {
    const std::string split = detail::split_name(d, counts);
    const int which = split == "train" ? 0 : (split == "val" ? 1 : 2);
    GeneratedInstance g = generate_instance(family, sizes, base_seed + static_cast<std::uint64_t>(d), tr);
    detail::push_split(ds, split, std::move(g.inst), detail::instance_id(family, split, idx[which]++));
  }
  return ds;
}

/// Generates all instances, writes one JSON file per instance plus manifest.json into `out_dir`.
inline DatasetManifest gen_split(Family family, const DatasetSizes& sizes, const SplitCounts& counts,
                                 std::uint64_t base_seed, const std::filesystem::path& out_dir,
                                 EqTransform tr = EqTransform::Nullspace) {
  if (counts.train < 1 || counts.val < 0 || counts.test < 0) throw ConfigError("gen_split: invalid counts");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  DatasetManifest m;
  m.family = family;
  m.sizes = sizes;
  m.counts = counts;
  m.base_seed = base_seed;
  m.transform = tr;
  m.dir = out_dir;
  int idx[3] = {0, 0, 0};
  for (int d = 0; d < counts.total(); ++d) {
    const std::string split = detail::split_name(d, counts);
    const int which = split == "train" ? 0 : (split == "val" ? 1 : 2);
    const std::uint64_t seed = base_seed + static_cast<std::uint64_t>(d);
    GeneratedInstance g = generate_instance(family, sizes, seed, tr);
    const int index = idx[which]++;
    const std::string rel = detail::instance_id(family, split, index) + ".json";
    g.meta["split"] = split;
    write_instance(out_dir / rel, g.inst, g.meta);
    m.files.push_back(DatasetFile{split, index, seed, rel});
  }
  io::write_json(out_dir / "manifest.json", manifest_to_json(m));
  return m;
}

inline Dataset load_dataset(const DatasetManifest& m) {
  Dataset ds;
  ds.family = m.family;
  for (const auto& f : m.files) {
    detail::push_split(ds, f.split, read_instance(m.dir / f.path), detail::instance_id(m.family, f.split, f.index));
  }
  return ds;
}

}  // namespace qpproj
