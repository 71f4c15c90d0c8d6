#pragma once

// JSON serialization for instances and dense matrices, plus small file helpers.
//
// Instance file: {"n", "m", "Q" (row-major), "c", "A" (row-major), "b", "constant", "meta"}.

#include <cstdint>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "qpproj/common.hpp"
#include "qpproj/qp.hpp"

namespace qpproj {

using json = nlohmann::json;

namespace io {

inline json vector_to_json(const Vector& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline Vector vector_from_json(const json& a, Eigen::Index expected, const std::string& what) {
  if (!a.is_array()) throw IoError(what + ": expected an array");
  if (expected >= 0 && static_cast<Eigen::Index>(a.size()) != expected) {
    throw IoError(what + ": expected " + std::to_string(expected) + " entries, got " + std::to_string(a.size()));
  }
  Vector v(static_cast<Eigen::Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) v(static_cast<Eigen::Index>(i)) = a[i].get<double>();
  return v;
}

/// Row-major flat array.
inline json matrix_to_json(const Matrix& M) {
  json a = json::array();
  for (Eigen::Index i = 0; i < M.rows(); ++i)
    for (Eigen::Index j = 0; j < M.cols(); ++j) a.push_back(M(i, j));
  return a;
}

inline Matrix matrix_from_json(const json& a, Eigen::Index rows, Eigen::Index cols, const std::string& what) {
  if (!a.is_array()) throw IoError(what + ": expected an array");
  if (static_cast<Eigen::Index>(a.size()) != rows * cols) {
    throw IoError(what + ": expected " + std::to_string(rows * cols) + " entries, got " + std::to_string(a.size()));
  }
  Matrix M(rows, cols);
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) M(i, j) = a[k++].get<double>();
  return M;
}

/// {"rows", "cols", "data"} with row-major data.
inline json shaped_matrix_to_json(const Matrix& M) {
  return json{{"rows", M.rows()}, {"cols", M.cols()}, {"data", matrix_to_json(M)}};
}

inline Matrix shaped_matrix_from_json(const json& j, const std::string& what) {
  try {
    return matrix_from_json(j.at("data"), j.at("rows").get<Eigen::Index>(), j.at("cols").get<Eigen::Index>(), what);
  } catch (const json::exception& e) {
    throw IoError(what + ": " + e.what());
  }
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline json read_json(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw IoError("invalid JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const json& j) { write_text(path, j.dump(1) + "\n"); }

/// Shortest round-trip decimal form, used for every CSV number.
inline std::string fmt(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace io

inline json instance_to_json(const QpInstance& inst, const json& meta = json::object()) {
  return json{{"n", inst.n_vars()},
              {"m", inst.n_cons()},
              {"Q", io::matrix_to_json(inst.Q())},
              {"c", io::vector_to_json(inst.c())},
              {"A", io::matrix_to_json(inst.A())},
              {"b", io::vector_to_json(inst.b())},
              {"constant", inst.constant()},
              {"meta", meta}};
}

inline QpInstance instance_from_json(const json& j, json* meta = nullptr) {
  try {
    const auto n = j.at("n").get<Eigen::Index>();
    const auto m = j.at("m").get<Eigen::Index>();
    if (n < 0 || m < 0) throw IoError("instance: negative dimensions");
    Matrix Q = io::matrix_from_json(j.at("Q"), n, n, "instance.Q");
    Vector c = io::vector_from_json(j.at("c"), n, "instance.c");
    Matrix A = io::matrix_from_json(j.at("A"), m, n, "instance.A");
    Vector b = io::vector_from_json(j.at("b"), m, "instance.b");
    const double constant = j.value("constant", 0.0);
    if (meta) *meta = j.value("meta", json::object());
    return QpInstance(std::move(Q), std::move(c), std::move(A), std::move(b), constant);
  } catch (const json::exception& e) {
    throw IoError(std::string("instance: ") + e.what());
  }
}

inline void write_instance(const std::filesystem::path& path, const QpInstance& inst, const json& meta = json::object()) {
  io::write_json(path, instance_to_json(inst, meta));
}

inline QpInstance read_instance(const std::filesystem::path& path, json* meta = nullptr) {
  return instance_from_json(io::read_json(path), meta);
}

/// FNV-1a over the instance's raw doubles; keys on-disk caches.
inline std::uint64_t instance_hash(const QpInstance& inst) {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&h](const double* p, Eigen::Index count) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < static_cast<std::size_t>(count) * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  const double dims[2] = {static_cast<double>(inst.n_vars()), static_cast<double>(inst.n_cons())};
  feed(dims, 2);
  feed(inst.Q().data(), inst.Q().size());
  feed(inst.c().data(), inst.c().size());
  feed(inst.A().data(), inst.A().size());
  feed(inst.b().data(), inst.b().size());
  const double k = inst.constant();
  feed(&k, 1);
  return h;
}

}  // namespace qpproj
