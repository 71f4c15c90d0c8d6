#pragma once

// Experiment sweeps over K, test N, M, training-set size D and a
// train-family × test-family matrix, written as one long CSV plus a summary
// that is recomputed from that CSV alone.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iterator>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "qpproj/baselines.hpp"
#include "qpproj/datasets.hpp"
#include "qpproj/eval.hpp"
#include "qpproj/gnn.hpp"
#include "qpproj/io.hpp"
#include "qpproj/training.hpp"

namespace qpproj {

inline SolverSettings solver_settings_from_json(const json& j) {
  SolverSettings s;
  if (!j.is_object()) throw ConfigError("solver settings must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "eps_abs") s.eps_abs = v.get<double>();
      else if (key == "eps_rel") s.eps_rel = v.get<double>();
      else if (key == "max_iter") s.max_iter = v.get<int>();
      else if (key == "rho") s.rho = v.get<double>();
      else if (key == "sigma") s.sigma = v.get<double>();
      else if (key == "alpha") s.alpha = v.get<double>();
      else if (key == "polish") s.polish = v.get<bool>();
      else throw ConfigError("solver settings: unknown key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("solver settings: ") + e.what());
  }
  s.validate();
  return s;
}

inline DatasetSizes sizes_from_json(const json& j, DatasetSizes s = {}) {
  if (!j.is_object()) throw ConfigError("sizes must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "N") s.N = v.get<Eigen::Index>();
      else if (key == "M") s.M = v.get<Eigen::Index>();
      else if (key == "T") s.T = v.get<Eigen::Index>();
      else if (key == "S") s.S = v.get<Eigen::Index>();
      else if (key == "V") s.V = v.get<Eigen::Index>();
      else throw ConfigError("sizes: unknown key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("sizes: ") + e.what());
  }
  return s;
}

inline SplitCounts counts_from_json(const json& j) {
  SplitCounts c;
  try {
    c.train = j.value("train", c.train);
    c.val = j.value("val", c.val);
    c.test = j.value("test", c.test);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("counts: ") + e.what());
  }
  if (c.train < 1 || c.val < 0 || c.test < 1) throw ConfigError("counts: need train >= 1, val >= 0, test >= 1");
  return c;
}

/// Variable count of a generated instance for the given sizes.
inline Eigen::Index family_n(Family f, const DatasetSizes& s) {
  return f == Family::Control ? (s.S + s.V) * (s.T > 0 ? s.T : 5) : s.N;
}

enum class SweepType { K, N, M, D, Cross };

struct SweepSpec {
  std::string name;
  SweepType type = SweepType::K;
  Family family = Family::Regression;
  std::vector<Family> families{Family::Regression, Family::Portfolio, Family::Control};
  DatasetSizes sizes;
  std::map<Family, DatasetSizes> family_sizes;
  SplitCounts counts;
  /// K values (K sweep), test N (N sweep), M (M sweep) or training counts (D sweep).
  std::vector<long long> values;
  int K = 10;
  /// method name → checkpoint path template with {K} {N} {M} {D} {family} {seed}.
  std::map<std::string, std::string> checkpoints;
};

struct ExperimentSpec {
  std::uint64_t seed = 0;
  std::vector<Method> methods;
  TrainConfig train;
  EvalSettings eval;
  EqTransform transform = EqTransform::Nullspace;
  std::vector<SweepSpec> sweeps;
  /// Relative checkpoint paths resolve against this directory.
  std::filesystem::path base_dir;
};

inline const char* to_string(SweepType t) {
  switch (t) {
    case SweepType::K: return "K";
    case SweepType::N: return "N";
    case SweepType::M: return "M";
    case SweepType::D: return "D";
    case SweepType::Cross: return "cross";
  }
  return "?";
}

inline SweepType sweep_type_from_string(const std::string& s) {
  for (SweepType t : {SweepType::K, SweepType::N, SweepType::M, SweepType::D, SweepType::Cross})
    if (s == to_string(t)) return t;
  throw ConfigError("unknown sweep type '" + s + "' (expected K|N|M|D|cross)");
}

inline SweepSpec sweep_from_json(const json& j) {
  SweepSpec s;
  static const std::set<std::string> known{"name", "type", "family", "families", "sizes", "counts", "values", "K", "checkpoints"};
  for (const auto& [key, v] : j.items())
    if (!known.count(key)) throw ConfigError("sweep: unknown key '" + key + "'");
  try {
    s.type = sweep_type_from_string(j.at("type").get<std::string>());
    s.name = j.value("name", std::string(to_string(s.type)) + "_sweep");
    if (j.contains("family")) s.family = family_from_string(j.at("family").get<std::string>());
    if (j.contains("families")) {
      s.families.clear();
      for (const auto& f : j.at("families")) s.families.push_back(family_from_string(f.get<std::string>()));
    }
    if (s.type == SweepType::Cross) {
      if (j.contains("sizes"))
        for (const auto& [fam, sz] : j.at("sizes").items()) s.family_sizes[family_from_string(fam)] = sizes_from_json(sz);
    } else if (j.contains("sizes")) {
      s.sizes = sizes_from_json(j.at("sizes"));
    }
    if (j.contains("counts")) s.counts = counts_from_json(j.at("counts"));
    if (j.contains("values")) s.values = j.at("values").get<std::vector<long long>>();
    s.K = j.value("K", s.K);
    if (j.contains("checkpoints"))
      for (const auto& [m, path] : j.at("checkpoints").items()) {
        method_from_string(m);
        s.checkpoints[m] = path.get<std::string>();
      }
  } catch (const json::exception& e) {
    throw ConfigError("sweep: " + std::string(e.what()));
  }
  if (s.type != SweepType::Cross && s.values.empty()) throw ConfigError("sweep '" + s.name + "': empty values");
  if (s.type == SweepType::M && s.family != Family::Regression) throw ConfigError("M sweep applies to regression only");
  if (s.type == SweepType::Cross && s.families.empty()) throw ConfigError("cross sweep: empty family list");
  if (s.K < 1) throw ConfigError("sweep: K must be >= 1");
  for (long long v : s.values)
    if (v < 1) throw ConfigError("sweep '" + s.name + "': values must be >= 1");
  return s;
}

inline ExperimentSpec experiment_spec_from_json(const json& j, const std::filesystem::path& base_dir = {}) {
  if (!j.is_object()) throw ConfigError("experiment spec must be a JSON object");
  static const std::set<std::string> known{"seed", "methods", "train", "solver", "timing", "repeats", "threads", "eq_transform", "sweeps"};
  for (const auto& [key, v] : j.items())
    if (!known.count(key)) throw ConfigError("experiment: unknown key '" + key + "'");
  ExperimentSpec s;
  s.base_dir = base_dir;
  try {
    s.seed = j.value("seed", std::uint64_t{0});
    for (const auto& m : j.value("methods", json::array())) s.methods.push_back(method_from_string(m.get<std::string>()));
    if (j.contains("train")) s.train = train_config_from_json(j.at("train"));
    if (j.contains("solver")) s.eval.solver = solver_settings_from_json(j.at("solver"));
    s.eval.record_timing = j.value("timing", true);
    s.eval.repeats = j.value("repeats", 3);
    s.eval.threads = j.value("threads", 1);
    if (j.contains("eq_transform")) s.transform = eq_transform_from_string(j.at("eq_transform").get<std::string>());
    for (const auto& sw : j.value("sweeps", json::array())) s.sweeps.push_back(sweep_from_json(sw));
  } catch (const json::exception& e) {
    throw ConfigError("experiment: " + std::string(e.what()));
  }
  if (s.eval.repeats < 1 || s.eval.threads < 1) throw ConfigError("experiment: repeats and threads must be >= 1");
  s.train.seed = s.seed;
  s.train.threads = s.eval.threads;
  s.train.record_timing = s.eval.record_timing;
  s.eval.seed = s.seed;
  return s;
}

struct ExperimentRow {
  std::string sweep;
  std::string param;
  std::string value;
  std::string train_family;
  std::string test_family;
  EvalRecord record;
};

inline constexpr const char* kExperimentCsvPrefix = "sweep,param,value,train_family,test_family,";

inline std::string experiment_rows_to_csv(const std::vector<ExperimentRow>& rows) {
  std::string out = std::string(kExperimentCsvPrefix) + kEvalCsvHeader + "\n";
  for (const auto& r : rows)
    out += r.sweep + "," + r.param + "," + r.value + "," + r.train_family + "," + r.test_family + "," +
           eval_csv_fields(r.record) + "\n";
  return out;
}

inline std::vector<ExperimentRow> experiment_rows_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != std::string(kExperimentCsvPrefix) + kEvalCsvHeader)
    throw IoError("experiment CSV: unexpected header");
  std::vector<ExperimentRow> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != 15) throw IoError("experiment CSV: expected 15 columns");
    out.push_back(ExperimentRow{cells[0], cells[1], cells[2], cells[3], cells[4], detail::record_from_cells(cells, 5)});
  }
  return out;
}

struct CellSummary {
  std::string sweep, param, value, train_family, test_family, method;
  int K = 0;
  int n = 0;
  double mean_error = 0.0;
  double stderr_error = 0.0;
  int failures = 0;
  double median_total_time_s = 0.0;
};

inline constexpr const char* kSummaryCsvHeader =
    "sweep,param,value,train_family,test_family,method,K,n,mean_error,stderr,failures,median_total_time_s";

/// Groups rows by (sweep, value, train family, test family, method, K), in first-seen order.
inline std::vector<CellSummary> summarize(const std::vector<ExperimentRow>& rows) {
  std::vector<CellSummary> cells;
  std::map<std::string, std::size_t> index;
  std::vector<std::vector<double>> errors, times;
  for (const auto& r : rows) {
    const std::string key = r.sweep + "\x1f" + r.value + "\x1f" + r.train_family + "\x1f" + r.test_family + "\x1f" +
                            r.record.method + "\x1f" + std::to_string(r.record.K);
    auto [it, fresh] = index.emplace(key, cells.size());
    if (fresh) {
      cells.push_back(CellSummary{r.sweep, r.param, r.value, r.train_family, r.test_family, r.record.method, r.record.K});
      errors.emplace_back();
      times.emplace_back();
    }
    CellSummary& c = cells[it->second];
    errors[it->second].push_back(r.record.relative_error);
    times[it->second].push_back(r.record.total_time_s);
    c.failures += r.record.feasible ? 0 : 1;
  }
  for (std::size_t i = 0; i < cells.size(); ++i) {
    cells[i].n = static_cast<int>(errors[i].size());
    std::tie(cells[i].mean_error, cells[i].stderr_error) = mean_stderr(errors[i]);
    cells[i].median_total_time_s = median(times[i]);
  }
  return cells;
}

inline std::string summary_to_csv(const std::vector<CellSummary>& cells) {
  std::string out = std::string(kSummaryCsvHeader) + "\n";
  for (const auto& c : cells)
    out += c.sweep + "," + c.param + "," + c.value + "," + c.train_family + "," + c.test_family + "," + c.method + "," +
           std::to_string(c.K) + "," + std::to_string(c.n) + "," + io::fmt(c.mean_error) + "," + io::fmt(c.stderr_error) +
           "," + std::to_string(c.failures) + "," + io::fmt(c.median_total_time_s) + "\n";
  return out;
}

/// Mean error nonincreasing in K, allowing each step to rise by two combined standard errors.
struct MonotoneDiagnostic {
  std::string sweep, train_family, method;
  std::vector<int> K;
  std::vector<double> mean;
  bool monotone = true;
};

inline std::vector<MonotoneDiagnostic> k_monotonicity(const std::vector<CellSummary>& cells) {
  std::map<std::string, MonotoneDiagnostic> by;
  std::map<std::string, std::vector<const CellSummary*>> members;
  std::vector<std::string> order;
  for (const auto& c : cells) {
    if (c.param != "K") continue;
    const std::string key = c.sweep + "\x1f" + c.train_family + "\x1f" + c.method;
    if (!members.count(key)) {
      order.push_back(key);
      by[key] = MonotoneDiagnostic{c.sweep, c.train_family, c.method, {}, {}, true};
    }
    members[key].push_back(&c);
  }
  std::vector<MonotoneDiagnostic> out;
  for (const auto& key : order) {
    auto ms = members[key];
    std::sort(ms.begin(), ms.end(), [](const CellSummary* a, const CellSummary* b) { return a->K < b->K; });
    MonotoneDiagnostic d = by[key];
    for (std::size_t i = 0; i < ms.size(); ++i) {
      d.K.push_back(ms[i]->K);
      d.mean.push_back(ms[i]->mean_error);
      if (i == 0) continue;
      const double slack = 2.0 * std::hypot(ms[i]->stderr_error, ms[i - 1]->stderr_error) + 1e-12;
      if (ms[i]->mean_error > ms[i - 1]->mean_error + slack) d.monotone = false;
    }
    out.push_back(std::move(d));
  }
  return out;
}

/// Train-family × test-family mean errors of one method.
struct CrossMatrix {
  std::string sweep, method;
  std::vector<std::string> families;
  /// mean[i][j]: trained on families[i], tested on families[j] (NaN if absent).
  std::vector<std::vector<double>> mean, stderr_error;

  /// True when the model trained on family j is no worse on j than the others.
  bool diagonal_best(std::size_t j) const {
    for (std::size_t i = 0; i < families.size(); ++i)
      if (i != j && !(mean[j][j] <= mean[i][j])) return false;
    return !std::isnan(mean[j][j]);
  }

  int diagonal_wins() const {
    int w = 0;
    for (std::size_t j = 0; j < families.size(); ++j) w += diagonal_best(j) ? 1 : 0;
    return w;
  }
};

inline std::vector<CrossMatrix> cross_matrices(const std::vector<CellSummary>& cells) {
  std::vector<CrossMatrix> out;
  for (const auto& c : cells) {
    if (c.param != "cross") continue;
    auto it = std::find_if(out.begin(), out.end(), [&](const CrossMatrix& m) { return m.sweep == c.sweep && m.method == c.method; });
    if (it == out.end()) {
      out.push_back(CrossMatrix{c.sweep, c.method, {}, {}, {}});
      it = std::prev(out.end());
    }
    for (const std::string& f : {c.train_family, c.test_family})
      if (std::find(it->families.begin(), it->families.end(), f) == it->families.end()) it->families.push_back(f);
  }
  for (auto& m : out) {
    const std::size_t n = m.families.size();
    const double nan = std::numeric_limits<double>::quiet_NaN();
    m.mean.assign(n, std::vector<double>(n, nan));
    m.stderr_error.assign(n, std::vector<double>(n, nan));
    auto pos = [&](const std::string& f) {
      return static_cast<std::size_t>(std::find(m.families.begin(), m.families.end(), f) - m.families.begin());
    };
    for (const auto& c : cells) {
      if (c.param != "cross" || c.sweep != m.sweep || c.method != m.method) continue;
      m.mean[pos(c.train_family)][pos(c.test_family)] = c.mean_error;
      m.stderr_error[pos(c.train_family)][pos(c.test_family)] = c.stderr_error;
    }
  }
  return out;
}

/// Plain-text tables; diagonal cells of cross matrices are bracketed, with a star when best in column.
inline std::string summary_text(const std::vector<CellSummary>& cells, const std::vector<std::string>& notes) {
  std::ostringstream os;
  os << "mean relative error ± standard error\n";
  for (const auto& c : cells) {
    if (c.param == "cross") continue;
    os << c.sweep << " " << c.param << "=" << c.value << " " << c.method << " (K=" << c.K << ", n=" << c.n
       << "): " << io::fmt(c.mean_error) << " ± " << io::fmt(c.stderr_error) << "\n";
  }
  for (const auto& m : cross_matrices(cells)) {
    os << "\n" << m.sweep << " " << m.method << " (rows: train family, columns: test family)\n";
    for (std::size_t i = 0; i < m.families.size(); ++i) {
      os << m.families[i];
      for (std::size_t j = 0; j < m.families.size(); ++j) {
        const std::string v = io::fmt(m.mean[i][j]) + " ± " + io::fmt(m.stderr_error[i][j]);
        if (i == j) os << "  [" << v << "]" << (m.diagonal_best(j) ? "*" : "");
        else os << "  " << v;
      }
      os << "\n";
    }
  }
  for (const auto& d : k_monotonicity(cells))
    os << "\nK trend " << d.sweep << " " << d.method << ": " << (d.monotone ? "nonincreasing" : "NOT nonincreasing")
       << " within noise\n";
  if (!notes.empty()) {
    os << "\nnotes\n";
    for (const auto& n : notes) os << "  " << n << "\n";
  }
  return os.str();
}

inline json summary_json(const std::vector<CellSummary>& cells, const std::vector<std::string>& notes) {
  json mono = json::array();
  for (const auto& d : k_monotonicity(cells))
    mono.push_back(json{{"sweep", d.sweep}, {"train_family", d.train_family}, {"method", d.method},
                        {"K", d.K}, {"mean_error", d.mean}, {"monotone", d.monotone}});
  json cross = json::array();
  for (const auto& m : cross_matrices(cells)) {
    std::vector<bool> best;
    for (std::size_t j = 0; j < m.families.size(); ++j) best.push_back(m.diagonal_best(j));
    cross.push_back(json{{"sweep", m.sweep}, {"method", m.method}, {"families", m.families}, {"mean_error", m.mean},
                         {"stderr", m.stderr_error}, {"diagonal_best", best}, {"diagonal_wins", m.diagonal_wins()}});
  }
  return json{{"cells", cells.size()}, {"k_monotonicity", mono}, {"cross_dataset", cross}, {"notes", notes}};
}

struct ExperimentResult {
  std::vector<ExperimentRow> rows;
  /// Missing checkpoints and failed cells; the run continues past them.
  std::vector<std::string> notes;
};

namespace detail {

inline std::string substitute(std::string s, const std::map<std::string, std::string>& vars) {
  for (const auto& [k, v] : vars) {
    const std::string pat = "{" + k + "}";
    for (std::size_t p = s.find(pat); p != std::string::npos; p = s.find(pat, p + v.size())) s.replace(p, pat.size(), v);
  }
  return s;
}

struct ExperimentCell {
  std::string value;
  std::string train_key;
  const Dataset* train = nullptr;
  int train_count = 0;
  const Dataset* test = nullptr;
  int K = 0;
  std::map<std::string, std::string> vars;
};

inline MethodArtifacts load_artifact(Method m, const std::filesystem::path& path) {
  MethodArtifacts a;
  switch (m) {
    case Method::Ours: a.ours = load_checkpoint(path); break;
    case Method::Pca: a.pca = pca_projection_from_json(io::read_json(path)); break;
    case Method::SharedP: a.sharedp = shared_projection_from_json(io::read_json(path)); break;
    case Method::Direct: a.direct = direct_model_from_json(io::read_json(path)); break;
    default: break;
  }
  return a;
}

inline std::vector<QpInstance> head(const std::vector<QpInstance>& v, int n) {
  return {v.begin(), v.begin() + std::min<std::ptrdiff_t>(n, static_cast<std::ptrdiff_t>(v.size()))};
}

inline MethodArtifacts train_artifact(Method m, const ExperimentCell& cell, const ExperimentSpec& spec, FullSolveCache& cache) {
  const auto train_set = head(cell.train->train, cell.train_count);
  TrainConfig cfg = spec.train;
  cfg.K = cell.K;
  cfg.batch_size = std::min<int>(cfg.batch_size, static_cast<int>(train_set.size()));
  MethodArtifacts a;
  switch (m) {
    case Method::Ours: a.ours = train(train_set, cell.train->val, cfg, cache, spec.eval.solver).first; break;
    case Method::Pca: a.pca = pca_train(train_set, cell.K, cache); break;
    case Method::SharedP: a.sharedp = sharedp_train(train_set, cell.train->val, cfg, cache, spec.eval.solver).first; break;
    case Method::Direct: a.direct = direct_train(train_set, cell.train->val, cfg, cache).model; break;
    default: break;
  }
  return a;
}

}  // namespace detail

/// Runs every sweep; `log` receives one progress line per evaluated cell.
inline ExperimentResult run_experiment(const ExperimentSpec& spec, FullSolveCache& cache, std::ostream* log = nullptr) {
  ExperimentResult result;
  std::map<std::string, Dataset> datasets;
  auto dataset = [&](Family f, const DatasetSizes& sz, const SplitCounts& counts) -> const Dataset& {
    const std::string key = to_string(f) + ":" + std::to_string(sz.N) + "," + std::to_string(sz.M) + "," +
                            std::to_string(sz.T) + "," + std::to_string(sz.S) + "," + std::to_string(sz.V) + ":" +
                            std::to_string(counts.train) + "," + std::to_string(counts.val) + "," +
                            std::to_string(counts.test);
    auto it = datasets.find(key);
    if (it == datasets.end()) it = datasets.emplace(key, generate_dataset(f, sz, counts, spec.seed, spec.transform)).first;
    return it->second;
  };
  std::map<std::string, MethodArtifacts> trained;

  for (const auto& sw : spec.sweeps) {
    struct Pending {
      detail::ExperimentCell cell;
      Family train_family, test_family;
    };
    std::vector<Pending> cells;
    auto vars = [&](const DatasetSizes& sz, Family f, int K, int D) {
      return std::map<std::string, std::string>{{"K", std::to_string(K)},
                                                {"N", std::to_string(family_n(f, sz))},
                                                {"M", std::to_string(sz.M)},
                                                {"D", std::to_string(D)},
                                                {"family", to_string(f)},
                                                {"seed", std::to_string(spec.seed)}};
    };
    try {
      switch (sw.type) {
        case SweepType::K: {
          const Dataset& ds = dataset(sw.family, sw.sizes, sw.counts);
          for (long long k : sw.values) {
            const int K = static_cast<int>(k);
            cells.push_back({{std::to_string(K), "", &ds, sw.counts.train, &ds, K, vars(sw.sizes, sw.family, K, sw.counts.train)},
                             sw.family, sw.family});
          }
          break;
        }
        case SweepType::N: {
          const Dataset& tr = dataset(sw.family, sw.sizes, sw.counts);
          for (long long n : sw.values) {
            DatasetSizes sz = sw.sizes;
            if (sw.family == Family::Control) {
              const Eigen::Index T = sz.T > 0 ? sz.T : 5;
              sz.S = sz.V = static_cast<Eigen::Index>(n) / (2 * T);
            } else {
              sz.N = static_cast<Eigen::Index>(n);
            }
            const Dataset& te = dataset(sw.family, sz, sw.counts);
            cells.push_back({{std::to_string(family_n(sw.family, sz)), "", &tr, sw.counts.train, &te, sw.K,
                              vars(sw.sizes, sw.family, sw.K, sw.counts.train)},
                             sw.family, sw.family});
          }
          break;
        }
        case SweepType::M: {
          for (long long m : sw.values) {
            DatasetSizes sz = sw.sizes;
            sz.M = static_cast<Eigen::Index>(m);
            const Dataset& ds = dataset(sw.family, sz, sw.counts);
            cells.push_back({{std::to_string(m), "", &ds, sw.counts.train, &ds, sw.K, vars(sz, sw.family, sw.K, sw.counts.train)},
                             sw.family, sw.family});
          }
          break;
        }
        case SweepType::D: {
          SplitCounts counts = sw.counts;
          counts.train = static_cast<int>(*std::max_element(sw.values.begin(), sw.values.end()));
          const Dataset& ds = dataset(sw.family, sw.sizes, counts);
          for (long long d : sw.values) {
            const int D = static_cast<int>(d);
            cells.push_back({{std::to_string(D), "", &ds, D, &ds, sw.K, vars(sw.sizes, sw.family, sw.K, D)}, sw.family, sw.family});
          }
          break;
        }
        case SweepType::Cross: {
          for (Family tf : sw.families) {
            const auto tsz = sw.family_sizes.count(tf) ? sw.family_sizes.at(tf) : sw.sizes;
            const Dataset& tr = dataset(tf, tsz, sw.counts);
            for (Family ef : sw.families) {
              const auto esz = sw.family_sizes.count(ef) ? sw.family_sizes.at(ef) : sw.sizes;
              const Dataset& te = dataset(ef, esz, sw.counts);
              cells.push_back({{to_string(tf) + ">" + to_string(ef), "", &tr, sw.counts.train, &te, sw.K,
                                vars(tsz, tf, sw.K, sw.counts.train)},
                               tf, ef});
            }
          }
          break;
        }
      }
    } catch (const std::exception& e) {
      result.notes.push_back(sw.name + ": dataset generation failed: " + e.what());
      continue;
    }

    for (auto& p : cells) {
      auto& cell = p.cell;
      const auto& v = cell.vars;
      cell.train_key = to_string(p.train_family) + "|N=" + v.at("N") + "|M=" + v.at("M") + "|D=" + v.at("D") +
                       "|ds=" + std::to_string(reinterpret_cast<std::uintptr_t>(cell.train));
      for (Method m : spec.methods) {
        const std::string where = sw.name + " " + to_string(sw.type) + "=" + cell.value + " " + to_string(m);
        try {
          MethodArtifacts art;
          if (is_learned(m)) {
            const auto tpl = sw.checkpoints.find(to_string(m));
            if (tpl != sw.checkpoints.end()) {
              std::filesystem::path path = detail::substitute(tpl->second, cell.vars);
              if (path.is_relative() && !spec.base_dir.empty()) path = spec.base_dir / path;
              if (!std::filesystem::exists(path)) {
                result.notes.push_back(where + ": missing checkpoint " + path.string());
                continue;
              }
              art = detail::load_artifact(m, path);
            } else {
              const std::string key = cell.train_key + "|K=" + std::to_string(cell.K) + "|" + to_string(m);
              auto it = trained.find(key);
              if (it == trained.end()) it = trained.emplace(key, detail::train_artifact(m, cell, spec, cache)).first;
              art = it->second;
            }
          }
          const auto recs = evaluate_method(m, cell.test->test, cell.test->test_ids, cell.K, art, cache, spec.eval);
          for (const auto& r : recs)
            result.rows.push_back(ExperimentRow{sw.name, to_string(sw.type), cell.value, to_string(p.train_family),
                                                to_string(p.test_family), r});
          if (log) *log << where << ": mean error " << io::fmt(mean_error(recs)) << "\n";
        } catch (const std::exception& e) {
          result.notes.push_back(where + ": " + e.what());
          if (log) *log << where << ": failed: " << e.what() << "\n";
        }
      }
    }
  }
  return result;
}

/// Writes results.csv, summary.csv, summary.json and summary.txt into `out_dir`.
inline void write_experiment(const ExperimentResult& r, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  const std::string csv = experiment_rows_to_csv(r.rows);
  io::write_text(out_dir / "results.csv", csv);
  const auto cells = summarize(experiment_rows_from_csv(csv));
  io::write_text(out_dir / "summary.csv", summary_to_csv(cells));
  io::write_json(out_dir / "summary.json", summary_json(cells, r.notes));
  io::write_text(out_dir / "summary.txt", summary_text(cells, r.notes));
}

}  // namespace qpproj
