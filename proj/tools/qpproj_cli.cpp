#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "qpproj/baselines.hpp"
#include "qpproj/datasets.hpp"
#include "qpproj/eval.hpp"
#include "qpproj/experiment.hpp"
#include "qpproj/gnn.hpp"
#include "qpproj/io.hpp"
#include "qpproj/theory.hpp"
#include "qpproj/training.hpp"

namespace fs = std::filesystem;
using namespace qpproj;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string config;
  std::string out = ".";
  int threads = 1;
  bool no_timing = false;
  std::optional<double> eps_abs, eps_rel;
  std::optional<int> max_iter;
};

json config_json(const Globals& g) { return g.config.empty() ? json::object() : io::read_json(g.config); }

SolverSettings solver_settings(const Globals& g) {
  SolverSettings s;
  if (g.eps_abs) s.eps_abs = *g.eps_abs;
  if (g.eps_rel) s.eps_rel = *g.eps_rel;
  if (g.max_iter) s.max_iter = *g.max_iter;
  s.validate();
  return s;
}

fs::path out_dir(const Globals& g) {
  std::error_code ec;
  fs::create_directories(g.out, ec);
  if (ec) throw IoError("cannot create " + g.out + ": " + ec.message());
  return g.out;
}

Dataset load_data(const std::string& path) {
  fs::path p = path;
  if (fs::is_directory(p)) p /= "manifest.json";
  return load_dataset(read_manifest(p));
}

const std::vector<QpInstance>& split_of(const Dataset& ds, const std::string& split, const std::vector<std::string>** ids) {
  if (split == "train") return *ids = &ds.train_ids, ds.train;
  if (split == "val") return *ids = &ds.val_ids, ds.val;
  if (split == "test") return *ids = &ds.test_ids, ds.test;
  throw ConfigError("unknown split '" + split + "' (expected train|val|test)");
}

struct TrainFlags {
  std::optional<int> K, epochs, batch_size;
  std::optional<double> lr;

  void add(CLI::App* app) {
    app->add_option("--K", K, "Reduced dimension");
    app->add_option("--epochs", epochs, "Maximum training epochs");
    app->add_option("--batch-size", batch_size, "Minibatch size");
    app->add_option("--lr", lr, "Adam learning rate");
  }

  TrainConfig resolve(const Globals& g) const {
    TrainConfig c = g.config.empty() ? TrainConfig{} : train_config_from_json(config_json(g));
    if (K) c.K = *K;
    if (epochs) c.max_epochs = *epochs;
    if (batch_size) c.batch_size = *batch_size;
    if (lr) c.learning_rate = *lr;
    if (g.seed_given) c.seed = g.seed;
    c.threads = g.threads;
    if (g.no_timing) c.record_timing = false;
    c.validate();
    return c;
  }
};

void print_epoch(const EpochRecord& e) {
  std::fprintf(stderr, "epoch %d train_loss %s val_loss %s failures %d\n", e.epoch, io::fmt(e.train_loss).c_str(),
               io::fmt(e.val_loss).c_str(), e.failures);
}

void run_gen_data(const Globals& g, const std::string& family, const std::optional<Eigen::Index>& N,
                  const std::optional<Eigen::Index>& M, const std::optional<Eigen::Index>& T,
                  const std::optional<Eigen::Index>& S, const std::optional<Eigen::Index>& V, const std::optional<int>& n_train,
                  const std::optional<int>& n_val, const std::optional<int>& n_test, const std::string& transform) {
  const json cfg = config_json(g);
  Family fam = family_from_string(family.empty() ? cfg.value("family", std::string("regression")) : family);
  DatasetSizes sizes = cfg.contains("sizes") ? sizes_from_json(cfg.at("sizes")) : DatasetSizes{};
  SplitCounts counts = cfg.contains("counts") ? counts_from_json(cfg.at("counts")) : SplitCounts{};
  if (N) sizes.N = *N;
  if (M) sizes.M = *M;
  if (T) sizes.T = *T;
  if (S) sizes.S = *S;
  if (V) sizes.V = *V;
  if (n_train) counts.train = *n_train;
  if (n_val) counts.val = *n_val;
  if (n_test) counts.test = *n_test;
  const EqTransform tr = eq_transform_from_string(transform.empty() ? cfg.value("eq_transform", std::string("nullspace")) : transform);
  const std::uint64_t seed = g.seed_given ? g.seed : cfg.value("seed", std::uint64_t{0});
  const DatasetManifest m = gen_split(fam, sizes, counts, seed, out_dir(g), tr);
  std::printf("wrote %zu instances and manifest.json to %s\n", m.files.size(), g.out.c_str());
}

void run_train(const Globals& g, const TrainFlags& flags, const std::string& data) {
  const TrainConfig c = flags.resolve(g);
  const Dataset ds = load_data(data);
  FullSolveCache cache;
  const auto [params, report] = train(ds.train, ds.val, c, cache, solver_settings(g), print_epoch);
  const fs::path out = out_dir(g);
  save_checkpoint(out / "model.json", params, json{{"best_epoch", report.best_epoch}, {"train_config", train_config_to_json(c)}});
  io::write_text(out / "train_report.csv", report.to_csv());
  std::printf("best epoch %d; wrote model.json and train_report.csv to %s\n", report.best_epoch, g.out.c_str());
}

void run_baseline(const Globals& g, const TrainFlags& flags, const std::string& method, const std::string& data) {
  const Method m = method_from_string(method);
  if (!is_learned(m) || m == Method::Ours) throw ConfigError("baseline: method must be pca, sharedp or direct");
  const TrainConfig c = flags.resolve(g);
  const Dataset ds = load_data(data);
  FullSolveCache cache;
  const fs::path out = out_dir(g);
  json artifact;
  if (m == Method::Pca) {
    artifact = pca_projection_to_json(pca_train(ds.train, c.K, cache));
  } else if (m == Method::SharedP) {
    const auto [sp, report] = sharedp_train(ds.train, ds.val, c, cache, solver_settings(g), print_epoch);
    artifact = shared_projection_to_json(sp);
    io::write_text(out / "sharedp_report.csv", report.to_csv());
  } else {
    const DirectTrainResult r = direct_train(ds.train, ds.val, c, cache);
    artifact = direct_model_to_json(r.model);
    io::write_text(out / "direct_report.csv", r.report.to_csv());
  }
  io::write_json(out / (method + ".json"), artifact);
  std::printf("wrote %s.json to %s\n", method.c_str(), g.out.c_str());
}

MethodArtifacts load_artifacts(Method m, const std::string& checkpoint) {
  MethodArtifacts a;
  if (!is_learned(m)) return a;
  if (checkpoint.empty()) throw ConfigError("method '" + to_string(m) + "' needs --checkpoint");
  switch (m) {
    case Method::Ours: a.ours = load_checkpoint(checkpoint); break;
    case Method::Pca: a.pca = pca_projection_from_json(io::read_json(checkpoint)); break;
    case Method::SharedP: a.sharedp = shared_projection_from_json(io::read_json(checkpoint)); break;
    case Method::Direct: a.direct = direct_model_from_json(io::read_json(checkpoint)); break;
    default: break;
  }
  return a;
}

EvalSettings eval_settings(const Globals& g) {
  EvalSettings s;
  s.solver = solver_settings(g);
  s.record_timing = !g.no_timing;
  s.threads = g.threads;
  s.seed = g.seed;
  return s;
}

void run_eval(const Globals& g, const std::string& method, const std::string& data, const std::string& checkpoint,
              std::optional<int> K, const std::string& split) {
  const Method m = method_from_string(method);
  const MethodArtifacts a = load_artifacts(m, checkpoint);
  int k = K.value_or(a.ours ? a.ours->K : 10);
  const Dataset ds = load_data(data);
  const std::vector<std::string>* ids = nullptr;
  const auto& set = split_of(ds, split, &ids);
  FullSolveCache cache;
  const auto recs = evaluate_method(m, set, *ids, k, a, cache, eval_settings(g));
  const fs::path file = out_dir(g) / ("eval_" + method + ".csv");
  io::write_text(file, records_to_csv(recs));
  std::vector<double> e;
  int fails = 0;
  for (const auto& r : recs) {
    e.push_back(r.relative_error);
    fails += r.feasible ? 0 : 1;
  }
  const auto [mean, se] = mean_stderr(e);
  std::printf("%s: mean relative error %s ± %s over %zu instances, %d failures; wrote %s\n", method.c_str(),
              io::fmt(mean).c_str(), io::fmt(se).c_str(), recs.size(), fails, file.string().c_str());
}

void run_solve(const Globals& g, const std::string& instance, const std::string& method, const std::string& checkpoint,
               std::optional<int> K) {
  const Method m = method_from_string(method);
  if (m == Method::Direct) throw ConfigError("solve: direct predicts a point; use eval");
  const MethodArtifacts a = load_artifacts(m, checkpoint);
  const QpInstance inst = read_instance(instance);
  const SolverSettings s = solver_settings(g);
  json out;
  if (m == Method::Full) {
    const SolveResult r = solve_full(inst, s);
    out = json{{"status", to_string(r.status)}, {"objective", r.objective}, {"iterations", r.iterations}};
    if (r.solved()) {
      out["x"] = io::vector_to_json(r.y_star);
      out["max_violation"] = max_violation(inst, r.y_star);
    }
  } else {
    const int k = K.value_or(a.ours ? a.ours->K : 10);
    Matrix P;
    switch (m) {
      case Method::Ours: P = forward(*a.ours, inst).first.matrix(); break;
      case Method::Rand: P = rand_projection(inst.n_vars(), k, g.seed).matrix(); break;
      case Method::Pca: P = SharedProjection{a.pca->P.matrix()}.for_size(inst.n_vars()).matrix(); break;
      default: P = a.sharedp->for_size(inst.n_vars()).matrix(); break;
    }
    const ProjectedSolve ps = solve_projected(inst, P, s);
    out = json{{"status", to_string(ps.result.status)}, {"K", P.cols()}, {"iterations", ps.result.iterations}};
    if (ps.solved) {
      out["objective"] = ps.objective;
      out["feasible"] = ps.feasible;
      out["max_violation"] = ps.max_violation;
      out["y"] = io::vector_to_json(ps.result.y_star);
      out["x"] = io::vector_to_json(ps.x);
    }
  }
  out["method"] = method;
  std::printf("%s\n", out.dump(1).c_str());
  if (g.out != ".") io::write_json(out_dir(g) / "solution.json", out);
}

struct TheoryFlags {
  AssumptionConstants k;
  double epsilon = 0.01;
  double delta = 0.05;
  long long D = 100;
  double log_cover = 0.0;
  bool validate = false;
  std::string data, method = "rand", checkpoint, split = "test";
  std::optional<int> K;
  double b_scale = 1.0;
};

void run_theory(const Globals& g, TheoryFlags f) {
  if (!g.config.empty()) {
    const json cfg = config_json(g);
    try {
      f.k.sigma_Q = cfg.value("sigma_Q", f.k.sigma_Q);
      f.k.sigma_P = cfg.value("sigma_P", f.k.sigma_P);
      f.k.Q0 = cfg.value("Q0", f.k.Q0);
      f.k.c0 = cfg.value("c0", f.k.c0);
      f.k.B = cfg.value("B", f.k.B);
      f.k.N = cfg.value("N", f.k.N);
      f.k.K = cfg.value("K", f.k.K);
      f.epsilon = cfg.value("epsilon", f.epsilon);
      f.delta = cfg.value("delta", f.delta);
      f.D = cfg.value("D", f.D);
      f.log_cover = cfg.value("log_cover", f.log_cover);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("theory config: ") + e.what());
    }
  }
  if (!f.validate) {
    std::printf("%s\n", theory_json(f.k, f.epsilon, f.delta, f.D, f.log_cover).dump(1).c_str());
    return;
  }
  if (f.data.empty()) throw ConfigError("theory --validate needs --data");
  const Method m = method_from_string(f.method);
  if (!is_projection_method(m)) throw ConfigError("theory --validate needs a projection method");
  const MethodArtifacts a = load_artifacts(m, f.checkpoint);
  const int k = f.K.value_or(a.ours ? a.ours->K : 10);
  const Dataset ds = load_data(f.data);
  const std::vector<std::string>* ids = nullptr;
  const auto& set = split_of(ds, f.split, &ids);
  const std::uint64_t seed = g.seed;
  const auto rep = validate_norm_bound(
      set, *ids,
      [&](std::size_t d) {
        switch (m) {
          case Method::Ours: return forward(*a.ours, set[d]).first.matrix();
          case Method::Rand: return rand_projection(set[d].n_vars(), k, seed + d).matrix();
          case Method::Pca: return SharedProjection{a.pca->P.matrix()}.for_size(set[d].n_vars()).matrix();
          default: return a.sharedp->for_size(set[d].n_vars()).matrix();
        }
      },
      solver_settings(g), f.b_scale);
  io::write_text(out_dir(g) / "norm_bound.csv", rep.to_csv());
  std::printf("%s\n", json{{"checked", rep.checked}, {"skipped", rep.skipped}, {"violations", rep.violations},
                           {"min_margin", rep.checked ? rep.min_margin() : 0.0}}
                          .dump(1)
                          .c_str());
}

void run_experiment_cmd(const Globals& g) {
  if (g.config.empty()) throw ConfigError("experiment needs --config <spec.json>");
  ExperimentSpec spec = experiment_spec_from_json(config_json(g), fs::path(g.config).parent_path());
  if (g.seed_given) {
    spec.seed = spec.train.seed = spec.eval.seed = g.seed;
  }
  spec.eval.threads = spec.train.threads = std::max(spec.eval.threads, g.threads);
  if (g.no_timing) spec.eval.record_timing = spec.train.record_timing = false;
  const fs::path out = out_dir(g);
  FullSolveCache cache(out / "ustar_cache.json", spec.eval.solver);
  const ExperimentResult r = run_experiment(spec, cache, &std::cerr);
  cache.save();
  write_experiment(r, out);
  std::printf("%zu rows, %zu notes; wrote results.csv and summaries to %s\n", r.rows.size(), r.notes.size(), g.out.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Instance-specific projections for convex quadratic programs"};
  app.require_subcommand(1);
  Globals g;
  auto* seed_opt = app.add_option("--seed", g.seed, "Base seed");
  app.add_option("--config", g.config, "JSON config for the subcommand");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--no-timing", g.no_timing, "Write all time columns as 0 (bit-reproducible outputs)");
  app.add_option("--eps-abs", g.eps_abs, "Solver absolute tolerance");
  app.add_option("--eps-rel", g.eps_rel, "Solver relative tolerance");
  app.add_option("--max-iter", g.max_iter, "Solver iteration limit");

  auto* gen = app.add_subcommand("gen-data", "Generate a dataset split and manifest");
  std::string family, transform;
  std::optional<Eigen::Index> N, M, T, S, V;
  std::optional<int> n_train, n_val, n_test;
  gen->add_option("--family", family, "regression|portfolio|control");
  gen->add_option("--N", N);
  gen->add_option("--M", M);
  gen->add_option("--T", T);
  gen->add_option("--S", S);
  gen->add_option("--V", V);
  gen->add_option("--train", n_train);
  gen->add_option("--val", n_val);
  gen->add_option("--test", n_test);
  gen->add_option("--eq-transform", transform, "nullspace|doubling");

  auto* tr = app.add_subcommand("train", "Train the projection generator");
  TrainFlags train_flags;
  std::string data;
  train_flags.add(tr);
  tr->add_option("--data", data, "Dataset manifest or directory")->required();

  auto* base = app.add_subcommand("baseline", "Fit a PCA, SharedP or Direct baseline");
  TrainFlags base_flags;
  std::string method;
  base_flags.add(base);
  base->add_option("--method", method, "pca|sharedp|direct")->required();
  base->add_option("--data", data, "Dataset manifest or directory")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate one method on a split");
  std::string checkpoint, split = "test";
  std::optional<int> K;
  ev->add_option("--method", method, "ours|rand|pca|sharedp|direct|full")->required();
  ev->add_option("--data", data, "Dataset manifest or directory")->required();
  ev->add_option("--checkpoint", checkpoint, "Model or baseline artifact");
  ev->add_option("--K", K, "Reduced dimension (rand)");
  ev->add_option("--split", split, "train|val|test");

  auto* so = app.add_subcommand("solve", "Solve one instance file");
  std::string instance;
  std::string solve_method = "full";
  so->add_option("--instance", instance, "Instance JSON")->required();
  so->add_option("--method", solve_method, "full|ours|rand|pca|sharedp");
  so->add_option("--checkpoint", checkpoint, "Model or baseline artifact");
  so->add_option("--K", K, "Reduced dimension (rand)");

  auto* th = app.add_subcommand("theory", "Evaluate the norm and generalization bounds");
  TheoryFlags tf;
  th->add_option("--sigma-q", tf.k.sigma_Q);
  th->add_option("--sigma-p", tf.k.sigma_P);
  th->add_option("--q0", tf.k.Q0);
  th->add_option("--c0", tf.k.c0);
  th->add_option("--B", tf.k.B);
  th->add_option("--N", tf.k.N);
  th->add_option("--K", tf.k.K);
  th->add_option("--epsilon", tf.epsilon);
  th->add_option("--delta", tf.delta);
  th->add_option("--D", tf.D);
  th->add_option("--log-cover", tf.log_cover, "log covering number");
  th->add_flag("--validate", tf.validate, "Check the norm bound on a dataset split instead");
  th->add_option("--data", tf.data);
  th->add_option("--method", tf.method, "ours|rand|pca|sharedp");
  th->add_option("--checkpoint", tf.checkpoint);
  th->add_option("--reduced-k", tf.K, "K for rand projections");
  th->add_option("--split", tf.split);
  th->add_option("--b-scale", tf.b_scale, "Multiply B (falsification runs)");

  auto* ex = app.add_subcommand("experiment", "Run sweeps from an experiment spec (--config)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  g.seed_given = seed_opt->count() > 0;

  try {
    if (gen->parsed()) run_gen_data(g, family, N, M, T, S, V, n_train, n_val, n_test, transform);
    else if (tr->parsed()) run_train(g, train_flags, data);
    else if (base->parsed()) run_baseline(g, base_flags, method, data);
    else if (ev->parsed()) run_eval(g, method, data, checkpoint, K, split);
    else if (so->parsed()) run_solve(g, instance, solve_method, checkpoint, K);
    else if (th->parsed()) run_theory(g, tf);
    else if (ex->parsed()) run_experiment_cmd(g);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const DimensionError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "I/O error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
