// SPDX-License-Identifier: Apache-2.0
#pragma once

// Experiment plumbing shared by the command-line tool and the tests: the
// JSON run configuration, data preparation, the on-disk experiment layout
// and the evaluation outputs.
//
// Experiment directory:
//   config.json         resolved configuration
//   eval_samples.csv    held-out samples (label,x0..)
//   eval_pairs.csv      verification pairs over eval_samples rows
//   task_01.ckpt ...    one checkpoint per task
//   train_log.csv       task,epoch,ce,fd,lambda,total
//   manifest.json       artifact checksums, config hash, timings

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "cl2r/container.hpp"
#include "cl2r/data.hpp"
#include "cl2r/error.hpp"
#include "cl2r/evalkit.hpp"
#include "cl2r/memory.hpp"
#include "cl2r/random.hpp"
#include "cl2r/trainer.hpp"

namespace cl2r {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr const char* kManifestSchema = "cl2r.manifest/1";
inline constexpr const char* kReportSchema = "cl2r.compat_report/1";

using Json = nlohmann::json;

// Substreams of the top-level seed.
enum class SeedStream : std::uint64_t {
  ClassMeans = 1,
  Noise = 2,
  Split = 3,
  Pairs = 4,
  Model = 5,
  Shuffle = 6,
  Memory = 7,
  Classifier = 8,
};

inline std::uint64_t stream_seed(std::uint64_t master, SeedStream s) {
  return derive_seed(master, static_cast<std::uint64_t>(s));
}

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" or "csv"
  std::string csv_path;
  std::size_t num_classes = 30;
  std::size_t samples_per_class = 100;
  std::size_t input_dim = 64;
  double sigma = 0.2;
  std::size_t signal_dim = 0;
  double nuisance_sigma = 0.0;
  std::size_t tasks = 2;
  std::size_t eval_classes = 10;
  std::size_t num_pairs = 2000;
  double genuine_fraction = 0.5;

  bool operator==(const DataConfig&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir;
  DataConfig data;
  std::vector<std::size_t> hidden_layers{128, 64};
  std::size_t feature_dim = 19;
  Nonlinearity nonlinearity = Nonlinearity::Relu;
  TrainingHyperparams training;
  std::size_t memory_per_class = 20;
  ClassifierMode classifier = ClassifierMode::FixedSimplex;
  FdMode fd_mode = FdMode::MemoryOnly;
  bool normalize_features = false;
  bool center_simplex = false;

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

/// Walks one JSON object, recording which keys were read so that leftovers
/// can be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(ErrorCode::Config, where() + " must be an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const Json* get(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void unsigned_int(const std::string& key, std::uint64_t& out) {
    if (const Json* v = get(key)) {
      if (!v->is_number_unsigned()) fail(ErrorCode::Config, name(key) + " must be a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }

  void size(const std::string& key, std::size_t& out) {
    std::uint64_t v = out;
    unsigned_int(key, v);
    out = static_cast<std::size_t>(v);
  }

  void real(const std::string& key, double& out) {
    if (const Json* v = get(key)) {
      if (!v->is_number()) fail(ErrorCode::Config, name(key) + " must be a number");
      out = v->get<double>();
      if (!std::isfinite(out)) fail(ErrorCode::Config, name(key) + " must be finite");
    }
  }

  void boolean(const std::string& key, bool& out) {
    if (const Json* v = get(key)) {
      if (!v->is_boolean()) fail(ErrorCode::Config, name(key) + " must be true or false");
      out = v->get<bool>();
    }
  }

  void string(const std::string& key, std::string& out) {
    if (const Json* v = get(key)) {
      if (!v->is_string()) fail(ErrorCode::Config, name(key) + " must be a string");
      out = v->get<std::string>();
    }
  }

  void sizes(const std::string& key, std::vector<std::size_t>& out) {
    if (const Json* v = get(key)) {
      if (!v->is_array()) fail(ErrorCode::Config, name(key) + " must be a list of non-negative integers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number_unsigned()) fail(ErrorCode::Config, name(key) + " must be a list of non-negative integers");
        out.push_back(e.get<std::size_t>());
      }
    }
  }

  ObjectReader child(const std::string& key) {
    static const Json empty = Json::object();
    const Json* v = get(key);
    return ObjectReader(v ? *v : empty, name(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (seen_.count(it.key()) == 0) fail(ErrorCode::Config, "unknown key '" + name(it.key()) + "'");
  }

  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

/// Runs `f`, turning parse failures of enumerated strings into config
/// errors that name the offending key.
template <typename F>
void with_key(const std::string& key, F&& f) {
  try {
    f();
  } catch (const Error& e) {
    fail(ErrorCode::Config, key + ": " + e.message());
  }
}

}  // namespace detail

/// Parses a run configuration. Every key is optional; unknown keys anywhere
/// are rejected.
inline RunConfig parse_run_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    fail(ErrorCode::Config, std::string("malformed config: ") + e.what());
  }
  RunConfig c;
  detail::ObjectReader top(j, "");
  top.unsigned_int("seed", c.seed);
  top.string("output_dir", c.output_dir);
  {
    auto d = top.child("data");
    d.string("source", c.data.source);
    d.string("csv", c.data.csv_path);
    d.size("num_classes", c.data.num_classes);
    d.size("samples_per_class", c.data.samples_per_class);
    d.size("input_dim", c.data.input_dim);
    d.real("sigma", c.data.sigma);
    d.size("signal_dim", c.data.signal_dim);
    d.real("nuisance_sigma", c.data.nuisance_sigma);
    d.size("tasks", c.data.tasks);
    d.size("eval_classes", c.data.eval_classes);
    d.size("num_pairs", c.data.num_pairs);
    d.real("genuine_fraction", c.data.genuine_fraction);
    d.finish();
  }
  {
    auto m = top.child("model");
    m.sizes("hidden_layers", c.hidden_layers);
    m.size("feature_dim", c.feature_dim);
    std::string nl = to_string(c.nonlinearity);
    m.string("nonlinearity", nl);
    detail::with_key(m.name("nonlinearity"), [&] { c.nonlinearity = parse_nonlinearity(nl); });
    m.finish();
  }
  {
    auto t = top.child("training");
    t.real("learning_rate", c.training.learning_rate);
    t.sizes("lr_milestones", c.training.lr_milestones);
    t.real("lr_decay_factor", c.training.lr_decay_factor);
    t.real("weight_decay", c.training.weight_decay);
    t.real("momentum", c.training.momentum);
    t.size("epochs_per_task", c.training.epochs_per_task);
    t.size("batch_size", c.training.batch_size);
    t.real("lambda_base", c.training.lambda_base);
    t.finish();
  }
  {
    auto m = top.child("memory");
    if (const Json* v = m.get("per_class")) {
      if (v->is_string() && v->get<std::string>() == "unbounded")
        c.memory_per_class = kUnboundedMemory;
      else if (v->is_number_unsigned())
        c.memory_per_class = v->get<std::size_t>();
      else
        fail(ErrorCode::Config, "memory.per_class must be a positive integer or \"unbounded\"");
    }
    m.finish();
  }
  {
    auto m = top.child("method");
    std::string cls = to_string(c.classifier);
    std::string fd = to_string(c.fd_mode);
    m.string("classifier", cls);
    m.string("fd_mode", fd);
    m.boolean("normalize_features", c.normalize_features);
    m.boolean("center_simplex", c.center_simplex);
    detail::with_key(m.name("classifier"), [&] { c.classifier = parse_classifier_mode(cls); });
    detail::with_key(m.name("fd_mode"), [&] { c.fd_mode = parse_fd_mode(fd); });
    m.finish();
  }
  top.finish();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(ErrorCode::Config, "config file '" + path.string() + "' not found");
  try {
    return parse_run_config(read_text(path));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Config) fail(ErrorCode::Config, path.string() + ": " + e.message());
    throw;
  }
}

/// Canonical JSON form; parse_run_config(to_json(c).dump()) == c.
inline Json to_json(const RunConfig& c) {
  Json j;
  j["seed"] = c.seed;
  if (!c.output_dir.empty()) j["output_dir"] = c.output_dir;
  Json d;
  d["source"] = c.data.source;
  if (c.data.source == "csv") d["csv"] = c.data.csv_path;
  d["num_classes"] = c.data.num_classes;
  d["samples_per_class"] = c.data.samples_per_class;
  d["input_dim"] = c.data.input_dim;
  d["sigma"] = c.data.sigma;
  d["signal_dim"] = c.data.signal_dim;
  d["nuisance_sigma"] = c.data.nuisance_sigma;
  d["tasks"] = c.data.tasks;
  d["eval_classes"] = c.data.eval_classes;
  d["num_pairs"] = c.data.num_pairs;
  d["genuine_fraction"] = c.data.genuine_fraction;
  j["data"] = d;
  j["model"] = {{"hidden_layers", c.hidden_layers},
                {"feature_dim", c.feature_dim},
                {"nonlinearity", to_string(c.nonlinearity)}};
  j["training"] = {{"learning_rate", c.training.learning_rate},
                   {"lr_milestones", c.training.lr_milestones},
                   {"lr_decay_factor", c.training.lr_decay_factor},
                   {"weight_decay", c.training.weight_decay},
                   {"momentum", c.training.momentum},
                   {"epochs_per_task", c.training.epochs_per_task},
                   {"batch_size", c.training.batch_size},
                   {"lambda_base", c.training.lambda_base}};
  j["memory"]["per_class"] =
      c.memory_per_class == kUnboundedMemory ? Json("unbounded") : Json(c.memory_per_class);
  j["method"] = {{"classifier", to_string(c.classifier)},
                 {"fd_mode", to_string(c.fd_mode)},
                 {"normalize_features", c.normalize_features},
                 {"center_simplex", c.center_simplex}};
  return j;
}

/// Hash of the canonical configuration without output_dir, so the same
/// experiment written to two places hashes the same.
inline std::uint64_t config_hash(const RunConfig& c) {
  RunConfig copy = c;
  copy.output_dir.clear();
  return fnv1a64(to_json(copy).dump());
}

struct PreparedData {
  TaskSplit split;
  VerificationPairSet pairs;
};

inline PreparedData prepare_data(const RunConfig& c) {
  Dataset data;
  if (c.data.source == "synthetic") {
    SyntheticSpec s;
    s.num_classes = c.data.num_classes;
    s.samples_per_class = c.data.samples_per_class;
    s.input_dim = c.data.input_dim;
    s.sigma = c.data.sigma;
    s.signal_dim = c.data.signal_dim;
    s.nuisance_sigma = c.data.nuisance_sigma;
    s.mean_seed = stream_seed(c.seed, SeedStream::ClassMeans);
    s.noise_seed = stream_seed(c.seed, SeedStream::Noise);
    data = make_synthetic(s);
  } else if (c.data.source == "csv") {
    require(!c.data.csv_path.empty(), ErrorCode::Config, "data.csv is required when data.source is \"csv\"");
    data = load_csv(c.data.csv_path);
  } else {
    fail(ErrorCode::Config, "unknown data.source '" + c.data.source + "' (expected synthetic or csv)");
  }
  PreparedData out;
  out.split = split_tasks(data, c.data.tasks, c.data.eval_classes, stream_seed(c.seed, SeedStream::Split));
  out.pairs = generate_pairs(out.split.eval_set, c.data.num_pairs, stream_seed(c.seed, SeedStream::Pairs),
                             c.data.genuine_fraction);
  return out;
}

inline ExperimentConfig to_experiment_config(const RunConfig& c, std::size_t input_dim) {
  ExperimentConfig e;
  e.model.input_dim = input_dim;
  e.model.hidden_layers = c.hidden_layers;
  e.model.feature_dim = c.feature_dim;
  e.model.nonlinearity = c.nonlinearity;
  e.model.seed = stream_seed(c.seed, SeedStream::Model);
  e.training = c.training;
  e.memory_per_class = c.memory_per_class;
  e.classifier = c.classifier;
  e.fd_mode = c.fd_mode;
  e.normalize_features = c.normalize_features;
  e.center_simplex = c.center_simplex;
  e.shuffle_seed = stream_seed(c.seed, SeedStream::Shuffle);
  e.memory_seed = stream_seed(c.seed, SeedStream::Memory);
  e.classifier_seed = stream_seed(c.seed, SeedStream::Classifier);
  return e;
}

struct ExperimentRun {
  RunConfig config;
  PreparedData data;
  ModelTimeline timeline;
  std::vector<double> task_seconds;
};

/// Prepares data and trains the whole sequence in memory.
inline ExperimentRun run_experiment(const RunConfig& c, const TaskCallback& on_task = {}) {
  ExperimentRun run;
  run.config = c;
  run.data = prepare_data(c);
  const ExperimentConfig e = to_experiment_config(c, run.data.split.eval_set.input_dim);
  auto start = std::chrono::steady_clock::now();
  run.timeline = run_sequence(e, run.data.split.sequence, [&](const TaskCheckpoint& ckpt, const std::vector<EpochLog>& log) {
    const auto now = std::chrono::steady_clock::now();
    run.task_seconds.push_back(std::chrono::duration<double>(now - start).count());
    start = now;
    if (on_task) on_task(ckpt, log);
  });
  return run;
}

inline std::string train_log_csv(const std::vector<EpochLog>& log) {
  std::string out = "task,epoch,ce,fd,lambda,total\n";
  for (const auto& e : log)
    out += std::to_string(e.task) + "," + std::to_string(e.epoch) + "," + detail::format_real(e.ce) + "," +
           detail::format_real(e.fd) + "," + detail::format_real(e.lambda) + "," + detail::format_real(e.total) + "\n";
  return out;
}

inline std::string checkpoint_name(std::size_t task_index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "task_%02zu.ckpt", task_index + 1);
  return buf;
}

namespace detail {

/// Writes into `<target>.staging` and renames onto `target` once `body`
/// returns, so a failed command leaves no partial directory behind.
template <typename F>
void write_staged_directory(const std::filesystem::path& target, F&& body) {
  namespace fs = std::filesystem;
  if (fs::exists(target)) fail(ErrorCode::Io, "output directory '" + target.string() + "' already exists");
  fs::path staging = target;
  staging += ".staging";
  std::error_code ec;
  fs::remove_all(staging, ec);
  fs::create_directories(staging, ec);
  if (ec) fail(ErrorCode::Io, "cannot create '" + staging.string() + "': " + ec.message());
  try {
    body(staging);
  } catch (...) {
    fs::remove_all(staging, ec);
    throw;
  }
  fs::rename(staging, target, ec);
  if (ec) {
    fs::remove_all(staging, ec);
    fail(ErrorCode::Io, "cannot move results into '" + target.string() + "'");
  }
}

inline Json artifact_entry(const std::filesystem::path& dir, const std::string& name) {
  const Bytes b = read_file(dir / name);
  return {{"path", name}, {"bytes", b.size()}, {"fnv1a64", hex64(fnv1a64(b))}};
}

}  // namespace detail

/// Trains per `c` and writes the experiment directory at `out`.
inline ExperimentRun train_to_directory(const RunConfig& c, const std::filesystem::path& out) {
  ExperimentRun run;
  detail::write_staged_directory(out, [&](const std::filesystem::path& dir) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::string> artifacts;
    auto emit_text = [&](const std::string& name, const std::string& text) {
      write_text(dir / name, text);
      artifacts.push_back(name);
    };
    emit_text("config.json", to_json(c).dump(2) + "\n");
    run = run_experiment(c, [&](const TaskCheckpoint& ckpt, const std::vector<EpochLog>&) {
      save_checkpoint(ckpt, dir / checkpoint_name(ckpt.task));
      artifacts.push_back(checkpoint_name(ckpt.task));
    });
    Dataset samples;
    samples.input_dim = run.data.split.eval_set.input_dim;
    samples.samples = run.data.pairs.samples;
    emit_text("eval_samples.csv", dataset_to_csv(samples));
    emit_text("eval_pairs.csv", pairs_to_csv(run.data.pairs));
    emit_text("train_log.csv", train_log_csv(run.timeline.log));

    Json manifest;
    manifest["schema"] = kManifestSchema;
    manifest["tool_version"] = kToolVersion;
    manifest["config_hash"] = hex64(config_hash(c));
    manifest["tasks"] = run.timeline.size();
    manifest["artifacts"] = Json::array();
    for (const auto& name : artifacts) manifest["artifacts"].push_back(detail::artifact_entry(dir, name));
    manifest["timings"] = {{"task_seconds", run.task_seconds},
                           {"total_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()}};
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  });
  return run;
}

inline Json read_manifest(const std::filesystem::path& exp) {
  const auto path = exp / "manifest.json";
  if (!std::filesystem::exists(path)) fail(ErrorCode::Data, "no manifest.json in '" + exp.string() + "'");
  try {
    Json m = Json::parse(read_text(path));
    if (m.value("schema", "") != kManifestSchema) fail(ErrorCode::Data, path.string() + ": unknown manifest schema");
    return m;
  } catch (const Json::exception& e) {
    fail(ErrorCode::Corruption, path.string() + ": " + e.what());
  }
}

/// Reads an artifact listed in the manifest and checks its recorded hash.
inline Bytes read_verified(const std::filesystem::path& exp, const Json& manifest, const std::string& name) {
  for (const auto& a : manifest.at("artifacts")) {
    if (a.at("path") != name) continue;
    const Bytes b = read_file(exp / name);
    if (hex64(fnv1a64(b)) != a.at("fnv1a64").get<std::string>())
      fail(ErrorCode::Corruption, (exp / name).string() + ": checksum does not match manifest");
    return b;
  }
  fail(ErrorCode::Data, "'" + name + "' is not listed in " + (exp / "manifest.json").string());
}

/// Checkpoints of an experiment directory, in task order, hash-verified.
inline std::vector<TaskCheckpoint> load_timeline(const std::filesystem::path& exp) {
  const Json manifest = read_manifest(exp);
  const std::size_t tasks = manifest.value("tasks", std::size_t{0});
  if (tasks == 0) fail(ErrorCode::Data, "'" + exp.string() + "' contains no checkpoints");
  std::vector<TaskCheckpoint> out;
  for (std::size_t t = 0; t < tasks; ++t) {
    const std::string name = checkpoint_name(t);
    if (!std::filesystem::exists(exp / name)) fail(ErrorCode::Data, "missing checkpoint " + (exp / name).string());
    out.push_back(deserialize_checkpoint(read_verified(exp, manifest, name), (exp / name).string()));
  }
  return out;
}

/// Samples and pairs written at training time, hash-verified.
inline VerificationPairSet load_experiment_pairs(const std::filesystem::path& exp) {
  const Json manifest = read_manifest(exp);
  read_verified(exp, manifest, "eval_samples.csv");
  read_verified(exp, manifest, "eval_pairs.csv");
  const Dataset samples = load_csv(exp / "eval_samples.csv");
  return load_pairs_csv(exp / "eval_pairs.csv", samples);
}

inline std::string matrix_to_csv(const Eigen::MatrixXd& m) {
  std::string out = "task";
  for (Eigen::Index k = 0; k < m.cols(); ++k) out += "," + std::to_string(k + 1);
  out += '\n';
  for (Eigen::Index t = 0; t < m.rows(); ++t) {
    out += std::to_string(t + 1);
    for (Eigen::Index k = 0; k < m.cols(); ++k) out += "," + detail::format_real(m(t, k));
    out += '\n';
  }
  return out;
}

namespace detail {

inline Json threshold_json(double v) {
  if (std::isnan(v)) return nullptr;
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

}  // namespace detail

/// Report document. AC, BC and FC are omitted for a single task.
inline Json report_json(const CompatibilityMatrix& m, std::size_t pair_count) {
  Json j;
  j["schema"] = kReportSchema;
  j["tool_version"] = kToolVersion;
  j["tasks"] = m.tasks;
  j["pairs"] = pair_count;
  j["metric"] = {{"name", m.metric.name()}};
  if (m.metric.kind == MetricSpec::Kind::TarAtFar) j["metric"]["far"] = m.metric.far;
  j["distance"] = to_string(m.distance);
  Json values = Json::array();
  Json thresholds = Json::array();
  for (Eigen::Index t = 0; t < m.values.rows(); ++t) {
    Json row = Json::array();
    Json trow = Json::array();
    for (Eigen::Index k = 0; k < m.values.cols(); ++k) {
      row.push_back(m.values(t, k));
      trow.push_back(detail::threshold_json(m.thresholds(t, k)));
    }
    values.push_back(row);
    thresholds.push_back(trow);
  }
  j["matrix"] = values;
  j["thresholds"] = thresholds;
  if (m.tasks >= 2) {
    const CompatibilityReport r = compatibility_report(m.values);
    j["ac"] = r.ac;
    j["bc"] = r.bc;
    j["fc"] = r.fc;
    j["bc_series"] = r.bc_series;
    Json ecc = Json::array();
    for (Eigen::Index t = 1; t < m.values.rows(); ++t)
      for (Eigen::Index k = 0; k < t; ++k)
        ecc.push_back({{"query", t + 1}, {"gallery", k + 1}, {"holds", m.values(t, k) > m.values(k, k)}});
    j["compatibility"] = ecc;
  } else {
    j["note"] = "AC, BC and FC need at least two tasks";
  }
  return j;
}

struct EvalOutput {
  CompatibilityMatrix matrix;
  Json report;
};

/// Builds the matrix over an experiment directory and writes
/// compat_matrix.csv and compat_report.json into `out` (created if needed).
inline EvalOutput evaluate_directory(const std::filesystem::path& exp, const MetricSpec& metric, Distance distance,
                                     const std::filesystem::path& out,
                                     const std::optional<VerificationPairSet>& pairs_override = std::nullopt) {
  const auto checkpoints = load_timeline(exp);
  const VerificationPairSet pairs = pairs_override ? *pairs_override : load_experiment_pairs(exp);
  std::vector<FeatureExtractorState> models;
  for (const auto& c : checkpoints) models.push_back(c.model);
  EvalOutput result;
  result.matrix = build_compatibility_matrix(models, pairs, metric, distance);
  result.report = report_json(result.matrix, pairs.pairs.size());
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) fail(ErrorCode::Io, "cannot create '" + out.string() + "': " + ec.message());
  write_text(out / "compat_matrix.csv", matrix_to_csv(result.matrix.values));
  write_text(out / "compat_report.json", result.report.dump(2) + "\n");
  return result;
}

}  // namespace cl2r
