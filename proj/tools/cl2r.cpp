// SPDX-License-Identifier: Apache-2.0
// cl2r: train, evaluate and search continual-learning feature extractors.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cl2r/experiment.hpp"
#include "cl2r/gallery.hpp"

namespace fs = std::filesystem;
using namespace cl2r;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::Config:
    case ErrorCode::InvalidArgument: return kExitConfig;
    case ErrorCode::Divergence: return kExitDivergence;
    default: return kExitData;
  }
}

MetricSpec metric_from(const std::string& name, std::optional<double> far) {
  if (name == "accuracy") {
    if (far) fail(ErrorCode::Config, "--far only applies to --metric tar_at_far");
    return MetricSpec::accuracy();
  }
  if (name == "tar_at_far") {
    if (!far) fail(ErrorCode::Config, "--metric tar_at_far needs --far");
    if (!(*far > 0.0 && *far <= 1.0)) fail(ErrorCode::Config, "--far must lie in (0, 1]");
    return MetricSpec::tar(*far);
  }
  fail(ErrorCode::Config, "unknown metric '" + name + "' (expected accuracy or tar_at_far)");
}

std::vector<Vector> rows_of(const Dataset& d) {
  std::vector<Vector> out;
  out.reserve(d.samples.size());
  for (const auto& s : d.samples) out.push_back(s.x);
  return out;
}

struct TrainArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a) {
  RunConfig c = load_run_config(a.config);
  if (a.seed) c.seed = *a.seed;
  if (!a.out.empty()) c.output_dir = a.out;
  if (c.output_dir.empty()) fail(ErrorCode::Config, "no output directory: pass --out or set output_dir");
  const ExperimentRun run = train_to_directory(c, c.output_dir);
  std::cout << "trained " << run.timeline.size() << " task(s) into " << c.output_dir << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string experiment;
  std::string out;
  std::string metric = "accuracy";
  std::optional<double> far;
  std::string distance = "cosine";
  std::string samples;
  std::string pairs;
};

int cmd_eval(const EvalArgs& a) {
  const MetricSpec metric = metric_from(a.metric, a.far);
  const Distance distance = parse_distance(a.distance);
  std::optional<VerificationPairSet> pairs;
  if (a.samples.empty() != a.pairs.empty()) fail(ErrorCode::Config, "--samples and --pairs go together");
  if (!a.pairs.empty()) pairs = load_pairs_csv(a.pairs, load_csv(a.samples));
  const fs::path out = a.out.empty() ? fs::path(a.experiment) / "eval" : fs::path(a.out);
  const EvalOutput r = evaluate_directory(a.experiment, metric, distance, out, pairs);
  std::cout << "wrote " << (out / "compat_matrix.csv").string() << " and " << (out / "compat_report.json").string()
            << "\n";
  if (r.report.contains("ac"))
    std::cout << "AC " << r.report["ac"].get<double>() << "  BC " << r.report["bc"].get<double>() << "  FC "
              << r.report["fc"].get<double>() << "\n";
  return kExitOk;
}

struct IndexArgs {
  std::string checkpoint;
  std::string items;
  std::string out;
};

int cmd_index(const IndexArgs& a) {
  const TaskCheckpoint ckpt = load_checkpoint(a.checkpoint);
  const Dataset items = load_csv(a.items, ckpt.model.config.input_dim);
  std::vector<GalleryItem> g;
  for (std::size_t i = 0; i < items.samples.size(); ++i)
    g.push_back({std::to_string(i), items.samples[i].x, items.samples[i].label});
  if (fs::exists(a.out)) fail(ErrorCode::Io, "'" + a.out + "' already exists");
  save_gallery(index_gallery(g, ckpt.model, ckpt.task + 1), a.out);
  std::cout << "indexed " << g.size() << " item(s) with the task " << ckpt.task + 1 << " model into " << a.out << "\n";
  return kExitOk;
}

struct SearchArgs {
  std::string gallery;
  std::string queries;
  std::string checkpoint;
  std::size_t top_n = 1;
  std::string out;
};

int cmd_search(const SearchArgs& a) {
  const Gallery gallery = load_gallery(a.gallery);
  const TaskCheckpoint ckpt = load_checkpoint(a.checkpoint);
  const Dataset queries = load_csv(a.queries, ckpt.model.config.input_dim);
  const auto results = search(rows_of(queries), ckpt.model, gallery, a.top_n);
  std::string csv = "query,rank,id,similarity,label\n";
  for (std::size_t q = 0; q < results.size(); ++q)
    for (std::size_t r = 0; r < results[q].size(); ++r) {
      const auto& h = results[q][r];
      csv += std::to_string(q) + "," + std::to_string(r + 1) + "," + h.id + "," + detail::format_real(h.similarity) +
             "," + (h.label ? std::to_string(*h.label) : std::string()) + "\n";
    }
  if (a.out.empty())
    std::cout << csv;
  else
    write_text(a.out, csv);
  return kExitOk;
}

struct ReportArgs {
  std::string path;
};

int cmd_report(const ReportArgs& a) {
  fs::path p = a.path;
  if (fs::is_directory(p)) p = fs::exists(p / "compat_report.json") ? p / "compat_report.json" : p / "eval" / "compat_report.json";
  if (!fs::exists(p)) fail(ErrorCode::Data, "no compat_report.json at '" + a.path + "' (run eval first)");
  Json r;
  try {
    r = Json::parse(read_text(p));
  } catch (const Json::exception& e) {
    fail(ErrorCode::Corruption, p.string() + ": " + e.what());
  }
  if (r.value("schema", "") != kReportSchema) fail(ErrorCode::Data, p.string() + ": unknown report schema");
  std::string metric = r["metric"]["name"].get<std::string>();
  if (r["metric"].contains("far")) metric += " (FAR " + detail::format_real(r["metric"]["far"].get<double>()) + ")";
  std::printf("metric: %s, distance: %s, pairs: %zu\n", metric.c_str(), r["distance"].get<std::string>().c_str(),
              r["pairs"].get<std::size_t>());
  const auto& m = r["matrix"];
  std::printf("%8s", "q\\g");
  for (std::size_t k = 0; k < m.size(); ++k) std::printf("%8zu", k + 1);
  std::printf("\n");
  for (std::size_t t = 0; t < m.size(); ++t) {
    std::printf("%8zu", t + 1);
    for (std::size_t k = 0; k <= t; ++k) std::printf("%8.4f", m[t][k].get<double>());
    std::printf("\n");
  }
  if (r.contains("ac")) {
    std::printf("AC %.4f  BC %.4f  FC %.4f\n", r["ac"].get<double>(), r["bc"].get<double>(), r["fc"].get<double>());
    std::printf("BC(t):");
    const auto& s = r["bc_series"];
    for (std::size_t i = 0; i < s.size(); ++i) std::printf(" t=%zu %.4f", i + 2, s[i].get<double>());
    std::printf("\n");
  } else {
    std::printf("%s\n", r.value("note", "").c_str());
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual learning of compatible representations"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a task sequence into an experiment directory");
  t->add_option("--config", train.config, "Run configuration (JSON)")->required();
  t->add_option("--out", train.out, "Experiment directory (overrides output_dir)");
  t->add_option("--seed", train.seed, "Top-level seed (overrides the config)");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Build the compatibility matrix and report");
  e->add_option("experiment", eval.experiment, "Experiment directory")->required();
  e->add_option("--out", eval.out, "Output directory (default <experiment>/eval)");
  e->add_option("--metric", eval.metric, "accuracy or tar_at_far");
  e->add_option("--far", eval.far, "False acceptance target for tar_at_far");
  e->add_option("--distance", eval.distance, "cosine or euclidean");
  e->add_option("--samples", eval.samples, "Sample CSV for external pairs");
  e->add_option("--pairs", eval.pairs, "Pair CSV (idA,idB,genuine) over --samples rows");

  IndexArgs index;
  auto* ix = app.add_subcommand("index", "Index a gallery with one checkpoint");
  ix->add_option("--checkpoint", index.checkpoint, "Checkpoint file")->required();
  ix->add_option("--items", index.items, "Gallery CSV (label,x0..); ids are row numbers")->required();
  ix->add_option("--out", index.out, "Gallery file to create")->required();

  SearchArgs srch;
  auto* s = app.add_subcommand("search", "Query a gallery without re-indexing it");
  s->add_option("--gallery", srch.gallery, "Gallery file")->required();
  s->add_option("--queries", srch.queries, "Query CSV (label,x0..)")->required();
  s->add_option("--checkpoint", srch.checkpoint, "Checkpoint of the query model")->required();
  s->add_option("--top-n", srch.top_n, "Results per query");
  s->add_option("--out", srch.out, "Results CSV (default stdout)");

  ReportArgs report;
  auto* r = app.add_subcommand("report", "Print a compatibility report");
  r->add_option("path", report.path, "Experiment, eval directory or report file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*t) return cmd_train(train);
    if (*e) return cmd_eval(eval);
    if (*ix) return cmd_index(index);
    if (*s) return cmd_search(srch);
    if (*r) return cmd_report(report);
  } catch (const Error& err) {
    std::cerr << "cl2r: " << to_string(err.code()) << " error: " << err.message() << "\n";
    return exit_code_for(err.code());
  } catch (const std::exception& err) {
    std::cerr << "cl2r: io error: " << err.what() << "\n";
    return kExitData;
  }
  return kExitOk;
}
