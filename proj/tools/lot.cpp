#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lot/error.hpp"
#include "lot/io.hpp"
#include "lot/model_client.hpp"
#include "lot/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::string run_dir;
  std::vector<std::string> sets;
  bool force = false;
  // Flag overrides, applied after the config file and --set.
  std::map<std::string, std::string> flags;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "INI config file");
  cmd->add_option("--run-dir", c.run_dir, "Run directory");
  cmd->add_option("--set", c.sets, "Override a setting: section.key=value")->take_all();
  cmd->add_flag("--force", c.force, "Rerun even if the configuration drifted");
}

void add_flag(CLI::App* cmd, Common& c, const std::string& name, const std::string& key, const std::string& help) {
  cmd->add_option_function<std::string>(
      name, [&c, key](const std::string& v) { c.flags[key] = v; }, help);
}

void add_model_flags(CLI::App* cmd, Common& c) {
  add_flag(cmd, c, "--dataset", "dataset.path", "Dataset file (mcq-jsonl)");
  add_flag(cmd, c, "--endpoint", "model.endpoint", "Completions base URL or mock:<script.json>");
  add_flag(cmd, c, "--model", "model.name", "Model name");
  add_flag(cmd, c, "--max-inflight", "model.max_inflight", "Concurrent scoring requests");
  add_flag(cmd, c, "--cache-dir", "model.cache_dir", "Score cache root");
}

lot::RunConfig build_config(const Common& c) {
  lot::RunConfig cfg;
  if (!c.config.empty()) lot::load_config_file(cfg, c.config);
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw lot::ConfigError("--set expects section.key=value, got '" + s + "'");
    cfg.set(s.substr(0, eq), s.substr(eq + 1));
  }
  for (const auto& [k, v] : c.flags) cfg.set(k, v);
  if (!c.run_dir.empty()) cfg.run_dir = c.run_dir;
  return cfg;
}

void print_status(const lot::RunManifest& m) {
  for (auto s : lot::kStages) {
    std::printf("%-10s %s\n", std::string(lot::to_string(s)).c_str(), m.complete(s) ? "complete" : "pending");
  }
}

int run(int argc, char** argv) {
  CLI::App app{"Reasoning-landscape toolkit: sample, featurize, project, verify and test trajectories."};
  app.require_subcommand(1);
  Common c;

  auto* sample = app.add_subcommand("sample", "Sample reasoning trajectories");
  add_common(sample, c);
  add_model_flags(sample, c);
  add_flag(sample, c, "--per-question", "sample.per_question", "Trajectories per question");
  add_flag(sample, c, "--template", "sample.template", "cot-zeroshot | cot-fewshot");
  add_flag(sample, c, "--segment", "sample.segment", "period | over-split | under-split");

  auto* featurize = app.add_subcommand("featurize", "Score states against choices");
  add_common(featurize, c);
  add_model_flags(featurize, c);

  auto* landscape = app.add_subcommand("landscape", "Project states and render density landscapes");
  add_common(landscape, c);
  add_flag(landscape, c, "--projector", "landscape.projector", "tsne | pca | external");
  add_flag(landscape, c, "--coords", "landscape.external_coords", "Coordinates file for the external projector");
  add_flag(landscape, c, "--bins", "landscape.bins", "Progress bins");
  add_flag(landscape, c, "--seed", "landscape.seed", "t-SNE seed");

  auto* verify = app.add_subcommand("verify", "Train the verifier and evaluate weighted voting");
  verify->require_subcommand(1);
  auto* verify_train = verify->add_subcommand("train", "Fit and save the verifier only");
  add_common(verify_train, c);
  auto* verify_eval = verify->add_subcommand("eval", "Fit the verifier and evaluate voting");
  add_common(verify_eval, c);
  add_flag(verify_eval, c, "--q", "verify.q", "Trajectory counts, e.g. 1..50");
  add_flag(verify_eval, c, "--score-mode", "verify.score_mode", "soft | binary");

  auto* stats = app.add_subcommand("stats", "Statistical report over the run");
  add_common(stats, c);
  add_flag(stats, c, "--distance", "stats.distance", "final-state | correct-component | embedded");

  auto* all = app.add_subcommand("run", "Run every stage in order");
  add_common(all, c);
  add_model_flags(all, c);

  std::string ingest_path;
  auto* ingest = app.add_subcommand("ingest", "Use externally produced trajectories for the sample stage");
  add_common(ingest, c);
  add_flag(ingest, c, "--dataset", "dataset.path", "Dataset file (mcq-jsonl)");
  ingest->add_option("--trajectories", ingest_path, "Trajectory records (jsonl)")->required();

  auto* status = app.add_subcommand("status", "Show stage completion");
  add_common(status, c);

  std::string demo_dir = "demo";
  std::size_t demo_questions = 10;
  auto* demo = app.add_subcommand("demo", "Write a mock dataset, script and config");
  demo->add_option("--out", demo_dir, "Output directory");
  demo->add_option("--questions", demo_questions, "Number of questions")->check(CLI::Range(5, 99));

  std::string cache_root = "cache";
  std::string cache_model;
  auto* cache = app.add_subcommand("cache", "Score cache maintenance");
  cache->require_subcommand(1);
  auto* repair = cache->add_subcommand("repair", "Drop corrupted records and rewrite the log");
  repair->add_option("--cache-dir", cache_root, "Score cache root");
  repair->add_option("--model", cache_model, "Model name")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(lot::ExitCode::validation);
  }

  try {
    if (demo->parsed()) {
      lot::write_demo(demo_dir, demo_questions);
      std::printf("wrote %s/{dataset.jsonl,mock.json,config.ini}\nnext: lot run --config %s/config.ini\n",
                  demo_dir.c_str(), demo_dir.c_str());
      return 0;
    }
    if (repair->parsed()) {
      lot::ScoreCache cache_handle(cache_root, cache_model, true);
      std::printf("%zu records kept, %zu evicted\n", cache_handle.size(), cache_handle.evicted());
      return 0;
    }

    const auto cfg = build_config(c);
    lot::Pipeline pipeline(cfg);
    lot::StageOptions opts;
    opts.force = c.force;
    if (status->parsed()) {
      print_status(pipeline.manifest());
      return 0;
    }
    if (all->parsed()) {
      pipeline.run_all(opts);
    } else if (ingest->parsed()) {
      pipeline.ingest(ingest_path, opts);
    } else if (sample->parsed()) {
      pipeline.run_stage(lot::Stage::sample, opts);
    } else if (featurize->parsed()) {
      pipeline.run_stage(lot::Stage::featurize, opts);
    } else if (landscape->parsed()) {
      pipeline.run_stage(lot::Stage::landscape, opts);
    } else if (verify_train->parsed()) {
      opts.train_only = true;
      pipeline.run_stage(lot::Stage::verify, opts);
    } else if (verify_eval->parsed()) {
      pipeline.run_stage(lot::Stage::verify, opts);
    } else if (stats->parsed()) {
      pipeline.run_stage(lot::Stage::stats, opts);
      std::cout << lot::read_file(cfg.run_dir / "stats" / "report.txt");
    }
    for (auto s : pipeline.executed()) std::fprintf(stderr, "ran %s\n", std::string(lot::to_string(s)).c_str());
    if (pipeline.executed().empty()) std::fprintf(stderr, "nothing to do; stages are up to date\n");
    return 0;
  } catch (const lot::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return static_cast<int>(lot::ExitCode::failure);
  }
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
