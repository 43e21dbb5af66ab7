#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "lot/landscape.hpp"
#include "lot/model_client.hpp"
#include "lot/stats.hpp"
#include "lot/trajectory.hpp"
#include "lot/verifier.hpp"

namespace lot {

enum class Stage { sample, featurize, landscape, verify, stats };

inline constexpr std::array<Stage, 5> kStages{Stage::sample, Stage::featurize, Stage::landscape, Stage::verify,
                                              Stage::stats};

std::string_view to_string(Stage s);
Stage parse_stage(std::string_view s);

/// Every pipeline setting with its default. Keys are "section.name" as they
/// appear in the config file.
struct RunConfig {
  std::filesystem::path run_dir;
  std::string method = "cot";

  std::filesystem::path dataset;
  std::string dataset_tag;  // defaults to the dataset file stem
  std::size_t n_train = 20;
  std::size_t n_eval = 50;
  std::uint64_t split_seed = 0;

  // "mock:<script.json>" or a completions base URL.
  std::string endpoint;
  std::string model_name;
  std::string api_key_source = "LOT_API_KEY";
  int max_inflight = 4;
  ScoringMode scoring_mode = ScoringMode::echo;
  int max_retries = 3;
  double initial_backoff = 0.5;
  double timeout = 120.0;
  std::filesystem::path cache_dir = "cache";

  int per_question = 10;
  PromptTemplate prompt_template = PromptTemplate::cot_zeroshot;
  std::filesystem::path exemplars;
  SegmentMode segment_mode = SegmentMode::period;
  SamplingParams sampling = [] {
    SamplingParams p;
    p.seed = 0;
    return p;
  }();
  int resample_budget = 3;

  bool include_initial_state = false;

  std::string projector = "tsne";  // tsne | pca | external
  std::filesystem::path external_coords;
  int bins = 5;
  int grid_size = 200;
  TsneParams tsne;

  SummaryScheme summary;
  ForestParams forest;
  ScoreMode score_mode = ScoreMode::soft;
  std::vector<int> q_values;  // empty: 1..per_question

  DistanceMode distance = DistanceMode::final_state;
  int stats_grid = 50;

  /// Apply one "section.name" = value setting; throws ConfigError.
  void set(const std::string& key, const std::string& value);

  /// Canonical flat view of every setting, including defaults.
  std::map<std::string, std::string> flatten() const;

  std::vector<int> effective_q_values() const;
  std::string effective_dataset_tag() const;
};

/// Parse "1..50", "1,5,10" or a mix ("1..4,10").
std::vector<int> parse_int_list(const std::string& s);

/// Read an INI file into `cfg`; unknown keys are errors.
void load_config_file(RunConfig& cfg, const std::filesystem::path& path);

/// INI text listing every setting (the current values).
std::string config_ini(const RunConfig& cfg);

struct StageRecord {
  bool complete = false;
  std::map<std::string, std::string> config;
  std::map<std::string, std::string> artifacts;  // run-relative path -> sha256
};

struct RunManifest {
  std::string run_id;
  std::map<std::string, std::string> config;
  std::map<Stage, StageRecord> stages;

  bool complete(Stage s) const;
};

nlohmann::ordered_json to_json(const RunManifest& m);
RunManifest manifest_from_json(const nlohmann::json& j);

/// Loads the manifest and clears the flag of any stage whose artifacts are
/// missing or fail their checksum. A missing manifest yields an empty one.
RunManifest load_manifest(const std::filesystem::path& run_dir);

struct StageOptions {
  bool force = false;
  bool train_only = false;  // verify: fit and save the model, skip voting
};

/// Owns a run directory for its lifetime (exclusive lock file).
class Pipeline {
 public:
  /// `model` overrides the configured endpoint (tests).
  explicit Pipeline(RunConfig cfg, std::shared_ptr<LanguageModel> model = nullptr);
  ~Pipeline();
  Pipeline(const Pipeline&) = delete;
  Pipeline& operator=(const Pipeline&) = delete;

  /// Runs one stage. A complete stage whose config matches its snapshot is
  /// a no-op; a mismatch is a DriftError unless `force`.
  const RunManifest& run_stage(Stage s, const StageOptions& opts = {});

  /// sample -> featurize -> landscape -> verify -> stats.
  const RunManifest& run_all(const StageOptions& opts = {});

  /// Bind externally produced trajectories in place of the sample stage.
  const RunManifest& ingest(const std::filesystem::path& trajectories, const StageOptions& opts = {});

  const RunManifest& manifest() const { return manifest_; }
  const RunConfig& config() const { return cfg_; }

  /// Stages executed (not skipped) by this object, in order.
  const std::vector<Stage>& executed() const { return executed_; }

 private:
  void check_ready(Stage s, const StageOptions& opts);
  std::map<std::string, std::string> stage_config(Stage s) const;
  void finish(Stage s, const std::vector<std::filesystem::path>& artifacts);
  LanguageModel& model();
  std::string model_identity_name() const;

  void do_sample();
  void do_featurize();
  void do_landscape();
  void do_verify(bool train_only);
  void do_stats();

  RunConfig cfg_;
  std::shared_ptr<LanguageModel> model_;
  RunManifest manifest_;
  std::vector<Stage> executed_;
  int lock_fd_ = -1;
};

/// Writes a small self-contained demo: dataset.jsonl, mock.json and
/// config.ini (10 questions, mock endpoint).
void write_demo(const std::filesystem::path& dir, std::size_t questions = 10);

/// Builds the language model named by the config's endpoint.
std::shared_ptr<LanguageModel> make_model(const RunConfig& cfg);

}  // namespace lot
