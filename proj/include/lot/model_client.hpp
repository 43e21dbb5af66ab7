#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace lot {

/// Teacher-forced log-likelihood of a continuation given a prefix.
/// Log-probabilities are natural-log and normalized over the full vocabulary.
struct ScoredContinuation {
  std::string prefix_hash;
  std::string continuation_text;
  std::vector<double> token_logprobs;

  std::size_t token_count() const { return token_logprobs.size(); }

  /// Throws ValidationError unless there is at least one token and every
  /// log-probability is <= 0.
  void validate() const;
};

struct SamplingParams {
  double temperature = 0.7;
  double nucleus_mass = 0.95;
  int max_tokens = 512;
  std::vector<std::string> stop_markers;
  std::optional<std::uint64_t> seed;

  void validate() const;
};

nlohmann::json to_json(const SamplingParams& p);
SamplingParams sampling_params_from_json(const nlohmann::json& j);

struct RetryPolicy {
  int max_retries = 3;
  double initial_backoff_seconds = 0.5;
};

enum class ScoringMode {
  echo,     // one request; the server echoes prompt-token logprobs
  chunked,  // one echo request per whitespace segment of the continuation
};

struct ModelEndpoint {
  std::string base_url;  // e.g. http://127.0.0.1:8000/v1
  std::string model_name;
  std::string api_key_source = "LOT_API_KEY";
  int max_inflight = 4;
  RetryPolicy retry_policy;
  ScoringMode scoring_mode = ScoringMode::echo;
  double timeout_seconds = 120.0;

  void validate() const;
};

/// The two capabilities the pipeline needs from a language model.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual const std::string& model_name() const = 0;

  /// Raw completion; callers go through lot::sample_completion for the
  /// stop-marker and empty-generation contract.
  virtual std::string generate(std::string_view prompt, const SamplingParams& params) = 0;

  /// Continuation must be non-empty.
  virtual ScoredContinuation score(std::string_view prefix, std::string_view continuation) = 0;

  virtual int max_inflight() const { return 1; }
};

/// Cut `text` before the earliest stop marker.
std::string truncate_at_stop_markers(std::string_view text, const std::vector<std::string>& stops);

/// Sample a completion; throws EmptyGenerationError when nothing remains
/// after truncation.
std::string sample_completion(LanguageModel& model, std::string_view prompt,
                              const SamplingParams& params);

/// Score a continuation; throws ArgumentError on an empty continuation.
ScoredContinuation score_continuation(LanguageModel& model, std::string_view prefix,
                                      std::string_view continuation);

// ---------------------------------------------------------------------------
// HTTP client for completions-style endpoints.

class HttpModel final : public LanguageModel {
 public:
  explicit HttpModel(ModelEndpoint endpoint);
  ~HttpModel() override;

  const std::string& model_name() const override { return endpoint_.model_name; }
  std::string generate(std::string_view prompt, const SamplingParams& params) override;
  ScoredContinuation score(std::string_view prefix, std::string_view continuation) override;
  int max_inflight() const override { return endpoint_.max_inflight; }

  const ModelEndpoint& endpoint() const { return endpoint_; }
  std::uint64_t requests_issued() const { return requests_.load(); }

 private:
  struct Impl;
  nlohmann::json post(const nlohmann::json& body);
  // Logprobs of echoed tokens that lie at or beyond byte offset `from`.
  std::vector<double> echo_logprobs(const std::string& text, std::size_t from);

  ModelEndpoint endpoint_;
  std::unique_ptr<Impl> impl_;
  std::atomic<std::uint64_t> requests_{0};
};

// ---------------------------------------------------------------------------
// Deterministic scripted model.

struct MockScoreRule {
  std::string prefix_pattern;  // substring of the scoring context; "" matches anything
  std::string token;           // "*" matches any token
  double probability = 1.0;
};

struct MockCompletionRule {
  std::string prompt_pattern;  // substring of the prompt; "" matches anything
  std::vector<std::string> texts;
};

/// Tokens are whitespace-separated words. The probability of a token is
/// taken from the matching rule whose prefix pattern occurs latest in the
/// scoring context (prefix plus preceding continuation tokens); ties go to
/// the earlier rule, and unmatched tokens get `default_probability`.
/// `hash_spread` > 0 scales unmatched probabilities by exp(-spread * u) with
/// u in [0,1) a hash of (context, token), giving deterministic variation.
struct MockScript {
  std::string model_name = "mock";
  std::vector<MockScoreRule> score_rules;
  std::vector<MockCompletionRule> completions;
  double default_probability = 0.1;
  double hash_spread = 0.0;
  bool supports_logprobs = true;
};

nlohmann::json to_json(const MockScript& s);
MockScript mock_script_from_json(const nlohmann::json& j);

class MockModel final : public LanguageModel {
 public:
  explicit MockModel(MockScript script);

  const std::string& model_name() const override { return script_.model_name; }
  /// Picks texts[seed % texts.size()] from the first rule matching the prompt,
  /// then applies max_tokens (in words).
  std::string generate(std::string_view prompt, const SamplingParams& params) override;
  ScoredContinuation score(std::string_view prefix, std::string_view continuation) override;
  int max_inflight() const override { return 1; }

  std::uint64_t score_requests() const { return score_requests_.load(); }
  std::uint64_t sample_requests() const { return sample_requests_.load(); }

 private:
  double token_probability(std::string_view context, std::string_view token) const;

  MockScript script_;
  std::atomic<std::uint64_t> score_requests_{0};
  std::atomic<std::uint64_t> sample_requests_{0};
};

/// Validates the script (probabilities in (0,1]) and builds a mock.
std::shared_ptr<MockModel> make_mock_model(MockScript script);

std::vector<std::string> whitespace_tokens(std::string_view text);

// ---------------------------------------------------------------------------
// Persistent score cache: append-only log plus in-memory index.

class ScoreCache {
 public:
  /// Opens (creating if needed) `root/<model_name>/scores.log`. A record whose
  /// checksum does not match throws IntegrityError naming its key, unless
  /// `repair` is set, in which case bad records are dropped and the log is
  /// rewritten.
  ScoreCache(const std::filesystem::path& root, std::string model_name, bool repair = false);

  static std::string key_for(std::string_view model_name, std::string_view prefix,
                             std::string_view continuation);

  std::optional<ScoredContinuation> lookup(const std::string& key) const;
  void insert(const std::string& key, const ScoredContinuation& value);

  const std::string& model_name() const { return model_name_; }
  const std::filesystem::path& log_path() const { return log_path_; }
  std::size_t size() const;
  std::size_t evicted() const { return evicted_; }

 private:
  std::string model_name_;
  std::filesystem::path log_path_;
  mutable std::shared_mutex index_mutex_;
  std::mutex write_mutex_;
  std::unordered_map<std::string, ScoredContinuation> index_;
  std::ofstream log_;
  std::size_t evicted_ = 0;
};

ScoredContinuation cached_score(ScoreCache& cache, LanguageModel& model, std::string_view prefix,
                                std::string_view continuation);

/// Model plus optional cache: what featurization consumes.
class Scorer {
 public:
  explicit Scorer(LanguageModel& model, ScoreCache* cache = nullptr)
      : model_(&model), cache_(cache) {}

  ScoredContinuation score(std::string_view prefix, std::string_view continuation) const;
  int max_inflight() const { return model_->max_inflight(); }
  LanguageModel& model() const { return *model_; }

 private:
  LanguageModel* model_;
  ScoreCache* cache_;
};

}  // namespace lot
