#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "lot/dataset.hpp"
#include "lot/error.hpp"
#include "lot/model_client.hpp"

namespace lot {

struct Thought {
  std::string text;
  int index = 0;  // 1-based position

  bool operator==(const Thought&) const = default;
};

enum class SegmentMode { period, over_split, under_split };

SegmentMode parse_segment_mode(std::string_view s);
std::string_view to_string(SegmentMode m);

/// Split a response into thoughts.
///
/// `period` breaks after runs of '.', '!' or '?' unless the mark sits between
/// two digits (3.5). `over_split` also breaks after commas (same digit guard).
/// `under_split` merges consecutive period-mode pairs; an odd trailing thought
/// stays alone. Fragments without any alphanumeric character are dropped, so
/// the result may be empty.
std::vector<Thought> segment_thoughts(std::string_view response, SegmentMode mode);

enum class PromptTemplate { cot_zeroshot, cot_fewshot };

PromptTemplate parse_prompt_template(std::string_view s);
std::string_view to_string(PromptTemplate t);

struct Exemplar {
  std::string question;
  std::vector<std::string> choices;
  std::string reasoning;  // ends with an answer declaration
};

/// Neutral placeholder exemplars shipped with the few-shot template.
const std::vector<Exemplar>& default_exemplars();

std::vector<Exemplar> load_exemplars(const std::filesystem::path& path);

/// Render the question with its choices in original (file) order, so the
/// letters shown to the model are the dataset's letters.
std::string render_prompt(const Question& q, PromptTemplate t,
                          const std::vector<Exemplar>& exemplars = default_exemplars());

struct Trajectory {
  std::string question_id;
  int slot = 0;
  std::string prompt;
  std::vector<Thought> thoughts;
  std::optional<int> predicted_index;  // canonical order; 0 is the correct choice
  bool answer_fallback = false;        // no declaration matched
  std::string prompt_fingerprint;
  SamplingParams sampling_params;
  std::string source = "sampled";
  int resamples = 0;

  int n() const { return static_cast<int>(thoughts.size()); }
  std::optional<bool> is_correct() const;

  /// s_0 is the prompt; s_i appends thoughts 1..i, each after one space.
  std::string state_text(int i) const;
};

struct SamplingConfig {
  int trajectories_per_question = 10;
  int questions = 0;
  PromptTemplate prompt_template = PromptTemplate::cot_zeroshot;
  std::vector<Exemplar> exemplars = default_exemplars();
  SegmentMode segment_mode = SegmentMode::period;
  int resample_budget = 3;

  void validate() const;
};

class SamplingExhaustedError : public Error {
 public:
  SamplingExhaustedError(const std::string& what, std::vector<Trajectory> partial)
      : Error(what), partial_(std::move(partial)) {}
  const std::vector<Trajectory>& partial() const noexcept { return partial_; }

 private:
  std::vector<Trajectory> partial_;
};

/// Sample `trajectories_per_question` trajectories. The completion for slot s
/// and attempt a uses seed base + s + a * d, where base is params.seed (or 0).
/// Degenerate completions are resampled up to the budget per slot.
std::vector<Trajectory> sample_trajectories(const Question& q, const SamplingConfig& cfg,
                                            LanguageModel& model, const SamplingParams& params);

/// Answer declaration in the final thoughts, tried last thought first.
/// Returns the canonical index or nullopt when nothing unambiguous matches.
std::optional<int> match_answer_declaration(const std::vector<Thought>& thoughts,
                                            const Question& q);

struct AnswerExtraction {
  int index = 0;
  bool fallback = false;
};

/// Declaration match, falling back to the argmin of the final-state
/// perplexity distances.
AnswerExtraction extract_answer(const Trajectory& traj, const Question& q, const Scorer& scorer);

nlohmann::json to_json(const Trajectory& t);
Trajectory trajectory_from_json(const nlohmann::json& j);

void write_trajectories(const std::filesystem::path& path, const std::vector<Trajectory>& ts);
std::vector<Trajectory> read_trajectories(const std::filesystem::path& path);

/// Load externally produced trajectories and bind them to known questions.
/// Records without a prompt get the zero-shot rendering of their question.
std::vector<Trajectory> ingest_trajectories(const std::filesystem::path& path,
                                            const std::vector<Question>& questions);

}  // namespace lot
