#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace lot {

/// One multiple-choice item.
///
/// `permutation[c]` is the original (file-order) position of the choice now
/// stored at position `c`. A freshly loaded question carries the identity.
struct Question {
  std::string id;
  std::string stem;
  std::vector<std::string> choices;
  int correct_index = 0;
  std::vector<int> permutation;

  int k() const { return static_cast<int>(choices.size()); }

  /// Position in the current order of the choice originally at `original`.
  int current_index_of(int original) const;

  /// Throws ValidationError if any invariant is violated.
  void validate() const;

  bool operator==(const Question&) const = default;
};

struct DatasetSplit {
  std::vector<Question> train;
  std::vector<Question> eval;
  std::uint64_t seed = 0;
};

enum class DatasetFormat { mcq_jsonl };

/// Load a line-delimited dataset. Records need `id`, `question`, `choices`
/// and `answer` (a letter "A".. or an integer index). Blank lines are skipped.
std::vector<Question> load_dataset(const std::filesystem::path& path,
                                   DatasetFormat format = DatasetFormat::mcq_jsonl);

/// Same as load_dataset, reading records from an in-memory buffer.
std::vector<Question> parse_dataset(const std::string& text);

/// Move the correct choice to position 0, keeping the relative order of
/// the others. Composes with any permutation already recorded.
Question reorder_choices(const Question& q);

/// Undo every recorded reordering.
Question restore_original_order(const Question& q);

/// Seeded, disjoint train/eval split. Questions are first ordered by id, so
/// the result depends only on (ids, seed, sizes).
DatasetSplit split_train_eval(const std::vector<Question>& ds, std::size_t n_train,
                              std::size_t n_eval, std::uint64_t seed);

/// Collapse runs of whitespace and trim; used for the distinct-choice check.
std::string normalize_whitespace(const std::string& s);

nlohmann::json to_json(const Question& q);
Question question_from_json(const nlohmann::json& j);

void write_questions(const std::filesystem::path& path, const std::vector<Question>& qs);
std::vector<Question> read_questions(const std::filesystem::path& path);

}  // namespace lot
