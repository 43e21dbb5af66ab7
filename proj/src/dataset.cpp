#include "lot/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

#include "lot/error.hpp"
#include "lot/io.hpp"
#include "lot/random.hpp"

namespace lot {

using nlohmann::json;

std::string normalize_whitespace(const std::string& s) {
  std::string out;
  bool pending_space = false;
  for (unsigned char ch : s) {
    if (std::isspace(ch)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(ch));
  }
  return out;
}

int Question::current_index_of(int original) const {
  for (std::size_t c = 0; c < permutation.size(); ++c) {
    if (permutation[c] == original) return static_cast<int>(c);
  }
  throw ArgumentError("question " + id + ": no choice at original position " +
                      std::to_string(original));
}

void Question::validate() const {
  if (id.empty()) throw ValidationError("question with empty id");
  if (choices.size() < 2) {
    throw ValidationError("question " + id + ": needs at least 2 choices, got " +
                          std::to_string(choices.size()));
  }
  if (correct_index < 0 || correct_index >= k()) {
    throw ValidationError("question " + id + ": correct index " + std::to_string(correct_index) +
                          " out of range");
  }
  std::set<std::string> seen;
  for (const auto& c : choices) {
    auto norm = normalize_whitespace(c);
    if (norm.empty()) throw ValidationError("question " + id + ": empty choice text");
    if (!seen.insert(norm).second) {
      throw ValidationError("question " + id + ": duplicate choice '" + norm + "'");
    }
  }
  if (permutation.size() != choices.size()) {
    throw ValidationError("question " + id + ": permutation size mismatch");
  }
  std::vector<int> sorted = permutation;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < k(); ++i) {
    if (sorted[static_cast<std::size_t>(i)] != i) {
      throw ValidationError("question " + id + ": permutation is not a bijection");
    }
  }
}

namespace {

int parse_answer(const json& answer, std::size_t k, std::size_t line) {
  if (answer.is_number_integer()) return answer.get<int>();
  if (answer.is_string()) {
    auto s = normalize_whitespace(answer.get<std::string>());
    if (s.size() == 1 && std::isalpha(static_cast<unsigned char>(s[0]))) {
      return std::toupper(static_cast<unsigned char>(s[0])) - 'A';
    }
    if (!s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); })) {
      return std::stoi(s);
    }
    throw ParseError("answer '" + s + "' is neither a letter nor an index (k=" +
                         std::to_string(k) + ")",
                     line);
  }
  throw ParseError("answer must be a string letter or integer index", line);
}

Question parse_record(const std::string& raw, std::size_t line) {
  json rec;
  try {
    rec = json::parse(raw);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("malformed record: ") + e.what(), line);
  }
  if (!rec.is_object()) throw ParseError("record is not an object", line);
  for (const char* key : {"id", "question", "choices", "answer"}) {
    if (!rec.contains(key)) throw ParseError(std::string("missing key '") + key + "'", line);
  }
  Question q;
  if (rec["id"].is_string()) {
    q.id = rec["id"].get<std::string>();
  } else if (rec["id"].is_number_integer()) {
    q.id = std::to_string(rec["id"].get<long long>());
  } else {
    throw ParseError("id must be a string", line);
  }
  if (!rec["question"].is_string()) throw ParseError("question must be a string", line);
  q.stem = rec["question"].get<std::string>();
  if (!rec["choices"].is_array()) throw ParseError("choices must be an array", line);
  for (const auto& c : rec["choices"]) {
    if (!c.is_string()) throw ParseError("choice must be a string", line);
    q.choices.push_back(c.get<std::string>());
  }
  q.correct_index = parse_answer(rec["answer"], q.choices.size(), line);
  q.permutation.resize(q.choices.size());
  std::iota(q.permutation.begin(), q.permutation.end(), 0);
  try {
    q.validate();
  } catch (const ValidationError& e) {
    throw ValidationError("line " + std::to_string(line) + ": " + e.what());
  }
  return q;
}

}  // namespace

std::vector<Question> parse_dataset(const std::string& text) {
  std::vector<Question> out;
  std::unordered_set<std::string> ids;
  std::istringstream in(text);
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    if (normalize_whitespace(raw).empty()) continue;
    auto q = parse_record(raw, line);
    if (!ids.insert(q.id).second) {
      throw ValidationError("line " + std::to_string(line) + ": duplicate id '" + q.id + "'");
    }
    out.push_back(std::move(q));
  }
  return out;
}

std::vector<Question> load_dataset(const std::filesystem::path& path, DatasetFormat) {
  if (!std::filesystem::exists(path)) throw ValidationError("dataset not found: " + path.string());
  return parse_dataset(read_file(path));
}

Question reorder_choices(const Question& q) {
  q.validate();
  Question out = q;
  if (q.correct_index == 0) return out;
  std::vector<int> order;
  order.push_back(q.correct_index);
  for (int i = 0; i < q.k(); ++i) {
    if (i != q.correct_index) order.push_back(i);
  }
  for (std::size_t c = 0; c < order.size(); ++c) {
    const auto src = static_cast<std::size_t>(order[c]);
    out.choices[c] = q.choices[src];
    out.permutation[c] = q.permutation[src];
  }
  out.correct_index = 0;
  return out;
}

Question restore_original_order(const Question& q) {
  q.validate();
  Question out = q;
  for (std::size_t c = 0; c < q.choices.size(); ++c) {
    const auto orig = static_cast<std::size_t>(q.permutation[c]);
    out.choices[orig] = q.choices[c];
    out.permutation[orig] = static_cast<int>(orig);
  }
  out.correct_index = q.permutation[static_cast<std::size_t>(q.correct_index)];
  return out;
}

DatasetSplit split_train_eval(const std::vector<Question>& ds, std::size_t n_train,
                              std::size_t n_eval, std::uint64_t seed) {
  if (n_train + n_eval > ds.size()) {
    throw SizeError("split needs " + std::to_string(n_train + n_eval) + " questions, dataset has " +
                    std::to_string(ds.size()));
  }
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return ds[a].id < ds[b].id; });
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());
  DatasetSplit split;
  split.seed = seed;
  for (std::size_t i = 0; i < n_train; ++i) split.train.push_back(ds[order[i]]);
  for (std::size_t i = n_train; i < n_train + n_eval; ++i) split.eval.push_back(ds[order[i]]);
  return split;
}

json to_json(const Question& q) {
  return json{{"id", q.id},
              {"question", q.stem},
              {"choices", q.choices},
              {"answer", q.correct_index},
              {"permutation", q.permutation}};
}

Question question_from_json(const json& j) {
  Question q;
  q.id = j.at("id").get<std::string>();
  q.stem = j.at("question").get<std::string>();
  q.choices = j.at("choices").get<std::vector<std::string>>();
  q.correct_index = j.at("answer").get<int>();
  if (j.contains("permutation")) {
    q.permutation = j.at("permutation").get<std::vector<int>>();
  } else {
    q.permutation.resize(q.choices.size());
    std::iota(q.permutation.begin(), q.permutation.end(), 0);
  }
  q.validate();
  return q;
}

void write_questions(const std::filesystem::path& path, const std::vector<Question>& qs) {
  std::string out;
  for (const auto& q : qs) out += to_json(q).dump() + "\n";
  write_file_atomic(path, out);
}

std::vector<Question> read_questions(const std::filesystem::path& path) {
  std::vector<Question> out;
  std::istringstream in(read_file(path));
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    if (raw.empty()) continue;
    try {
      out.push_back(question_from_json(json::parse(raw)));
    } catch (const json::exception& e) {
      throw ParseError(e.what(), line);
    }
  }
  return out;
}

}  // namespace lot
