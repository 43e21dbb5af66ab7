#include "lot/trajectory.hpp"

#include <cctype>
#include <regex>
#include <sstream>
#include <unordered_map>

#include "lot/digest.hpp"
#include "lot/features.hpp"
#include "lot/io.hpp"

namespace lot {

using nlohmann::json;

namespace {

bool is_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; }

bool has_alnum(std::string_view s) {
  return std::any_of(s.begin(), s.end(), [](unsigned char c) { return std::isalnum(c); });
}

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split_fragments(std::string_view text, bool split_commas) {
  auto is_boundary_mark = [&](char c) {
    return c == '.' || c == '!' || c == '?' || (split_commas && c == ',');
  };
  std::vector<std::string> out;
  std::size_t start = 0;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (!is_boundary_mark(c)) {
      ++i;
      continue;
    }
    const bool between_digits =
        i > 0 && i + 1 < text.size() && is_digit(text[i - 1]) && is_digit(text[i + 1]);
    if (between_digits) {
      ++i;
      continue;
    }
    // Swallow the rest of the punctuation run and any closing quote/bracket.
    std::size_t end = i + 1;
    while (end < text.size() && is_boundary_mark(text[end])) ++end;
    while (end < text.size() &&
           (text[end] == '"' || text[end] == '\'' || text[end] == ')' || text[end] == ']')) {
      ++end;
    }
    out.push_back(trim(text.substr(start, end - start)));
    start = end;
    i = end;
  }
  if (start < text.size()) out.push_back(trim(text.substr(start)));
  std::erase_if(out, [](const std::string& s) { return !has_alnum(s); });
  return out;
}

std::string render_choices(const std::vector<std::string>& choices) {
  std::string out = "Answer Choices:";
  for (std::size_t i = 0; i < choices.size(); ++i) {
    out += " (";
    out += static_cast<char>('A' + i);
    out += ") ";
    out += choices[i];
  }
  return out;
}

}  // namespace

SegmentMode parse_segment_mode(std::string_view s) {
  if (s == "period") return SegmentMode::period;
  if (s == "over_split" || s == "over-split") return SegmentMode::over_split;
  if (s == "under_split" || s == "under-split") return SegmentMode::under_split;
  throw ConfigError("unknown segmentation mode '" + std::string(s) + "'");
}

std::string_view to_string(SegmentMode m) {
  switch (m) {
    case SegmentMode::period: return "period";
    case SegmentMode::over_split: return "over_split";
    case SegmentMode::under_split: return "under_split";
  }
  return "period";
}

std::vector<Thought> segment_thoughts(std::string_view response, SegmentMode mode) {
  auto fragments = split_fragments(response, mode == SegmentMode::over_split);
  if (mode == SegmentMode::under_split) {
    std::vector<std::string> merged;
    for (std::size_t i = 0; i < fragments.size(); i += 2) {
      if (i + 1 < fragments.size()) {
        merged.push_back(fragments[i] + " " + fragments[i + 1]);
      } else {
        merged.push_back(fragments[i]);
      }
    }
    fragments = std::move(merged);
  }
  std::vector<Thought> out;
  for (std::size_t i = 0; i < fragments.size(); ++i) {
    out.push_back({std::move(fragments[i]), static_cast<int>(i) + 1});
  }
  return out;
}

PromptTemplate parse_prompt_template(std::string_view s) {
  if (s == "cot-zeroshot" || s == "cot_zeroshot") return PromptTemplate::cot_zeroshot;
  if (s == "cot-fewshot" || s == "cot_fewshot") return PromptTemplate::cot_fewshot;
  throw ConfigError("unknown prompt template '" + std::string(s) + "'");
}

std::string_view to_string(PromptTemplate t) {
  return t == PromptTemplate::cot_fewshot ? "cot-fewshot" : "cot-zeroshot";
}

const std::vector<Exemplar>& default_exemplars() {
  static const std::vector<Exemplar> kExemplars = {
      {"Which of the following numbers is even?",
       {"3", "8", "5"},
       "An even number divides by two with no remainder. Of the options only 8 does. The answer is (B)."},
      {"A box holds 4 rows of 6 cups. How many cups are in the box?",
       {"10", "20", "24", "26"},
       "Each row has 6 cups and there are 4 rows. Multiplying gives 4 times 6, which is 24. The answer is (C)."},
  };
  return kExemplars;
}

std::vector<Exemplar> load_exemplars(const std::filesystem::path& path) {
  std::vector<Exemplar> out;
  std::istringstream in(read_file(path));
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    if (trim(raw).empty()) continue;
    try {
      const auto j = json::parse(raw);
      out.push_back({j.at("question").get<std::string>(),
                     j.at("choices").get<std::vector<std::string>>(),
                     j.at("reasoning").get<std::string>()});
    } catch (const json::exception& e) {
      throw ParseError(std::string("exemplar: ") + e.what(), line);
    }
  }
  if (out.empty()) throw ValidationError("no exemplars in " + path.string());
  return out;
}

std::string render_prompt(const Question& q, PromptTemplate t, const std::vector<Exemplar>& exemplars) {
  const Question original = restore_original_order(q);
  std::string out;
  if (t == PromptTemplate::cot_fewshot) {
    for (const auto& ex : exemplars) {
      out += "Question: " + ex.question + "\n" + render_choices(ex.choices) + "\n";
      out += "Answer: Let's think step by step. " + ex.reasoning + "\n\n";
    }
  }
  out += "Question: " + original.stem + "\n" + render_choices(original.choices) + "\n";
  out += "Answer: Let's think step by step.";
  return out;
}

std::optional<bool> Trajectory::is_correct() const {
  if (!predicted_index) return std::nullopt;
  return *predicted_index == 0;
}

std::string Trajectory::state_text(int i) const {
  if (i < 0 || i > n()) throw ArgumentError("state index " + std::to_string(i) + " out of range");
  std::string out = prompt;
  for (int t = 0; t < i; ++t) {
    out += ' ';
    out += thoughts[static_cast<std::size_t>(t)].text;
  }
  return out;
}

void SamplingConfig::validate() const {
  if (trajectories_per_question < 1) throw ConfigError("trajectories per question must be >= 1");
  if (resample_budget < 0) throw ConfigError("resample budget must be >= 0");
}

std::vector<Trajectory> sample_trajectories(const Question& q, const SamplingConfig& cfg,
                                            LanguageModel& model, const SamplingParams& params) {
  cfg.validate();
  if (q.correct_index != 0) throw ArgumentError("question " + q.id + " is not canonicalized");
  const std::string prompt = render_prompt(q, cfg.prompt_template, cfg.exemplars);
  const std::string fingerprint = sha256_hex(prompt);
  const std::uint64_t base = params.seed.value_or(0);
  const auto d = static_cast<std::uint64_t>(cfg.trajectories_per_question);

  std::vector<Trajectory> out;
  for (int slot = 0; slot < cfg.trajectories_per_question; ++slot) {
    Trajectory traj;
    traj.question_id = q.id;
    traj.slot = slot;
    traj.prompt = prompt;
    traj.prompt_fingerprint = fingerprint;
    bool done = false;
    for (int attempt = 0; attempt <= cfg.resample_budget && !done; ++attempt) {
      SamplingParams p = params;
      p.seed = base + static_cast<std::uint64_t>(slot) + static_cast<std::uint64_t>(attempt) * d;
      std::string text;
      try {
        text = sample_completion(model, prompt, p);
      } catch (const EmptyGenerationError&) {
        ++traj.resamples;
        continue;
      }
      auto thoughts = segment_thoughts(text, cfg.segment_mode);
      if (thoughts.empty()) {
        ++traj.resamples;
        continue;
      }
      traj.thoughts = std::move(thoughts);
      traj.sampling_params = p;
      done = true;
    }
    if (!done) {
      throw SamplingExhaustedError("question " + q.id + " slot " + std::to_string(slot) +
                                       ": no usable completion after " +
                                       std::to_string(cfg.resample_budget) + " resamples",
                                   std::move(out));
    }
    traj.predicted_index = match_answer_declaration(traj.thoughts, q);
    traj.answer_fallback = !traj.predicted_index.has_value();
    out.push_back(std::move(traj));
  }
  return out;
}

std::optional<int> match_answer_declaration(const std::vector<Thought>& thoughts, const Question& q) {
  static const std::regex kDeclared(R"([Aa]nswer(\s+is|\s*:))");
  static const std::regex kParenLetter(R"([Aa]nswer(?:\s+is|\s*:)\s*:?\s*\(([A-Z])\)(.*)$)");
  static const std::regex kBareLetter(R"([Aa]nswer(?:\s+is|\s*:)\s*:?\s*([A-Z])\s*[.!]?\s*$)");
  static const std::regex kTrailingParen(R"(\(([A-Z])\)\s*[.!]?\s*$)");
  static const std::regex kAnyParenLetter(R"(\([A-Z]\))");

  auto to_canonical = [&](char letter) -> std::optional<int> {
    const int original = letter - 'A';
    if (original < 0 || original >= q.k()) return std::nullopt;
    return q.current_index_of(original);
  };

  for (auto it = thoughts.rbegin(); it != thoughts.rend(); ++it) {
    const std::string& text = it->text;
    std::smatch m;
    if (std::regex_search(text, m, kParenLetter)) {
      const std::string rest = m[2].str();
      if (std::regex_search(rest, kAnyParenLetter)) return std::nullopt;
      return to_canonical(m[1].str()[0]);
    }
    if (std::regex_search(text, m, kBareLetter)) return to_canonical(m[1].str()[0]);
    // A declaration that matched no unambiguous form ("answer is C or D").
    if (std::regex_search(text, kDeclared)) return std::nullopt;
    if (std::regex_search(text, m, kTrailingParen)) return to_canonical(m[1].str()[0]);
  }
  return std::nullopt;
}

AnswerExtraction extract_answer(const Trajectory& traj, const Question& q, const Scorer& scorer) {
  if (traj.thoughts.empty()) throw ArgumentError("trajectory has no thoughts");
  if (auto idx = match_answer_declaration(traj.thoughts, q)) return {*idx, false};
  const auto final_state = state_feature(traj.state_text(traj.n()), q.choices, scorer, traj.n());
  return {argmin_index(final_state.normalized), true};
}

json to_json(const Trajectory& t) {
  json thoughts = json::array();
  for (const auto& th : t.thoughts) thoughts.push_back(th.text);
  json j{{"question_id", t.question_id},
         {"slot", t.slot},
         {"thoughts", thoughts},
         {"predicted", t.predicted_index ? json(*t.predicted_index) : json(nullptr)},
         {"answer_fallback", t.answer_fallback},
         {"prompt", t.prompt},
         {"prompt_fingerprint", t.prompt_fingerprint},
         {"params", to_json(t.sampling_params)},
         {"source", t.source},
         {"resamples", t.resamples}};
  return j;
}

Trajectory trajectory_from_json(const json& j) {
  Trajectory t;
  t.question_id = j.at("question_id").get<std::string>();
  t.slot = j.value("slot", 0);
  const auto& thoughts = j.at("thoughts");
  if (!thoughts.is_array()) throw ValidationError("thoughts must be an array");
  int index = 1;
  for (const auto& th : thoughts) {
    auto text = trim(th.get<std::string>());
    if (text.empty()) throw ValidationError("trajectory for " + t.question_id + " has an empty thought");
    t.thoughts.push_back({std::move(text), index++});
  }
  if (j.contains("predicted") && !j.at("predicted").is_null()) t.predicted_index = j.at("predicted").get<int>();
  t.answer_fallback = j.value("answer_fallback", !t.predicted_index.has_value());
  t.prompt = j.value("prompt", "");
  t.prompt_fingerprint = j.value("prompt_fingerprint", "");
  if (j.contains("params")) t.sampling_params = sampling_params_from_json(j.at("params"));
  t.source = j.value("source", "sampled");
  t.resamples = j.value("resamples", 0);
  return t;
}

void write_trajectories(const std::filesystem::path& path, const std::vector<Trajectory>& ts) {
  std::string out;
  for (const auto& t : ts) out += to_json(t).dump() + "\n";
  write_file_atomic(path, out);
}

std::vector<Trajectory> read_trajectories(const std::filesystem::path& path) {
  std::vector<Trajectory> out;
  std::istringstream in(read_file(path));
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    if (trim(raw).empty()) continue;
    try {
      out.push_back(trajectory_from_json(json::parse(raw)));
    } catch (const json::exception& e) {
      throw ParseError(e.what(), line);
    }
  }
  return out;
}

std::vector<Trajectory> ingest_trajectories(const std::filesystem::path& path,
                                            const std::vector<Question>& questions) {
  std::unordered_map<std::string, const Question*> by_id;
  for (const auto& q : questions) by_id[q.id] = &q;
  std::unordered_map<std::string, int> next_slot;

  std::vector<Trajectory> out;
  std::istringstream in(read_file(path));
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    if (trim(raw).empty()) continue;
    json j;
    try {
      j = json::parse(raw);
    } catch (const json::parse_error& e) {
      throw ParseError(e.what(), line);
    }
    Trajectory t;
    try {
      t = trajectory_from_json(j);
    } catch (const json::exception& e) {
      throw ParseError(e.what(), line);
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(line) + ": " + e.what());
    }
    auto it = by_id.find(t.question_id);
    if (it == by_id.end()) {
      throw ReferenceError("line " + std::to_string(line) + ": unknown question id '" +
                           t.question_id + "'");
    }
    const Question& q = *it->second;
    if (t.thoughts.empty()) {
      throw ValidationError("line " + std::to_string(line) + ": trajectory has no thoughts");
    }
    if (t.predicted_index && (*t.predicted_index < 0 || *t.predicted_index >= q.k())) {
      throw ValidationError("line " + std::to_string(line) + ": predicted index out of range");
    }
    if (t.prompt.empty()) t.prompt = render_prompt(q, PromptTemplate::cot_zeroshot);
    if (t.prompt_fingerprint.empty()) t.prompt_fingerprint = sha256_hex(t.prompt);
    if (!j.contains("slot")) t.slot = next_slot[t.question_id];
    next_slot[t.question_id] = t.slot + 1;
    t.source = "ingested";
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace lot
