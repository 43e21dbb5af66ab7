#include <cmath>

#include "lot/digest.hpp"
#include "lot/error.hpp"
#include "lot/model_client.hpp"
#include "lot/random.hpp"

namespace lot {

using nlohmann::json;

namespace {

std::uint64_t fnv1a(std::string_view a, std::string_view b) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](std::string_view s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  };
  mix(a);
  h ^= 0xff;
  h *= 0x100000001b3ULL;
  mix(b);
  return splitmix64(h);
}

void check_probability(double p, const std::string& what) {
  if (!(p > 0.0 && p <= 1.0)) {
    throw ConfigError(what + " probability " + std::to_string(p) + " outside (0,1]");
  }
}

}  // namespace

json to_json(const MockScript& s) {
  json rules = json::array();
  for (const auto& r : s.score_rules) {
    rules.push_back({{"prefix", r.prefix_pattern}, {"token", r.token}, {"p", r.probability}});
  }
  json completions = json::array();
  for (const auto& c : s.completions) {
    completions.push_back({{"prompt", c.prompt_pattern}, {"texts", c.texts}});
  }
  return json{{"model_name", s.model_name},
              {"score_rules", rules},
              {"completions", completions},
              {"default_probability", s.default_probability},
              {"hash_spread", s.hash_spread},
              {"supports_logprobs", s.supports_logprobs}};
}

MockScript mock_script_from_json(const json& j) {
  MockScript s;
  s.model_name = j.value("model_name", s.model_name);
  s.default_probability = j.value("default_probability", s.default_probability);
  s.hash_spread = j.value("hash_spread", s.hash_spread);
  s.supports_logprobs = j.value("supports_logprobs", s.supports_logprobs);
  for (const auto& r : j.value("score_rules", json::array())) {
    s.score_rules.push_back({r.value("prefix", ""), r.value("token", "*"), r.at("p").get<double>()});
  }
  for (const auto& c : j.value("completions", json::array())) {
    MockCompletionRule rule{c.value("prompt", ""), {}};
    if (c.contains("texts")) {
      rule.texts = c.at("texts").get<std::vector<std::string>>();
    } else {
      rule.texts.push_back(c.at("text").get<std::string>());
    }
    s.completions.push_back(std::move(rule));
  }
  return s;
}

MockModel::MockModel(MockScript script) : script_(std::move(script)) {
  check_probability(script_.default_probability, "default");
  for (const auto& r : script_.score_rules) check_probability(r.probability, "scripted");
  if (script_.hash_spread < 0.0) throw ConfigError("hash_spread must be >= 0");
  for (const auto& c : script_.completions) {
    if (c.texts.empty()) throw ConfigError("completion rule '" + c.prompt_pattern + "' has no texts");
  }
}

std::shared_ptr<MockModel> make_mock_model(MockScript script) {
  return std::make_shared<MockModel>(std::move(script));
}

std::string MockModel::generate(std::string_view prompt, const SamplingParams& params) {
  sample_requests_.fetch_add(1);
  for (const auto& rule : script_.completions) {
    if (prompt.find(rule.prompt_pattern) == std::string_view::npos) continue;
    const auto pick = params.seed.value_or(0) % rule.texts.size();
    const auto& text = rule.texts[pick];
    const auto words = whitespace_tokens(text);
    if (static_cast<int>(words.size()) <= params.max_tokens) return text;
    std::string out;
    for (int i = 0; i < params.max_tokens; ++i) {
      if (i > 0) out += ' ';
      out += words[static_cast<std::size_t>(i)];
    }
    return out;
  }
  return {};
}

double MockModel::token_probability(std::string_view context, std::string_view token) const {
  const MockScoreRule* best = nullptr;
  long best_pos = -2;
  for (const auto& rule : script_.score_rules) {
    if (rule.token != "*" && rule.token != token) continue;
    long pos = -1;
    if (!rule.prefix_pattern.empty()) {
      const auto found = context.rfind(rule.prefix_pattern);
      if (found == std::string_view::npos) continue;
      pos = static_cast<long>(found);
    }
    if (pos > best_pos) {
      best = &rule;
      best_pos = pos;
    }
  }
  if (best != nullptr) return best->probability;
  double p = script_.default_probability;
  if (script_.hash_spread > 0.0) {
    const double u = static_cast<double>(fnv1a(context, token) >> 11) * 0x1.0p-53;
    p *= std::exp(-script_.hash_spread * u);
  }
  return p;
}

ScoredContinuation MockModel::score(std::string_view prefix, std::string_view continuation) {
  if (!script_.supports_logprobs) {
    throw CapabilityError("model " + script_.model_name + " does not expose token log-probabilities");
  }
  score_requests_.fetch_add(1);
  ScoredContinuation out;
  out.prefix_hash = sha256_hex(prefix);
  out.continuation_text = std::string(continuation);
  std::string context(prefix);
  for (const auto& token : whitespace_tokens(continuation)) {
    out.token_logprobs.push_back(std::log(token_probability(context, token)));
    context += ' ';
    context += token;
  }
  if (out.token_logprobs.empty()) throw ArgumentError("continuation has no tokens");
  return out;
}

}  // namespace lot
