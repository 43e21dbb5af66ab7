#include "lot/model_client.hpp"

#include <cctype>

#include "lot/digest.hpp"
#include "lot/error.hpp"

namespace lot {

using nlohmann::json;

void ScoredContinuation::validate() const {
  if (token_logprobs.empty()) throw ValidationError("scored continuation has no tokens");
  for (double lp : token_logprobs) {
    if (!(lp <= 0.0)) {
      throw ValidationError("token log-probability " + std::to_string(lp) + " is not <= 0");
    }
  }
}

void SamplingParams::validate() const {
  if (temperature < 0.0) throw ConfigError("temperature must be >= 0");
  if (!(nucleus_mass > 0.0 && nucleus_mass <= 1.0)) throw ConfigError("nucleus mass must be in (0,1]");
  if (max_tokens < 1) throw ConfigError("max_tokens must be >= 1");
}

json to_json(const SamplingParams& p) {
  json j{{"temperature", p.temperature},
         {"top_p", p.nucleus_mass},
         {"max_tokens", p.max_tokens},
         {"stop", p.stop_markers}};
  j["seed"] = p.seed ? json(*p.seed) : json(nullptr);
  return j;
}

SamplingParams sampling_params_from_json(const json& j) {
  SamplingParams p;
  p.temperature = j.value("temperature", p.temperature);
  p.nucleus_mass = j.value("top_p", p.nucleus_mass);
  p.max_tokens = j.value("max_tokens", p.max_tokens);
  if (j.contains("stop")) p.stop_markers = j.at("stop").get<std::vector<std::string>>();
  if (j.contains("seed") && !j.at("seed").is_null()) p.seed = j.at("seed").get<std::uint64_t>();
  return p;
}

void ModelEndpoint::validate() const {
  if (base_url.empty()) throw ConfigError("endpoint base_url is empty");
  if (model_name.empty()) throw ConfigError("endpoint model_name is empty");
  if (max_inflight < 1) throw ConfigError("max_inflight must be >= 1");
  if (retry_policy.max_retries < 0) throw ConfigError("max_retries must be >= 0");
}

std::string truncate_at_stop_markers(std::string_view text, const std::vector<std::string>& stops) {
  std::size_t cut = text.size();
  for (const auto& stop : stops) {
    if (stop.empty()) continue;
    const auto pos = text.find(stop);
    if (pos != std::string_view::npos) cut = std::min(cut, pos);
  }
  return std::string(text.substr(0, cut));
}

std::string sample_completion(LanguageModel& model, std::string_view prompt,
                              const SamplingParams& params) {
  if (prompt.empty()) throw ArgumentError("empty prompt");
  params.validate();
  auto text = truncate_at_stop_markers(model.generate(prompt, params), params.stop_markers);
  const bool blank = std::all_of(text.begin(), text.end(),
                                 [](unsigned char c) { return std::isspace(c); });
  if (blank) throw EmptyGenerationError("model " + model.model_name() + " returned an empty completion");
  return text;
}

ScoredContinuation score_continuation(LanguageModel& model, std::string_view prefix,
                                      std::string_view continuation) {
  if (continuation.empty()) throw ArgumentError("cannot score an empty continuation");
  auto scored = model.score(prefix, continuation);
  scored.validate();
  return scored;
}

std::vector<std::string> whitespace_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    const std::size_t start = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i > start) out.emplace_back(text.substr(start, i - start));
  }
  return out;
}

ScoredContinuation cached_score(ScoreCache& cache, LanguageModel& model, std::string_view prefix,
                                std::string_view continuation) {
  if (cache.model_name() != model.model_name()) {
    throw ArgumentError("cache opened for model '" + cache.model_name() + "', scoring with '" +
                        model.model_name() + "'");
  }
  const auto key = ScoreCache::key_for(model.model_name(), prefix, continuation);
  if (auto hit = cache.lookup(key)) return *hit;
  auto scored = score_continuation(model, prefix, continuation);
  cache.insert(key, scored);
  return scored;
}

ScoredContinuation Scorer::score(std::string_view prefix, std::string_view continuation) const {
  if (cache_ != nullptr) return cached_score(*cache_, *model_, prefix, continuation);
  return score_continuation(*model_, prefix, continuation);
}

}  // namespace lot
