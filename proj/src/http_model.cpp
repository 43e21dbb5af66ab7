#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdlib>
#include <thread>

#include "httplib.h"
#include "lot/digest.hpp"
#include "lot/error.hpp"
#include "lot/model_client.hpp"

namespace lot {

using nlohmann::json;

namespace {

// Completions APIs report text offsets in characters (code points).
std::size_t utf8_length(std::string_view s) {
  std::size_t n = 0;
  for (unsigned char c : s) {
    if ((c & 0xC0) != 0x80) ++n;
  }
  return n;
}

struct ParsedUrl {
  std::string scheme_host_port;
  std::string path_prefix;
};

ParsedUrl parse_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("endpoint URL lacks a scheme: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  ParsedUrl out;
  if (path_start == std::string::npos) {
    out.scheme_host_port = url;
  } else {
    out.scheme_host_port = url.substr(0, path_start);
    out.path_prefix = url.substr(path_start);
  }
  while (!out.path_prefix.empty() && out.path_prefix.back() == '/') out.path_prefix.pop_back();
  return out;
}

bool mentions_logprob_support(const std::string& body) {
  return body.find("logprob") != std::string::npos || body.find("echo") != std::string::npos;
}

}  // namespace

struct HttpModel::Impl {
  ParsedUrl url;
  std::string api_key;
  std::mutex mutex;
  std::condition_variable cv;
  int inflight = 0;
};

HttpModel::HttpModel(ModelEndpoint endpoint)
    : endpoint_(std::move(endpoint)), impl_(std::make_unique<Impl>()) {
  endpoint_.validate();
  impl_->url = parse_url(endpoint_.base_url);
  if (!endpoint_.api_key_source.empty()) {
    if (const char* key = std::getenv(endpoint_.api_key_source.c_str())) impl_->api_key = key;
  }
}

HttpModel::~HttpModel() = default;

json HttpModel::post(const json& body) {
  {
    std::unique_lock lock(impl_->mutex);
    impl_->cv.wait(lock, [&] { return impl_->inflight < endpoint_.max_inflight; });
    ++impl_->inflight;
  }
  struct Release {
    Impl* impl;
    ~Release() {
      {
        std::lock_guard lock(impl->mutex);
        --impl->inflight;
      }
      impl->cv.notify_one();
    }
  } release{impl_.get()};

  const std::string path = impl_->url.path_prefix + "/completions";
  const std::string payload = body.dump();
  httplib::Headers headers;
  if (!impl_->api_key.empty()) headers.emplace("Authorization", "Bearer " + impl_->api_key);

  const int attempts = endpoint_.retry_policy.max_retries + 1;
  std::string last_failure;
  for (int attempt = 0; attempt < attempts; ++attempt) {
    if (attempt > 0) {
      const double wait =
          endpoint_.retry_policy.initial_backoff_seconds * std::pow(2.0, attempt - 1);
      std::this_thread::sleep_for(std::chrono::duration<double>(wait));
    }
    requests_.fetch_add(1);
    httplib::Client client(impl_->url.scheme_host_port);
    const auto timeout = std::chrono::duration<double>(endpoint_.timeout_seconds);
    client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    auto res = client.Post(path, headers, payload, "application/json");
    if (!res) {
      last_failure = "connection failed: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_failure = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status == 401 || res->status == 403) {
      throw TransportError("authentication rejected by " + endpoint_.base_url + " (HTTP " +
                               std::to_string(res->status) + ")",
                           attempt + 1);
    }
    if (res->status >= 400) {
      if (body.value("echo", false) && mentions_logprob_support(res->body)) {
        throw CapabilityError("endpoint " + endpoint_.base_url +
                              " rejected a log-probability request: " + res->body);
      }
      throw TransportError("HTTP " + std::to_string(res->status) + " from " + endpoint_.base_url +
                               ": " + res->body,
                           attempt + 1);
    }
    try {
      return json::parse(res->body);
    } catch (const json::parse_error& e) {
      throw TransportError(std::string("malformed response body: ") + e.what(), attempt + 1);
    }
  }
  throw TransportError("endpoint " + endpoint_.base_url + " unavailable after " +
                           std::to_string(attempts) + " attempts (" + last_failure + ")",
                       attempts);
}

std::string HttpModel::generate(std::string_view prompt, const SamplingParams& params) {
  json body{{"model", endpoint_.model_name},
            {"prompt", std::string(prompt)},
            {"max_tokens", params.max_tokens},
            {"temperature", params.temperature},
            {"top_p", params.nucleus_mass}};
  if (!params.stop_markers.empty()) body["stop"] = params.stop_markers;
  if (params.seed) body["seed"] = *params.seed;
  const auto res = post(body);
  try {
    return res.at("choices").at(0).at("text").get<std::string>();
  } catch (const json::exception& e) {
    throw TransportError(std::string("completion response lacks choices[0].text: ") + e.what());
  }
}

std::vector<double> HttpModel::echo_logprobs(const std::string& text, std::size_t from) {
  json body{{"model", endpoint_.model_name},
            {"prompt", text},
            {"max_tokens", 1},
            {"temperature", 0.0},
            {"echo", true},
            {"logprobs", 1}};
  const auto res = post(body);
  const json* lp = nullptr;
  try {
    lp = &res.at("choices").at(0).at("logprobs");
  } catch (const json::exception&) {
  }
  if (lp == nullptr || !lp->is_object() || !lp->contains("token_logprobs") ||
      !lp->contains("tokens") || !lp->contains("text_offset")) {
    throw CapabilityError("endpoint " + endpoint_.base_url + " returned no echoed token logprobs");
  }
  const auto& tokens = lp->at("tokens");
  const auto& logprobs = lp->at("token_logprobs");
  const auto& offsets = lp->at("text_offset");
  const std::size_t text_chars = utf8_length(text);
  const std::size_t from_chars = utf8_length(std::string_view(text).substr(0, from));
  std::vector<double> out;
  for (std::size_t i = 0; i < tokens.size() && i < offsets.size() && i < logprobs.size(); ++i) {
    const auto offset = offsets[i].get<std::size_t>();
    if (offset >= text_chars) break;  // generated, not echoed
    const auto end = offset + utf8_length(tokens[i].get<std::string>());
    if (end <= from_chars) continue;
    if (logprobs[i].is_null()) {
      throw CapabilityError("endpoint returned no logprob for continuation token " +
                            tokens[i].dump());
    }
    out.push_back(std::min(0.0, logprobs[i].get<double>()));
  }
  if (out.empty()) throw CapabilityError("no continuation tokens in echoed response");
  return out;
}

ScoredContinuation HttpModel::score(std::string_view prefix, std::string_view continuation) {
  if (continuation.empty()) throw ArgumentError("cannot score an empty continuation");
  ScoredContinuation out;
  out.prefix_hash = sha256_hex(prefix);
  out.continuation_text = std::string(continuation);
  const std::string full = std::string(prefix) + std::string(continuation);
  if (endpoint_.scoring_mode == ScoringMode::echo) {
    out.token_logprobs = echo_logprobs(full, prefix.size());
    return out;
  }
  // Segments are a whitespace run followed by a word.
  std::size_t start = prefix.size();
  while (start < full.size()) {
    std::size_t end = start;
    while (end < full.size() && std::isspace(static_cast<unsigned char>(full[end]))) ++end;
    while (end < full.size() && !std::isspace(static_cast<unsigned char>(full[end]))) ++end;
    auto seg = echo_logprobs(full.substr(0, end), start);
    out.token_logprobs.insert(out.token_logprobs.end(), seg.begin(), seg.end());
    start = end;
  }
  return out;
}

}  // namespace lot
