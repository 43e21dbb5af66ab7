#include <sstream>

#include "lot/digest.hpp"
#include "lot/error.hpp"
#include "lot/io.hpp"
#include "lot/model_client.hpp"

namespace lot {

using nlohmann::json;

namespace {

std::string record_check(const std::string& key, const json& rec) {
  return sha256_hex(key + '\x1f' + rec.at("prefix_hash").get<std::string>() + '\x1f' +
                    rec.at("continuation").get<std::string>() + '\x1f' + rec.at("logprobs").dump());
}

json make_record(const std::string& key, const ScoredContinuation& value) {
  json rec{{"key", key},
           {"prefix_hash", value.prefix_hash},
           {"continuation", value.continuation_text},
           {"logprobs", value.token_logprobs}};
  rec["check"] = record_check(key, rec);
  return rec;
}

// Best-effort key recovery from a damaged line, for error messages.
std::string salvage_key(const std::string& line, std::size_t line_no) {
  const auto pos = line.find("\"key\":\"");
  if (pos != std::string::npos && line.size() >= pos + 7 + 64) return line.substr(pos + 7, 64);
  return "line " + std::to_string(line_no);
}

}  // namespace

std::string ScoreCache::key_for(std::string_view model_name, std::string_view prefix,
                                std::string_view continuation) {
  std::string material;
  material.reserve(model_name.size() + prefix.size() + continuation.size() + 32);
  material += std::to_string(model_name.size()) + ':' + std::string(model_name);
  material += std::to_string(prefix.size()) + ':' + std::string(prefix);
  material += std::to_string(continuation.size()) + ':' + std::string(continuation);
  return sha256_hex(material);
}

ScoreCache::ScoreCache(const std::filesystem::path& root, std::string model_name, bool repair)
    : model_name_(std::move(model_name)) {
  if (model_name_.empty() || model_name_.find('/') != std::string::npos || model_name_ == "." ||
      model_name_ == "..") {
    throw ConfigError("model name '" + model_name_ + "' is not usable as a cache directory");
  }
  const auto dir = root / model_name_;
  std::filesystem::create_directories(dir);
  log_path_ = dir / "scores.log";

  std::string kept;
  if (std::filesystem::exists(log_path_)) {
    std::istringstream in(read_file(log_path_));
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      std::string bad_key;
      try {
        const auto rec = json::parse(line);
        const auto key = rec.at("key").get<std::string>();
        if (rec.at("check").get<std::string>() != record_check(key, rec)) {
          bad_key = key;
        } else {
          ScoredContinuation value;
          value.prefix_hash = rec.at("prefix_hash").get<std::string>();
          value.continuation_text = rec.at("continuation").get<std::string>();
          value.token_logprobs = rec.at("logprobs").get<std::vector<double>>();
          index_[key] = std::move(value);
          kept += line + '\n';
          continue;
        }
      } catch (const json::exception&) {
        bad_key = salvage_key(line, line_no);
      }
      if (!repair) {
        throw IntegrityError("corrupted score cache entry " + bad_key + " in " + log_path_.string(),
                             bad_key);
      }
      ++evicted_;
    }
    if (evicted_ > 0) write_file_atomic(log_path_, kept);
  }
  log_.open(log_path_, std::ios::app | std::ios::binary);
  if (!log_) throw Error("cannot open score cache " + log_path_.string());
}

std::optional<ScoredContinuation> ScoreCache::lookup(const std::string& key) const {
  std::shared_lock lock(index_mutex_);
  auto it = index_.find(key);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

void ScoreCache::insert(const std::string& key, const ScoredContinuation& value) {
  std::lock_guard writer(write_mutex_);
  {
    std::shared_lock lock(index_mutex_);
    if (index_.count(key) != 0) return;
  }
  log_ << make_record(key, value).dump() << '\n';
  log_.flush();
  std::unique_lock lock(index_mutex_);
  index_.emplace(key, value);
}

std::size_t ScoreCache::size() const {
  std::shared_lock lock(index_mutex_);
  return index_.size();
}

}  // namespace lot
