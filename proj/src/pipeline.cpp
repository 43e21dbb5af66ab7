#include "lot/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <functional>
#include <set>
#include <sstream>

#include "lot/digest.hpp"
#include "lot/error.hpp"
#include "lot/io.hpp"

namespace lot {

using nlohmann::json;
using nlohmann::ordered_json;
namespace fs = std::filesystem;

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::sample: return "sample";
    case Stage::featurize: return "featurize";
    case Stage::landscape: return "landscape";
    case Stage::verify: return "verify";
    case Stage::stats: return "stats";
  }
  return "sample";
}

Stage parse_stage(std::string_view s) {
  for (auto st : kStages) {
    if (to_string(st) == s) return st;
  }
  throw ArgumentError("unknown stage '" + std::string(s) + "'");
}

namespace {

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": '" + v + "' is not a valid number");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": '" + v + "' is not a valid number");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": '" + v + "' is not a boolean");
}

std::string join_list(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) out += ',';
    for (char c : items[i]) {
      if (c == '\\') out += "\\\\";
      else if (c == ',') out += "\\,";
      else if (c == '\n') out += "\\n";
      else out += c;
    }
  }
  return out;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::string cur;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size()) {
      const char n = s[++i];
      cur += n == 'n' ? '\n' : n;
    } else if (s[i] == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += s[i];
    }
  }
  out.push_back(cur);
  return out;
}

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::string scoring_mode_name(ScoringMode m) { return m == ScoringMode::echo ? "echo" : "chunked"; }

}  // namespace

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part.empty()) continue;
    const auto dots = part.find("..");
    if (dots == std::string::npos) {
      out.push_back(parse_number<int>("list", part));
      continue;
    }
    const int lo = parse_number<int>("range", part.substr(0, dots));
    const int hi = parse_number<int>("range", part.substr(dots + 2));
    if (hi < lo) throw ConfigError("empty range '" + part + "'");
    for (int i = lo; i <= hi; ++i) out.push_back(i);
  }
  return out;
}

void RunConfig::set(const std::string& key, const std::string& v) {
  static const std::map<std::string, std::function<void(RunConfig&, const std::string&, const std::string&)>>
      setters{
          {"run.dir", [](RunConfig& c, auto&, auto& v) { c.run_dir = v; }},
          {"run.method", [](RunConfig& c, auto&, auto& v) { c.method = v; }},
          {"dataset.path", [](RunConfig& c, auto&, auto& v) { c.dataset = v; }},
          {"dataset.format",
           [](RunConfig&, auto& k, auto& v) {
             if (v != "mcq-jsonl") throw ConfigError(k + ": only mcq-jsonl is supported");
           }},
          {"dataset.tag", [](RunConfig& c, auto&, auto& v) { c.dataset_tag = v; }},
          {"dataset.n_train", [](RunConfig& c, auto& k, auto& v) { c.n_train = parse_number<std::size_t>(k, v); }},
          {"dataset.n_eval", [](RunConfig& c, auto& k, auto& v) { c.n_eval = parse_number<std::size_t>(k, v); }},
          {"dataset.split_seed",
           [](RunConfig& c, auto& k, auto& v) { c.split_seed = parse_number<std::uint64_t>(k, v); }},
          {"model.endpoint", [](RunConfig& c, auto&, auto& v) { c.endpoint = v; }},
          {"model.name", [](RunConfig& c, auto&, auto& v) { c.model_name = v; }},
          {"model.api_key_source", [](RunConfig& c, auto&, auto& v) { c.api_key_source = v; }},
          {"model.max_inflight", [](RunConfig& c, auto& k, auto& v) { c.max_inflight = parse_number<int>(k, v); }},
          {"model.scoring_mode",
           [](RunConfig& c, auto& k, auto& v) {
             if (v == "echo") c.scoring_mode = ScoringMode::echo;
             else if (v == "chunked") c.scoring_mode = ScoringMode::chunked;
             else throw ConfigError(k + ": expected echo or chunked");
           }},
          {"model.max_retries", [](RunConfig& c, auto& k, auto& v) { c.max_retries = parse_number<int>(k, v); }},
          {"model.initial_backoff", [](RunConfig& c, auto& k, auto& v) { c.initial_backoff = parse_real(k, v); }},
          {"model.timeout", [](RunConfig& c, auto& k, auto& v) { c.timeout = parse_real(k, v); }},
          {"model.cache_dir", [](RunConfig& c, auto&, auto& v) { c.cache_dir = v; }},
          {"sample.per_question", [](RunConfig& c, auto& k, auto& v) { c.per_question = parse_number<int>(k, v); }},
          {"sample.template", [](RunConfig& c, auto&, auto& v) { c.prompt_template = parse_prompt_template(v); }},
          {"sample.exemplars", [](RunConfig& c, auto&, auto& v) { c.exemplars = v; }},
          {"sample.segment", [](RunConfig& c, auto&, auto& v) { c.segment_mode = parse_segment_mode(v); }},
          {"sample.temperature", [](RunConfig& c, auto& k, auto& v) { c.sampling.temperature = parse_real(k, v); }},
          {"sample.top_p", [](RunConfig& c, auto& k, auto& v) { c.sampling.nucleus_mass = parse_real(k, v); }},
          {"sample.max_tokens",
           [](RunConfig& c, auto& k, auto& v) { c.sampling.max_tokens = parse_number<int>(k, v); }},
          {"sample.stop", [](RunConfig& c, auto&, auto& v) { c.sampling.stop_markers = split_list(v); }},
          {"sample.seed",
           [](RunConfig& c, auto& k, auto& v) { c.sampling.seed = parse_number<std::uint64_t>(k, v); }},
          {"sample.resample_budget",
           [](RunConfig& c, auto& k, auto& v) { c.resample_budget = parse_number<int>(k, v); }},
          {"featurize.include_initial_state",
           [](RunConfig& c, auto& k, auto& v) { c.include_initial_state = parse_bool(k, v); }},
          {"landscape.projector",
           [](RunConfig& c, auto& k, auto& v) {
             if (v != "tsne" && v != "pca" && v != "external") throw ConfigError(k + ": expected tsne, pca or external");
             c.projector = v;
           }},
          {"landscape.external_coords", [](RunConfig& c, auto&, auto& v) { c.external_coords = v; }},
          {"landscape.bins", [](RunConfig& c, auto& k, auto& v) { c.bins = parse_number<int>(k, v); }},
          {"landscape.grid", [](RunConfig& c, auto& k, auto& v) { c.grid_size = parse_number<int>(k, v); }},
          {"landscape.perplexity", [](RunConfig& c, auto& k, auto& v) { c.tsne.perplexity = parse_real(k, v); }},
          {"landscape.iterations",
           [](RunConfig& c, auto& k, auto& v) { c.tsne.iterations = parse_number<int>(k, v); }},
          {"landscape.learning_rate",
           [](RunConfig& c, auto& k, auto& v) { c.tsne.learning_rate = parse_real(k, v); }},
          {"landscape.early_exaggeration",
           [](RunConfig& c, auto& k, auto& v) { c.tsne.early_exaggeration = parse_real(k, v); }},
          {"landscape.seed",
           [](RunConfig& c, auto& k, auto& v) { c.tsne.seed = parse_number<std::uint64_t>(k, v); }},
          {"verify.bins", [](RunConfig& c, auto& k, auto& v) { c.summary.bins = parse_number<int>(k, v); }},
          {"verify.k_max", [](RunConfig& c, auto& k, auto& v) { c.summary.k_max = parse_number<int>(k, v); }},
          {"verify.trees", [](RunConfig& c, auto& k, auto& v) { c.forest.trees = parse_number<int>(k, v); }},
          {"verify.max_depth", [](RunConfig& c, auto& k, auto& v) { c.forest.max_depth = parse_number<int>(k, v); }},
          {"verify.min_leaf", [](RunConfig& c, auto& k, auto& v) { c.forest.min_leaf = parse_number<int>(k, v); }},
          {"verify.seed",
           [](RunConfig& c, auto& k, auto& v) { c.forest.seed = parse_number<std::uint64_t>(k, v); }},
          {"verify.score_mode", [](RunConfig& c, auto&, auto& v) { c.score_mode = parse_score_mode(v); }},
          {"verify.q", [](RunConfig& c, auto&, auto& v) { c.q_values = parse_int_list(v); }},
          {"stats.distance", [](RunConfig& c, auto&, auto& v) { c.distance = parse_distance_mode(v); }},
          {"stats.grid", [](RunConfig& c, auto& k, auto& v) { c.stats_grid = parse_number<int>(k, v); }},
      };
  const auto it = setters.find(key);
  if (it == setters.end()) throw ConfigError("unknown setting '" + key + "'");
  it->second(*this, key, v);
}

std::map<std::string, std::string> RunConfig::flatten() const {
  return {
      {"run.dir", run_dir.string()},
      {"run.method", method},
      {"dataset.path", dataset.string()},
      {"dataset.format", "mcq-jsonl"},
      {"dataset.tag", effective_dataset_tag()},
      {"dataset.n_train", std::to_string(n_train)},
      {"dataset.n_eval", std::to_string(n_eval)},
      {"dataset.split_seed", std::to_string(split_seed)},
      {"model.endpoint", endpoint},
      {"model.name", model_name},
      {"model.api_key_source", api_key_source},
      {"model.max_inflight", std::to_string(max_inflight)},
      {"model.scoring_mode", scoring_mode_name(scoring_mode)},
      {"model.max_retries", std::to_string(max_retries)},
      {"model.initial_backoff", format_double(initial_backoff)},
      {"model.timeout", format_double(timeout)},
      {"model.cache_dir", cache_dir.string()},
      {"sample.per_question", std::to_string(per_question)},
      {"sample.template", std::string(to_string(prompt_template))},
      {"sample.exemplars", exemplars.string()},
      {"sample.segment", std::string(to_string(segment_mode))},
      {"sample.temperature", format_double(sampling.temperature)},
      {"sample.top_p", format_double(sampling.nucleus_mass)},
      {"sample.max_tokens", std::to_string(sampling.max_tokens)},
      {"sample.stop", join_list(sampling.stop_markers)},
      {"sample.seed", std::to_string(sampling.seed.value_or(0))},
      {"sample.resample_budget", std::to_string(resample_budget)},
      {"featurize.include_initial_state", include_initial_state ? "true" : "false"},
      {"landscape.projector", projector},
      {"landscape.external_coords", external_coords.string()},
      {"landscape.bins", std::to_string(bins)},
      {"landscape.grid", std::to_string(grid_size)},
      {"landscape.perplexity", format_double(tsne.perplexity)},
      {"landscape.iterations", std::to_string(tsne.iterations)},
      {"landscape.learning_rate", format_double(tsne.learning_rate)},
      {"landscape.early_exaggeration", format_double(tsne.early_exaggeration)},
      {"landscape.seed", std::to_string(tsne.seed)},
      {"verify.bins", std::to_string(summary.bins)},
      {"verify.k_max", std::to_string(summary.k_max)},
      {"verify.trees", std::to_string(forest.trees)},
      {"verify.max_depth", std::to_string(forest.max_depth)},
      {"verify.min_leaf", std::to_string(forest.min_leaf)},
      {"verify.seed", std::to_string(forest.seed)},
      {"verify.score_mode", std::string(to_string(score_mode))},
      {"verify.q", join_ints(effective_q_values())},
      {"stats.distance", std::string(to_string(distance))},
      {"stats.grid", std::to_string(stats_grid)},
  };
}

std::vector<int> RunConfig::effective_q_values() const {
  if (!q_values.empty()) return q_values;
  std::vector<int> out;
  for (int q = 1; q <= per_question; ++q) out.push_back(q);
  return out;
}

std::string RunConfig::effective_dataset_tag() const {
  return dataset_tag.empty() ? dataset.stem().string() : dataset_tag;
}

void load_config_file(RunConfig& cfg, const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file " + path.string() + " not found");
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(e.what());
  }
  const fs::path base = fs::absolute(path).parent_path();
  static const std::set<std::string> path_keys{"run.dir",         "dataset.path",     "model.cache_dir",
                                               "sample.exemplars", "landscape.external_coords"};
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("setting '" + section + "' is outside a section");
    for (const auto& [name, node] : body) {
      const std::string key = section + "." + name;
      std::string value = node.get_value<std::string>();
      // Relative paths are taken from the config file's directory.
      if (path_keys.count(key) && !value.empty() && fs::path(value).is_relative()) {
        value = (base / value).lexically_normal().string();
      }
      if (key == "model.endpoint" && value.rfind("mock:", 0) == 0 && fs::path(value.substr(5)).is_relative()) {
        value = "mock:" + (base / value.substr(5)).lexically_normal().string();
      }
      cfg.set(key, value);
    }
  }
}

std::string config_ini(const RunConfig& cfg) {
  std::string out;
  std::string current;
  for (const auto& [key, value] : cfg.flatten()) {
    const auto dot = key.find('.');
    const auto section = key.substr(0, dot);
    if (section != current) {
      out += (out.empty() ? "[" : "\n[") + section + "]\n";
      current = section;
    }
    out += key.substr(dot + 1) + " = " + value + "\n";
  }
  return out;
}

bool RunManifest::complete(Stage s) const {
  const auto it = stages.find(s);
  return it != stages.end() && it->second.complete;
}

ordered_json to_json(const RunManifest& m) {
  ordered_json stages = ordered_json::object();
  for (auto s : kStages) {
    const auto it = m.stages.find(s);
    if (it == m.stages.end()) continue;
    stages[std::string(to_string(s))] = {{"complete", it->second.complete},
                                         {"config", it->second.config},
                                         {"artifacts", it->second.artifacts}};
  }
  auto get = [&](const char* k) {
    const auto it = m.config.find(k);
    return it == m.config.end() ? std::string() : it->second;
  };
  return {{"run_id", m.run_id},
          {"tags", {{"method", get("run.method")}, {"model", get("model.name")}, {"dataset", get("dataset.tag")}}},
          {"seeds",
           {{"split", get("dataset.split_seed")},
            {"sample", get("sample.seed")},
            {"landscape", get("landscape.seed")},
            {"verify", get("verify.seed")}}},
          {"config", m.config},
          {"stages", stages}};
}

RunManifest manifest_from_json(const json& j) {
  try {
    RunManifest m;
    m.run_id = j.at("run_id").get<std::string>();
    m.config = j.at("config").get<std::map<std::string, std::string>>();
    for (const auto& [name, rec] : j.at("stages").items()) {
      StageRecord r;
      r.complete = rec.at("complete").get<bool>();
      r.config = rec.at("config").get<std::map<std::string, std::string>>();
      r.artifacts = rec.at("artifacts").get<std::map<std::string, std::string>>();
      m.stages[parse_stage(name)] = std::move(r);
    }
    return m;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("manifest: ") + e.what());
  }
}

RunManifest load_manifest(const fs::path& run_dir) {
  const auto path = run_dir / "manifest.json";
  if (!fs::exists(path)) return {};
  RunManifest m;
  try {
    m = manifest_from_json(json::parse(read_file(path)));
  } catch (const json::exception& e) {
    throw ParseError(std::string("manifest: ") + e.what(), 1);
  }
  for (auto& [stage, rec] : m.stages) {
    if (!rec.complete) continue;
    for (const auto& [rel, sha] : rec.artifacts) {
      const auto p = run_dir / rel;
      if (!fs::exists(p) || sha256_file(p) != sha) {
        rec.complete = false;
        break;
      }
    }
  }
  return m;
}

std::shared_ptr<LanguageModel> make_model(const RunConfig& cfg) {
  if (cfg.endpoint.empty()) throw ConfigError("no model endpoint configured (model.endpoint)");
  if (cfg.endpoint.rfind("mock:", 0) == 0) {
    const fs::path script = cfg.endpoint.substr(5);
    json j;
    try {
      j = json::parse(read_file(script));
    } catch (const json::exception& e) {
      throw ConfigError("mock script " + script.string() + ": " + e.what());
    }
    auto s = mock_script_from_json(j);
    if (!cfg.model_name.empty()) s.model_name = cfg.model_name;
    return make_mock_model(std::move(s));
  }
  ModelEndpoint ep;
  ep.base_url = cfg.endpoint;
  ep.model_name = cfg.model_name;
  ep.api_key_source = cfg.api_key_source;
  ep.max_inflight = cfg.max_inflight;
  ep.retry_policy = {cfg.max_retries, cfg.initial_backoff};
  ep.scoring_mode = cfg.scoring_mode;
  ep.timeout_seconds = cfg.timeout;
  ep.validate();
  return std::make_shared<HttpModel>(std::move(ep));
}

// ---------------------------------------------------------------------------

namespace {

std::vector<Stage> upstream_of(Stage s) {
  switch (s) {
    case Stage::sample: return {};
    case Stage::featurize: return {Stage::sample};
    case Stage::landscape: return {Stage::sample, Stage::featurize};
    case Stage::verify: return {Stage::sample, Stage::featurize};
    case Stage::stats: return {Stage::sample, Stage::featurize, Stage::landscape};
  }
  return {};
}

bool depends_on(Stage downstream, Stage s) {
  const auto up = upstream_of(downstream);
  return std::find(up.begin(), up.end(), s) != up.end();
}

std::string record_digest(const StageRecord& r) {
  return sha256_hex(json{{"config", r.config}, {"artifacts", r.artifacts}}.dump());
}

std::string diff_keys(const std::map<std::string, std::string>& a, const std::map<std::string, std::string>& b) {
  std::set<std::string> keys;
  for (const auto& [k, v] : a) {
    const auto it = b.find(k);
    if (it == b.end() || it->second != v) keys.insert(k);
  }
  for (const auto& [k, v] : b) {
    if (!a.count(k)) keys.insert(k);
  }
  std::string out;
  for (const auto& k : keys) out += (out.empty() ? "" : ", ") + k;
  return out;
}

std::string file_digest(const fs::path& p) {
  if (p.empty()) return "";
  if (!fs::exists(p)) throw ConfigError("file " + p.string() + " not found");
  return sha256_file(p);
}

std::vector<Question> canonical(const std::vector<Question>& qs) {
  std::vector<Question> out;
  out.reserve(qs.size());
  for (const auto& q : qs) out.push_back(reorder_choices(q));
  return out;
}

std::map<std::string, const Question*> index_questions(const std::vector<Question>& qs) {
  std::map<std::string, const Question*> out;
  for (const auto& q : qs) out[q.id] = &q;
  return out;
}

}  // namespace

Pipeline::Pipeline(RunConfig cfg, std::shared_ptr<LanguageModel> model)
    : cfg_(std::move(cfg)), model_(std::move(model)) {
  if (cfg_.run_dir.empty()) throw ConfigError("no run directory configured (run.dir)");
  std::error_code ec;
  fs::create_directories(cfg_.run_dir, ec);
  if (ec) throw Error("cannot create run directory " + cfg_.run_dir.string() + ": " + ec.message());
  const auto lock_path = cfg_.run_dir / ".lock";
  lock_fd_ = ::open(lock_path.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
  if (lock_fd_ < 0) throw Error("cannot open " + lock_path.string());
  if (::flock(lock_fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(lock_fd_);
    lock_fd_ = -1;
    throw Error("run directory " + cfg_.run_dir.string() + " is in use by another process");
  }
  manifest_ = load_manifest(cfg_.run_dir);
  manifest_.run_id = fs::absolute(cfg_.run_dir).lexically_normal().filename().string();
  if (manifest_.run_id.empty()) manifest_.run_id = fs::absolute(cfg_.run_dir).parent_path().filename().string();
}

Pipeline::~Pipeline() {
  if (lock_fd_ >= 0) {
    ::flock(lock_fd_, LOCK_UN);
    ::close(lock_fd_);
  }
}

LanguageModel& Pipeline::model() {
  if (!model_) model_ = make_model(cfg_);
  return *model_;
}

std::map<std::string, std::string> Pipeline::stage_config(Stage s) const {
  const auto flat = cfg_.flatten();
  std::map<std::string, std::string> out;
  auto take = [&](const std::string& prefix) {
    for (const auto& [k, v] : flat) {
      if (k.rfind(prefix, 0) == 0) out[k] = v;
    }
  };
  auto upstream = [&](Stage u) {
    const auto it = manifest_.stages.find(u);
    out["upstream." + std::string(to_string(u))] = it == manifest_.stages.end() ? "" : record_digest(it->second);
  };
  auto model_identity = [&] {
    out["model.name"] = flat.at("model.name");
    if (cfg_.endpoint.rfind("mock:", 0) == 0) {
      out["model.endpoint"] = "mock";
      out["model.script_sha256"] = file_digest(cfg_.endpoint.substr(5));
    } else {
      out["model.endpoint"] = cfg_.endpoint;
    }
  };
  switch (s) {
    case Stage::sample:
      take("dataset.");
      out.erase("dataset.path");
      out["dataset.sha256"] = file_digest(cfg_.dataset);
      take("sample.");
      out.erase("sample.exemplars");
      out["sample.exemplars_sha256"] = file_digest(cfg_.exemplars);
      out["sample.source"] = "sampled";
      out["run.method"] = cfg_.method;
      model_identity();
      break;
    case Stage::featurize:
      take("featurize.");
      model_identity();
      out["model.scoring_mode"] = flat.at("model.scoring_mode");
      upstream(Stage::sample);
      break;
    case Stage::landscape:
      take("landscape.");
      out.erase("landscape.external_coords");
      out["landscape.external_sha256"] = cfg_.projector == "external" ? file_digest(cfg_.external_coords) : "";
      upstream(Stage::featurize);
      break;
    case Stage::verify:
      take("verify.");
      upstream(Stage::featurize);
      break;
    case Stage::stats:
      take("stats.");
      out["landscape.bins"] = flat.at("landscape.bins");
      out["run.method"] = cfg_.method;
      upstream(Stage::featurize);
      upstream(Stage::landscape);
      break;
  }
  return out;
}

void Pipeline::check_ready(Stage s, const StageOptions& opts) {
  for (auto u : upstream_of(s)) {
    if (!manifest_.complete(u)) {
      throw DependencyError("stage " + std::string(to_string(s)) + " needs stage " + std::string(to_string(u)) +
                            ", which has not completed in " + cfg_.run_dir.string());
    }
  }
  for (auto u : upstream_of(s)) {
    const auto& rec = manifest_.stages.at(u);
    if (u == Stage::sample && rec.config.count("sample.source") && rec.config.at("sample.source") != "sampled") {
      continue;  // ingested trajectories are fixed inputs
    }
    const auto now = stage_config(u);
    if (now != rec.config) {
      throw DriftError("configuration changed since stage " + std::string(to_string(u)) +
                       " ran (" + diff_keys(now, rec.config) + "); rerun it with --force");
    }
  }
  (void)opts;
}

void Pipeline::finish(Stage s, const std::vector<fs::path>& artifacts) {
  StageRecord rec;
  rec.complete = true;
  rec.config = stage_config(s);
  for (const auto& p : artifacts) {
    rec.artifacts[fs::relative(p, cfg_.run_dir).generic_string()] = sha256_file(p);
  }
  manifest_.stages[s] = std::move(rec);
  auto flat = cfg_.flatten();
  flat.erase("run.dir");
  manifest_.config = std::move(flat);
  write_file_atomic(cfg_.run_dir / "manifest.json", to_json(manifest_).dump(2) + "\n");
}

const RunManifest& Pipeline::run_stage(Stage s, const StageOptions& opts) {
  check_ready(s, opts);
  if (manifest_.complete(s)) {
    const auto now = stage_config(s);
    const auto& rec = manifest_.stages.at(s);
    const bool ingested = s == Stage::sample && rec.config.count("sample.source") &&
                          rec.config.at("sample.source") != "sampled";
    if (!opts.force && (now == rec.config || ingested)) return manifest_;
    if (!opts.force) {
      throw DriftError("configuration of stage " + std::string(to_string(s)) + " changed (" +
                       diff_keys(now, rec.config) + "); pass --force to rerun");
    }
  }
  // The stage and everything downstream of it become stale before any
  // artifact is rewritten.
  for (auto& [st, rec] : manifest_.stages) {
    if (st == s || depends_on(st, s)) rec.complete = false;
  }
  if (manifest_.stages.count(s)) write_file_atomic(cfg_.run_dir / "manifest.json", to_json(manifest_).dump(2) + "\n");

  executed_.push_back(s);
  try {
    switch (s) {
      case Stage::sample: do_sample(); break;
      case Stage::featurize: do_featurize(); break;
      case Stage::landscape: do_landscape(); break;
      case Stage::verify: do_verify(opts.train_only); break;
      case Stage::stats: do_stats(); break;
    }
  } catch (const CapabilityError& e) {
    throw CapabilityError("stage " + std::string(to_string(s)) + ": " + e.what());
  } catch (const TransportError& e) {
    throw TransportError("stage " + std::string(to_string(s)) + ": " + e.what(), e.attempts());
  }
  return manifest_;
}

const RunManifest& Pipeline::run_all(const StageOptions& opts) {
  for (auto s : kStages) run_stage(s, opts);
  return manifest_;
}

namespace {

struct Splits {
  std::vector<Question> train;
  std::vector<Question> eval;
};

Splits load_splits(const RunConfig& cfg) {
  if (cfg.dataset.empty()) throw ConfigError("no dataset configured (dataset.path)");
  const auto ds = load_dataset(cfg.dataset);
  const auto split = split_train_eval(ds, cfg.n_train, cfg.n_eval, cfg.split_seed);
  return {canonical(split.train), canonical(split.eval)};
}

}  // namespace

void Pipeline::do_sample() {
  const auto splits = load_splits(cfg_);
  SamplingConfig sc;
  sc.trajectories_per_question = cfg_.per_question;
  sc.prompt_template = cfg_.prompt_template;
  if (!cfg_.exemplars.empty()) sc.exemplars = load_exemplars(cfg_.exemplars);
  sc.segment_mode = cfg_.segment_mode;
  sc.resample_budget = cfg_.resample_budget;
  cfg_.sampling.validate();
  auto& m = model();

  const auto dir = cfg_.run_dir / "trajectories";
  std::vector<fs::path> artifacts;
  for (const auto& [name, qs] : {std::pair{"train", &splits.train}, std::pair{"eval", &splits.eval}}) {
    std::vector<Trajectory> all;
    for (const auto& q : *qs) {
      auto ts = sample_trajectories(q, sc, m, cfg_.sampling);
      all.insert(all.end(), std::make_move_iterator(ts.begin()), std::make_move_iterator(ts.end()));
    }
    const auto qpath = dir / (std::string(name) + "_questions.jsonl");
    const auto tpath = dir / (std::string(name) + ".jsonl");
    write_questions(qpath, *qs);
    write_trajectories(tpath, all);
    artifacts.push_back(qpath);
    artifacts.push_back(tpath);
  }
  finish(Stage::sample, artifacts);
}

const RunManifest& Pipeline::ingest(const fs::path& trajectories, const StageOptions& opts) {
  if (manifest_.complete(Stage::sample) && !opts.force) {
    throw DriftError("run already has trajectories; pass --force to replace them");
  }
  const auto splits = load_splits(cfg_);
  std::vector<Question> all = splits.train;
  all.insert(all.end(), splits.eval.begin(), splits.eval.end());
  const auto ingested = ingest_trajectories(trajectories, all);
  const auto train_ids = index_questions(splits.train);

  for (auto& [st, rec] : manifest_.stages) rec.complete = false;
  executed_.push_back(Stage::sample);
  const auto dir = cfg_.run_dir / "trajectories";
  std::vector<Trajectory> train;
  std::vector<Trajectory> eval;
  for (const auto& t : ingested) (train_ids.count(t.question_id) ? train : eval).push_back(t);
  std::vector<fs::path> artifacts{dir / "train_questions.jsonl", dir / "train.jsonl", dir / "eval_questions.jsonl",
                                  dir / "eval.jsonl"};
  write_questions(artifacts[0], splits.train);
  write_trajectories(artifacts[1], train);
  write_questions(artifacts[2], splits.eval);
  write_trajectories(artifacts[3], eval);
  finish(Stage::sample, artifacts);
  manifest_.stages[Stage::sample].config["sample.source"] = "ingested:" + sha256_file(trajectories);
  write_file_atomic(cfg_.run_dir / "manifest.json", to_json(manifest_).dump(2) + "\n");
  return manifest_;
}

void Pipeline::do_featurize() {
  auto& m = model();
  ScoreCache cache(cfg_.cache_dir, m.model_name());
  const Scorer scorer(m, &cache);
  FeaturizeOptions fo;
  fo.include_initial_state = cfg_.include_initial_state;
  std::vector<fs::path> artifacts;
  for (const std::string name : {"train", "eval"}) {
    const auto questions = read_questions(cfg_.run_dir / "trajectories" / (name + "_questions.jsonl"));
    const auto by_id = index_questions(questions);
    const auto trajs = read_trajectories(cfg_.run_dir / "trajectories" / (name + ".jsonl"));
    std::vector<FeatureTrajectory> out;
    out.reserve(trajs.size());
    for (const auto& t : trajs) {
      const auto it = by_id.find(t.question_id);
      if (it == by_id.end()) throw ReferenceError("trajectory references unknown question " + t.question_id);
      out.push_back(featurize_trajectory(t, *it->second, scorer, fo));
    }
    const auto path = cfg_.run_dir / "features" / (name + ".jsonl");
    write_feature_trajectories(path, out);
    artifacts.push_back(path);
  }
  finish(Stage::featurize, artifacts);
}

void Pipeline::do_landscape() {
  const auto ftrajs = read_feature_trajectories(cfg_.run_dir / "features" / "eval.jsonl");
  if (ftrajs.empty()) throw SizeError("no evaluation trajectories to project");
  const int k = ftrajs.front().k;
  const auto F = build_feature_matrix(ftrajs, k);

  Embedding2D emb;
  ordered_json meta{{"projector", cfg_.projector}, {"k", k}, {"columns", F.cols()}, {"trajectories", ftrajs.size()}};
  if (cfg_.projector == "tsne") {
    TsneDiagnostics diag;
    emb = tsne_embed(F, cfg_.tsne, &diag);
    meta["tsne"] = {{"perplexity", cfg_.tsne.perplexity},
                    {"effective_perplexity", diag.effective_perplexity},
                    {"iterations", cfg_.tsne.iterations},
                    {"learning_rate", cfg_.tsne.learning_rate},
                    {"early_exaggeration", cfg_.tsne.early_exaggeration},
                    {"seed", cfg_.tsne.seed},
                    {"initial_kl", diag.initial_kl},
                    {"final_kl", diag.final_kl}};
  } else if (cfg_.projector == "pca") {
    emb = pca_embed(F);
  } else {
    emb = read_embedding(cfg_.external_coords);
    if (emb.coords.size() != F.cols()) {
      throw SizeError("external coordinates have " + std::to_string(emb.coords.size()) + " rows, expected " +
                      std::to_string(F.cols()));
    }
    emb.layout = F.layout;
    emb.projector = "external";
  }

  const auto dir = cfg_.run_dir / "landscape";
  std::vector<fs::path> artifacts{dir / "embedding.csv"};
  write_embedding(artifacts[0], emb);
  const auto bundle = build_landscape(emb, ftrajs, cfg_.bins, cfg_.grid_size);
  const auto title = cfg_.method + " | " + model_identity_name() + " | " + cfg_.effective_dataset_tag();
  auto files = render_landscape(bundle, dir, title);
  artifacts.push_back(files.svg);
  artifacts.push_back(files.png);
  artifacts.insert(artifacts.end(), files.grids.begin(), files.grids.end());

  const auto metrics = aggregate_metrics_by_bin(ftrajs, cfg_.bins);
  artifacts.push_back(dir / "metrics.csv");
  write_file_atomic(artifacts.back(), metrics_table_csv(metrics));
  artifacts.push_back(dir / "metrics.svg");
  write_file_atomic(artifacts.back(), render_metrics_svg(metrics, cfg_.bins));

  meta["bins"] = cfg_.bins;
  meta["grid"] = cfg_.grid_size;
  meta["bounds"] = {bundle.bounds.xmin, bundle.bounds.xmax, bundle.bounds.ymin, bundle.bounds.ymax};
  artifacts.push_back(dir / "meta.json");
  write_file_atomic(artifacts.back(), meta.dump(2) + "\n");
  finish(Stage::landscape, artifacts);
}

std::string Pipeline::model_identity_name() const {
  if (!cfg_.model_name.empty()) return cfg_.model_name;
  return model_ ? model_->model_name() : std::string("model");
}

void Pipeline::do_verify(bool train_only) {
  const auto train = read_feature_trajectories(cfg_.run_dir / "features" / "train.jsonl");
  const auto eval = read_feature_trajectories(cfg_.run_dir / "features" / "eval.jsonl");
  std::vector<LabeledSummary> data;
  data.reserve(train.size());
  for (const auto& f : train) data.push_back({summarize_trajectory(f, cfg_.summary), f.is_correct});
  auto forest = cfg_.forest;
  const auto model = train_verifier(data, forest, {cfg_.effective_dataset_tag(), model_identity_name(), cfg_.method});

  const auto dir = cfg_.run_dir / "verifier";
  std::vector<fs::path> artifacts{dir / "model.json"};
  save_verifier(artifacts[0], model);
  if (train_only) return;

  const auto q = cfg_.effective_q_values();
  const auto points = evaluate_voting(eval, model, q, cfg_.score_mode);
  std::string csv = "q,weighted_accuracy,unweighted_accuracy\n";
  for (const auto& p : points) {
    csv += std::to_string(p.q) + "," + format_double(p.weighted_accuracy) + "," +
           format_double(p.unweighted_accuracy) + "\n";
  }
  artifacts.push_back(dir / "voting.csv");
  write_file_atomic(artifacts.back(), csv);

  std::vector<double> scores;
  std::vector<bool> labels;
  for (const auto& f : eval) {
    scores.push_back(verifier_score(model, summarize_trajectory(f, cfg_.summary)));
    labels.push_back(f.is_correct);
  }
  ordered_json summary{{"score_mode", to_string(cfg_.score_mode)},
                       {"train_trajectories", train.size()},
                       {"eval_trajectories", eval.size()}};
  try {
    summary["eval_auc"] = roc_auc(scores, labels);
  } catch (const DegenerateError&) {
    summary["eval_auc"] = nullptr;
  }
  artifacts.push_back(dir / "summary.json");
  write_file_atomic(artifacts.back(), summary.dump(2) + "\n");
  finish(Stage::verify, artifacts);
}

void Pipeline::do_stats() {
  const auto ftrajs = read_feature_trajectories(cfg_.run_dir / "features" / "eval.jsonl");
  const auto emb_path = cfg_.run_dir / "landscape" / "embedding.csv";
  if (!fs::exists(emb_path)) throw DependencyError("stats needs the landscape embedding (" + emb_path.string() + ")");
  const auto emb = read_embedding(emb_path);
  ReportOptions ro;
  ro.method = cfg_.method;
  ro.model = model_identity_name();
  ro.dataset = cfg_.effective_dataset_tag();
  ro.distance = cfg_.distance;
  ro.bins = cfg_.bins;
  ro.grid_size = cfg_.stats_grid;
  const auto report = observation_report(ftrajs, emb, ro);
  const auto dir = cfg_.run_dir / "stats";
  std::vector<fs::path> artifacts{dir / "report.json", dir / "report.txt"};
  write_file_atomic(artifacts[0], to_json(report).dump(2) + "\n");
  write_file_atomic(artifacts[1], report_text(report));
  finish(Stage::stats, artifacts);
}

// ---------------------------------------------------------------------------

void write_demo(const fs::path& dir, std::size_t questions) {
  static const std::array<const char*, 4> words{"amber", "birch", "cedar", "dahlia"};
  std::string dataset;
  MockScript script;
  script.model_name = "mock-demo";
  script.default_probability = 0.05;
  script.hash_spread = 1.0;
  for (std::size_t i = 0; i < questions; ++i) {
    const auto tag = std::to_string(i);
    std::vector<std::string> choices;
    for (const auto* w : words) choices.push_back(std::string(w) + tag);
    const std::size_t answer = i % 4;
    const std::string stem = "Which plant is filed under tag " + tag + "?";
    dataset += json{{"id", "demo-" + std::string(i < 10 ? "0" : "") + tag},
                    {"question", stem},
                    {"choices", choices},
                    {"answer", std::string(1, static_cast<char>('A' + answer))}}
                   .dump() +
               "\n";

    // Five scripted completions per question with varied length and outcome.
    std::vector<std::string> texts;
    for (std::size_t v = 0; v < 5; ++v) {
      const std::size_t first = (answer + v + 1) % 4;
      const std::size_t final_choice = (v + i) % 3 == 0 ? (answer + 1 + v % 3) % 4 : answer;
      std::string text = "Perhaps " + choices[first] + ".";
      for (std::size_t f = 0; f < v % 3; ++f) text += " Let me weigh the options once more.";
      text += " I am now leaning toward " + choices[final_choice] + ".";
      text += " The answer is (" + std::string(1, static_cast<char>('A' + final_choice)) + ").";
      texts.push_back(text);
    }
    script.completions.push_back({stem, std::move(texts)});
    for (const auto& c : choices) {
      script.score_rules.push_back({"toward " + c, c, 0.6});
      script.score_rules.push_back({"Perhaps " + c, c, 0.3});
    }
  }

  RunConfig cfg;
  cfg.run_dir = "runs/demo";
  cfg.dataset = "dataset.jsonl";
  cfg.endpoint = "mock:mock.json";
  cfg.model_name = "mock-demo";
  cfg.cache_dir = "cache";
  cfg.n_train = 4;
  cfg.n_eval = questions > 4 ? questions - 4 : 0;
  cfg.per_question = 5;
  cfg.max_inflight = 1;

  fs::create_directories(dir);
  write_file_atomic(dir / "dataset.jsonl", dataset);
  write_file_atomic(dir / "mock.json", to_json(script).dump(2) + "\n");
  write_file_atomic(dir / "config.ini", config_ini(cfg));
}

}  // namespace lot
