#include "popcal/llm_gateway.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>

namespace popcal {

using nlohmann::json;

void ModelEndpoint::validate() const {
  if (base_url.empty()) throw ConfigError("model endpoint: base_url is empty");
  if (model_name.empty()) throw ConfigError("model endpoint: model name is empty");
  if (max_parallel < 1) throw ConfigError("model endpoint: max_parallel must be >= 1");
  if (!(temperature >= 0.0)) throw ConfigError("model endpoint: temperature must be >= 0");
}

CacheMode parse_cache_mode(std::string_view s) {
  if (s == "off") return CacheMode::Off;
  if (s == "record") return CacheMode::Record;
  if (s == "replay") return CacheMode::Replay;
  if (s == "auto") return CacheMode::Auto;
  throw ConfigError("unknown cache mode \"" + std::string(s) + "\"");
}

// ---------------------------------------------------------------------------
// Transcript cache

TranscriptCache::TranscriptCache(std::filesystem::path path, CacheMode mode)
    : path_(std::move(path)), mode_(mode) {
  if (mode_ == CacheMode::Off || !std::filesystem::exists(path_)) {
    if (mode_ == CacheMode::Replay)
      throw ConfigError("replay requested but transcript " + path_.string() + " does not exist");
    return;
  }
  std::size_t line_no = 0;
  for (const auto& line : read_lines(path_)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      auto j = json::parse(line);
      entries_[j.at("key").get<std::string>()] = j.at("response");
    } catch (const std::exception& ex) {
      throw ParseError(line_no, path_.string() + ": bad transcript entry: " + ex.what());
    }
  }
}

std::optional<json> TranscriptCache::lookup(const std::string& key) const {
  std::lock_guard lock(mu_);
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void TranscriptCache::store(const std::string& key, const json& request, const json& response) {
  std::lock_guard lock(mu_);
  entries_[key] = response;
  if (!path_.parent_path().empty()) std::filesystem::create_directories(path_.parent_path());
  std::ofstream out(path_, std::ios::app | std::ios::binary);
  if (!out) throw IoError("cannot append to transcript " + path_.string());
  out << json{{"key", key}, {"request", request}, {"response", response}}.dump() << '\n';
}

std::size_t TranscriptCache::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

std::string transcript_key(const ModelEndpoint& ep, const json& request) {
  return sha256_hex(ep.base_url + "\n" + ep.model_name + "\n" + request.dump());
}

// ---------------------------------------------------------------------------
// Client

ChatClient::ChatClient(ModelEndpoint ep, std::shared_ptr<TranscriptCache> cache)
    : ep_(std::move(ep)),
      cache_(std::move(cache)),
      inflight_(static_cast<std::size_t>(std::max(1, ep_.max_parallel))),
      limiter_(ep_.rps) {
  ep_.validate();
}

json ChatClient::make_request(const std::string& prompt, double temperature, bool logprobs,
                              std::optional<std::uint64_t> seed) const {
  json req = {{"model", ep_.model_name},
              {"messages", json::array({{{"role", "user"}, {"content", prompt}}})},
              {"temperature", temperature},
              {"max_tokens", ep_.max_tokens}};
  if (logprobs) req["logprobs"] = true;
  if (seed) req["seed"] = *seed;
  return req;
}

json ChatClient::complete(const json& request) {
  const auto key = transcript_key(ep_, request);
  const auto mode = cache_ ? cache_->mode() : CacheMode::Off;
  if (mode == CacheMode::Replay || mode == CacheMode::Auto) {
    if (auto hit = cache_->lookup(key)) {
      ++cache_hits_;
      return *hit;
    }
    if (mode == CacheMode::Replay)
      throw ServiceError("transcript has no entry for request " + key.substr(0, 12));
  }

  HttpRequest http;
  http.url = ep_.base_url;
  while (!http.url.empty() && http.url.back() == '/') http.url.pop_back();
  http.url += "/chat/completions";
  http.body = request.dump();
  http.timeout = ep_.timeout;
  if (!ep_.api_key_env.empty()) {
    if (const char* k = std::getenv(ep_.api_key_env.c_str()); k && *k)
      http.headers.emplace_back("Authorization", std::string("Bearer ") + k);
  }

  inflight_.acquire();
  HttpResponse res;
  try {
    ++upstream_calls_;
    res = send_with_retry(http, ep_.retry, &limiter_);
  } catch (...) {
    inflight_.release();
    throw;
  }
  inflight_.release();
  if (res.status != 200)
    throw ServiceError(http.url + ": HTTP " + std::to_string(res.status) + ": " +
                       res.body.substr(0, 200));
  json body;
  try {
    body = json::parse(res.body);
  } catch (const std::exception& ex) {
    throw ServiceError(http.url + ": response is not JSON: " + ex.what());
  }
  if (mode == CacheMode::Record || mode == CacheMode::Auto) cache_->store(key, request, body);
  return body;
}

// ---------------------------------------------------------------------------
// Prompts and parsing

std::string fill_template(std::string_view tmpl,
                          const std::vector<std::pair<std::string, std::string>>& values) {
  std::string out;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      auto close = tmpl.find('}', i);
      if (close != std::string_view::npos) {
        auto name = tmpl.substr(i + 1, close - i - 1);
        auto it = std::find_if(values.begin(), values.end(),
                               [&](const auto& kv) { return kv.first == name; });
        if (it != values.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out.push_back(tmpl[i++]);
  }
  return out;
}

namespace {

std::string message_content(const json& response) {
  const auto& choices = response.at("choices");
  if (!choices.is_array() || choices.empty()) throw ServiceError("response has no choices");
  const auto& msg = choices[0].at("message");
  auto it = msg.find("content");
  if (it == msg.end() || it->is_null()) return "";
  return it->get<std::string>();
}

std::string trim_copy(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return std::string(s);
}

Generation parse_generation(const json& response) {
  Generation g;
  const auto content = message_content(response);
  g.answer = trim_copy(content);
  if (content.empty()) return g;
  const auto& choice = response.at("choices")[0];
  auto lp = choice.find("logprobs");
  if (lp == choice.end() || lp->is_null() || !lp->contains("content") ||
      !(*lp)["content"].is_array())
    throw CapabilityError("endpoint returned no token logprobs");
  for (const auto& tok : (*lp)["content"]) {
    const double p = std::exp(tok.at("logprob").get<double>());
    g.token_probs.push_back(std::clamp(p, std::numeric_limits<double>::min(), 1.0));
  }
  if (g.token_probs.empty()) throw CapabilityError("endpoint returned an empty logprobs list");
  return g;
}

std::vector<std::string> words(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    auto u = static_cast<unsigned char>(c);
    if (std::isalnum(u) || c == '\'') {
      cur.push_back(static_cast<char>(std::tolower(u)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

}  // namespace

std::optional<int> parse_verbalized(std::string_view reply) {
  const auto w = words(reply);
  if (w.empty()) return std::nullopt;
  if (w.front() == "yes") return 1;
  if (w.front() == "no") return 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] == "cannot" || w[i] == "can't" || w[i] == "cant" || w[i] == "unable") return 0;
    if (w[i] == "not" && i + 1 < w.size() && w[i + 1] == "able") return 0;
    if (w[i] == "can" && i + 1 < w.size() && w[i + 1] == "not") return 0;
  }
  for (const auto& t : w) {
    if (t == "yes") return 1;
    if (t == "no") return 0;
  }
  for (const auto& t : w)
    if (t == "can" || t == "able") return 1;
  return std::nullopt;
}

std::optional<int> parse_familiarity(std::string_view reply) {
  std::size_t i = 0;
  while (i < reply.size()) {
    if (!std::isdigit(static_cast<unsigned char>(reply[i]))) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < reply.size() && std::isdigit(static_cast<unsigned char>(reply[j]))) ++j;
    // Skip decimals such as "7.5" as a whole.
    bool decimal = j + 1 < reply.size() && reply[j] == '.' &&
                   std::isdigit(static_cast<unsigned char>(reply[j + 1]));
    if (!decimal && j - i <= 2) {
      int v = std::stoi(std::string(reply.substr(i, j - i)));
      if (v >= 1 && v <= 10) return v;
    }
    if (decimal) {
      ++j;
      while (j < reply.size() && std::isdigit(static_cast<unsigned char>(reply[j]))) ++j;
    }
    i = j;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Operations

Generation generate_answer(ChatClient& client, const std::string& question,
                           const PromptTemplates& prompts) {
  auto req = client.make_request(fill_template(prompts.qa, {{"question", question}}), 0.0,
                                 client.endpoint().logprobs_requested);
  if (!client.endpoint().logprobs_requested)
    throw CapabilityError("generate_answer requires logprobs to be requested");
  return parse_generation(client.complete(req));
}

std::vector<Generation> generate_answers(ChatClient& client,
                                         const std::vector<std::string>& questions,
                                         const PromptTemplates& prompts) {
  std::vector<Generation> out(questions.size());
  parallel_for_bounded(questions.size(),
                       static_cast<std::size_t>(client.endpoint().max_parallel),
                       [&](std::size_t i) { out[i] = generate_answer(client, questions[i], prompts); });
  return out;
}

int verbalized_confidence(ChatClient& client, const std::string& question,
                          const PromptTemplates& prompts) {
  auto req = client.make_request(fill_template(prompts.verbalized, {{"question", question}}), 0.0,
                                 false);
  const auto reply = message_content(client.complete(req));
  auto v = parse_verbalized(reply);
  if (!v) throw ParseError(0, "no yes/no judgment in reply \"" + reply + "\"");
  return *v;
}

ConsistencySamples sample_for_consistency(ChatClient& client, const std::string& question,
                                          int n, double temperature,
                                          const PromptTemplates& prompts) {
  if (n < 1) throw std::invalid_argument("sample_for_consistency: n must be >= 1");
  const auto prompt = fill_template(prompts.qa, {{"question", question}});
  std::vector<std::optional<std::string>> slots(static_cast<std::size_t>(n));
  parallel_for_bounded(slots.size(), static_cast<std::size_t>(client.endpoint().max_parallel),
                       [&](std::size_t i) {
                         try {
                           auto req = client.make_request(prompt, temperature, false, i);
                           slots[i] = trim_copy(message_content(client.complete(req)));
                         } catch (const std::exception& ex) {
                           spdlog::debug("consistency sample {} failed: {}", i, ex.what());
                         }
                       });
  ConsistencySamples out;
  for (auto& s : slots) {
    if (s) {
      out.answers.push_back(std::move(*s));
    } else {
      ++out.failures;
    }
  }
  out.available = 2 * out.answers.size() >= static_cast<std::size_t>(n);
  return out;
}

JudgeResult judge_equivalence(const std::string& a, const std::string& b,
                              const std::string& question, ChatClient* judge,
                              const PromptTemplates& prompts) {
  if (a == b) return {1, false, false};
  JudgeResult r;
  if (judge) {
    r.judged = true;
    try {
      auto req = judge->make_request(
          fill_template(prompts.judge, {{"question", question}, {"answer_a", a}, {"answer_b", b}}),
          0.0, false);
      if (auto v = parse_verbalized(message_content(judge->complete(req)))) {
        r.equivalent = *v;
        return r;
      }
    } catch (const std::exception& ex) {
      spdlog::debug("judge call failed: {}", ex.what());
    }
  }
  r.fallback = true;
  r.equivalent = normalize_text(a) == normalize_text(b) ? 1 : 0;
  return r;
}

std::vector<std::pair<double, int>> popularity_buckets(std::span<const double> pops,
                                                       BucketMode mode) {
  std::vector<double> vals(pops.begin(), pops.end());
  for (double v : vals)
    if (!std::isfinite(v)) throw BucketError("popularity values must be finite");
  std::sort(vals.begin(), vals.end());
  vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
  const std::size_t m = vals.size();
  if (m < 10)
    throw BucketError("need at least 10 distinct popularity values, got " + std::to_string(m));
  std::vector<std::pair<double, int>> out;
  out.reserve(m);
  if (mode == BucketMode::EqualCount) {
    for (std::size_t b = 0; b < 10; ++b) {
      for (std::size_t i = b * m / 10; i < (b + 1) * m / 10; ++i)
        out.emplace_back(vals[i], static_cast<int>(b + 1));
    }
  } else {
    const double lo = vals.front(), hi = vals.back();
    for (double v : vals) {
      int s = static_cast<int>(std::floor((v - lo) / (hi - lo) * 10.0)) + 1;
      out.emplace_back(v, std::clamp(s, 1, 10));
    }
  }
  return out;
}

std::vector<FewshotExample> select_fewshot_examples(std::span<const double> pops, int k,
                                                    std::uint64_t seed, BucketMode mode) {
  std::vector<int> wanted;
  switch (k) {
    case 3: wanted = {2, 5, 8}; break;
    case 5: wanted = {1, 3, 5, 7, 9}; break;
    case 10: wanted = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10}; break;
    default: throw std::invalid_argument("select_fewshot_examples: k must be 3, 5 or 10");
  }
  if (pops.empty()) throw std::invalid_argument("select_fewshot_examples: no values");
  const auto buckets = popularity_buckets(pops, mode);
  Rng rng(seed);
  std::vector<FewshotExample> out;
  for (int score : wanted) {
    std::vector<double> members;
    for (const auto& [v, s] : buckets)
      if (s == score) members.push_back(v);
    if (members.empty()) throw BucketError("bucket " + std::to_string(score) + " is empty");
    const double v = members[uniform_index(rng, members.size())];
    const auto idx = static_cast<std::size_t>(
        std::find(pops.begin(), pops.end(), v) - pops.begin());
    out.push_back({v, score, idx});
  }
  return out;
}

std::string_view to_string(SelfPopTarget t) {
  switch (t) {
    case SelfPopTarget::QuestionEntity: return "question_entity";
    case SelfPopTarget::GeneratedEntity: return "generated_entity";
    case SelfPopTarget::RelationPair: return "relation_pair";
  }
  return "?";
}

SelfPopularityScore self_popularity(ChatClient& client, SelfPopTarget target,
                                    const std::string& entity_a, const std::string& entity_b,
                                    const std::vector<FamiliarityShot>& shots,
                                    const PromptTemplates& prompts) {
  const bool pair = target == SelfPopTarget::RelationPair;
  if (entity_a.empty() || (pair && entity_b.empty()))
    throw std::invalid_argument("self_popularity: empty target");
  if (!shots.empty() && shots.size() != 3 && shots.size() != 5 && shots.size() != 10)
    throw std::invalid_argument("self_popularity: shots must be 0, 3, 5 or 10");
  std::string examples;
  if (!shots.empty()) {
    examples = "\nExamples:";
    for (const auto& s : shots) {
      examples += pair ? "\n\"" + s.entity_a + "\" and \"" + s.entity_b + "\": "
                       : "\n\"" + s.entity_a + "\": ";
      examples += std::to_string(s.score);
    }
  }
  const auto prompt =
      pair ? fill_template(prompts.relation_familiarity,
                           {{"entity_a", entity_a}, {"entity_b", entity_b}, {"examples", examples}})
           : fill_template(prompts.entity_familiarity,
                           {{"entity", entity_a}, {"examples", examples}});

  SelfPopularityScore out;
  out.target = target;
  out.shots = static_cast<int>(shots.size());
  for (std::uint64_t attempt = 0; attempt < 2; ++attempt) {
    // The retry carries a distinct seed so a cached reply is not reused.
    auto req = client.make_request(prompt, client.endpoint().temperature, false,
                                   attempt == 0 ? std::nullopt : std::optional(attempt));
    out.raw_reply = message_content(client.complete(req));
    if (auto v = parse_familiarity(out.raw_reply)) {
      out.score = *v;
      return out;
    }
  }
  spdlog::warn("no familiarity score in reply \"{}\"; using 5", out.raw_reply);
  out.score = 5;
  out.fallback = true;
  return out;
}

}  // namespace popcal
