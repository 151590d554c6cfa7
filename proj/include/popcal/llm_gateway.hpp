#pragma once

// Model interaction over an OpenAI-compatible chat-completions API, with a
// request/response transcript cache for offline replay.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "popcal/http.hpp"
#include "popcal/util.hpp"

namespace popcal {

struct ModelEndpoint {
  std::string base_url;  // e.g. http://localhost:8000/v1
  std::string model_name;
  std::string api_key_env;
  int max_parallel = 4;
  std::chrono::milliseconds timeout{60000};
  double temperature = 0.0;
  bool logprobs_requested = true;
  int max_tokens = 64;
  double rps = 0.0;
  RetryPolicy retry;

  void validate() const;
};

// The endpoint answered but lacks a feature we need (e.g. logprobs).
class CapabilityError : public ServiceError {
 public:
  using ServiceError::ServiceError;
};

enum class CacheMode { Off, Record, Replay, Auto };
CacheMode parse_cache_mode(std::string_view s);

// JSONL of {"key", "request", "response"}. Record always calls upstream and
// appends; Replay never calls upstream; Auto serves hits and records misses.
class TranscriptCache {
 public:
  TranscriptCache(std::filesystem::path path, CacheMode mode);

  CacheMode mode() const { return mode_; }
  std::optional<nlohmann::json> lookup(const std::string& key) const;
  void store(const std::string& key, const nlohmann::json& request,
             const nlohmann::json& response);
  std::size_t size() const;

 private:
  std::filesystem::path path_;
  CacheMode mode_;
  mutable std::mutex mu_;
  std::unordered_map<std::string, nlohmann::json> entries_;
};

// sha256 over endpoint, model and the canonical request body.
std::string transcript_key(const ModelEndpoint& ep, const nlohmann::json& request);

struct ClientStats {
  std::size_t upstream_calls = 0;
  std::size_t cache_hits = 0;
};

class ChatClient {
 public:
  explicit ChatClient(ModelEndpoint ep, std::shared_ptr<TranscriptCache> cache = nullptr);

  const ModelEndpoint& endpoint() const { return ep_; }

  // Chat request body for a single user turn.
  nlohmann::json make_request(const std::string& prompt, double temperature, bool logprobs,
                              std::optional<std::uint64_t> seed = std::nullopt) const;

  // Sends (or replays) a request; blocks while max_parallel requests are
  // already in flight.
  nlohmann::json complete(const nlohmann::json& request);

  ClientStats stats() const { return {upstream_calls_.load(), cache_hits_.load()}; }

 private:
  ModelEndpoint ep_;
  std::shared_ptr<TranscriptCache> cache_;
  Semaphore inflight_;
  RateLimiter limiter_;
  std::atomic<std::size_t> upstream_calls_{0};
  std::atomic<std::size_t> cache_hits_{0};
};

// Prompt templates. Placeholders: {question}, {answer_a}, {answer_b},
// {entity}, {entity_a}, {entity_b}, {examples}.
struct PromptTemplates {
  std::string qa =
      "Answer the following question with only the answer entity, without any other "
      "words.\nQuestion: {question}\nAnswer:";
  std::string verbalized =
      "Can you answer the following question correctly? Reply with \"Yes\" or \"No\" "
      "only.\nQuestion: {question}";
  std::string judge =
      "Question: {question}\nAnswer A: {answer_a}\nAnswer B: {answer_b}\nDo the two answers "
      "refer to the same thing? Reply with \"Yes\" or \"No\" only.";
  std::string entity_familiarity =
      "How familiar are you with the entity \"{entity}\"? Rate your familiarity on a scale "
      "from 1 (least familiar) to 10 (most familiar).{examples}\nReply with a single integer.";
  std::string relation_familiarity =
      "How familiar are you with the relationship between \"{entity_a}\" and "
      "\"{entity_b}\"? Rate your familiarity on a scale from 1 (least familiar) to 10 (most "
      "familiar).{examples}\nReply with a single integer.";
};

std::string fill_template(std::string_view tmpl,
                          const std::vector<std::pair<std::string, std::string>>& values);

struct Generation {
  std::string answer;
  std::vector<double> token_probs;
};

// Greedy decoding (temperature 0) with logprobs; token probabilities are
// exp(logprob) for every generated token.
Generation generate_answer(ChatClient& client, const std::string& question,
                           const PromptTemplates& prompts = {});

// Batch form; results are in question order.
std::vector<Generation> generate_answers(ChatClient& client,
                                         const std::vector<std::string>& questions,
                                         const PromptTemplates& prompts = {});

// 1 = claims able, 0 = claims unable, nullopt = no judgment found.
std::optional<int> parse_verbalized(std::string_view reply);

// Throws ParseError when the reply carries no judgment.
int verbalized_confidence(ChatClient& client, const std::string& question,
                          const PromptTemplates& prompts = {});

struct ConsistencySamples {
  std::vector<std::string> answers;
  std::size_t failures = 0;
  bool available = true;  // at least half the samples succeeded
};

ConsistencySamples sample_for_consistency(ChatClient& client, const std::string& question,
                                          int n = 10, double temperature = 1.0,
                                          const PromptTemplates& prompts = {});

struct JudgeResult {
  int equivalent = 0;
  bool fallback = false;  // judge failed; normalized exact match used
  bool judged = false;    // a judge call was made
};

JudgeResult judge_equivalence(const std::string& a, const std::string& b,
                              const std::string& question, ChatClient* judge,
                              const PromptTemplates& prompts = {});

enum class BucketMode { EqualCount, EqualWidth };

struct FewshotExample {
  double value = 0.0;
  int score = 0;              // bucket 1..10
  std::size_t source_index = 0;  // first index in the input with this value
};

class BucketError : public Error {
 public:
  using Error::Error;
};

// Bucket score (1..10) of every distinct value. Equal-count: over the m
// sorted distinct values, bucket b (0-based) holds positions
// [floor(b*m/10), floor((b+1)*m/10)). Equal-width: ten equal sub-ranges.
std::vector<std::pair<double, int>> popularity_buckets(std::span<const double> pops,
                                                       BucketMode mode = BucketMode::EqualCount);

// k=3 uses buckets {2,5,8}, k=5 uses {1,3,5,7,9}, k=10 every bucket; one
// value drawn uniformly per bucket.
std::vector<FewshotExample> select_fewshot_examples(std::span<const double> pops, int k,
                                                    std::uint64_t seed,
                                                    BucketMode mode = BucketMode::EqualCount);

enum class SelfPopTarget { QuestionEntity, GeneratedEntity, RelationPair };
std::string_view to_string(SelfPopTarget t);

struct SelfPopularityScore {
  SelfPopTarget target = SelfPopTarget::QuestionEntity;
  int score = 5;
  int shots = 0;
  std::string raw_reply;
  bool fallback = false;
};

// First integer token in [1,10].
std::optional<int> parse_familiarity(std::string_view reply);

// A labelled demonstration for few-shot familiarity prompts.
struct FamiliarityShot {
  std::string entity_a;
  std::string entity_b;  // empty for entity targets
  int score = 0;
};

SelfPopularityScore self_popularity(ChatClient& client, SelfPopTarget target,
                                    const std::string& entity_a, const std::string& entity_b,
                                    const std::vector<FamiliarityShot>& shots,
                                    const PromptTemplates& prompts = {});

}  // namespace popcal
