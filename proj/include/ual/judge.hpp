#pragma once

#include <array>
#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ual/dataset.hpp"

namespace ual {

/// Connection and elicitation settings for the uncertainty judge.
///
/// `endpoint` is either an http(s) chat-completions URL or a mock spec:
/// `mock:fixed=<0-100>` answers every sample with the same score and
/// `mock:table=<path>` looks scores up in a JSON-lines file of
/// {"id": ..., "score": ...} rows.
struct JudgeConfig {
  std::string endpoint = "mock:fixed=50";
  std::string model = "gpt-4";
  double timeout_seconds = 60.0;
  int max_retries = 3;
  double backoff_base_seconds = 1.0;
  int max_in_flight = 4;
  std::string template_id = "uncertainty-v1";
  double temperature = 0.0;
  std::string api_key_env = "UAL_JUDGE_API_KEY";

  void validate() const;
};

struct JudgeVerdict {
  std::string sample_id;
  int score = 0;             // 0..100
  double uncertainty = 0.0;  // score / 100
  std::string raw_text;
  std::string content_hash;

  bool operator==(const JudgeVerdict&) const = default;
};

struct ChatMessage {
  std::string role;
  std::string content;
};

struct PromptTemplate {
  std::string id;
  std::string system;
  std::string user;  // {instruction} and {response} are substituted
};

/// Throws InputError for an unknown id.
const PromptTemplate& prompt_template(const std::string& id);
std::vector<ChatMessage> render_prompt(const PromptTemplate& tmpl, const Sample& sample);

/// First integer in [0, 100] after a case-insensitive "SCORE:" marker.
/// Throws UnparseableScore.
int parse_score(std::string_view model_text);

/// Cache key: SHA-256 over template id, model, instruction and response.
std::string content_hash(const JudgeConfig& config, const Sample& sample);

/// Minimal HTTP POST surface so tests can substitute a fake.
struct HttpReply {
  int status = 0;  // 0 = transport failure
  std::string body;
  std::string error;
};

class ChatTransport {
 public:
  virtual ~ChatTransport() = default;
  virtual HttpReply post_json(const std::string& body) = 0;
};

/// cpp-httplib transport; reads the bearer token from `config.api_key_env`.
std::unique_ptr<ChatTransport> make_http_transport(const JudgeConfig& config);

/// Something that turns a rendered prompt into reply text.
class Judge {
 public:
  virtual ~Judge() = default;
  virtual std::string ask(const std::vector<ChatMessage>& messages, const Sample& sample) = 0;
  std::size_t calls() const noexcept { return calls_.load(); }

 protected:
  std::atomic<std::size_t> calls_{0};
};

/// Chat-completions client with exponential backoff on transport errors,
/// 429 and 5xx replies. `sleep` defaults to std::this_thread::sleep_for.
class HttpJudge : public Judge {
 public:
  using Sleeper = std::function<void(double seconds)>;

  HttpJudge(JudgeConfig config, std::unique_ptr<ChatTransport> transport, Sleeper sleep = {});
  std::string ask(const std::vector<ChatMessage>& messages, const Sample& sample) override;

  std::string request_body(const std::vector<ChatMessage>& messages) const;

 private:
  JudgeConfig config_;
  std::unique_ptr<ChatTransport> transport_;
  Sleeper sleep_;
};

/// Deterministic offline judge; replies "SCORE: <n>".
class MockJudge : public Judge {
 public:
  static std::unique_ptr<MockJudge> from_spec(std::string_view spec);
  explicit MockJudge(int fixed_score);
  explicit MockJudge(std::map<std::string, int> table);

  std::string ask(const std::vector<ChatMessage>& messages, const Sample& sample) override;

 private:
  std::optional<int> fixed_;
  std::map<std::string, int> table_;
};

/// Picks MockJudge for `mock:` endpoints and HttpJudge otherwise.
std::unique_ptr<Judge> make_judge(const JudgeConfig& config);

/// Append-only JSON-lines verdict store keyed by content hash. Writes are
/// serialized by an internal lock.
class VerdictCache {
 public:
  VerdictCache() = default;  // in-memory only
  explicit VerdictCache(std::filesystem::path path);

  std::optional<JudgeVerdict> lookup(const std::string& content_hash) const;
  void store(const JudgeVerdict& verdict);
  std::size_t size() const;

 private:
  std::optional<std::filesystem::path> path_;
  mutable std::mutex mutex_;
  std::map<std::string, JudgeVerdict> entries_;
};

/// Cached verdict for the sample, or a fresh one from `judge` (then cached).
JudgeVerdict elicit(const Sample& sample, const JudgeConfig& config, Judge& judge, VerdictCache& cache);

struct AnnotationResult {
  Dataset dataset;  // input order, `uncertainty` filled
  std::vector<JudgeVerdict> verdicts;
  std::size_t cache_hits = 0;  // samples answered without a judge call
  std::size_t judge_calls = 0;
};

/// Annotates every sample, at most `config.max_in_flight` requests at once.
/// Samples sharing a content hash cost one judge call.
AnnotationResult annotate(const Dataset& dataset, const JudgeConfig& config, Judge& judge, VerdictCache& cache);

/// Counts per score decile: [0,10), [10,20), ..., [90,100].
std::array<std::size_t, 10> score_histogram(const std::vector<JudgeVerdict>& verdicts);

}  // namespace ual
