#include "ual/judge.hpp"

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include "ual/error.hpp"
#include "ual/io.hpp"

namespace ual {

using json = nlohmann::ordered_json;

void JudgeConfig::validate() const {
  if (max_in_flight < 1) throw InputError("judge max_in_flight must be >= 1");
  if (!(timeout_seconds > 0.0)) throw InputError("judge timeout must be > 0");
  if (max_retries < 0) throw InputError("judge max_retries must be >= 0");
  if (backoff_base_seconds < 0.0) throw InputError("judge backoff base must be >= 0");
  prompt_template(template_id);
}

namespace {

const std::vector<PromptTemplate>& templates() {
  static const std::vector<PromptTemplate> all = {
      {"uncertainty-v1",
       "You annotate instruction-tuning data. Read the instruction and rate how much inherent "
       "uncertainty/ambiguity the instruction admits in its space of valid responses.\n"
       "A score near 0 means essentially one correct answer exists (arithmetic, a factual lookup, a "
       "format conversion). A score near 100 means many very different responses would be equally "
       "valid (open-ended writing, advice, casual conversation).\n"
       "The reference response is context only; do not grade its quality.\n"
       "Give at most two sentences of reasoning, then finish with a final line of the form\n"
       "SCORE: <integer from 0 to 100>",
       "Instruction:\n{instruction}\n\nReference response:\n{response}"},
  };
  return all;
}

void replace_all(std::string& text, std::string_view key, const std::string& value) {
  std::size_t pos = 0;
  while ((pos = text.find(key, pos)) != std::string::npos) {
    text.replace(pos, key.size(), value);
    pos += value.size();
  }
}

bool iequals_at(std::string_view text, std::size_t pos, std::string_view word) {
  if (pos + word.size() > text.size()) return false;
  for (std::size_t i = 0; i < word.size(); ++i) {
    if (std::tolower(static_cast<unsigned char>(text[pos + i])) != word[i]) return false;
  }
  return true;
}

struct ParsedUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

ParsedUrl split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw InputError("judge endpoint '" + url + "' is not an http(s) URL");
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

// httplib::Client is not safe for concurrent use, so each request gets its own.
class HttplibTransport : public ChatTransport {
 public:
  explicit HttplibTransport(const JudgeConfig& config)
      : url_(split_url(config.endpoint)), timeout_seconds_(config.timeout_seconds) {
    if (const char* key = std::getenv(config.api_key_env.c_str()); key && *key) api_key_ = key;
  }

  HttpReply post_json(const std::string& body) override {
    httplib::Client client(url_.origin);
    const auto whole = static_cast<time_t>(timeout_seconds_);
    const auto micros = static_cast<time_t>((timeout_seconds_ - static_cast<double>(whole)) * 1e6);
    client.set_connection_timeout(whole, micros);
    client.set_read_timeout(whole, micros);
    client.set_write_timeout(whole, micros);
    if (!api_key_.empty()) client.set_bearer_token_auth(api_key_);
    auto res = client.Post(url_.path, body, "application/json");
    if (!res) return {0, {}, httplib::to_string(res.error())};
    return {res->status, res->body, {}};
  }

 private:
  ParsedUrl url_;
  double timeout_seconds_;
  std::string api_key_;
};

std::string read_reply_content(const std::string& body) {
  const auto reply = json::parse(body);
  return reply.at("choices").at(0).at("message").at("content").get<std::string>();
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

const PromptTemplate& prompt_template(const std::string& id) {
  for (const auto& t : templates()) {
    if (t.id == id) return t;
  }
  throw InputError("unknown prompt template '" + id + "'");
}

std::vector<ChatMessage> render_prompt(const PromptTemplate& tmpl, const Sample& sample) {
  std::string user = tmpl.user;
  // Substitute the response first so braces inside the instruction survive.
  replace_all(user, "{response}", sample.response);
  const auto pos = user.find("{instruction}");
  if (pos != std::string::npos) user.replace(pos, std::string_view("{instruction}").size(), sample.instruction);
  return {{"system", tmpl.system}, {"user", user}};
}

int parse_score(std::string_view text) {
  static constexpr std::string_view kMarker = "score:";
  for (std::size_t pos = 0; pos < text.size(); ++pos) {
    if (!iequals_at(text, pos, kMarker)) continue;
    std::size_t i = pos + kMarker.size();
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && std::isdigit(static_cast<unsigned char>(text[j]))) ++j;
    if (j == i || j - i > 3) continue;
    const int value = std::stoi(std::string(text.substr(i, j - i)));
    if (value >= 0 && value <= 100) return value;
  }
  throw UnparseableScore(std::string(text));
}

std::string content_hash(const JudgeConfig& config, const Sample& sample) {
  std::string key;
  for (const std::string* part : {&config.template_id, &config.model, &sample.instruction, &sample.response}) {
    key += std::to_string(part->size());
    key += ':';
    key += *part;
  }
  return io::sha256_hex(key);
}

std::unique_ptr<ChatTransport> make_http_transport(const JudgeConfig& config) {
  return std::make_unique<HttplibTransport>(config);
}

HttpJudge::HttpJudge(JudgeConfig config, std::unique_ptr<ChatTransport> transport, Sleeper sleep)
    : config_(std::move(config)), transport_(std::move(transport)), sleep_(std::move(sleep)) {
  if (!sleep_) {
    sleep_ = [](double seconds) { std::this_thread::sleep_for(std::chrono::duration<double>(seconds)); };
  }
}

std::string HttpJudge::request_body(const std::vector<ChatMessage>& messages) const {
  json body;
  body["model"] = config_.model;
  body["messages"] = json::array();
  for (const auto& m : messages) body["messages"].push_back({{"role", m.role}, {"content", m.content}});
  body["temperature"] = config_.temperature;
  return body.dump();
}

std::string HttpJudge::ask(const std::vector<ChatMessage>& messages, const Sample& sample) {
  const std::string body = request_body(messages);
  std::string last_error;
  std::string last_body;
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) sleep_(config_.backoff_base_seconds * std::pow(2.0, attempt - 1));
    ++calls_;
    const HttpReply reply = transport_->post_json(body);
    if (reply.status == 0) {
      last_error = "transport error: " + reply.error;
      continue;
    }
    last_body = reply.body;
    if (reply.status == 429 || reply.status >= 500) {
      last_error = "HTTP " + std::to_string(reply.status);
      continue;
    }
    if (reply.status < 200 || reply.status >= 300) {
      throw JudgeUnavailable("HTTP " + std::to_string(reply.status) + " for sample '" + sample.id + "'", reply.body);
    }
    try {
      return read_reply_content(reply.body);
    } catch (const json::exception& e) {
      throw JudgeUnavailable(std::string("malformed chat-completions reply: ") + e.what(), reply.body);
    }
  }
  throw JudgeUnavailable(last_error + " after " + std::to_string(config_.max_retries + 1) + " attempt(s) for sample '" +
                             sample.id + "'",
                         last_body);
}

MockJudge::MockJudge(int fixed_score) : fixed_(fixed_score) {
  if (fixed_score < 0 || fixed_score > 100) throw InputError("mock fixed score must lie in [0, 100]");
}

MockJudge::MockJudge(std::map<std::string, int> table) : table_(std::move(table)) {}

std::unique_ptr<MockJudge> MockJudge::from_spec(std::string_view spec) {
  if (spec.rfind("mock:", 0) != 0) throw InputError("mock judge spec must start with 'mock:'");
  const std::string_view rest = spec.substr(5);
  if (rest.rfind("fixed=", 0) == 0) {
    const std::string value(rest.substr(6));
    char* end = nullptr;
    const long score = std::strtol(value.c_str(), &end, 10);
    if (value.empty() || *end != '\0') throw InputError("mock:fixed= needs an integer, got '" + value + "'");
    return std::make_unique<MockJudge>(static_cast<int>(score));
  }
  if (rest.rfind("table=", 0) == 0) {
    const std::filesystem::path path(std::string(rest.substr(6)));
    std::istringstream in(io::read_file(path));
    std::map<std::string, int> table;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        const auto row = json::parse(line);
        const int score = row.at("score").get<int>();
        if (score < 0 || score > 100) throw FormatError("score outside [0, 100]");
        table[row.at("id").get<std::string>()] = score;
      } catch (const std::exception& e) {
        throw FormatError(path.string() + " line " + std::to_string(line_no) + ": " + e.what());
      }
    }
    return std::make_unique<MockJudge>(std::move(table));
  }
  throw InputError("unknown mock judge spec '" + std::string(spec) + "' (use mock:fixed=<n> or mock:table=<path>)");
}

std::string MockJudge::ask(const std::vector<ChatMessage>&, const Sample& sample) {
  ++calls_;
  if (fixed_) return "SCORE: " + std::to_string(*fixed_);
  auto it = table_.find(sample.id);
  if (it == table_.end()) throw JudgeUnavailable("mock table has no score for '" + sample.id + "'", "");
  return "SCORE: " + std::to_string(it->second);
}

std::unique_ptr<Judge> make_judge(const JudgeConfig& config) {
  config.validate();
  if (config.endpoint.rfind("mock:", 0) == 0) return MockJudge::from_spec(config.endpoint);
  return std::make_unique<HttpJudge>(config, make_http_transport(config));
}

VerdictCache::VerdictCache(std::filesystem::path path) : path_(std::move(path)) {
  if (!std::filesystem::exists(*path_)) return;
  std::istringstream in(io::read_file(*path_));
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto row = json::parse(line);
      JudgeVerdict v;
      v.content_hash = row.at("hash").get<std::string>();
      v.sample_id = row.at("sample_id").get<std::string>();
      v.score = row.at("score").get<int>();
      v.uncertainty = static_cast<double>(v.score) / 100.0;
      v.raw_text = row.at("raw_text").get<std::string>();
      entries_[v.content_hash] = std::move(v);
    } catch (const json::exception& e) {
      throw FormatError(path_->string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

std::optional<JudgeVerdict> VerdictCache::lookup(const std::string& hash) const {
  std::lock_guard lock(mutex_);
  auto it = entries_.find(hash);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void VerdictCache::store(const JudgeVerdict& verdict) {
  std::lock_guard lock(mutex_);
  if (!entries_.emplace(verdict.content_hash, verdict).second) return;
  if (!path_) return;
  std::ofstream out(*path_, std::ios::binary | std::ios::app);
  if (!out) throw InputError("cannot append to judge cache " + path_->string());
  json row;
  row["hash"] = verdict.content_hash;
  row["sample_id"] = verdict.sample_id;
  row["score"] = verdict.score;
  row["raw_text"] = verdict.raw_text;
  row["stored_at"] = utc_timestamp();
  out << row.dump() << '\n';
}

std::size_t VerdictCache::size() const {
  std::lock_guard lock(mutex_);
  return entries_.size();
}

namespace {

JudgeVerdict elicit_impl(const Sample& sample, const JudgeConfig& config, Judge& judge, VerdictCache& cache,
                         bool& from_cache) {
  const std::string hash = content_hash(config, sample);
  if (auto hit = cache.lookup(hash)) {
    from_cache = true;
    return *hit;
  }
  from_cache = false;
  const std::string text = judge.ask(render_prompt(prompt_template(config.template_id), sample), sample);
  JudgeVerdict verdict;
  verdict.sample_id = sample.id;
  verdict.score = parse_score(text);
  verdict.uncertainty = static_cast<double>(verdict.score) / 100.0;
  verdict.raw_text = text;
  verdict.content_hash = hash;
  cache.store(verdict);
  return verdict;
}

}  // namespace

JudgeVerdict elicit(const Sample& sample, const JudgeConfig& config, Judge& judge, VerdictCache& cache) {
  bool from_cache = false;
  return elicit_impl(sample, config, judge, cache, from_cache);
}

AnnotationResult annotate(const Dataset& dataset, const JudgeConfig& config, Judge& judge, VerdictCache& cache) {
  config.validate();
  const std::size_t calls_before = judge.calls();

  // One representative sample per distinct content hash, in first-seen order.
  std::vector<std::string> hashes(dataset.size());
  std::map<std::string, std::size_t> unique_index;
  std::vector<std::size_t> representatives;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    hashes[i] = content_hash(config, dataset[i]);
    if (unique_index.emplace(hashes[i], representatives.size()).second) representatives.push_back(i);
  }

  std::vector<JudgeVerdict> unique_verdicts(representatives.size());
  std::vector<std::uint8_t> fresh(representatives.size(), 0);
  std::vector<std::exception_ptr> errors(representatives.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < representatives.size(); k = next++) {
      try {
        bool from_cache = false;
        unique_verdicts[k] = elicit_impl(dataset[representatives[k]], config, judge, cache, from_cache);
        fresh[k] = from_cache ? 0 : 1;
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(config.max_in_flight),
                                                    std::max<std::size_t>(1, representatives.size()));
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  AnnotationResult result;
  result.dataset = dataset;
  result.verdicts.reserve(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    JudgeVerdict v = unique_verdicts[unique_index.at(hashes[i])];
    v.sample_id = dataset[i].id;
    result.dataset[i].uncertainty = v.uncertainty;
    result.verdicts.push_back(std::move(v));
  }
  result.judge_calls = judge.calls() - calls_before;
  const auto fetched = static_cast<std::size_t>(std::count(fresh.begin(), fresh.end(), std::uint8_t{1}));
  result.cache_hits = dataset.size() - fetched;
  return result;
}

std::array<std::size_t, 10> score_histogram(const std::vector<JudgeVerdict>& verdicts) {
  std::array<std::size_t, 10> bins{};
  for (const auto& v : verdicts) bins[static_cast<std::size_t>(std::min(v.score / 10, 9))] += 1;
  return bins;
}

}  // namespace ual
