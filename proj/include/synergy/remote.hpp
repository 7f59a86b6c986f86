#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "synergy/common.hpp"
#include "synergy/ingest.hpp"
#include "synergy/textualize.hpp"

namespace synergy {

inline constexpr const char* kApiKeyEnv = "SYNERGY_API_KEY";

struct RemoteError : Error {
  RemoteError(const std::string& kind, const std::string& msg, std::string server_message = {}, int retries = 0)
      : Error(kind + ": " + msg + (server_message.empty() ? "" : " (server: " + server_message + ")")),
        kind(kind),
        server_message(std::move(server_message)),
        retries(retries) {}
  std::string kind;
  std::string server_message;
  int retries = 0;
};

struct AuthError : RemoteError {
  AuthError(const std::string& msg, std::string server = {}) : RemoteError("AuthError", msg, std::move(server)) {}
};
struct RateLimited : RemoteError {
  RateLimited(const std::string& msg, std::string server, int retries)
      : RemoteError("RateLimited", msg, std::move(server), retries) {}
};
struct Timeout : RemoteError {
  Timeout(const std::string& msg, std::string server = {}) : RemoteError("Timeout", msg, std::move(server)) {}
};
struct ServerError : RemoteError {
  ServerError(const std::string& msg, std::string server = {}) : RemoteError("ServerError", msg, std::move(server)) {}
};
struct UnparseableAnswer : RemoteError {
  UnparseableAnswer(const std::string& msg, std::string server = {})
      : RemoteError("UnparseableAnswer", msg, std::move(server)) {}
};

// Replaces every occurrence of `secret` with "***". Empty secrets are left
// alone so an unset key does not blank the text.
inline std::string scrub(std::string text, const std::string& secret) {
  if (secret.empty()) return text;
  for (auto pos = text.find(secret); pos != std::string::npos; pos = text.find(secret, pos + 3)) {
    text.replace(pos, secret.size(), "***");
  }
  return text;
}

// ---------------------------------------------------------------------------
// Training files

struct TrainingRecord {
  std::string prompt;
  std::string completion;
  bool operator==(const TrainingRecord&) const = default;
};

inline std::vector<TrainingRecord> training_records(const std::vector<LabeledExample>& xs, const PromptTemplate& tpl,
                                                    int precision = 3) {
  std::vector<TrainingRecord> out;
  for (const auto& x : xs) {
    auto s = serialize_example(x, tpl, precision);
    out.push_back({s.prompt, s.completion});
  }
  return out;
}

// One {"prompt", "completion"} object per line; completions carry a single
// leading space.
inline std::string serialize_training_file(const std::vector<TrainingRecord>& records) {
  if (records.empty()) throw EmptyTrainingSet("training file: no examples");
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["prompt"] = r.prompt;
    j["completion"] = " " + r.completion;
    out += j.dump() + '\n';
  }
  return out;
}

inline std::string serialize_training_file(const std::vector<LabeledExample>& xs, const PromptTemplate& tpl) {
  return serialize_training_file(training_records(xs, tpl));
}

inline std::vector<TrainingRecord> parse_training_file(const std::string& text) {
  std::vector<TrainingRecord> out;
  std::istringstream is(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw DataError("training file line " + std::to_string(n) + ": not JSON");
    }
    if (!j.is_object() || j.size() != 2 || !j.contains("prompt") || !j.contains("completion") ||
        !j["prompt"].is_string() || !j["completion"].is_string()) {
      throw DataError("training file line " + std::to_string(n) + ": expected exactly prompt and completion strings");
    }
    std::string completion = j["completion"];
    if (completion.empty() || completion[0] != ' ') {
      throw DataError("training file line " + std::to_string(n) + ": completion must start with a space");
    }
    out.push_back({j["prompt"], completion.substr(1)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Client

// Learning-rate multiplier by training-set size.
inline double auto_lr_multiplier(std::size_t n_examples) {
  if (n_examples < 32) return 0.05;
  if (n_examples < 128) return 0.1;
  return 0.2;
}

struct RemoteConfig {
  std::string endpoint = "http://127.0.0.1:8089";
  std::string base_model = "base";
  std::string api_key_env = kApiKeyEnv;
  std::string files_path = "/v1/files";
  std::string fine_tunes_path = "/v1/fine_tunes";
  std::string completions_path = "/v1/completions";
  std::size_t epochs = 4;
  std::optional<double> lr_multiplier;
  double timeout_seconds = 120.0;
  int max_retries = 5;
  int backoff_initial_ms = 50;
  int poll_initial_ms = 20;
  int poll_max_ms = 1000;
};

struct FineTuneRequest {
  std::vector<TrainingRecord> records;
  std::string base_model;
  std::size_t epochs = 4;
  std::optional<double> lr_multiplier;
};

enum class JobState { pending, running, succeeded, failed };

inline const char* to_string(JobState s) {
  switch (s) {
    case JobState::pending: return "pending";
    case JobState::running: return "running";
    case JobState::succeeded: return "succeeded";
    default: return "failed";
  }
}

inline JobState parse_job_state(const std::string& s) {
  if (s == "pending") return JobState::pending;
  if (s == "running") return JobState::running;
  if (s == "succeeded") return JobState::succeeded;
  if (s == "failed") return JobState::failed;
  throw ServerError("unknown job state '" + s + "'");
}

struct RemoteJob {
  std::string id;
  JobState state = JobState::pending;
  std::string model_id;
  double lr_multiplier = 0.0;
  int retries = 0;
  int polls = 0;
};

struct Classification {
  double score = 0.5;
  bool used_probabilities = false;
  bool unparseable = false;
  std::string completion;
};

class RemoteClient {
 public:
  using Logger = std::function<void(const std::string&)>;

  RemoteClient(RemoteConfig cfg, std::string api_key, Logger log = {})
      : cfg_(std::move(cfg)), key_(std::move(api_key)), log_(std::move(log)) {}

  // Reads the key from the configured environment variable.
  static RemoteClient from_environment(const RemoteConfig& cfg, Logger log = {}) {
    const char* v = std::getenv(cfg.api_key_env.c_str());
    if (!v || !*v) throw AuthError("environment variable " + cfg.api_key_env + " is not set");
    return RemoteClient(cfg, v, std::move(log));
  }

  const RemoteConfig& config() const { return cfg_; }
  int total_retries() const { return retries_; }

  RemoteJob submit_and_await(const FineTuneRequest& req, std::optional<double> timeout_seconds = {}) {
    const double budget = timeout_seconds.value_or(cfg_.timeout_seconds);
    const auto deadline = Clock::now() + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(budget));
    if (budget <= 0.0) throw Timeout("timeout of " + format_real(budget) + " s expired before submission");
    if (req.epochs < 1) throw std::invalid_argument("fine-tune: epochs must be >= 1");
    const int retries_before = retries_;

    const auto file = call("POST", cfg_.files_path, serialize_training_file(req.records), "application/jsonl");
    RemoteJob job;
    job.lr_multiplier = req.lr_multiplier.value_or(auto_lr_multiplier(req.records.size()));
    nlohmann::json create{{"training_file", file.at("id")},
                          {"model", req.base_model.empty() ? cfg_.base_model : req.base_model},
                          {"n_epochs", req.epochs},
                          {"learning_rate_multiplier", job.lr_multiplier}};
    auto created = call("POST", cfg_.fine_tunes_path, create.dump(), "application/json");
    job.id = created.at("id").get<std::string>();
    job.state = parse_job_state(created.at("status").get<std::string>());
    log("fine-tune " + job.id + " created with lr_multiplier " + format_real(job.lr_multiplier));

    int wait_ms = cfg_.poll_initial_ms;
    while (job.state == JobState::pending || job.state == JobState::running) {
      if (Clock::now() >= deadline) {
        throw Timeout("fine-tune " + job.id + " still " + to_string(job.state) + " after " + format_real(budget) + " s");
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(wait_ms));
      wait_ms = std::min(wait_ms * 2, cfg_.poll_max_ms);
      auto status = call("GET", cfg_.fine_tunes_path + "/" + job.id, "", "");
      const JobState next = parse_job_state(status.at("status").get<std::string>());
      if (static_cast<int>(next) < static_cast<int>(job.state)) {
        throw ServerError("job " + job.id + " moved backwards to " + to_string(next));
      }
      job.state = next;
      ++job.polls;
      if (next == JobState::succeeded) job.model_id = status.value("fine_tuned_model", "");
      if (next == JobState::failed) {
        throw ServerError("fine-tune " + job.id + " failed", status.value("error", ""));
      }
    }
    if (job.model_id.empty()) throw ServerError("job " + job.id + " succeeded without a model id");
    job.retries = retries_ - retries_before;
    return job;
  }

  // Scores a prompt as the probability mass of the positive answer's first
  // token relative to the negative answer's first token.
  Classification classify(const std::string& model, const std::string& prompt, const PromptTemplate& tpl) {
    nlohmann::json body{{"model", model}, {"prompt", prompt}, {"max_tokens", 1}, {"logprobs", 5}, {"temperature", 0}};
    auto resp = call("POST", cfg_.completions_path, body.dump(), "application/json");
    Classification c;
    const auto& choice = resp.at("choices").at(0);
    c.completion = choice.value("text", "");
    const std::string pos_tok = " " + first_word(tpl.positive_word);
    const std::string neg_tok = " " + first_word(tpl.negative_word);
    if (choice.contains("logprobs") && choice["logprobs"].is_object() && choice["logprobs"].contains("top_logprobs")) {
      const auto& top = choice["logprobs"]["top_logprobs"];
      if (top.is_array() && !top.empty() && top[0].is_object()) {
        const double lp = top[0].contains(pos_tok) ? std::exp(top[0][pos_tok].get<double>()) : 0.0;
        const double ln = top[0].contains(neg_tok) ? std::exp(top[0][neg_tok].get<double>()) : 0.0;
        if (lp + ln > 0.0) {
          c.score = lp / (lp + ln);
          c.used_probabilities = true;
          return c;
        }
      }
    }
    const std::string text = trim(c.completion);
    const std::string pos_word = first_word(tpl.positive_word), neg_word = first_word(tpl.negative_word);
    if (!text.empty() && text.rfind(neg_word, 0) == 0) {
      c.score = 0.0;
    } else if (!text.empty() && text.rfind(pos_word, 0) == 0) {
      c.score = 1.0;
    } else {
      c.unparseable = true;
      c.score = 0.5;
      log(UnparseableAnswer("completion '" + text + "' matches neither answer word").what());
    }
    return c;
  }

 private:
  using Clock = std::chrono::steady_clock;

  static std::string first_word(const std::string& s) {
    const auto words = tokenize_words(s);
    return words.empty() ? s : words.front();
  }

  void log(const std::string& msg) const {
    if (log_) log_(scrub(msg, key_));
  }

  nlohmann::json call(const std::string& method, const std::string& path, const std::string& body,
                      const std::string& content_type) {
    httplib::Client cli(cfg_.endpoint);
    cli.set_connection_timeout(5);
    cli.set_read_timeout(30);
    httplib::Headers headers{{"Authorization", "Bearer " + key_}};
    int backoff = cfg_.backoff_initial_ms;
    for (int attempt = 0;; ++attempt) {
      auto res = method == "GET" ? cli.Get(path, headers) : cli.Post(path, headers, body, content_type);
      if (!res) {
        throw ServerError(method + " " + path + " failed: " + httplib::to_string(res.error()));
      }
      const std::string msg = server_message(res->body);
      if (res->status == 429) {
        if (attempt >= cfg_.max_retries) {
          throw RateLimited(method + " " + path + " still rate limited after " + std::to_string(attempt) + " retries",
                            scrub(msg, key_), attempt);
        }
        ++retries_;
        log("rate limited on " + path + ", retry " + std::to_string(attempt + 1) + " in " + std::to_string(backoff) +
            " ms");
        std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
        backoff *= 2;
        continue;
      }
      if (res->status == 401 || res->status == 403) throw AuthError(method + " " + path + " rejected", scrub(msg, key_));
      if (res->status < 200 || res->status >= 300) {
        throw ServerError(method + " " + path + " returned " + std::to_string(res->status), scrub(msg, key_));
      }
      try {
        return nlohmann::json::parse(res->body);
      } catch (const nlohmann::json::exception&) {
        throw ServerError(method + " " + path + " returned a malformed body");
      }
    }
  }

  static std::string server_message(const std::string& body) {
    try {
      auto j = nlohmann::json::parse(body);
      if (j.contains("error")) return j["error"].is_string() ? j["error"].get<std::string>() : j["error"].dump();
    } catch (const nlohmann::json::exception&) {
    }
    return body.substr(0, 200);
  }

  RemoteConfig cfg_;
  std::string key_;
  Logger log_;
  int retries_ = 0;
};

// ---------------------------------------------------------------------------
// Stub service

struct StubOptions {
  // Required bearer token; empty accepts any request.
  std::string api_key;
  std::uint64_t seed = 0;
  // Status polls a job spends in "running" before it succeeds.
  int running_polls = 1;
  // The next N requests answer 429.
  int rate_limit_next = 0;
  bool fail_jobs = false;
  // Completions return this text without probabilities when set.
  std::optional<std::string> completion_override;
  // Completions report this positive-token probability when set.
  std::optional<double> fixed_probability;
};

// In-process stand-in for the fine-tune service. "Fine-tuning" fits a
// smoothed naive Bayes model over prompt words; the base model scores by a
// seeded hash of the prompt.
class StubServer {
 public:
  explicit StubServer(StubOptions opts = {}) : opts_(std::move(opts)) { routes(); }
  ~StubServer() { stop(); }
  StubServer(const StubServer&) = delete;
  StubServer& operator=(const StubServer&) = delete;

  // Binds to `port` (0 picks a free one) and serves on a background thread.
  int start(const std::string& host = "127.0.0.1", int port = 0) {
    port_ = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (port_ < 0) throw Error("stub server: cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  // Serves on the calling thread until stop().
  void run(const std::string& host, int port) {
    if (!server_.listen(host, port)) throw Error("stub server: cannot listen on " + host + ":" + std::to_string(port));
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const { return port_; }
  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_); }

  void rate_limit_next(int n) {
    std::lock_guard lock(mu_);
    opts_.rate_limit_next = n;
  }
  void set_completion_override(std::optional<std::string> text) {
    std::lock_guard lock(mu_);
    opts_.completion_override = std::move(text);
  }
  int requests() const { return requests_.load(); }
  // Request headers seen so far, for inspection in tests.
  std::vector<std::string> authorization_headers() const {
    std::lock_guard lock(mu_);
    return auth_seen_;
  }

 private:
  struct WordModel {
    double prior = 0.0;
    std::map<std::string, double> log_odds;
  };
  struct Job {
    std::string model;
    std::string file;
    int polls = 0;
    JobState state = JobState::pending;
    std::string fine_tuned;
  };

  static void reply(httplib::Response& res, int status, const nlohmann::json& j) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
  }

  // Shared gatekeeping: authentication and injected rate limits.
  bool admit(const httplib::Request& req, httplib::Response& res) {
    ++requests_;
    std::lock_guard lock(mu_);
    auth_seen_.push_back(req.get_header_value("Authorization"));
    if (!opts_.api_key.empty() && req.get_header_value("Authorization") != "Bearer " + opts_.api_key) {
      reply(res, 401, {{"error", "invalid credentials"}});
      return false;
    }
    if (opts_.rate_limit_next > 0) {
      --opts_.rate_limit_next;
      reply(res, 429, {{"error", "rate limit exceeded"}});
      return false;
    }
    return true;
  }

  static WordModel fit_words(const std::vector<TrainingRecord>& records, const std::string& positive) {
    std::map<std::string, std::pair<double, double>> counts;
    double pos = 0, neg = 0;
    for (const auto& r : records) {
      const bool y = r.completion == positive;
      (y ? pos : neg) += 1;
      std::set<std::string> seen;
      for (auto& w : tokenize_words(r.prompt)) {
        if (seen.insert(w).second) (y ? counts[w].first : counts[w].second) += 1;
      }
    }
    WordModel m;
    m.prior = std::log((pos + 1) / (neg + 1));
    for (const auto& [w, c] : counts) m.log_odds[w] = std::log((c.first + 1) / (pos + 2)) - std::log((c.second + 1) / (neg + 2));
    return m;
  }

  double score(const std::string& model, const std::string& prompt) const {
    auto it = models_.find(model);
    if (it == models_.end()) {
      const std::uint64_t h = fnv1a64(prompt) ^ Rng::derive(opts_.seed, model);
      return 0.05 + 0.9 * static_cast<double>(h % 10007) / 10006.0;
    }
    double z = it->second.prior;
    std::set<std::string> seen;
    for (auto& w : tokenize_words(prompt)) {
      if (!seen.insert(w).second) continue;
      auto f = it->second.log_odds.find(w);
      if (f != it->second.log_odds.end()) z += f->second;
    }
    return 1.0 / (1.0 + std::exp(-std::clamp(z, -30.0, 30.0)));
  }

  void routes() {
    server_.Post("/v1/files", [this](const httplib::Request& req, httplib::Response& res) {
      if (!admit(req, res)) return;
      std::vector<TrainingRecord> records;
      try {
        records = parse_training_file(req.body);
      } catch (const DataError& e) {
        reply(res, 400, {{"error", e.what()}});
        return;
      }
      if (records.empty()) {
        reply(res, 400, {{"error", "empty training file"}});
        return;
      }
      std::lock_guard lock(mu_);
      const std::string id = "file-" + std::to_string(files_.size() + 1);
      files_[id] = std::move(records);
      reply(res, 200, {{"id", id}, {"records", files_[id].size()}});
    });
    server_.Post("/v1/fine_tunes", [this](const httplib::Request& req, httplib::Response& res) {
      if (!admit(req, res)) return;
      nlohmann::json body;
      try {
        body = nlohmann::json::parse(req.body);
      } catch (const nlohmann::json::exception&) {
        reply(res, 400, {{"error", "malformed body"}});
        return;
      }
      std::lock_guard lock(mu_);
      const std::string file = body.value("training_file", "");
      if (!files_.count(file)) {
        reply(res, 404, {{"error", "unknown training file " + file}});
        return;
      }
      const std::string id = "ft-" + std::to_string(jobs_.size() + 1);
      jobs_[id] = {body.value("model", "base"), file, 0, JobState::pending, ""};
      reply(res, 200, {{"id", id}, {"status", "pending"}});
    });
    server_.Get(R"(/v1/fine_tunes/([A-Za-z0-9\-]+))", [this](const httplib::Request& req, httplib::Response& res) {
      if (!admit(req, res)) return;
      std::lock_guard lock(mu_);
      auto it = jobs_.find(req.matches[1].str());
      if (it == jobs_.end()) {
        reply(res, 404, {{"error", "unknown job"}});
        return;
      }
      Job& job = it->second;
      if (job.state == JobState::pending) {
        job.state = JobState::running;
      } else if (job.state == JobState::running && ++job.polls >= opts_.running_polls) {
        if (opts_.fail_jobs) {
          job.state = JobState::failed;
        } else {
          job.fine_tuned = "ft:" + job.model + ":" + it->first;
          models_[job.fine_tuned] = fit_words(files_[job.file], "Positive");
          job.state = JobState::succeeded;
        }
      }
      nlohmann::json out{{"id", it->first}, {"status", to_string(job.state)}};
      if (job.state == JobState::succeeded) out["fine_tuned_model"] = job.fine_tuned;
      if (job.state == JobState::failed) out["error"] = "training diverged";
      reply(res, 200, out);
    });
    server_.Post("/v1/completions", [this](const httplib::Request& req, httplib::Response& res) {
      if (!admit(req, res)) return;
      nlohmann::json body;
      try {
        body = nlohmann::json::parse(req.body);
      } catch (const nlohmann::json::exception&) {
        reply(res, 400, {{"error", "malformed body"}});
        return;
      }
      std::lock_guard lock(mu_);
      if (opts_.completion_override) {
        reply(res, 200, {{"choices", nlohmann::json::array({{{"text", *opts_.completion_override}}})}});
        return;
      }
      const double p = opts_.fixed_probability.value_or(score(body.value("model", "base"), body.value("prompt", "")));
      nlohmann::json top{{" Positive", std::log(p)}, {" Not", std::log(1.0 - p)}};
      nlohmann::json choice{{"text", p >= 0.5 ? " Positive" : " Not"},
                            {"logprobs", {{"top_logprobs", nlohmann::json::array({top})}}}};
      reply(res, 200, {{"choices", nlohmann::json::array({choice})}});
    });
  }

  StubOptions opts_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
  std::atomic<int> requests_{0};
  mutable std::mutex mu_;
  std::vector<std::string> auth_seen_;
  std::map<std::string, std::vector<TrainingRecord>> files_;
  std::map<std::string, Job> jobs_;
  std::map<std::string, WordModel> models_;
};

}  // namespace synergy
