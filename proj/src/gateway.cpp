#include "consensus/gateway.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <thread>

#include "consensus/error.hpp"
#include "httplib.h"
#include "json_util.hpp"

namespace consensus {

namespace {

using Clock = std::chrono::steady_clock;

ChatRole chat_role_from_string(std::string_view s) {
  if (s == "system") return ChatRole::kSystem;
  if (s == "user") return ChatRole::kUser;
  if (s == "assistant") return ChatRole::kAssistant;
  throw Error(ErrorCode::kSchemaError, "unknown chat role '" + std::string(s) + "'");
}

FinishReason finish_reason_from_string(std::string_view s) {
  if (s == "length") return FinishReason::kLength;
  if (s == "error") return FinishReason::kError;
  return FinishReason::kStop;
}

struct SplitUrl {
  std::string scheme_host_port;
  std::string path_prefix;
};

SplitUrl split_base_url(const std::string& base) {
  auto scheme_end = base.find("://");
  if (scheme_end == std::string::npos) {
    throw Error(ErrorCode::kConfigError, "endpoint base URL lacks scheme: " + base);
  }
  auto path_start = base.find('/', scheme_end + 3);
  SplitUrl out;
  if (path_start == std::string::npos) {
    out.scheme_host_port = base;
  } else {
    out.scheme_host_port = base.substr(0, path_start);
    out.path_prefix = base.substr(path_start);
    while (!out.path_prefix.empty() && out.path_prefix.back() == '/') {
      out.path_prefix.pop_back();
    }
  }
  return out;
}

struct TransientFailure {
  std::string reason;
};

}  // namespace

std::string_view to_string(ChatRole r) {
  switch (r) {
    case ChatRole::kSystem: return "system";
    case ChatRole::kUser: return "user";
    case ChatRole::kAssistant: return "assistant";
  }
  return "user";
}

std::string_view to_string(FinishReason f) {
  switch (f) {
    case FinishReason::kStop: return "stop";
    case FinishReason::kLength: return "length";
    case FinishReason::kError: return "error";
  }
  return "stop";
}

std::string_view to_string(GatewayMode m) {
  switch (m) {
    case GatewayMode::kLive: return "live";
    case GatewayMode::kRecord: return "record";
    case GatewayMode::kReplay: return "replay";
  }
  return "replay";
}

GatewayMode gateway_mode_from_string(std::string_view s) {
  if (s == "live") return GatewayMode::kLive;
  if (s == "record") return GatewayMode::kRecord;
  if (s == "replay") return GatewayMode::kReplay;
  throw Error(ErrorCode::kConfigError, "unknown gateway mode '" + std::string(s) + "'");
}

void to_json(Json& j, const ChatRequest& r) {
  Json messages = Json::array();
  for (const auto& m : r.messages) {
    messages.push_back(Json{{"role", to_string(m.role)}, {"content", m.content}});
  }
  j = Json{{"model", r.model_id},
           {"messages", std::move(messages)},
           {"temperature", r.temperature},
           {"max_tokens", r.max_tokens}};
}

void from_json(const Json& j, ChatRequest& r) {
  using detail::required;
  r.model_id = required<std::string>(j, "model", "request");
  r.temperature = required<double>(j, "temperature", "request");
  r.max_tokens = required<int>(j, "max_tokens", "request");
  r.messages.clear();
  for (const auto& m : required<Json>(j, "messages", "request")) {
    r.messages.push_back(
        {chat_role_from_string(required<std::string>(m, "role", "message")),
         required<std::string>(m, "content", "message")});
  }
}

void to_json(Json& j, const ChatResponse& r) {
  j = Json{{"content", r.content},
           {"finish_reason", to_string(r.finish_reason)},
           {"latency_ms", r.latency_ms}};
}

void from_json(const Json& j, ChatResponse& r) {
  using detail::required;
  r.content = required<std::string>(j, "content", "response");
  r.finish_reason =
      finish_reason_from_string(required<std::string>(j, "finish_reason", "response"));
  r.latency_ms = detail::optional_field<std::int64_t>(j, "latency_ms", 0, "response");
}

void to_json(Json& j, const Transcript& t) {
  j = Json{{"request_digest", t.request_digest},
           {"request", t.request},
           {"response", t.response}};
}

void from_json(const Json& j, Transcript& t) {
  t.request_digest = detail::required<std::string>(j, "request_digest", "transcript");
  t.request = detail::required<ChatRequest>(j, "request", "transcript");
  t.response = detail::required<ChatResponse>(j, "response", "transcript");
}

void validate_request(const ChatRequest& request) {
  if (request.messages.empty()) {
    throw Error(ErrorCode::kPrecondition, "chat request has no messages");
  }
  if (request.messages.front().role == ChatRole::kAssistant) {
    throw Error(ErrorCode::kPrecondition, "first message must be system or user");
  }
  if (!(request.temperature >= 0.0) || !std::isfinite(request.temperature)) {
    throw Error(ErrorCode::kPrecondition, "temperature must be >= 0");
  }
  if (request.max_tokens <= 0) {
    throw Error(ErrorCode::kPrecondition, "max_tokens must be positive");
  }
}

std::string canonical_json(const ChatRequest& request) {
  // nlohmann::json objects are std::map backed, so keys come out sorted.
  return Json(request).dump(-1, ' ', false, Json::error_handler_t::strict);
}

std::string canonical_digest(const ChatRequest& request) {
  return sha256_hex(canonical_json(request));
}

// ---------------------------------------------------------------------------

TranscriptStore::TranscriptStore(std::filesystem::path dir) : dir_(std::move(dir)) {
  if (!std::filesystem::exists(dir_)) return;
  for (const auto& entry : std::filesystem::directory_iterator(dir_)) {
    if (entry.path().extension() != ".json") continue;
    auto t = detail::read_json_file(entry.path()).get<Transcript>();
    entries_.emplace(t.request_digest, std::move(t));
  }
}

std::optional<Transcript> TranscriptStore::find(const std::string& digest) const {
  std::shared_lock lock(mutex_);
  auto it = entries_.find(digest);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void TranscriptStore::append(const Transcript& transcript) {
  std::unique_lock lock(mutex_);
  detail::write_json_file(dir_ / (transcript.request_digest + ".json"), transcript);
  entries_.insert_or_assign(transcript.request_digest, transcript);
}

std::size_t TranscriptStore::size() const {
  std::shared_lock lock(mutex_);
  return entries_.size();
}

// ---------------------------------------------------------------------------

GatewayOptions GatewayOptions::from_environment(const std::string& key_env) {
  GatewayOptions o;
  if (const char* base = std::getenv("CONSENSUS_API_BASE")) o.base_url = base;
  if (const char* key = std::getenv(key_env.c_str())) o.api_key = key;
  return o;
}

RequestLimiter::RequestLimiter(int max_concurrency, double requests_per_second,
                               int burst)
    : max_concurrency_(std::max(1, max_concurrency)),
      rate_(requests_per_second),
      burst_(std::max(1, burst)),
      tokens_(std::max(1, burst)),
      last_refill_(Clock::now()) {}

bool RequestLimiter::acquire(Clock::time_point deadline) {
  std::unique_lock lock(mutex_);
  for (;;) {
    auto now = Clock::now();
    if (rate_ > 0.0) {
      const double elapsed = std::chrono::duration<double>(now - last_refill_).count();
      tokens_ = std::min(burst_, tokens_ + elapsed * rate_);
      last_refill_ = now;
    }
    const bool has_slot = in_flight_ < max_concurrency_;
    const bool has_token = rate_ <= 0.0 || tokens_ >= 1.0;
    if (has_slot && has_token) {
      ++in_flight_;
      if (rate_ > 0.0) tokens_ -= 1.0;
      return true;
    }
    if (now >= deadline) return false;
    auto wake = deadline;
    if (has_slot && !has_token) {
      auto wait = std::chrono::duration<double>((1.0 - tokens_) / rate_);
      wake = std::min(deadline, now + std::chrono::duration_cast<Clock::duration>(wait));
    }
    cv_.wait_until(lock, wake);
  }
}

void RequestLimiter::release() {
  {
    std::lock_guard lock(mutex_);
    --in_flight_;
  }
  cv_.notify_all();
}

// ---------------------------------------------------------------------------

LlmGateway::LlmGateway(GatewayMode mode, GatewayOptions options,
                       std::shared_ptr<TranscriptStore> store)
    : mode_(mode),
      options_(std::move(options)),
      store_(std::move(store)),
      limiter_(options_.max_concurrency, options_.requests_per_second,
               options_.burst) {
  if (mode_ != GatewayMode::kLive && !store_) {
    throw Error(ErrorCode::kConfigError,
                std::string(to_string(mode_)) + " mode requires a transcript store");
  }
}

ChatResponse LlmGateway::complete(const ChatRequest& request) {
  return complete(request, mode_);
}

ChatResponse LlmGateway::complete(const ChatRequest& request, GatewayMode mode) {
  validate_request(request);
  const auto digest = canonical_digest(request);
  if (mode == GatewayMode::kReplay) {
    if (!store_) throw Error(ErrorCode::kConfigError, "replay without transcript store");
    auto hit = store_->find(digest);
    if (!hit) throw Error(ErrorCode::kReplayMiss, digest);
    return hit->response;
  }
  if (options_.base_url.empty()) {
    throw Error(ErrorCode::kConfigError, "endpoint base URL not configured");
  }

  ChatResponse response;
  std::string last_failure;
  bool done = false;
  for (int attempt = 0; attempt < options_.max_attempts && !done; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(options_.backoff_base * (1 << (attempt - 1)));
    }
    const auto deadline = Clock::now() + options_.rate_limit_timeout;
    if (!limiter_.acquire(deadline)) {
      throw Error(ErrorCode::kRateLimitTimeout, "no request slot within timeout");
    }
    try {
      response = call_endpoint(request);
      done = true;
    } catch (const TransientFailure& f) {
      last_failure = f.reason;
    } catch (...) {
      limiter_.release();
      throw;
    }
    limiter_.release();
  }
  if (!done) {
    throw Error(ErrorCode::kEndpointError, "retries exhausted: " + last_failure);
  }

  if (mode == GatewayMode::kRecord) {
    if (!store_) throw Error(ErrorCode::kConfigError, "record without transcript store");
    store_->append(Transcript{digest, request, response});
  }
  return response;
}

ChatResponse LlmGateway::call_endpoint(const ChatRequest& request) {
  const auto url = split_base_url(options_.base_url);
  httplib::Client client(url.scheme_host_port);
  client.set_connection_timeout(options_.request_timeout);
  client.set_read_timeout(options_.request_timeout);
  httplib::Headers headers;
  if (!options_.api_key.empty()) {
    headers.emplace("Authorization", "Bearer " + options_.api_key);
  }

  const auto started = Clock::now();
  auto result = client.Post(url.path_prefix + "/chat/completions", headers,
                            canonical_json(request), "application/json");
  const auto latency = std::chrono::duration_cast<std::chrono::milliseconds>(
                           Clock::now() - started)
                           .count();
  if (!result) {
    throw TransientFailure{"transport: " + httplib::to_string(result.error())};
  }
  if (result->status >= 500 || result->status == 429) {
    throw TransientFailure{"status " + std::to_string(result->status)};
  }
  if (result->status != 200) {
    throw Error(ErrorCode::kEndpointError, "status " + std::to_string(result->status) +
                                               ": " + result->body.substr(0, 200));
  }

  ChatResponse out;
  out.latency_ms = latency;
  try {
    const auto body = Json::parse(result->body);
    const auto& choice = body.at("choices").at(0);
    const auto& message = choice.at("message");
    if (message.contains("content") && message["content"].is_string()) {
      out.content = message["content"].get<std::string>();
    }
    out.finish_reason = choice.contains("finish_reason") && choice["finish_reason"].is_string()
                            ? finish_reason_from_string(choice["finish_reason"].get<std::string>())
                            : FinishReason::kStop;
  } catch (const std::exception& e) {
    throw Error(ErrorCode::kEndpointError, std::string("malformed response body: ") + e.what());
  }
  if (out.content.empty()) out.finish_reason = FinishReason::kError;
  if (out.finish_reason == FinishReason::kError) out.content.clear();
  return out;
}

}  // namespace consensus
