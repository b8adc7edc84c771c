#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "consensus/types.hpp"

namespace consensus {

enum class ChatRole { kSystem, kUser, kAssistant };
std::string_view to_string(ChatRole r);

struct ChatMessage {
  ChatRole role = ChatRole::kUser;
  std::string content;
  bool operator==(const ChatMessage&) const = default;
};

struct ChatRequest {
  std::string model_id;
  std::vector<ChatMessage> messages;
  double temperature = 0.0;
  int max_tokens = 1024;
  bool operator==(const ChatRequest&) const = default;
};

enum class FinishReason { kStop, kLength, kError };
std::string_view to_string(FinishReason f);

struct ChatResponse {
  std::string content;
  FinishReason finish_reason = FinishReason::kStop;
  std::int64_t latency_ms = 0;
  bool operator==(const ChatResponse&) const = default;
};

struct Transcript {
  std::string request_digest;
  ChatRequest request;
  ChatResponse response;
};

void to_json(Json& j, const ChatRequest& r);
void from_json(const Json& j, ChatRequest& r);
void to_json(Json& j, const ChatResponse& r);
void from_json(const Json& j, ChatResponse& r);
void to_json(Json& j, const Transcript& t);
void from_json(const Json& j, Transcript& t);

/// Throws PreconditionError when messages are empty, the first message is
/// from the assistant, temperature is negative, or max_tokens is not positive.
void validate_request(const ChatRequest& request);

/// Sorted keys, UTF-8, no insignificant whitespace. This is also the HTTP
/// request body.
std::string canonical_json(const ChatRequest& request);

/// Hex SHA-256 of canonical_json(request).
std::string canonical_digest(const ChatRequest& request);

/// One file per digest (`<digest>.json`) under a directory. Reads are
/// concurrent; appends are serialized.
class TranscriptStore {
 public:
  explicit TranscriptStore(std::filesystem::path dir);

  std::optional<Transcript> find(const std::string& digest) const;
  void append(const Transcript& transcript);
  std::size_t size() const;
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
  mutable std::shared_mutex mutex_;
  std::map<std::string, Transcript> entries_;
};

enum class GatewayMode { kLive, kRecord, kReplay };
std::string_view to_string(GatewayMode m);
GatewayMode gateway_mode_from_string(std::string_view s);

struct GatewayOptions {
  std::string base_url;  // e.g. http://127.0.0.1:8080/v1
  std::string api_key;
  int max_attempts = 3;
  std::chrono::milliseconds backoff_base{500};
  int max_concurrency = 4;
  double requests_per_second = 0.0;  // 0 disables the token bucket
  int burst = 1;
  std::chrono::milliseconds rate_limit_timeout{60000};
  std::chrono::seconds request_timeout{120};

  /// Base URL from CONSENSUS_API_BASE and credential from `key_env`
  /// (CONSENSUS_API_KEY unless overridden).
  static GatewayOptions from_environment(
      const std::string& key_env = "CONSENSUS_API_KEY");
};

/// Bounds in-flight requests to `max_concurrency` and, when a rate is set,
/// spaces request starts with a token bucket.
class RequestLimiter {
 public:
  RequestLimiter(int max_concurrency, double requests_per_second, int burst);

  /// Returns false if a slot could not be obtained before `deadline`.
  bool acquire(std::chrono::steady_clock::time_point deadline);
  void release();

 private:
  std::mutex mutex_;
  std::condition_variable cv_;
  int max_concurrency_;
  int in_flight_ = 0;
  double rate_;
  double burst_;
  double tokens_;
  std::chrono::steady_clock::time_point last_refill_;
};

/// Chat-completion client with retries and record/replay.
class LlmGateway {
 public:
  LlmGateway(GatewayMode mode, GatewayOptions options,
             std::shared_ptr<TranscriptStore> store);

  ChatResponse complete(const ChatRequest& request);
  ChatResponse complete(const ChatRequest& request, GatewayMode mode);

  GatewayMode mode() const { return mode_; }
  const std::shared_ptr<TranscriptStore>& store() const { return store_; }

 private:
  ChatResponse call_endpoint(const ChatRequest& request);

  GatewayMode mode_;
  GatewayOptions options_;
  std::shared_ptr<TranscriptStore> store_;
  RequestLimiter limiter_;
};

}  // namespace consensus
