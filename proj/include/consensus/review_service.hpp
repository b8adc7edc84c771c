#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <thread>

#include "consensus/orchestrator.hpp"
#include "consensus/types.hpp"

namespace consensus {

/// HTTP review API over a run directory:
///   GET  /api/queue                 open review tasks
///   GET  /api/case/{id}             one task with report, inconsistencies, output digests
///   POST /api/case/{id}/decision    200 on accept, 409 if already decided
///   GET  /api/run/summary           metric report of the run so far
/// Decisions are written to the run directory, where the suspended case
/// (in this or another process) picks them up.
class ReviewService {
 public:
  explicit ReviewService(std::filesystem::path run_dir, std::shared_ptr<DecisionStore> decisions = nullptr);
  ~ReviewService();

  ReviewService(const ReviewService&) = delete;
  ReviewService& operator=(const ReviewService&) = delete;

  // Request handlers, usable without a socket. Errors are thrown as
  // UnknownCase, AlreadyDecided, or SchemaError.
  Json queue() const;
  Json task(const std::string& case_id) const;
  void decide(const std::string& case_id, const Json& body);
  Json summary() const;

  /// Binds `host:port` (port 0 picks a free port). Throws BindError.
  void bind(const std::string& host, int port);
  int port() const { return port_; }
  /// Serves on a background thread until stop().
  void start();
  /// Serves on the calling thread until stop().
  void serve();
  void stop();

 private:
  struct Http;

  bool known_case(const std::string& case_id) const;

  std::filesystem::path run_dir_;
  std::shared_ptr<DecisionStore> decisions_;
  std::unique_ptr<Http> http_;
  std::thread thread_;
  int port_ = 0;
};

/// Parses `host:port`. Throws BindError.
std::pair<std::string, int> parse_bind_address(const std::string& address);

}  // namespace consensus
