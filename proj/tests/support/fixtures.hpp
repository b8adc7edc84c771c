#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <thread>

#include "consensus/config.hpp"
#include "httplib.h"

#ifndef CONSENSUS_FIXTURE_DIR
#error "CONSENSUS_FIXTURE_DIR must be defined"
#endif

namespace testing {

inline std::filesystem::path fixture(const std::string& name) {
  return std::filesystem::path(CONSENSUS_FIXTURE_DIR) / name;
}

/// Fresh directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("consensus_test_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Fixture config with its run root redirected to `run_root`.
inline consensus::BenchmarkConfig fixture_config(const std::string& name, const std::filesystem::path& run_root) {
  auto config = consensus::load_benchmark_config(fixture(name));
  config.run_root = run_root;
  return config;
}

/// Local HTTP server on an ephemeral port; runs until destroyed.
class StubServer {
 public:
  explicit StubServer(const std::function<void(httplib::Server&)>& routes) {
    routes(server_);
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubServer() {
    server_.stop();
    thread_.join();
  }
  StubServer(const StubServer&) = delete;
  StubServer& operator=(const StubServer&) = delete;

  int port() const { return port_; }
  std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

/// Body of a chat-completion reply carrying `content`.
inline std::string completion(const std::string& content) {
  consensus::Json body{
      {"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}, {"finish_reason", "stop"}}}}};
  return body.dump();
}

}  // namespace testing
