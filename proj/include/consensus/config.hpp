#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "consensus/gateway.hpp"
#include "consensus/judge.hpp"
#include "consensus/metrics.hpp"
#include "consensus/orchestrator.hpp"

namespace consensus {

enum class BackendKind { kMock, kReplay, kRecord, kLive };
std::string_view to_string(BackendKind k);
BackendKind backend_kind_from_string(std::string_view s);

struct BackendSpec {
  BackendKind kind = BackendKind::kMock;
  std::string model_id;
  double temperature = 0.0;
  int max_tokens = 1024;
  std::string template_name;  // empty: the role's default template
};

struct EndpointSpec {
  std::string base_url;  // empty: CONSENSUS_API_BASE
  std::string api_key_env = "CONSENSUS_API_KEY";
  int max_concurrency = 4;
  double requests_per_second = 0.0;
  int burst = 1;
  int rate_limit_timeout_ms = 60000;
  int backoff_base_ms = 500;

  static EndpointSpec for_key(std::string key_env) {
    EndpointSpec e;
    e.api_key_env = std::move(key_env);
    return e;
  }
};

struct InterpreterSpec {
  std::string id;
  std::string region;  // empty for the generalist
  std::optional<Modality> modality;
  BackendSpec backend;
};

/// Benchmark configuration document. Relative paths resolve against
/// `base_dir` (the directory holding the config file).
struct BenchmarkConfig {
  std::filesystem::path base_dir;
  std::filesystem::path manifest;
  std::string run_id = "run";
  std::filesystem::path run_root = "run";
  std::uint64_t seed = 0;
  int parallel_cases = 1;
  int max_retries = 2;
  bool force_context = false;
  bool diagnostic_enabled = true;

  std::optional<std::filesystem::path> fixtures;     // mock backend fixture document
  std::optional<std::filesystem::path> templates;    // prompt template directory
  std::optional<std::filesystem::path> transcripts;  // record/replay store
  double qa_tolerance = kDefaultNumericTolerance;
  std::string qa_decision = "pending";

  EndpointSpec endpoint;
  std::map<AgentRole, BackendSpec> backends;
  std::vector<InterpreterSpec> interpreters;

  // The judge has its own endpoint and credential settings.
  BackendSpec judge;
  EndpointSpec judge_endpoint = EndpointSpec::for_key("CONSENSUS_JUDGE_API_KEY");
  bool judge_after_review = true;  // score reviewer-revised reports
  RubricConfig rubric = RubricConfig::defaults();

  HitlPolicy hitl;
  metrics::ScoreWeights weights = metrics::ScoreWeights::defaults();
  double calibration_threshold = kDefaultCalibrationThreshold;

  Json document;  // the source document, for merge-patch candidates

  std::filesystem::path run_dir() const { return run_root / run_id; }
  /// Throws ConfigError.
  void validate() const;
};

/// Throws ConfigError naming the offending field.
BenchmarkConfig parse_benchmark_config(const Json& document, const std::filesystem::path& base_dir);
BenchmarkConfig load_benchmark_config(const std::filesystem::path& path);

/// Instantiates gateways and backends. `run_dir` (if any) is where case
/// files and decisions go.
PipelineConfig build_pipeline_config(const BenchmarkConfig& config,
                                     const std::optional<std::filesystem::path>& run_dir);

}  // namespace consensus
