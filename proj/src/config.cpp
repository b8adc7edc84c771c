#include "consensus/config.hpp"

#include <set>

#include "consensus/error.hpp"
#include "json_util.hpp"

namespace consensus {

namespace {

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

template <typename T>
T field(const Json& j, const char* key, T fallback, const std::string& where) {
  try {
    return detail::optional_field<T>(j, key, std::move(fallback), where);
  } catch (const Error& e) {
    throw Error(ErrorCode::kConfigError, e.detail());
  }
}

BackendSpec parse_backend(const Json& j, const std::string& where) {
  if (!j.is_object()) throw Error(ErrorCode::kConfigError, where + ": backend must be an object");
  BackendSpec b;
  b.kind = backend_kind_from_string(field<std::string>(j, "kind", "mock", where));
  b.model_id = field<std::string>(j, "model_id", "", where);
  b.temperature = field<double>(j, "temperature", 0.0, where);
  b.max_tokens = field<int>(j, "max_tokens", 1024, where);
  b.template_name = field<std::string>(j, "template", "", where);
  if (b.kind != BackendKind::kMock && b.model_id.empty()) {
    throw Error(ErrorCode::kConfigError, where + ": model_id required for " +
                                             std::string(to_string(b.kind)) + " backends");
  }
  return b;
}

EndpointSpec parse_endpoint(const Json& j, EndpointSpec e, const std::string& where) {
  if (j.is_null()) return e;
  e.base_url = field<std::string>(j, "base_url", e.base_url, where);
  e.api_key_env = field<std::string>(j, "api_key_env", e.api_key_env, where);
  e.max_concurrency = field<int>(j, "max_concurrency", e.max_concurrency, where);
  e.requests_per_second = field<double>(j, "requests_per_second", e.requests_per_second, where);
  e.burst = field<int>(j, "burst", e.burst, where);
  e.rate_limit_timeout_ms = field<int>(j, "rate_limit_timeout_ms", e.rate_limit_timeout_ms, where);
  e.backoff_base_ms = field<int>(j, "backoff_base_ms", e.backoff_base_ms, where);
  return e;
}

GatewayMode mode_of(BackendKind k) {
  switch (k) {
    case BackendKind::kReplay: return GatewayMode::kReplay;
    case BackendKind::kRecord: return GatewayMode::kRecord;
    default: return GatewayMode::kLive;
  }
}

GatewayOptions gateway_options(const EndpointSpec& e, BackendKind kind) {
  auto o = GatewayOptions::from_environment(e.api_key_env);
  if (!e.base_url.empty()) o.base_url = e.base_url;
  o.max_concurrency = e.max_concurrency;
  o.requests_per_second = e.requests_per_second;
  o.burst = e.burst;
  o.rate_limit_timeout = std::chrono::milliseconds(e.rate_limit_timeout_ms);
  o.backoff_base = std::chrono::milliseconds(e.backoff_base_ms);
  if ((kind == BackendKind::kLive || kind == BackendKind::kRecord) && o.base_url.empty()) {
    throw Error(ErrorCode::kConfigError,
                std::string(to_string(kind)) + " backend needs base_url or CONSENSUS_API_BASE");
  }
  return o;
}

// Lazily builds one gateway per (endpoint group, mode).
class GatewayPool {
 public:
  GatewayPool(const BenchmarkConfig& config) : config_(config) {}

  std::shared_ptr<LlmGateway> get(bool judge, BackendKind kind) {
    auto& slot = gateways_[{judge, kind}];
    if (!slot) {
      if (!config_.transcripts && kind != BackendKind::kLive) {
        throw Error(ErrorCode::kConfigError, "transcripts directory required for replay/record");
      }
      if (!store_ && config_.transcripts) {
        if (kind == BackendKind::kRecord) std::filesystem::create_directories(*config_.transcripts);
        store_ = std::make_shared<TranscriptStore>(*config_.transcripts);
      }
      slot = std::make_shared<LlmGateway>(
          mode_of(kind), gateway_options(judge ? config_.judge_endpoint : config_.endpoint, kind), store_);
    }
    return slot;
  }

 private:
  const BenchmarkConfig& config_;
  std::shared_ptr<TranscriptStore> store_;
  std::map<std::pair<bool, BackendKind>, std::shared_ptr<LlmGateway>> gateways_;
};

}  // namespace

std::string_view to_string(BackendKind k) {
  switch (k) {
    case BackendKind::kMock: return "mock";
    case BackendKind::kReplay: return "replay";
    case BackendKind::kRecord: return "record";
    case BackendKind::kLive: return "live";
  }
  return "mock";
}

BackendKind backend_kind_from_string(std::string_view s) {
  if (s == "mock") return BackendKind::kMock;
  if (s == "replay") return BackendKind::kReplay;
  if (s == "record") return BackendKind::kRecord;
  if (s == "live") return BackendKind::kLive;
  throw Error(ErrorCode::kConfigError, "unknown backend kind '" + std::string(s) + "'");
}

void BenchmarkConfig::validate() const {
  if (parallel_cases < 1) throw Error(ErrorCode::kConfigError, "parallel_cases must be at least 1");
  if (max_retries < 0) throw Error(ErrorCode::kConfigError, "max_retries must be non-negative");
  if (run_id.empty() || run_id.find('/') != std::string::npos || run_id == "." || run_id == "..") {
    throw Error(ErrorCode::kConfigError, "invalid run_id '" + run_id + "'");
  }
  if (qa_decision != "pending" && qa_decision != "auto") {
    throw Error(ErrorCode::kConfigError, "qa.decision must be pending or auto");
  }
  hitl.validate();
  rubric.validate();
  try {
    weights.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::kConfigError, e.what());
  }
  std::set<std::string> ids;
  int generalists = 0;
  for (const auto& i : interpreters) {
    if (!ids.insert(i.id).second) throw Error(ErrorCode::kConfigError, "interpreter id repeated: " + i.id);
    if (i.region.empty() != !i.modality.has_value()) {
      throw Error(ErrorCode::kConfigError, "interpreter " + i.id + ": region and modality go together");
    }
    if (i.region.empty()) ++generalists;
  }
  if (generalists > 1) throw Error(ErrorCode::kConfigError, "at most one generalist interpreter");
}

BenchmarkConfig parse_benchmark_config(const Json& doc, const std::filesystem::path& base_dir) {
  if (!doc.is_object()) throw Error(ErrorCode::kConfigError, "config must be an object");
  const std::string where = "config";
  BenchmarkConfig c;
  c.document = doc;
  c.base_dir = base_dir;

  const auto manifest = field<std::string>(doc, "manifest", "", where);
  if (manifest.empty()) throw Error(ErrorCode::kConfigError, "config: missing field 'manifest'");
  c.manifest = resolve(base_dir, manifest);
  c.run_id = field<std::string>(doc, "run_id", c.run_id, where);
  if (doc.contains("run_root")) c.run_root = resolve(base_dir, field<std::string>(doc, "run_root", "", where));
  c.seed = field<std::uint64_t>(doc, "seed", 0, where);
  c.parallel_cases = field<int>(doc, "parallel_cases", 1, where);
  c.max_retries = field<int>(doc, "max_retries", 2, where);
  c.force_context = field<bool>(doc, "force_context", false, where);
  c.diagnostic_enabled = field<bool>(doc, "diagnostic_enabled", true, where);
  if (doc.contains("fixtures")) c.fixtures = resolve(base_dir, field<std::string>(doc, "fixtures", "", where));
  if (doc.contains("templates")) c.templates = resolve(base_dir, field<std::string>(doc, "templates", "", where));
  if (doc.contains("transcripts")) {
    c.transcripts = resolve(base_dir, field<std::string>(doc, "transcripts", "", where));
  }
  if (doc.contains("qa")) {
    c.qa_tolerance = field<double>(doc["qa"], "tolerance", c.qa_tolerance, "qa");
    c.qa_decision = field<std::string>(doc["qa"], "decision", c.qa_decision, "qa");
  }
  c.endpoint = parse_endpoint(doc.value("endpoint", Json()), c.endpoint, "endpoint");

  if (doc.contains("backends")) {
    if (!doc["backends"].is_object()) throw Error(ErrorCode::kConfigError, "backends must be an object");
    for (const auto& [name, spec] : doc["backends"].items()) {
      const auto role = role_from_string(name);
      if (role == AgentRole::kEvaluationJudge) {
        throw Error(ErrorCode::kConfigError, "the judge is configured under 'judge', not 'backends'");
      }
      if (role == AgentRole::kOrchestrator) {
        throw Error(ErrorCode::kConfigError, "Orchestrator takes no backend");
      }
      c.backends[role] = parse_backend(spec, "backends." + name);
    }
  }

  if (doc.contains("interpreters")) {
    if (!doc["interpreters"].is_array()) throw Error(ErrorCode::kConfigError, "interpreters must be an array");
    for (const auto& i : doc["interpreters"]) {
      InterpreterSpec spec;
      spec.id = field<std::string>(i, "id", "", "interpreter");
      if (spec.id.empty()) throw Error(ErrorCode::kConfigError, "interpreter: missing field 'id'");
      spec.region = field<std::string>(i, "region", "", "interpreter " + spec.id);
      const auto modality = field<std::string>(i, "modality", "", "interpreter " + spec.id);
      if (!modality.empty()) {
        try {
          spec.modality = modality_from_string(modality);
        } catch (const Error& e) {
          throw Error(ErrorCode::kConfigError, "interpreter " + spec.id + ": " + e.detail());
        }
      }
      spec.backend = parse_backend(i.value("backend", Json::object()), "interpreter " + spec.id);
      c.interpreters.push_back(std::move(spec));
    }
  } else if (auto it = c.backends.find(AgentRole::kModalityInterpreter); it != c.backends.end()) {
    c.interpreters.push_back({"generalist", "", std::nullopt, it->second});
  }

  if (doc.contains("judge")) {
    const auto& j = doc["judge"];
    c.judge = parse_backend(j, "judge");
    c.judge_endpoint = parse_endpoint(j.value("endpoint", Json()), c.judge_endpoint, "judge.endpoint");
    c.judge_after_review = field<bool>(j, "after_review", true, "judge");
    if (j.contains("rubric")) {
      try {
        c.rubric = j["rubric"].get<RubricConfig>();
      } catch (const Error& e) {
        throw Error(ErrorCode::kConfigError, "judge.rubric: " + e.detail());
      }
    }
  }

  if (doc.contains("hitl")) {
    const auto& h = doc["hitl"];
    c.hitl.mode = hitl_mode_from_string(field<std::string>(h, "mode", "auto_approve", "hitl"));
    c.hitl.timeout_s = field<int>(h, "timeout_s", 0, "hitl");
  }
  if (doc.contains("weights")) {
    try {
      c.weights.weights = doc["weights"].get<std::map<std::string, double>>();
    } catch (const std::exception&) {
      throw Error(ErrorCode::kConfigError, "weights must map labels to numbers");
    }
  }
  c.calibration_threshold = field<double>(doc, "calibration_threshold", c.calibration_threshold, where);
  c.validate();
  return c;
}

BenchmarkConfig load_benchmark_config(const std::filesystem::path& path) {
  Json doc;
  try {
    doc = detail::read_json_file(path);
  } catch (const Error& e) {
    throw Error(ErrorCode::kConfigError, e.detail());
  }
  return parse_benchmark_config(doc, path.parent_path());
}

PipelineConfig build_pipeline_config(const BenchmarkConfig& config,
                                     const std::optional<std::filesystem::path>& run_dir) {
  config.validate();
  if (config.hitl.mode == HitlMode::kInteractive && !run_dir) {
    throw Error(ErrorCode::kConfigError, "interactive review needs a run directory");
  }

  PipelineConfig p;
  p.force_context = config.force_context;
  p.diagnostic_enabled = config.diagnostic_enabled;
  p.max_retries = config.max_retries;
  p.parallel_cases = config.parallel_cases;
  p.hitl = config.hitl;
  p.judge_reviewed_report = config.judge_after_review;
  p.rubric = std::make_shared<const RubricConfig>(config.rubric);
  p.run_dir = run_dir;
  if (run_dir) p.decisions = std::make_shared<DecisionStore>(*run_dir);

  MockBackend::Options mock_options;
  mock_options.qa_tolerance = config.qa_tolerance;
  mock_options.qa_decision = config.qa_decision;
  std::shared_ptr<MockBackend> mock;
  if (config.fixtures) {
    mock = MockBackend::from_fixture_file(*config.fixtures, mock_options);
  } else {
    mock = std::make_shared<MockBackend>(mock_options);
  }

  auto prompts = std::make_shared<PromptLibrary>();
  if (config.templates) prompts->load_directory(*config.templates);
  GatewayPool gateways(config);

  auto make = [&](AgentRole role, const BackendSpec& spec, bool judge, const std::string& id) -> BackendPtr {
    if (spec.kind == BackendKind::kMock) return mock;
    LlmBackend::Options o;
    o.id = id;
    o.model_id = spec.model_id;
    o.temperature = spec.temperature;
    o.max_tokens = spec.max_tokens;
    if (!spec.template_name.empty()) {
      if (!prompts->contains(spec.template_name)) {
        throw Error(ErrorCode::kConfigError, "unknown prompt template '" + spec.template_name + "'");
      }
      o.template_names[role] = spec.template_name;
    }
    return std::make_shared<LlmBackend>(gateways.get(judge, spec.kind), prompts, std::move(o));
  };

  for (const auto& [role, spec] : config.backends) {
    if (role == AgentRole::kModalityInterpreter) continue;
    p.backends[role] = make(role, spec, false, std::string(to_string(role)));
  }
  p.backends[AgentRole::kEvaluationJudge] = make(AgentRole::kEvaluationJudge, config.judge, true, "judge");

  for (const auto& i : config.interpreters) {
    if (i.region.empty()) {
      p.registry.generalist = i.id;
    } else {
      p.registry.entries[{i.region, *i.modality}] = i.id;
    }
    p.interpreter_backends[i.id] = make(AgentRole::kModalityInterpreter, i.backend, false, i.id);
  }
  return p;
}

}  // namespace consensus
