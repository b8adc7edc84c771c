#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "consensus/gateway.hpp"
#include "consensus/outputs.hpp"
#include "consensus/types.hpp"

namespace consensus {

struct RubricConfig;  // judge.hpp

/// Role-specific inputs. Each role reads the subset it needs; invoke_agent
/// rejects payloads missing a required input with MissingInput(<name>).
struct AgentPayload {
  std::string case_id;
  std::vector<ImagingStudy> studies;
  std::optional<ImagingStudy> study;
  std::optional<ClinicalContext> context;
  std::optional<RegionDetectionOutput> region;
  std::optional<ModalityPrediction> modality;
  std::optional<FindingsExtraction> findings;
  std::optional<ContextSummary> context_summary;
  std::optional<SegmentationResult> segmentation;
  std::optional<DiagnosticAssessment> diagnosis;
  std::optional<std::string> composer_input;
  std::optional<RadiologyReport> report;
  std::optional<RadiologyReport> reference;
  std::string case_summary;
  std::shared_ptr<const RubricConfig> rubric;
  // Interpreter selection: registry key and chosen backend id.
  std::optional<std::pair<std::string, Modality>> interpreter_key;
  std::string interpreter_id;
};

/// A backend produces the output variant for a role. Implementations must
/// tolerate concurrent calls from different cases.
class AgentBackend {
 public:
  virtual ~AgentBackend() = default;
  virtual AgentOutput run(AgentRole role, const AgentPayload& payload) = 0;
  virtual std::string id() const = 0;
};

using BackendPtr = std::shared_ptr<AgentBackend>;

/// Checks required inputs, runs the backend, and enforces that the returned
/// variant matches `role`. Gateway failures surface as BackendError; parse
/// failures as ParseError.
AgentOutput invoke_agent(AgentRole role, const AgentPayload& payload, AgentBackend& backend);

// ---------------------------------------------------------------------------
// Interpreter pool

struct InterpreterRegistry {
  std::map<std::pair<std::string, Modality>, std::string> entries;
  std::optional<std::string> generalist;
};

/// Exact (region, modality) lookup, falling back to the generalist.
/// Throws NoInterpreter.
std::string select_interpreter(const std::string& region, Modality modality,
                               const InterpreterRegistry& registry);

// ---------------------------------------------------------------------------
// Composer and QA helpers

/// Deterministic rendering of the composer's inputs: findings, then
/// measurements, then diagnosis, then context. Findings without an id get
/// `F<position>`. Throws MissingInput("findings").
std::string assemble_composer_input(const OutputSet& outputs, const ClinicalContext& context);

/// Findings with empty ids replaced by `F<1-based position>`.
std::vector<Finding> with_stable_ids(const std::vector<Finding>& findings);

inline constexpr double kDefaultNumericTolerance = 0.2;

/// Rule-based cross-check of a report against upstream outputs:
/// unsupported finding references, omitted significant/critical findings,
/// and cited measurements off from segmentation by more than `tolerance`
/// (relative).
std::vector<Inconsistency> qa_cross_check(const RadiologyReport& report, const OutputSet& prior,
                                          double tolerance = kDefaultNumericTolerance);

bool is_abnormal(const Finding& f);

// ---------------------------------------------------------------------------
// Backends

struct MockBackendOptions {
  std::string id = "mock";
  Json fixtures = Json::object();
  std::filesystem::path fixture_dir;  // resolves mask paths in fixtures
  double qa_tolerance = kDefaultNumericTolerance;
  /// "pending" always defers to the review gate; "auto" approves clean
  /// reports and defers the rest.
  std::string qa_decision = "pending";
};

/// Deterministic rule/fixture backend. Fixture documents map
/// case_id -> role name -> untagged output body; roles without a fixture
/// entry fall back to rules derived from the payload (header echo for
/// region/modality, template composition for the report, rule-based QA
/// and judging).
class MockBackend : public AgentBackend {
 public:
  using Options = MockBackendOptions;

  MockBackend() : MockBackend(Options{}) {}
  explicit MockBackend(Options options);

  static std::shared_ptr<MockBackend> from_fixture_file(const std::filesystem::path& path,
                                                        Options options = {});

  AgentOutput run(AgentRole role, const AgentPayload& payload) override;
  std::string id() const override { return options_.id; }

 private:
  std::optional<Json> fixture(const std::string& case_id, AgentRole role) const;

  Options options_;
};

/// Prompt templates keyed by name. Built-in defaults exist for every role
/// (named after the role); files `<name>.txt` in a directory override or
/// add templates. Placeholders are `{{name}}`.
class PromptLibrary {
 public:
  PromptLibrary();
  void load_directory(const std::filesystem::path& dir);
  void set(const std::string& name, std::string text) { templates_[name] = std::move(text); }
  const std::string& get(const std::string& name) const;
  bool contains(const std::string& name) const { return templates_.contains(name); }

  static std::string render(const std::string& tmpl, const std::map<std::string, std::string>& vars);

 private:
  std::map<std::string, std::string> templates_;
};

/// Placeholder values derived from a payload (`study`, `findings`, `report`,
/// `reference`, `rubric`, `composer_input`, ...).
std::map<std::string, std::string> prompt_variables(AgentRole role, const AgentPayload& payload);

/// Language-model adapter: renders the role's prompt template, sends it
/// through the gateway, and parses a JSON object reply into the role's
/// output variant. Re-prompts up to `reprompt_attempts` times on parse
/// failure.
class LlmBackend : public AgentBackend {
 public:
  struct Options {
    std::string id = "llm";
    std::string model_id;
    double temperature = 0.0;
    int max_tokens = 1024;
    int reprompt_attempts = 2;
    std::map<AgentRole, std::string> template_names;  // default: role name
  };

  LlmBackend(std::shared_ptr<LlmGateway> gateway, std::shared_ptr<const PromptLibrary> prompts,
             Options options);

  AgentOutput run(AgentRole role, const AgentPayload& payload) override;
  std::string id() const override { return options_.id; }

  ChatRequest build_request(AgentRole role, const AgentPayload& payload) const;

 private:
  std::shared_ptr<LlmGateway> gateway_;
  std::shared_ptr<const PromptLibrary> prompts_;
  Options options_;
};

/// Extracts the first balanced JSON object from model text (tolerates code
/// fences and surrounding prose). Throws ParseError.
Json extract_json_object(std::string_view text);

}  // namespace consensus
