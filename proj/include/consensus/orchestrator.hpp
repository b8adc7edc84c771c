#pragma once

#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "consensus/agents.hpp"
#include "consensus/judge.hpp"
#include "consensus/metrics.hpp"
#include "consensus/outputs.hpp"
#include "consensus/types.hpp"

namespace consensus {

inline constexpr std::string_view kAbnormalityPredicate = "abnormality";

struct PlanStage {
  AgentRole role = AgentRole::kOrchestrator;
  std::set<AgentRole> depends_on;
  std::string predicate;  // empty for unconditional stages
};

struct ExecutionPlan {
  std::string case_id;
  std::vector<PlanStage> stages;

  bool contains(AgentRole role) const;
  const PlanStage* stage(AgentRole role) const;
  /// Throws ConfigError if stages are not in dependency order, repeat a
  /// role, or break the composer -> QA -> judge chain.
  void validate() const;
};

void to_json(Json& j, const ExecutionPlan& p);

enum class HitlMode { kInteractive, kAutoApprove, kFailAfterTimeout };
std::string_view to_string(HitlMode m);
HitlMode hitl_mode_from_string(std::string_view s);

struct HitlPolicy {
  HitlMode mode = HitlMode::kAutoApprove;
  int timeout_s = 0;
  void validate() const;  // timeout_s > 0 unless auto_approve
};

/// A reviewer's decision for a suspended case.
struct ReviewerDecision {
  ReviewDecision decision = ReviewDecision::kApproved;
  std::optional<RadiologyReport> revised_report;
  std::vector<metrics::ErrorDescriptor> flags;
  std::optional<metrics::Vote> preference_vote;
};

void to_json(Json& j, const ReviewerDecision& d);
/// Throws SchemaError on pending decisions or a revision without a
/// structurally valid report.
void from_json(const Json& j, ReviewerDecision& d);

/// File-backed decision channel: `<run_dir>/cases/<case_id>/decision`.
/// The first decision posted for a case wins, across threads and processes.
class DecisionStore {
 public:
  explicit DecisionStore(std::filesystem::path run_dir,
                         std::chrono::milliseconds poll_interval = std::chrono::milliseconds(50));

  /// False if the case already has a decision.
  bool post(const std::string& case_id, const ReviewerDecision& decision);
  std::optional<ReviewerDecision> get(const std::string& case_id) const;
  /// Blocks until a decision exists or `timeout` elapses (forever if unset).
  std::optional<ReviewerDecision> wait(const std::string& case_id,
                                       std::optional<std::chrono::milliseconds> timeout);

  const std::filesystem::path& run_dir() const { return run_dir_; }

 private:
  std::filesystem::path path_for(const std::string& case_id) const;

  std::filesystem::path run_dir_;
  std::chrono::milliseconds poll_interval_;
  std::mutex mutex_;
  std::condition_variable cv_;
};

/// Resolved runtime configuration for the orchestrator.
struct PipelineConfig {
  std::map<AgentRole, BackendPtr> backends;
  InterpreterRegistry registry;
  std::map<std::string, BackendPtr> interpreter_backends;
  bool force_context = false;
  bool diagnostic_enabled = true;
  int max_retries = 2;
  int parallel_cases = 1;
  HitlPolicy hitl;
  bool judge_reviewed_report = true;  // false: the judge sees the report before reviewer edits
  std::shared_ptr<const RubricConfig> rubric = std::make_shared<RubricConfig>(RubricConfig::defaults());
  std::optional<std::filesystem::path> run_dir;
  std::shared_ptr<DecisionStore> decisions;
};

/// Stage list for a case. Throws ConfigError when an enabled role has no
/// backend.
ExecutionPlan plan_pipeline(const CaseStudy& c, const PipelineConfig& config);

struct StageVerdict {
  bool valid = true;
  std::string reason;
  std::string to_string() const { return valid ? "valid" : "invalid(" + reason + ")"; }
};

StageVerdict validate_stage(const AgentOutput& output, AgentRole expected_role, const OutputSet& prior);

struct GateResult {
  QAReview review;
  bool timed_out = false;
};

/// Resolves a pending QA review according to the policy. Interactive mode
/// blocks on the decision channel; fail_after_timeout rejects after
/// timeout_s without a decision.
GateResult hitl_gate(const std::string& case_id, const QAReview& review, const HitlPolicy& policy,
                     DecisionStore* decisions);

struct CaseOutcome {
  std::optional<RadiologyReport> report;
  std::optional<JudgeScores> scores;
  PipelineTrace trace;
  OutputSet outputs;
  std::optional<ReviewerDecision> reviewer_decision;
};

/// Runs the plan for one case. Failures are terminal and recorded in the
/// trace (status failed, failure_stage, failure_reason) rather than thrown.
/// When config.run_dir is set the case files are written under
/// `<run_dir>/cases/<case_id>/` and a suspended case persists its state.
CaseOutcome execute_case(const CaseStudy& c, const ExecutionPlan& plan, const PipelineConfig& config);

/// Continues a case from its persisted state file, reusing every completed
/// stage output. Throws UnknownCase if no state exists.
CaseOutcome resume_case(const CaseStudy& c, const ExecutionPlan& plan, const PipelineConfig& config);

/// Plans and executes every case on up to config.parallel_cases threads;
/// results are returned in input order. With `resume`, cases that have a
/// persisted non-terminal state continue from it.
std::vector<CaseOutcome> run_cases(std::span<const CaseStudy> cases, const PipelineConfig& config,
                                   bool resume = false);

std::filesystem::path case_dir(const std::filesystem::path& run_dir, const std::string& case_id);

}  // namespace consensus
