#include "consensus/orchestrator.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <future>
#include <thread>

#include "consensus/error.hpp"
#include "consensus/manifest.hpp"
#include "json_util.hpp"

namespace consensus {

namespace {

using namespace std::chrono_literals;

std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

bool has_abnormality(const OutputSet& outputs) {
  const auto* fx = outputs.get<FindingsExtraction>();
  return fx && std::any_of(fx->findings.begin(), fx->findings.end(), is_abnormal);
}

struct StageRun {
  std::vector<TraceStep> steps;
  std::optional<AgentOutput> output;
};

const RadiologyReport* reference_of(const CaseStudy& c) {
  return c.ground_truth ? &c.ground_truth->reference_report : nullptr;
}

std::string case_summary(const CaseStudy& c, const OutputSet& outputs) {
  std::string out = "Case " + c.case_id + ".";
  if (const auto* r = outputs.get<RegionDetectionOutput>()) {
    out += " Region:";
    for (const auto& region : r->regions) out += " " + region;
    out += ".";
  }
  if (const auto* m = outputs.get<ModalityPrediction>()) {
    out += " Modality: " + std::string(to_string(m->modality));
    if (!m->subtype.empty()) out += " " + m->subtype;
    out += ".";
  }
  if (const auto* s = outputs.get<ContextSummary>(); s && !s->summary.empty()) {
    out += " " + s->summary;
  }
  return out;
}

class CaseRunner {
 public:
  CaseRunner(const CaseStudy& c, const ExecutionPlan& plan, const PipelineConfig& config)
      : case_(c), plan_(plan), config_(config) {
    outcome_.trace.case_id = c.case_id;
  }

  void restore(const Json& state) {
    for (const auto& o : state.at("outputs")) outcome_.outputs.put(output_from_json(o));
    outcome_.trace = state.at("trace").get<PipelineTrace>();
    if (state.contains("reviewer_decision") && !state["reviewer_decision"].is_null()) {
      outcome_.reviewer_decision = state["reviewer_decision"].get<ReviewerDecision>();
    }
  }

  CaseOutcome run() {
    const auto& stages = plan_.stages;
    for (std::size_t i = 0; i < stages.size();) {
      const auto& stage = stages[i];
      if (outcome_.outputs.contains(stage.role)) {
        if (stage.role == AgentRole::kQualityAssurance && !gate()) return finish();
        ++i;
        continue;
      }
      if (stage.predicate == kAbnormalityPredicate && !has_abnormality(outcome_.outputs)) {
        ++i;
        continue;
      }
      if (stage.role == AgentRole::kEvaluationJudge && !reference_of(case_)) {
        const auto t = now_ms();
        outcome_.trace.steps.push_back({stage.role, t, t, "skipped(no_reference)", 0, ""});
        ++i;
        continue;
      }

      const bool pair_with_context = stage.role == AgentRole::kModalityInterpreter &&
                                     i + 1 < stages.size() &&
                                     stages[i + 1].role == AgentRole::kContextProcessor &&
                                     !outcome_.outputs.contains(AgentRole::kContextProcessor);
      if (pair_with_context) {
        auto context_run = std::async(std::launch::async,
                                      [this] { return run_stage(AgentRole::kContextProcessor); });
        auto interpreter_run = run_stage(AgentRole::kModalityInterpreter);
        auto context_result = context_run.get();
        if (!absorb(AgentRole::kModalityInterpreter, std::move(interpreter_run))) return finish();
        if (!absorb(AgentRole::kContextProcessor, std::move(context_result))) return finish();
        i += 2;
        continue;
      }

      if (!absorb(stage.role, run_stage(stage.role))) return finish();
      if (stage.role == AgentRole::kQualityAssurance && !gate()) return finish();
      ++i;
    }
    return finish();
  }

 private:
  AgentPayload payload_for(AgentRole role) const {
    const auto& outputs = outcome_.outputs;
    AgentPayload p;
    p.case_id = case_.case_id;
    p.studies = case_.studies;
    p.study = case_.studies.front();
    p.context = case_.context;
    if (const auto* r = outputs.get<RegionDetectionOutput>()) p.region = *r;
    if (const auto* m = outputs.get<ModalityPrediction>()) p.modality = *m;
    if (const auto* f = outputs.get<FindingsExtraction>()) p.findings = *f;
    if (const auto* s = outputs.get<ContextSummary>()) p.context_summary = *s;
    if (const auto* s = outputs.get<SegmentationResult>()) p.segmentation = *s;
    if (const auto* d = outputs.get<DiagnosticAssessment>()) p.diagnosis = *d;
    p.rubric = config_.rubric;
    switch (role) {
      case AgentRole::kModalityInterpreter:
        if (p.region && !p.region->regions.empty() && p.modality) {
          p.interpreter_key = std::make_pair(p.region->regions.front(), p.modality->modality);
        }
        break;
      case AgentRole::kReportComposer:
        p.composer_input = assemble_composer_input(outputs, case_.context);
        break;
      case AgentRole::kQualityAssurance:
        if (const auto* r = outputs.get<ComposedReport>()) p.report = r->report;
        break;
      case AgentRole::kEvaluationJudge:
        p.report = effective_report(config_.judge_reviewed_report);
        if (const auto* ref = reference_of(case_)) p.reference = *ref;
        p.case_summary = case_summary(case_, outputs);
        break;
      default:
        break;
    }
    return p;
  }

  BackendPtr backend_for(AgentRole role, AgentPayload& payload) const {
    if (role == AgentRole::kModalityInterpreter) {
      if (!payload.interpreter_key) throw Error(ErrorCode::kMissingInput, "region");
      payload.interpreter_id = select_interpreter(payload.interpreter_key->first,
                                                  payload.interpreter_key->second, config_.registry);
      auto it = config_.interpreter_backends.find(payload.interpreter_id);
      if (it == config_.interpreter_backends.end()) {
        throw Error(ErrorCode::kConfigError, "interpreter backend " + payload.interpreter_id);
      }
      return it->second;
    }
    auto it = config_.backends.find(role);
    if (it == config_.backends.end() || !it->second) {
      throw Error(ErrorCode::kConfigError, "no backend for " + std::string(to_string(role)));
    }
    return it->second;
  }

  StageRun run_stage(AgentRole role) const {
    StageRun run;
    for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
      TraceStep step;
      step.role = role;
      step.retry = attempt;
      step.start_ms = now_ms();
      try {
        auto payload = payload_for(role);
        auto backend = backend_for(role, payload);
        auto output = invoke_agent(role, payload, *backend);
        const auto verdict = validate_stage(output, role, outcome_.outputs);
        step.verdict = verdict.to_string();
        step.output_digest = output_digest(output);
        if (verdict.valid) run.output = std::move(output);
      } catch (const Error& e) {
        step.verdict = "error(" + std::string(to_string(e.code())) + ")";
      }
      step.end_ms = now_ms();
      run.steps.push_back(std::move(step));
      if (run.output) break;
    }
    return run;
  }

  bool absorb(AgentRole role, StageRun run) {
    for (auto& s : run.steps) outcome_.trace.steps.push_back(std::move(s));
    if (!run.output) {
      fail(role, "retries_exhausted");
      return false;
    }
    outcome_.outputs.put(std::move(*run.output));
    if (role == AgentRole::kEvaluationJudge) {
      outcome_.scores = *outcome_.outputs.get<JudgeScores>();
    }
    return true;
  }

  // Applies the QA decision, consulting the review gate for pending reviews.
  bool gate() {
    const auto* qa = outcome_.outputs.get<QAReview>();
    switch (qa->decision) {
      case ReviewDecision::kApproved:
      case ReviewDecision::kRevised:
        return true;
      case ReviewDecision::kRejected:
        fail(AgentRole::kQualityAssurance, "qa_rejected");
        return false;
      case ReviewDecision::kPending:
        break;
    }
    if (outcome_.reviewer_decision) return apply_reviewer_decision();

    if (config_.hitl.mode != HitlMode::kAutoApprove) suspend();
    const auto result = hitl_gate(case_.case_id, *qa, config_.hitl, config_.decisions.get());
    if (result.timed_out) {
      fail(AgentRole::kQualityAssurance, "review_timeout");
      return false;
    }
    ReviewerDecision d;
    d.decision = result.review.decision;
    d.revised_report = result.review.revised_report;
    if (config_.decisions) {
      if (auto posted = config_.decisions->get(case_.case_id)) d = *posted;
    }
    outcome_.reviewer_decision = d;
    return apply_reviewer_decision();
  }

  bool apply_reviewer_decision() {
    if (outcome_.reviewer_decision->decision == ReviewDecision::kRejected) {
      fail(AgentRole::kQualityAssurance, "review_rejected");
      return false;
    }
    outcome_.trace.status = CaseStatus::kSucceeded;
    return true;
  }

  RadiologyReport effective_report(bool with_reviewer_edits = true) const {
    if (with_reviewer_edits && outcome_.reviewer_decision && outcome_.reviewer_decision->decision == ReviewDecision::kRevised &&
        outcome_.reviewer_decision->revised_report) {
      return *outcome_.reviewer_decision->revised_report;
    }
    const auto* qa = outcome_.outputs.get<QAReview>();
    if (qa && qa->decision == ReviewDecision::kRevised && qa->revised_report) return *qa->revised_report;
    const auto* composed = outcome_.outputs.get<ComposedReport>();
    return composed ? composed->report : RadiologyReport{};
  }

  void fail(AgentRole role, std::string reason) {
    outcome_.trace.status = CaseStatus::kFailed;
    outcome_.trace.failure_stage = role;
    outcome_.trace.failure_reason = std::move(reason);
  }

  Json state_json() const {
    Json state;
    state["case_id"] = case_.case_id;
    state["status"] = to_string(outcome_.trace.status);
    state["outputs"] = Json::array();
    for (const auto& [role, out] : outcome_.outputs.all()) state["outputs"].push_back(output_to_json(out));
    state["trace"] = outcome_.trace;
    state["reviewer_decision"] =
        outcome_.reviewer_decision ? Json(*outcome_.reviewer_decision) : Json(nullptr);
    return state;
  }

  void suspend() {
    outcome_.trace.status = CaseStatus::kAwaitingReview;
    if (!config_.run_dir) return;
    const auto dir = case_dir(*config_.run_dir, case_.case_id);
    detail::write_json_file(dir / "state", state_json());
    detail::write_json_file(dir / "trace", outcome_.trace);
  }

  CaseOutcome finish() {
    if (outcome_.trace.status == CaseStatus::kAwaitingReview) {
      outcome_.trace.status = CaseStatus::kSucceeded;
    }
    if (outcome_.trace.status == CaseStatus::kSucceeded) outcome_.report = effective_report();
    if (config_.run_dir) {
      const auto dir = case_dir(*config_.run_dir, case_.case_id);
      detail::write_json_file(dir / "trace", outcome_.trace);
      if (outcome_.report) detail::write_json_file(dir / "report", *outcome_.report);
      if (outcome_.scores) detail::write_json_file(dir / "judge_scores", *outcome_.scores);
      detail::write_json_file(dir / "state", state_json());
    }
    return std::move(outcome_);
  }

  const CaseStudy& case_;
  const ExecutionPlan& plan_;
  const PipelineConfig& config_;
  CaseOutcome outcome_;
};

}  // namespace

// ---------------------------------------------------------------------------

bool ExecutionPlan::contains(AgentRole role) const { return stage(role) != nullptr; }

const PlanStage* ExecutionPlan::stage(AgentRole role) const {
  for (const auto& s : stages) {
    if (s.role == role) return &s;
  }
  return nullptr;
}

void ExecutionPlan::validate() const {
  std::set<AgentRole> seen;
  for (const auto& s : stages) {
    for (auto dep : s.depends_on) {
      if (!seen.contains(dep)) {
        throw Error(ErrorCode::kConfigError, std::string(to_string(s.role)) + " depends on " +
                                                 std::string(to_string(dep)) + " which does not precede it");
      }
    }
    if (!seen.insert(s.role).second) {
      throw Error(ErrorCode::kConfigError, "stage repeated: " + std::string(to_string(s.role)));
    }
  }
  auto requires_dep = [&](AgentRole role, AgentRole dep) {
    const auto* s = stage(role);
    if (!s || !s->depends_on.contains(dep)) {
      throw Error(ErrorCode::kConfigError, std::string(to_string(role)) + " must depend on " +
                                               std::string(to_string(dep)));
    }
  };
  requires_dep(AgentRole::kReportComposer, AgentRole::kModalityInterpreter);
  requires_dep(AgentRole::kQualityAssurance, AgentRole::kReportComposer);
  requires_dep(AgentRole::kEvaluationJudge, AgentRole::kQualityAssurance);
}

void to_json(Json& j, const ExecutionPlan& p) {
  j = Json::object();
  j["case_id"] = p.case_id;
  j["stages"] = Json::array();
  for (const auto& s : p.stages) {
    Json deps = Json::array();
    for (auto d : s.depends_on) deps.push_back(to_string(d));
    j["stages"].push_back(Json{{"role", to_string(s.role)}, {"depends_on", deps}, {"predicate", s.predicate}});
  }
}

std::string_view to_string(HitlMode m) {
  switch (m) {
    case HitlMode::kInteractive: return "interactive";
    case HitlMode::kAutoApprove: return "auto_approve";
    case HitlMode::kFailAfterTimeout: return "fail_after_timeout";
  }
  return "auto_approve";
}

HitlMode hitl_mode_from_string(std::string_view s) {
  if (s == "interactive") return HitlMode::kInteractive;
  if (s == "auto_approve") return HitlMode::kAutoApprove;
  if (s == "fail_after_timeout") return HitlMode::kFailAfterTimeout;
  throw Error(ErrorCode::kConfigError, "unknown HITL mode '" + std::string(s) + "'");
}

void HitlPolicy::validate() const {
  if (mode != HitlMode::kAutoApprove && timeout_s <= 0) {
    throw Error(ErrorCode::kConfigError, "HITL timeout_s required for " + std::string(to_string(mode)));
  }
}

void to_json(Json& j, const ReviewerDecision& d) {
  j = Json{{"decision", to_string(d.decision)}};
  j["revised_report"] = d.revised_report ? Json(*d.revised_report) : Json(nullptr);
  j["flags"] = d.flags;
  j["preference_vote"] = d.preference_vote ? Json(metrics::to_string(*d.preference_vote)) : Json(nullptr);
}

void from_json(const Json& j, ReviewerDecision& d) {
  if (!j.is_object()) throw Error(ErrorCode::kSchemaError, "decision body must be an object");
  d.decision = review_decision_from_string(detail::required<std::string>(j, "decision", "decision"));
  if (d.decision == ReviewDecision::kPending) {
    throw Error(ErrorCode::kSchemaError, "decision must be approved, revised, or rejected");
  }
  d.revised_report.reset();
  if (j.contains("revised_report") && !j["revised_report"].is_null()) {
    d.revised_report = j["revised_report"].get<RadiologyReport>();
  }
  if (d.decision == ReviewDecision::kRevised) {
    if (!d.revised_report) throw Error(ErrorCode::kSchemaError, "revised decision needs revised_report");
    if (auto v = validate_report_structure(*d.revised_report); !v.empty()) {
      throw Error(ErrorCode::kSchemaError, "revised_report: " + std::string(to_string(v.front())));
    }
  }
  d.flags = detail::optional_field<std::vector<metrics::ErrorDescriptor>>(j, "flags", {}, "decision");
  d.preference_vote.reset();
  if (j.contains("preference_vote") && !j["preference_vote"].is_null()) {
    d.preference_vote = metrics::vote_from_string(j["preference_vote"].get<std::string>());
  }
}

// ---------------------------------------------------------------------------

DecisionStore::DecisionStore(std::filesystem::path run_dir, std::chrono::milliseconds poll_interval)
    : run_dir_(std::move(run_dir)), poll_interval_(poll_interval) {}

std::filesystem::path DecisionStore::path_for(const std::string& case_id) const {
  return case_dir(run_dir_, case_id) / "decision";
}

bool DecisionStore::post(const std::string& case_id, const ReviewerDecision& decision) {
  const auto path = path_for(case_id);
  std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp" + std::to_string(::getpid());
  {
    std::lock_guard lock(mutex_);
    {
      std::ofstream out(tmp, std::ios::trunc);
      out << Json(decision).dump(2) << "\n";
    }
    // link() fails if the target exists, so the first decision wins even
    // across processes.
    const int rc = ::link(tmp.c_str(), path.c_str());
    std::filesystem::remove(tmp);
    if (rc != 0) return false;
  }
  cv_.notify_all();
  return true;
}

std::optional<ReviewerDecision> DecisionStore::get(const std::string& case_id) const {
  const auto path = path_for(case_id);
  if (!std::filesystem::exists(path)) return std::nullopt;
  return detail::read_json_file(path).get<ReviewerDecision>();
}

std::optional<ReviewerDecision> DecisionStore::wait(const std::string& case_id,
                                                    std::optional<std::chrono::milliseconds> timeout) {
  const auto deadline = timeout ? std::chrono::steady_clock::now() + *timeout
                                : std::chrono::steady_clock::time_point::max();
  std::unique_lock lock(mutex_);
  for (;;) {
    lock.unlock();
    auto found = get(case_id);
    lock.lock();
    if (found) return found;
    const auto now = std::chrono::steady_clock::now();
    if (now >= deadline) return std::nullopt;
    cv_.wait_until(lock, std::min(deadline, now + poll_interval_));
  }
}

// ---------------------------------------------------------------------------

std::filesystem::path case_dir(const std::filesystem::path& run_dir, const std::string& case_id) {
  return run_dir / "cases" / case_id;
}

ExecutionPlan plan_pipeline(const CaseStudy& c, const PipelineConfig& config) {
  using R = AgentRole;
  ExecutionPlan plan;
  plan.case_id = c.case_id;
  const bool with_context = config.force_context || !c.context.empty();

  plan.stages.push_back({R::kRegionDetection, {}, ""});
  plan.stages.push_back({R::kModalityClassifier, {R::kRegionDetection}, ""});
  plan.stages.push_back({R::kModalityInterpreter, {R::kRegionDetection, R::kModalityClassifier}, ""});
  if (with_context) plan.stages.push_back({R::kContextProcessor, {}, ""});
  plan.stages.push_back({R::kSegmentation, {R::kModalityInterpreter}, std::string(kAbnormalityPredicate)});
  if (config.diagnostic_enabled) {
    plan.stages.push_back({R::kDiagnosticClassifier, {R::kModalityInterpreter, R::kSegmentation}, ""});
  }
  std::set<R> composer_deps = {R::kModalityInterpreter, R::kSegmentation};
  if (with_context) composer_deps.insert(R::kContextProcessor);
  if (config.diagnostic_enabled) composer_deps.insert(R::kDiagnosticClassifier);
  plan.stages.push_back({R::kReportComposer, composer_deps, ""});
  plan.stages.push_back({R::kQualityAssurance, {R::kReportComposer}, ""});
  plan.stages.push_back({R::kEvaluationJudge, {R::kQualityAssurance}, ""});

  for (const auto& s : plan.stages) {
    if (s.role == R::kModalityInterpreter) {
      if (config.registry.entries.empty() && !config.registry.generalist) {
        throw Error(ErrorCode::kConfigError, "no interpreter configured");
      }
      continue;
    }
    auto it = config.backends.find(s.role);
    if (it == config.backends.end() || !it->second) {
      throw Error(ErrorCode::kConfigError, "missing backend for " + std::string(to_string(s.role)));
    }
  }
  plan.validate();
  return plan;
}

StageVerdict validate_stage(const AgentOutput& output, AgentRole expected_role, const OutputSet& prior) {
  if (role_of(output) != expected_role) return {false, "role_mismatch"};
  if (auto v = check_output_invariants(output); !v.empty()) return {false, v.front()};

  if (const auto* fx = std::get_if<FindingsExtraction>(&output)) {
    if (const auto* region = prior.get<RegionDetectionOutput>()) {
      if (std::find(region->regions.begin(), region->regions.end(), fx->region) == region->regions.end()) {
        return {false, "region_mismatch"};
      }
    }
    if (const auto* modality = prior.get<ModalityPrediction>(); modality && modality->modality != fx->modality) {
      return {false, "modality_mismatch"};
    }
  }
  if (const auto* composed = std::get_if<ComposedReport>(&output)) {
    if (auto v = validate_report_structure(composed->report); !v.empty()) {
      return {false, std::string(to_string(v.front()))};
    }
  }
  if (const auto* qa = std::get_if<QAReview>(&output)) {
    if (qa->decision == ReviewDecision::kRevised) {
      if (!qa->revised_report) return {false, "missing_revised_report"};
      if (auto v = validate_report_structure(*qa->revised_report); !v.empty()) {
        return {false, std::string(to_string(v.front()))};
      }
    }
  }
  return {};
}

GateResult hitl_gate(const std::string& case_id, const QAReview& review, const HitlPolicy& policy,
                     DecisionStore* decisions) {
  GateResult result{review, false};
  if (review.decision != ReviewDecision::kPending) return result;
  switch (policy.mode) {
    case HitlMode::kAutoApprove:
      result.review.decision = ReviewDecision::kApproved;
      return result;
    case HitlMode::kInteractive:
    case HitlMode::kFailAfterTimeout: {
      std::optional<std::chrono::milliseconds> timeout;
      if (policy.mode == HitlMode::kFailAfterTimeout) timeout = std::chrono::seconds(policy.timeout_s);
      std::optional<ReviewerDecision> decision;
      if (decisions) {
        decision = decisions->wait(case_id, timeout);
      } else if (timeout) {
        std::this_thread::sleep_for(*timeout);
      } else {
        throw Error(ErrorCode::kConfigError, "interactive review requires a decision channel");
      }
      if (!decision) {
        result.review.decision = ReviewDecision::kRejected;
        result.timed_out = true;
        return result;
      }
      result.review.decision = decision->decision;
      if (decision->decision == ReviewDecision::kRevised) result.review.revised_report = decision->revised_report;
      return result;
    }
  }
  return result;
}

CaseOutcome execute_case(const CaseStudy& c, const ExecutionPlan& plan, const PipelineConfig& config) {
  return CaseRunner(c, plan, config).run();
}

CaseOutcome resume_case(const CaseStudy& c, const ExecutionPlan& plan, const PipelineConfig& config) {
  if (!config.run_dir) throw Error(ErrorCode::kConfigError, "resume requires a run directory");
  const auto path = case_dir(*config.run_dir, c.case_id) / "state";
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::kUnknownCase, c.case_id);
  CaseRunner runner(c, plan, config);
  runner.restore(detail::read_json_file(path));
  return runner.run();
}

std::vector<CaseOutcome> run_cases(std::span<const CaseStudy> cases, const PipelineConfig& config, bool resume) {
  std::vector<CaseOutcome> outcomes(cases.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const auto i = next.fetch_add(1);
      if (i >= cases.size()) return;
      const auto& c = cases[i];
      const auto plan = plan_pipeline(c, config);
      if (resume && config.run_dir) {
        const auto state_path = case_dir(*config.run_dir, c.case_id) / "state";
        if (std::filesystem::exists(state_path)) {
          outcomes[i] = resume_case(c, plan, config);
          continue;
        }
      }
      outcomes[i] = execute_case(c, plan, config);
    }
  };
  const auto threads = static_cast<std::size_t>(std::max(1, config.parallel_cases));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < std::min(threads, cases.size()); ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return outcomes;
}

}  // namespace consensus
