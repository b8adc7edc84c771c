#include <atomic>
#include <fstream>
#include <future>

#include "consensus/config.hpp"
#include "consensus/error.hpp"
#include "consensus/manifest.hpp"
#include "consensus/orchestrator.hpp"
#include "doctest.h"
#include "fixtures.hpp"

using namespace consensus;
using namespace std::chrono_literals;

namespace {

using R = AgentRole;

std::vector<R> roles_of(const ExecutionPlan& p) {
  std::vector<R> out;
  for (const auto& s : p.stages) out.push_back(s.role);
  return out;
}

// Counts calls and optionally fails the first `failures` of them.
class Counting : public AgentBackend {
 public:
  Counting(BackendPtr inner, int failures = 0) : inner_(std::move(inner)), failures_(failures) {}
  AgentOutput run(AgentRole role, const AgentPayload& p) override {
    if (calls++ < failures_) throw Error(ErrorCode::kEndpointError, "status 503");
    return inner_->run(role, p);
  }
  std::string id() const override { return inner_->id(); }
  std::atomic<int> calls = 0;

 private:
  BackendPtr inner_;
  int failures_;
};

struct Harness {
  testing::TempDir dir;
  BenchmarkConfig config;
  std::vector<CaseStudy> cases;

  explicit Harness(const std::string& name) : config(testing::fixture_config(name, dir.path())) {
    cases = load_case_manifest(config.manifest);
  }
  const CaseStudy& get(const std::string& id) const {
    return *std::find_if(cases.begin(), cases.end(), [&](const auto& c) { return c.case_id == id; });
  }
};

Json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  return Json::parse(in);
}

bool wait_for_status(const std::filesystem::path& state, const std::string& status) {
  for (int i = 0; i < 400; ++i) {
    if (std::filesystem::exists(state)) {
      try {
        if (read_json(state).at("status") == status) return true;
      } catch (const std::exception&) {
      }
    }
    std::this_thread::sleep_for(25ms);
  }
  return false;
}

}  // namespace

TEST_SUITE("orchestrator") {
  TEST_CASE("plans follow the case content") {
    Harness h("pipeline.json");
    auto built = build_pipeline_config(h.config, std::nullopt);
    const auto full = plan_pipeline(h.get("c001"), built);
    CHECK(roles_of(full) == std::vector<R>{R::kRegionDetection, R::kModalityClassifier, R::kModalityInterpreter,
                                           R::kContextProcessor, R::kSegmentation, R::kDiagnosticClassifier,
                                           R::kReportComposer, R::kQualityAssurance, R::kEvaluationJudge});
    CHECK(full.stage(R::kSegmentation)->predicate == "abnormality");
    CHECK(full.stage(R::kReportComposer)->depends_on.contains(R::kContextProcessor));

    const auto bare = plan_pipeline(h.get("c007"), built);
    CHECK_FALSE(bare.contains(R::kContextProcessor));
    CHECK_FALSE(bare.stage(R::kReportComposer)->depends_on.contains(R::kContextProcessor));

    built.force_context = true;
    CHECK(plan_pipeline(h.get("c007"), built).contains(R::kContextProcessor));
    built.diagnostic_enabled = false;
    CHECK_FALSE(plan_pipeline(h.get("c001"), built).contains(R::kDiagnosticClassifier));

    built.backends.erase(R::kQualityAssurance);
    CHECK_THROWS_AS(plan_pipeline(h.get("c001"), built), Error);
  }

  TEST_CASE("plan validation") {
    ExecutionPlan p;
    p.stages = {{R::kModalityClassifier, {R::kRegionDetection}, ""}, {R::kRegionDetection, {}, ""}};
    CHECK_THROWS_AS(p.validate(), Error);
    p.stages = {{R::kRegionDetection, {}, ""}, {R::kRegionDetection, {}, ""}};
    CHECK_THROWS_AS(p.validate(), Error);
  }

  TEST_CASE("segmentation runs only for abnormal findings") {
    Harness h("pipeline.json");
    const auto built = build_pipeline_config(h.config, std::nullopt);
    for (const auto& c : h.cases) {
      const auto out = execute_case(c, plan_pipeline(c, built), built);
      CHECK(out.trace.status == CaseStatus::kSucceeded);
      const bool segmented = out.outputs.contains(R::kSegmentation);
      const bool abnormal = c.case_id == "c001" || c.case_id == "c002" || c.case_id == "c004" ||
                            c.case_id == "c005" || c.case_id == "c007" || c.case_id == "c009";
      CHECK_MESSAGE(segmented == abnormal, c.case_id);
    }
  }

  TEST_CASE("judge is skipped without a reference") {
    Harness h("pipeline.json");
    const auto built = build_pipeline_config(h.config, std::nullopt);
    auto c = h.get("c003");
    c.ground_truth.reset();
    const auto out = execute_case(c, plan_pipeline(c, built), built);
    CHECK(out.trace.status == CaseStatus::kSucceeded);
    CHECK(out.trace.steps.back().verdict == "skipped(no_reference)");
    CHECK_FALSE(out.scores.has_value());
    CHECK(out.report.has_value());
  }

  TEST_CASE("exhausted retries fail the case at that stage") {
    Harness h("pipeline.json");
    auto built = build_pipeline_config(h.config, std::nullopt);
    auto failing = std::make_shared<Counting>(built.backends.at(R::kModalityClassifier), 100);
    built.backends[R::kModalityClassifier] = failing;
    const auto& c = h.get("c001");
    const auto out = execute_case(c, plan_pipeline(c, built), built);
    CHECK(out.trace.status == CaseStatus::kFailed);
    CHECK(out.trace.failure_stage == R::kModalityClassifier);
    CHECK(out.trace.failure_reason == "retries_exhausted");
    CHECK(failing->calls == 3);
    int attempts = 0;
    for (const auto& s : out.trace.steps) {
      if (s.role == R::kModalityClassifier) {
        CHECK(s.verdict == "error(BackendError)");
        CHECK(s.retry == attempts++);
      }
    }
    CHECK_FALSE(out.report.has_value());
    CHECK_FALSE(out.outputs.contains(R::kModalityInterpreter));
  }

  TEST_CASE("a transient failure is retried") {
    Harness h("pipeline.json");
    auto built = build_pipeline_config(h.config, std::nullopt);
    auto flaky = std::make_shared<Counting>(built.backends.at(R::kDiagnosticClassifier), 1);
    built.backends[R::kDiagnosticClassifier] = flaky;
    const auto& c = h.get("c002");
    const auto out = execute_case(c, plan_pipeline(c, built), built);
    CHECK(out.trace.status == CaseStatus::kSucceeded);
    CHECK(flaky->calls == 2);
    CHECK(out.trace.total_retries() == 1);
  }

  TEST_CASE("stage validation") {
    OutputSet prior;
    prior.put(RegionDetectionOutput{{"brain"}, "axial", 0.9});
    prior.put(ModalityPrediction{Modality::kMRI, "T1", 1.0});

    CHECK(validate_stage(FindingsExtraction{"brain", Modality::kMRI, "x", {}}, R::kModalityInterpreter, prior).valid);
    CHECK(validate_stage(FindingsExtraction{"chest", Modality::kMRI, "x", {}}, R::kModalityInterpreter, prior)
              .to_string() == "invalid(region_mismatch)");
    CHECK(validate_stage(FindingsExtraction{"brain", Modality::kCT, "x", {}}, R::kModalityInterpreter, prior)
              .to_string() == "invalid(modality_mismatch)");
    CHECK(validate_stage(ContextSummary{}, R::kModalityInterpreter, prior).to_string() == "invalid(role_mismatch)");
    CHECK(validate_stage(ComposedReport{{"", "Impression.", {}, {}}}, R::kReportComposer, prior).to_string() ==
          "invalid(missing_findings)");
    QAReview revised;
    revised.decision = ReviewDecision::kRevised;
    CHECK(validate_stage(revised, R::kQualityAssurance, prior).to_string() == "invalid(missing_revised_report)");
    CHECK(validate_stage(RegionDetectionOutput{{"brain"}, "axial", 1.5}, R::kRegionDetection, prior).valid == false);
  }

  TEST_CASE("hitl policy validation") {
    HitlPolicy p{HitlMode::kInteractive, 0};
    CHECK_THROWS_AS(p.validate(), Error);
    p.timeout_s = 5;
    CHECK_NOTHROW(p.validate());
    CHECK_NOTHROW(HitlPolicy{HitlMode::kAutoApprove, 0}.validate());
    CHECK(hitl_mode_from_string("fail_after_timeout") == HitlMode::kFailAfterTimeout);
  }

  TEST_CASE("hitl gate modes") {
    QAReview pending;
    const auto approved = hitl_gate("c", pending, {HitlMode::kAutoApprove, 0}, nullptr);
    CHECK(approved.review.decision == ReviewDecision::kApproved);
    CHECK_FALSE(approved.timed_out);

    testing::TempDir dir;
    DecisionStore store(dir.path(), 5ms);
    const auto start = std::chrono::steady_clock::now();
    const auto expired = hitl_gate("c", pending, {HitlMode::kFailAfterTimeout, 1}, &store);
    CHECK(expired.timed_out);
    CHECK(expired.review.decision == ReviewDecision::kRejected);
    CHECK(std::chrono::steady_clock::now() - start >= 1s);

    auto waiter = std::async(std::launch::async,
                             [&] { return hitl_gate("d", pending, {HitlMode::kInteractive, 600}, &store); });
    std::this_thread::sleep_for(30ms);
    ReviewerDecision d;
    d.decision = ReviewDecision::kRejected;
    CHECK(store.post("d", d));
    const auto decided = waiter.get();
    CHECK_FALSE(decided.timed_out);
    CHECK(decided.review.decision == ReviewDecision::kRejected);

    QAReview clean;
    clean.decision = ReviewDecision::kApproved;
    CHECK(hitl_gate("e", clean, {HitlMode::kInteractive, 600}, nullptr).review.decision == ReviewDecision::kApproved);
    CHECK_THROWS_AS(hitl_gate("e", pending, {HitlMode::kInteractive, 600}, nullptr), Error);
  }

  TEST_CASE("decision store keeps the first decision") {
    testing::TempDir dir;
    DecisionStore a(dir.path()), b(dir.path());
    ReviewerDecision first;
    first.decision = ReviewDecision::kApproved;
    ReviewerDecision second;
    second.decision = ReviewDecision::kRejected;
    CHECK(a.post("c1", first));
    CHECK_FALSE(b.post("c1", second));
    CHECK(b.get("c1")->decision == ReviewDecision::kApproved);
    CHECK_FALSE(a.get("c2").has_value());
    CHECK_FALSE(a.wait("c2", 20ms).has_value());
  }

  TEST_CASE("reviewer decision decoding") {
    CHECK(Json{{"decision", "approved"}}.get<ReviewerDecision>().decision == ReviewDecision::kApproved);
    const Json pending = {{"decision", "pending"}};
    CHECK_THROWS_AS(pending.get<ReviewerDecision>(), Error);
    const Json empty_revision = {{"decision", "revised"}, {"revised_report", {{"findings_section", ""}}}};
    CHECK_THROWS_AS(empty_revision.get<ReviewerDecision>(), Error);
  }

  TEST_CASE("fail after timeout rejects an unanswered case") {
    Harness h("hitl_fail_after_timeout.json");
    const auto run_dir = h.config.run_dir();
    const auto built = build_pipeline_config(h.config, run_dir);
    const auto& c = h.cases.front();
    const auto out = execute_case(c, plan_pipeline(c, built), built);
    CHECK(out.trace.status == CaseStatus::kFailed);
    CHECK(out.trace.failure_stage == R::kQualityAssurance);
    CHECK(out.trace.failure_reason == "review_timeout");
    CHECK_FALSE(out.report.has_value());
  }

  TEST_CASE("interactive review suspends, accepts a decision, and resumes from state") {
    Harness auto_h("pipeline.json");
    const auto auto_built = build_pipeline_config(auto_h.config, std::nullopt);
    const auto& c001 = auto_h.get("c001");
    const auto expected = execute_case(c001, plan_pipeline(c001, auto_built), auto_built);
    REQUIRE(expected.report.has_value());

    Harness h("hitl_interactive.json");
    const auto run_dir = h.config.run_dir();
    const auto& c = h.cases.front();
    REQUIRE(c.case_id == "c001");
    CHECK_THROWS_AS(build_pipeline_config(h.config, std::nullopt), Error);

    const auto built = build_pipeline_config(h.config, run_dir);
    auto running = std::async(std::launch::async, [&] { return execute_case(c, plan_pipeline(c, built), built); });
    const auto state = case_dir(run_dir, "c001") / "state";
    REQUIRE(wait_for_status(state, "awaiting_review"));

    // Snapshot the suspended run before answering it.
    const auto snapshot = h.dir.path() / "snapshot";
    std::filesystem::copy(run_dir, snapshot, std::filesystem::copy_options::recursive);

    ReviewerDecision approve;
    approve.decision = ReviewDecision::kApproved;
    CHECK(built.decisions->post("c001", approve));
    const auto live = running.get();
    CHECK(live.trace.status == CaseStatus::kSucceeded);
    CHECK(live.report == expected.report);
    CHECK(live.scores == expected.scores);

    // Resume the snapshot as a fresh process would.
    auto resumed_config = build_pipeline_config(h.config, snapshot);
    std::vector<std::shared_ptr<Counting>> counters;
    for (auto& [role, backend] : resumed_config.backends) {
      counters.push_back(std::make_shared<Counting>(backend));
      backend = counters.back();
    }
    for (auto& [id, backend] : resumed_config.interpreter_backends) {
      counters.push_back(std::make_shared<Counting>(backend));
      backend = counters.back();
    }
    CHECK(resumed_config.decisions->post("c001", approve));
    const auto resumed = resume_case(c, plan_pipeline(c, resumed_config), resumed_config);
    CHECK(resumed.trace.status == CaseStatus::kSucceeded);
    CHECK(resumed.report == expected.report);
    int calls = 0;
    for (const auto& counter : counters) calls += counter->calls;
    CHECK(calls == 1);  // the judge only
    CHECK(read_json(case_dir(snapshot, "c001") / "state").at("status") == "succeeded");

    CHECK_THROWS_AS(resume_case(h.get("c001"), plan_pipeline(c, resumed_config),
                                build_pipeline_config(h.config, h.dir.path() / "empty")),
                    Error);
  }

  TEST_CASE("rejected review fails the case") {
    Harness h("hitl_interactive.json");
    const auto run_dir = h.config.run_dir();
    const auto built = build_pipeline_config(h.config, run_dir);
    ReviewerDecision reject;
    reject.decision = ReviewDecision::kRejected;
    CHECK(built.decisions->post("c001", reject));
    const auto& c = h.cases.front();
    const auto out = execute_case(c, plan_pipeline(c, built), built);
    CHECK(out.trace.status == CaseStatus::kFailed);
    CHECK(out.trace.failure_reason == "review_rejected");
  }

  TEST_CASE("revised review replaces the report") {
    Harness h("hitl_interactive.json");
    const auto built = build_pipeline_config(h.config, h.config.run_dir());
    ReviewerDecision revise;
    revise.decision = ReviewDecision::kRevised;
    revise.revised_report = RadiologyReport{"Revised findings.", "Revised impression.", {"F1"}, {}};
    CHECK(built.decisions->post("c001", revise));
    const auto& c = h.cases.front();
    auto judgeless = built;
    judgeless.backends[R::kEvaluationJudge] = std::make_shared<MockBackend>();
    const auto out = execute_case(c, plan_pipeline(c, judgeless), judgeless);
    CHECK(out.trace.status == CaseStatus::kSucceeded);
    CHECK(out.report == revise.revised_report);
  }

  TEST_CASE("the judge scores reviewer edits unless configured otherwise") {
    struct Spy : AgentBackend {
      AgentOutput run(AgentRole role, const AgentPayload& p) override {
        seen = p.report;
        return MockBackend().run(role, p);
      }
      std::string id() const override { return "spy"; }
      std::optional<RadiologyReport> seen;
    };
    ReviewerDecision revise;
    revise.decision = ReviewDecision::kRevised;
    revise.revised_report = RadiologyReport{"Revised findings.", "Revised impression.", {"F1"}, {}};

    for (bool after_review : {true, false}) {
      Harness h("hitl_interactive.json");
      h.config.judge_after_review = after_review;
      auto built = build_pipeline_config(h.config, h.config.run_dir());
      auto spy = std::make_shared<Spy>();
      built.backends[R::kEvaluationJudge] = spy;
      CHECK(built.decisions->post("c001", revise));
      const auto& c = h.cases.front();
      const auto out = execute_case(c, plan_pipeline(c, built), built);
      CHECK(out.report == revise.revised_report);
      REQUIRE(spy->seen.has_value());
      CHECK((*spy->seen == *revise.revised_report) == after_review);
    }

    auto doc = read_json(testing::fixture("hitl_interactive.json"));
    doc["judge"]["after_review"] = false;
    CHECK_FALSE(parse_benchmark_config(doc, testing::fixture("")).judge_after_review);
  }

  TEST_CASE("cases run in parallel keep input order") {
    Harness h("pipeline.json");
    auto built = build_pipeline_config(h.config, std::nullopt);
    built.parallel_cases = 3;
    const auto out = run_cases(h.cases, built);
    REQUIRE(out.size() == h.cases.size());
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i].trace.case_id == h.cases[i].case_id);
  }
}
