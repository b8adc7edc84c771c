#include <fstream>

#include "consensus/agents.hpp"
#include "consensus/config.hpp"
#include "consensus/error.hpp"
#include "consensus/manifest.hpp"
#include "doctest.h"
#include "fixtures.hpp"

using namespace consensus;

namespace {

Error error_of(const auto& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e;
  }
  FAIL("expected an error");
  return Error(ErrorCode::kIoError, "");
}

AgentPayload study_payload(const CaseStudy& c) {
  AgentPayload p;
  p.case_id = c.case_id;
  p.studies = c.studies;
  p.study = c.studies.front();
  p.context = c.context;
  return p;
}

OutputSet c001_outputs() {
  OutputSet s;
  Finding mass{"F1", "enhancing mass", "left frontal lobe", {}, {}, Severity::kSignificant, 0.93};
  Finding edema{"F2", "edema", "left frontal lobe", {}, {}, Severity::kMinor, 0.85};
  s.put(FindingsExtraction{"brain", Modality::kMRI, "neuro_mri", {mass, edema}});
  s.put(SegmentationResult{{}, {}, {{"tumor volume", 4.698, "mL"}}});
  return s;
}

class Fixed : public AgentBackend {
 public:
  explicit Fixed(AgentOutput out) : out_(std::move(out)) {}
  AgentOutput run(AgentRole, const AgentPayload&) override { return out_; }
  std::string id() const override { return "fixed"; }

 private:
  AgentOutput out_;
};

}  // namespace

TEST_SUITE("agents") {
  TEST_CASE("modality classifier reads the declared header") {
    MockBackend mock;
    AgentPayload p;
    p.case_id = "x";
    p.study = ImagingStudy{"s", "d", {{"modality", "MR"}, {"body_part", "BRAIN"}}, {}};
    const auto out = std::get<ModalityPrediction>(invoke_agent(AgentRole::kModalityClassifier, p, mock));
    CHECK(out.modality == Modality::kMRI);
    CHECK(out.confidence == 1.0);
    p.study->declared_header["modality"] = "CR";
    CHECK(std::get<ModalityPrediction>(invoke_agent(AgentRole::kModalityClassifier, p, mock)).modality ==
          Modality::kXRay);
  }

  TEST_CASE("region detection replays the recorded c001 exchange") {
    testing::TempDir dir;
    const auto config = testing::fixture_config("pipeline.json", dir.path());
    const auto built = build_pipeline_config(config, std::nullopt);
    const auto cases = load_case_manifest(config.manifest);
    auto& backend = *built.backends.at(AgentRole::kRegionDetection);
    auto* llm = dynamic_cast<LlmBackend*>(&backend);
    REQUIRE(llm != nullptr);
    const auto p = study_payload(cases.front());
    CHECK(canonical_digest(llm->build_request(AgentRole::kRegionDetection, p)) ==
          "c840b15a6b274218af9722e5e63088f48998abf57a42d58418ceea37ac870cce");
    const auto out = std::get<RegionDetectionOutput>(invoke_agent(AgentRole::kRegionDetection, p, backend));
    CHECK(out.regions == std::vector<std::string>{"brain"});
    CHECK(out.orientation == "axial");
    CHECK(out.confidence == 0.95);
  }

  TEST_CASE("replay miss surfaces as a backend error") {
    testing::TempDir dir;
    const auto config = testing::fixture_config("pipeline.json", dir.path());
    const auto built = build_pipeline_config(config, std::nullopt);
    auto p = study_payload(load_case_manifest(config.manifest).front());
    p.study->declared_header["body_part"] = "KNEE";
    CHECK(error_of([&] { invoke_agent(AgentRole::kRegionDetection, p, *built.backends.at(AgentRole::kRegionDetection)); })
              .code() == ErrorCode::kBackendError);
  }

  TEST_CASE("missing inputs are named") {
    MockBackend mock;
    AgentPayload p;
    p.study = ImagingStudy{"s", "d", {}, {}};
    const auto e = error_of([&] { invoke_agent(AgentRole::kModalityInterpreter, p, mock); });
    CHECK(e.code() == ErrorCode::kMissingInput);
    CHECK(e.detail() == "region");
    CHECK(error_of([&] { invoke_agent(AgentRole::kReportComposer, p, mock); }).detail() == "findings");
    CHECK(error_of([&] { invoke_agent(AgentRole::kOrchestrator, p, mock); }).code() == ErrorCode::kConfigError);
  }

  TEST_CASE("a backend returning the wrong variant is rejected") {
    Fixed wrong(ContextSummary{{}, "text"});
    AgentPayload p;
    p.study = ImagingStudy{"s", "d", {}, {}};
    CHECK(error_of([&] { invoke_agent(AgentRole::kModalityClassifier, p, wrong); }).code() == ErrorCode::kBackendError);
  }

  TEST_CASE("interpreter selection") {
    InterpreterRegistry reg;
    reg.entries[{"brain", Modality::kMRI}] = "neuro_mri";
    reg.entries[{"chest", Modality::kXRay}] = "chest_xray";
    CHECK(select_interpreter("brain", Modality::kMRI, reg) == "neuro_mri");
    CHECK(error_of([&] { select_interpreter("knee", Modality::kMRI, reg); }).code() == ErrorCode::kNoInterpreter);
    reg.generalist = "general";
    CHECK(select_interpreter("knee", Modality::kMRI, reg) == "general");
    CHECK(select_interpreter("brain", Modality::kCT, reg) == "general");
  }

  TEST_CASE("qa cross check") {
    const auto prior = c001_outputs();
    RadiologyReport clean{"Mass.", "Glioma.", {"F1", "F2"}, {{"tumor volume", 4.9, "mL"}}};
    CHECK(qa_cross_check(clean, prior).empty());

    RadiologyReport bad{"Mass.", "Glioma.", {"F2", "F9"}, {{"tumor volume", 6.0, "mL"}}};
    const auto found = qa_cross_check(bad, prior);
    REQUIRE(found.size() == 3);
    CHECK(found[0].kind == InconsistencyKind::kUnsupportedFinding);
    CHECK(found[0].subject == "F9");
    CHECK(found[1].kind == InconsistencyKind::kOmission);
    CHECK(found[1].subject == "F1");
    CHECK(found[2].kind == InconsistencyKind::kNumericMismatch);
    CHECK(found[2].subject == "tumor volume");

    CHECK(qa_cross_check(bad, prior, 0.3).size() == 2);
  }

  TEST_CASE("stable finding ids") {
    const std::vector<Finding> raw = {{"", "a", "x", {}, {}, Severity::kMinor, 1.0},
                                      {"K", "b", "y", {}, {}, Severity::kMinor, 1.0},
                                      {"", "c", "z", {}, {}, Severity::kMinor, 1.0}};
    const auto ids = with_stable_ids(raw);
    CHECK(ids[0].finding_id == "F1");
    CHECK(ids[1].finding_id == "K");
    CHECK(ids[2].finding_id == "F3");
  }

  TEST_CASE("composer input matches the c001 golden") {
    testing::TempDir dir;
    const auto config = testing::fixture_config("pipeline.json", dir.path());
    const auto built = build_pipeline_config(config, std::nullopt);
    const auto cases = load_case_manifest(config.manifest);
    const auto outcome = execute_case(cases.front(), plan_pipeline(cases.front(), built), built);
    std::ifstream in(testing::fixture("goldens/c001_composer_input.txt"));
    const std::string golden{std::istreambuf_iterator<char>(in), {}};
    CHECK(assemble_composer_input(outcome.outputs, cases.front().context) == golden);
    CHECK(error_of([&] { assemble_composer_input(OutputSet{}, {}); }).detail() == "findings");
  }

  TEST_CASE("prompt rendering") {
    CHECK(PromptLibrary::render("a {{x}} b {{y}} {{x}}", {{"x", "1"}, {"y", "2"}}) == "a 1 b 2 1");
    PromptLibrary lib;
    for (auto role : kAllRoles) {
      if (role != AgentRole::kOrchestrator) CHECK(lib.contains(std::string(to_string(role))));
    }
    lib.load_directory(testing::fixture("templates"));
    CHECK(lib.get("ReportComposer_terse").find("Style: terse.") != std::string::npos);
  }

  TEST_CASE("output invariants") {
    CHECK(check_output_invariants(RegionDetectionOutput{{"brain"}, "axial", 1.2}).size() == 1);
    CHECK(check_output_invariants(DiagnosticAssessment{"x", {{"x", 0.7}, {"y", 0.1}}, ""}).size() == 1);
    CHECK(check_output_invariants(DiagnosticAssessment{"x", {{"x", 0.7}, {"y", 0.3}}, ""}).empty());
    const AgentOutput out = c001_outputs().all().begin()->second;
    CHECK(output_from_json(output_to_json(out)) == out);
  }
}
