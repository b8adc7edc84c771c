#include "consensus/outputs.hpp"

#include <cmath>

#include "consensus/error.hpp"
#include "consensus/manifest.hpp"
#include "json_util.hpp"

namespace consensus {

using detail::optional_field;
using detail::required;

namespace {

bool in_unit(double v) { return v >= 0.0 && v <= 1.0; }

template <typename>
inline constexpr bool kAlwaysFalse = false;

}  // namespace

std::string_view to_string(ReviewDecision d) {
  switch (d) {
    case ReviewDecision::kApproved: return "approved";
    case ReviewDecision::kRevised: return "revised";
    case ReviewDecision::kRejected: return "rejected";
    case ReviewDecision::kPending: return "pending";
  }
  return "pending";
}

ReviewDecision review_decision_from_string(std::string_view s) {
  if (s == "approved") return ReviewDecision::kApproved;
  if (s == "revised") return ReviewDecision::kRevised;
  if (s == "rejected") return ReviewDecision::kRejected;
  if (s == "pending") return ReviewDecision::kPending;
  throw Error(ErrorCode::kSchemaError, "unknown review decision '" + std::string(s) + "'");
}

std::string_view to_string(InconsistencyKind k) {
  switch (k) {
    case InconsistencyKind::kUnsupportedFinding: return "unsupported_finding";
    case InconsistencyKind::kOmission: return "omission";
    case InconsistencyKind::kNumericMismatch: return "numeric_mismatch";
  }
  return "unknown";
}

AgentRole role_of(const AgentOutput& output) {
  return std::visit(
      [](const auto& o) {
        using T = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<T, RegionDetectionOutput>) return AgentRole::kRegionDetection;
        else if constexpr (std::is_same_v<T, ModalityPrediction>) return AgentRole::kModalityClassifier;
        else if constexpr (std::is_same_v<T, FindingsExtraction>) return AgentRole::kModalityInterpreter;
        else if constexpr (std::is_same_v<T, ContextSummary>) return AgentRole::kContextProcessor;
        else if constexpr (std::is_same_v<T, SegmentationResult>) return AgentRole::kSegmentation;
        else if constexpr (std::is_same_v<T, DiagnosticAssessment>) return AgentRole::kDiagnosticClassifier;
        else if constexpr (std::is_same_v<T, ComposedReport>) return AgentRole::kReportComposer;
        else if constexpr (std::is_same_v<T, QAReview>) return AgentRole::kQualityAssurance;
        else if constexpr (std::is_same_v<T, JudgeScores>) return AgentRole::kEvaluationJudge;
        else static_assert(kAlwaysFalse<T>);
      },
      output);
}

std::vector<std::string> check_output_invariants(const AgentOutput& output) {
  std::vector<std::string> out;
  auto confidence = [&](double c) {
    if (!in_unit(c)) out.push_back("confidence_range");
  };
  std::visit(
      [&](const auto& o) {
        using T = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<T, RegionDetectionOutput>) {
          confidence(o.confidence);
        } else if constexpr (std::is_same_v<T, ModalityPrediction>) {
          confidence(o.confidence);
        } else if constexpr (std::is_same_v<T, FindingsExtraction>) {
          for (const auto& f : o.findings) {
            for (auto& v : check_invariants(f)) out.push_back(v);
          }
        } else if constexpr (std::is_same_v<T, SegmentationResult>) {
          for (const auto& m : o.masks) {
            for (auto& v : check_invariants(m)) out.push_back(v);
          }
          for (const auto& m : o.measurements) {
            if (!std::isfinite(m.value) || m.value < 0.0) {
              out.push_back("measurement_value");
              break;
            }
          }
        } else if constexpr (std::is_same_v<T, DiagnosticAssessment>) {
          double sum = 0.0;
          for (const auto& [label, p] : o.class_probabilities) {
            if (!in_unit(p)) out.push_back("probability_range");
            sum += p;
          }
          if (!o.class_probabilities.empty() && std::abs(sum - 1.0) > 1e-9) {
            out.push_back("probability_sum");
          }
        } else if constexpr (std::is_same_v<T, JudgeScores>) {
          for (double s : {o.correctness, o.conciseness, o.completeness,
                           o.image_descriptions}) {
            if (!in_unit(s)) {
              out.push_back("score_range");
              break;
            }
          }
          for (const auto& [label, s] : o.extra_dimensions) {
            if (!in_unit(s)) out.push_back("score_range");
          }
        }
      },
      output);
  return out;
}

// ---------------------------------------------------------------------------

void to_json(Json& j, const RegionDetectionOutput& o) {
  j = Json{{"regions", o.regions}, {"orientation", o.orientation}, {"confidence", o.confidence}};
}
void from_json(const Json& j, RegionDetectionOutput& o) {
  o.regions = required<std::vector<std::string>>(j, "regions", "RegionDetection");
  o.orientation = optional_field<std::string>(j, "orientation", "", "RegionDetection");
  o.confidence = optional_field<double>(j, "confidence", 1.0, "RegionDetection");
}

void to_json(Json& j, const ModalityPrediction& o) {
  j = Json{{"modality", to_string(o.modality)}, {"subtype", o.subtype}, {"confidence", o.confidence}};
}
void from_json(const Json& j, ModalityPrediction& o) {
  o.modality = modality_from_string(required<std::string>(j, "modality", "ModalityPrediction"));
  o.subtype = optional_field<std::string>(j, "subtype", "", "ModalityPrediction");
  o.confidence = optional_field<double>(j, "confidence", 1.0, "ModalityPrediction");
}

void to_json(Json& j, const FindingsExtraction& o) {
  j = Json{{"region", o.region},
           {"modality", to_string(o.modality)},
           {"interpreter_id", o.interpreter_id},
           {"findings", o.findings}};
}
void from_json(const Json& j, FindingsExtraction& o) {
  o.findings = required<std::vector<Finding>>(j, "findings", "FindingsExtraction");
  o.region = optional_field<std::string>(j, "region", "", "FindingsExtraction");
  o.modality = modality_from_string(
      optional_field<std::string>(j, "modality", "Other", "FindingsExtraction"));
  o.interpreter_id = optional_field<std::string>(j, "interpreter_id", "", "FindingsExtraction");
}

void to_json(Json& j, const ContextSummary& o) {
  j = Json{{"structured_fields", o.structured_fields}, {"summary", o.summary}};
}
void from_json(const Json& j, ContextSummary& o) {
  o.structured_fields = optional_field<StringMap>(j, "structured_fields", {}, "ContextSummary");
  o.summary = required<std::string>(j, "summary", "ContextSummary");
}

void to_json(Json& j, const SegmentationResult& o) {
  j = Json{{"masks", o.masks}, {"boxes", o.boxes}, {"measurements", o.measurements}};
}
void from_json(const Json& j, SegmentationResult& o) {
  o.masks = optional_field<std::vector<SegmentationMask>>(j, "masks", {}, "SegmentationResult");
  o.boxes = optional_field<std::vector<BoundingBox>>(j, "boxes", {}, "SegmentationResult");
  o.measurements =
      optional_field<std::vector<Measurement>>(j, "measurements", {}, "SegmentationResult");
}

void to_json(Json& j, const DiagnosticAssessment& o) {
  j = Json{{"label", o.label},
           {"class_probabilities", o.class_probabilities},
           {"recommendation", o.recommendation}};
}
void from_json(const Json& j, DiagnosticAssessment& o) {
  o.label = required<std::string>(j, "label", "DiagnosticAssessment");
  o.class_probabilities = optional_field<std::map<std::string, double>>(
      j, "class_probabilities", {}, "DiagnosticAssessment");
  o.recommendation = optional_field<std::string>(j, "recommendation", "", "DiagnosticAssessment");
}

void to_json(Json& j, const ComposedReport& o) { j = Json{{"report", o.report}}; }
void from_json(const Json& j, ComposedReport& o) {
  // Accept either {"report": {...}} or the bare report object.
  o.report = j.contains("report") ? required<RadiologyReport>(j, "report", "ComposedReport")
                                  : j.get<RadiologyReport>();
}

void to_json(Json& j, const Inconsistency& o) {
  j = Json{{"kind", to_string(o.kind)}, {"subject", o.subject}, {"detail", o.detail}};
}
void from_json(const Json& j, Inconsistency& o) {
  const auto kind = required<std::string>(j, "kind", "inconsistency");
  if (kind == "unsupported_finding") o.kind = InconsistencyKind::kUnsupportedFinding;
  else if (kind == "omission") o.kind = InconsistencyKind::kOmission;
  else if (kind == "numeric_mismatch") o.kind = InconsistencyKind::kNumericMismatch;
  else throw Error(ErrorCode::kSchemaError, "unknown inconsistency kind '" + kind + "'");
  o.subject = optional_field<std::string>(j, "subject", "", "inconsistency");
  o.detail = optional_field<std::string>(j, "detail", "", "inconsistency");
}

void to_json(Json& j, const QAReview& o) {
  j = Json{{"inconsistencies", o.inconsistencies}, {"decision", to_string(o.decision)}};
  j["revised_report"] = o.revised_report ? Json(*o.revised_report) : Json(nullptr);
}
void from_json(const Json& j, QAReview& o) {
  o.inconsistencies =
      optional_field<std::vector<Inconsistency>>(j, "inconsistencies", {}, "QAReview");
  o.decision = review_decision_from_string(required<std::string>(j, "decision", "QAReview"));
  o.revised_report.reset();
  if (j.contains("revised_report") && !j["revised_report"].is_null()) {
    o.revised_report = j["revised_report"].get<RadiologyReport>();
  }
}

void to_json(Json& j, const JudgeScores& o) {
  j = Json{{"correctness", o.correctness},
           {"conciseness", o.conciseness},
           {"completeness", o.completeness},
           {"image_descriptions", o.image_descriptions},
           {"rationale", o.rationale},
           {"extra_dimensions", o.extra_dimensions}};
}
void from_json(const Json& j, JudgeScores& o) {
  o.correctness = required<double>(j, "correctness", "JudgeScores");
  o.conciseness = required<double>(j, "conciseness", "JudgeScores");
  o.completeness = required<double>(j, "completeness", "JudgeScores");
  o.image_descriptions = required<double>(j, "image_descriptions", "JudgeScores");
  o.rationale = optional_field<std::map<std::string, std::string>>(j, "rationale", {}, "JudgeScores");
  o.extra_dimensions =
      optional_field<std::map<std::string, double>>(j, "extra_dimensions", {}, "JudgeScores");
}

Json output_to_json(const AgentOutput& output) {
  Json j = std::visit([](const auto& o) { return Json(o); }, output);
  j["kind"] = to_string(role_of(output));
  return j;
}

AgentOutput output_from_json(AgentRole role, const Json& body) {
  if (!body.is_object()) {
    throw Error(ErrorCode::kSchemaError, std::string(to_string(role)) + ": not an object");
  }
  switch (role) {
    case AgentRole::kRegionDetection: return body.get<RegionDetectionOutput>();
    case AgentRole::kModalityClassifier: return body.get<ModalityPrediction>();
    case AgentRole::kModalityInterpreter: return body.get<FindingsExtraction>();
    case AgentRole::kContextProcessor: return body.get<ContextSummary>();
    case AgentRole::kSegmentation: return body.get<SegmentationResult>();
    case AgentRole::kDiagnosticClassifier: return body.get<DiagnosticAssessment>();
    case AgentRole::kReportComposer: return body.get<ComposedReport>();
    case AgentRole::kQualityAssurance: return body.get<QAReview>();
    case AgentRole::kEvaluationJudge: return body.get<JudgeScores>();
    case AgentRole::kOrchestrator: break;
  }
  throw Error(ErrorCode::kSchemaError, "Orchestrator has no output variant");
}

AgentOutput output_from_json(const Json& j) {
  return output_from_json(role_from_string(required<std::string>(j, "kind", "agent output")), j);
}

std::string output_digest(const AgentOutput& output) {
  return sha256_hex(output_to_json(output).dump());
}

}  // namespace consensus
