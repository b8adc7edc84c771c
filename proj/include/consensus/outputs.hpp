#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "consensus/types.hpp"

namespace consensus {

struct RegionDetectionOutput {
  std::vector<std::string> regions;
  std::string orientation;
  double confidence = 1.0;
  bool operator==(const RegionDetectionOutput&) const = default;
};

struct ModalityPrediction {
  Modality modality = Modality::kOther;
  std::string subtype;
  double confidence = 1.0;
  bool operator==(const ModalityPrediction&) const = default;
};

/// Output of one organ-modality interpreter. `region`/`modality` record the
/// registry key the interpreter was selected for.
struct FindingsExtraction {
  std::string region;
  Modality modality = Modality::kOther;
  std::string interpreter_id;
  std::vector<Finding> findings;
  bool operator==(const FindingsExtraction&) const = default;
};

struct ContextSummary {
  StringMap structured_fields;
  std::string summary;
  bool operator==(const ContextSummary&) const = default;
};

using BoundingBox = std::array<std::int64_t, 6>;  // x0, y0, z0, x1, y1, z1

struct SegmentationResult {
  std::vector<SegmentationMask> masks;
  std::vector<BoundingBox> boxes;
  std::vector<Measurement> measurements;
  bool operator==(const SegmentationResult&) const = default;
};

struct DiagnosticAssessment {
  std::string label;
  std::map<std::string, double> class_probabilities;
  std::string recommendation;
  bool operator==(const DiagnosticAssessment&) const = default;
};

struct ComposedReport {
  RadiologyReport report;
  bool operator==(const ComposedReport&) const = default;
};

enum class ReviewDecision { kApproved, kRevised, kRejected, kPending };
std::string_view to_string(ReviewDecision d);
ReviewDecision review_decision_from_string(std::string_view s);

enum class InconsistencyKind { kUnsupportedFinding, kOmission, kNumericMismatch };
std::string_view to_string(InconsistencyKind k);

struct Inconsistency {
  InconsistencyKind kind = InconsistencyKind::kUnsupportedFinding;
  std::string subject;  // finding id or measurement name
  std::string detail;
  bool operator==(const Inconsistency&) const = default;
};

struct QAReview {
  std::vector<Inconsistency> inconsistencies;
  std::optional<RadiologyReport> revised_report;
  ReviewDecision decision = ReviewDecision::kPending;
  bool operator==(const QAReview&) const = default;
};

/// The evaluation agent's four rubric dimensions, normalized to [0, 1].
struct JudgeScores {
  double correctness = 0.0;
  double conciseness = 0.0;
  double completeness = 0.0;
  double image_descriptions = 0.0;
  std::map<std::string, std::string> rationale;
  std::map<std::string, double> extra_dimensions;
  bool operator==(const JudgeScores&) const = default;
};

using AgentOutput =
    std::variant<RegionDetectionOutput, ModalityPrediction, FindingsExtraction,
                 ContextSummary, SegmentationResult, DiagnosticAssessment,
                 ComposedReport, QAReview, JudgeScores>;

/// The role whose variant `output` holds.
AgentRole role_of(const AgentOutput& output);

/// Names of violated AgentOutput invariants (confidence/probability ranges,
/// probability mass, embedded finding and mask invariants).
std::vector<std::string> check_output_invariants(const AgentOutput& output);

/// Outputs collected so far for one case, at most one per role.
class OutputSet {
 public:
  void put(AgentOutput output) {
    const auto role = role_of(output);
    outputs_.insert_or_assign(role, std::move(output));
  }
  bool contains(AgentRole role) const { return outputs_.contains(role); }

  template <typename T>
  const T* get() const {
    for (const auto& [role, out] : outputs_) {
      if (auto* p = std::get_if<T>(&out)) return p;
    }
    return nullptr;
  }
  const std::map<AgentRole, AgentOutput>& all() const { return outputs_; }

 private:
  std::map<AgentRole, AgentOutput> outputs_;
};

void to_json(Json& j, const RegionDetectionOutput& o);
void from_json(const Json& j, RegionDetectionOutput& o);
void to_json(Json& j, const ModalityPrediction& o);
void from_json(const Json& j, ModalityPrediction& o);
void to_json(Json& j, const FindingsExtraction& o);
void from_json(const Json& j, FindingsExtraction& o);
void to_json(Json& j, const ContextSummary& o);
void from_json(const Json& j, ContextSummary& o);
void to_json(Json& j, const SegmentationResult& o);
void from_json(const Json& j, SegmentationResult& o);
void to_json(Json& j, const DiagnosticAssessment& o);
void from_json(const Json& j, DiagnosticAssessment& o);
void to_json(Json& j, const ComposedReport& o);
void from_json(const Json& j, ComposedReport& o);
void to_json(Json& j, const Inconsistency& o);
void from_json(const Json& j, Inconsistency& o);
void to_json(Json& j, const QAReview& o);
void from_json(const Json& j, QAReview& o);
void to_json(Json& j, const JudgeScores& o);
void from_json(const Json& j, JudgeScores& o);

/// Tagged encoding: the variant's fields plus `"kind": <role name>`.
Json output_to_json(const AgentOutput& output);
AgentOutput output_from_json(const Json& j);
/// Decodes the untagged variant body expected for `role`.
AgentOutput output_from_json(AgentRole role, const Json& body);

/// Hex SHA-256 of the tagged encoding.
std::string output_digest(const AgentOutput& output);

}  // namespace consensus
