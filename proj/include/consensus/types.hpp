#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace consensus {

using Json = nlohmann::json;
using StringMap = std::map<std::string, std::string>;

enum class Modality { kXRay, kCT, kMRI, kUS, kOther };
enum class Severity { kNormal, kMinor, kSignificant, kCritical };

std::string_view to_string(Modality m);
Modality modality_from_string(std::string_view s);  // throws SchemaError
std::string_view to_string(Severity s);
Severity severity_from_string(std::string_view s);  // throws SchemaError

// The ten roles of the pipeline. Orchestrator labels trace entries only.
enum class AgentRole {
  kRegionDetection,
  kModalityClassifier,
  kModalityInterpreter,
  kContextProcessor,
  kSegmentation,
  kDiagnosticClassifier,
  kReportComposer,
  kQualityAssurance,
  kEvaluationJudge,
  kOrchestrator,
};

inline constexpr std::array<AgentRole, 10> kAllRoles = {
    AgentRole::kRegionDetection,      AgentRole::kModalityClassifier,
    AgentRole::kModalityInterpreter,  AgentRole::kContextProcessor,
    AgentRole::kSegmentation,         AgentRole::kDiagnosticClassifier,
    AgentRole::kReportComposer,       AgentRole::kQualityAssurance,
    AgentRole::kEvaluationJudge,      AgentRole::kOrchestrator,
};

std::string_view to_string(AgentRole r);
AgentRole role_from_string(std::string_view s);  // throws ConfigError

struct Measurement {
  std::string name;
  double value = 0.0;
  std::string unit;
  bool operator==(const Measurement&) const = default;
};

struct Finding {
  std::string finding_id;
  std::string description;
  std::string location;
  StringMap attributes;
  std::vector<Measurement> measurements;
  Severity severity = Severity::kNormal;
  double confidence = 1.0;
  bool operator==(const Finding&) const = default;
};

/// Dense binary voxel grid. Linear index is C order over (x, y, z):
/// `(x * ny + y) * nz + z`.
struct SegmentationMask {
  std::array<std::uint32_t, 3> dims{1, 1, 1};
  std::vector<std::uint8_t> voxels;  // one entry per voxel, 0 or 1
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};

  static SegmentationMask empty(std::uint32_t nx, std::uint32_t ny,
                                std::uint32_t nz);

  std::size_t size() const {
    return std::size_t{dims[0]} * dims[1] * dims[2];
  }
  std::size_t index(std::uint32_t x, std::uint32_t y, std::uint32_t z) const {
    return (std::size_t{x} * dims[1] + y) * dims[2] + z;
  }
  bool at(std::uint32_t x, std::uint32_t y, std::uint32_t z) const {
    return voxels[index(x, y, z)] != 0;
  }
  void set(std::uint32_t x, std::uint32_t y, std::uint32_t z, bool v = true) {
    voxels[index(x, y, z)] = v ? 1 : 0;
  }
  std::size_t count() const;
  double voxel_volume_mm3() const {
    return spacing_mm[0] * spacing_mm[1] * spacing_mm[2];
  }
  bool operator==(const SegmentationMask&) const = default;
};

struct ImagingStudy {
  std::string study_id;
  std::string data_ref;
  StringMap declared_header;
  std::vector<std::string> sequences;
  bool operator==(const ImagingStudy&) const = default;
};

struct ClinicalContext {
  StringMap demographics;
  std::string indication;
  std::string history;
  std::vector<std::string> prior_findings;

  bool empty() const {
    return demographics.empty() && indication.empty() && history.empty() &&
           prior_findings.empty();
  }
  bool operator==(const ClinicalContext&) const = default;
};

struct RadiologyReport {
  std::string findings_section;
  std::string impression_section;
  std::vector<std::string> referenced_findings;
  std::vector<Measurement> measurements_cited;
  bool operator==(const RadiologyReport&) const = default;
};

struct GroundTruth {
  std::vector<std::string> region_labels;
  Modality modality_label = Modality::kOther;
  std::optional<std::string> modality_subtype;
  std::vector<Finding> reference_findings;
  std::vector<SegmentationMask> reference_masks;
  std::string diagnosis_label;
  RadiologyReport reference_report;
  std::optional<std::map<std::string, double>> expert_scores;
  bool operator==(const GroundTruth&) const = default;
};

struct CaseStudy {
  std::string case_id;
  std::vector<ImagingStudy> studies;
  ClinicalContext context;
  std::optional<GroundTruth> ground_truth;
  bool operator==(const CaseStudy&) const = default;
};

enum class CaseStatus { kSucceeded, kFailed, kAwaitingReview };
std::string_view to_string(CaseStatus s);
CaseStatus case_status_from_string(std::string_view s);

struct TraceStep {
  AgentRole role = AgentRole::kOrchestrator;
  std::int64_t start_ms = 0;
  std::int64_t end_ms = 0;
  std::string verdict;  // "valid", "invalid(<reason>)", "error(<code>)", "skipped"
  int retry = 0;
  std::string output_digest;
  bool operator==(const TraceStep&) const = default;
};

struct PipelineTrace {
  std::string case_id;
  std::vector<TraceStep> steps;
  CaseStatus status = CaseStatus::kSucceeded;
  std::optional<std::string> failure_reason;
  std::optional<AgentRole> failure_stage;

  std::int64_t latency_ms() const;
  int total_retries() const;
  bool operator==(const PipelineTrace&) const = default;
};

// Object-notation encoding of the domain types. Decoders throw SchemaError
// naming the offending field.
void to_json(Json& j, const Measurement& m);
void from_json(const Json& j, Measurement& m);
void to_json(Json& j, const Finding& f);
void from_json(const Json& j, Finding& f);
void to_json(Json& j, const SegmentationMask& m);
void from_json(const Json& j, SegmentationMask& m);
void to_json(Json& j, const ImagingStudy& s);
void from_json(const Json& j, ImagingStudy& s);
void to_json(Json& j, const ClinicalContext& c);
void from_json(const Json& j, ClinicalContext& c);
void to_json(Json& j, const RadiologyReport& r);
void from_json(const Json& j, RadiologyReport& r);
void to_json(Json& j, const GroundTruth& g);
void from_json(const Json& j, GroundTruth& g);
void to_json(Json& j, const CaseStudy& c);
void from_json(const Json& j, CaseStudy& c);
void to_json(Json& j, const TraceStep& s);
void from_json(const Json& j, TraceStep& s);
void to_json(Json& j, const PipelineTrace& t);
void from_json(const Json& j, PipelineTrace& t);

/// Shortest decimal text that round-trips to the same double.
std::string format_decimal(double v);

/// Lowercase hex SHA-256 of `bytes`.
std::string sha256_hex(std::string_view bytes);

}  // namespace consensus
