#include "consensus/types.hpp"

#include <openssl/evp.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <numeric>
#include <system_error>

#include "consensus/error.hpp"
#include "json_util.hpp"

namespace consensus {

namespace {

constexpr std::array<std::string_view, 5> kModalityNames = {"XRay", "CT", "MRI",
                                                            "US", "Other"};
constexpr std::array<std::string_view, 4> kSeverityNames = {
    "normal", "minor", "significant", "critical"};
constexpr std::array<std::string_view, 10> kRoleNames = {
    "RegionDetection",      "ModalityClassifier", "ModalityInterpreter",
    "ContextProcessor",     "Segmentation",       "DiagnosticClassifier",
    "ReportComposer",       "QualityAssurance",   "EvaluationJudge",
    "Orchestrator"};
constexpr std::array<std::string_view, 3> kStatusNames = {
    "succeeded", "failed", "awaiting_review"};

std::string to_hex(const unsigned char* data, std::size_t n) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(n * 2);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(kDigits[data[i] >> 4]);
    out.push_back(kDigits[data[i] & 0xF]);
  }
  return out;
}

std::vector<std::uint8_t> from_hex(std::string_view hex,
                                   const std::string& where) {
  if (hex.size() % 2 != 0) {
    throw Error(ErrorCode::kSchemaError, where + ": odd-length hex");
  }
  auto nibble = [&](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw Error(ErrorCode::kSchemaError, where + ": invalid hex digit");
  };
  std::vector<std::uint8_t> out(hex.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(nibble(hex[2 * i]) << 4 |
                                       nibble(hex[2 * i + 1]));
  }
  return out;
}

}  // namespace

std::string_view to_string(Modality m) {
  return kModalityNames[static_cast<std::size_t>(m)];
}

Modality modality_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kModalityNames.size(); ++i) {
    if (kModalityNames[i] == s) return static_cast<Modality>(i);
  }
  throw Error(ErrorCode::kSchemaError, "unknown modality '" + std::string(s) + "'");
}

std::string_view to_string(Severity s) {
  return kSeverityNames[static_cast<std::size_t>(s)];
}

Severity severity_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kSeverityNames.size(); ++i) {
    if (kSeverityNames[i] == s) return static_cast<Severity>(i);
  }
  throw Error(ErrorCode::kSchemaError, "unknown severity '" + std::string(s) + "'");
}

std::string_view to_string(AgentRole r) {
  return kRoleNames[static_cast<std::size_t>(r)];
}

AgentRole role_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kRoleNames.size(); ++i) {
    if (kRoleNames[i] == s) return static_cast<AgentRole>(i);
  }
  throw Error(ErrorCode::kConfigError, "unknown agent role '" + std::string(s) + "'");
}

std::string_view to_string(CaseStatus s) {
  return kStatusNames[static_cast<std::size_t>(s)];
}

CaseStatus case_status_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kStatusNames.size(); ++i) {
    if (kStatusNames[i] == s) return static_cast<CaseStatus>(i);
  }
  throw Error(ErrorCode::kSchemaError, "unknown case status '" + std::string(s) + "'");
}

SegmentationMask SegmentationMask::empty(std::uint32_t nx, std::uint32_t ny,
                                         std::uint32_t nz) {
  SegmentationMask m;
  m.dims = {nx, ny, nz};
  m.voxels.assign(m.size(), 0);
  return m;
}

std::size_t SegmentationMask::count() const {
  return static_cast<std::size_t>(
      std::count_if(voxels.begin(), voxels.end(), [](auto v) { return v != 0; }));
}

std::int64_t PipelineTrace::latency_ms() const {
  if (steps.empty()) return 0;
  std::int64_t lo = steps.front().start_ms;
  std::int64_t hi = steps.front().end_ms;
  for (const auto& s : steps) {
    lo = std::min(lo, s.start_ms);
    hi = std::max(hi, s.end_ms);
  }
  return hi - lo;
}

int PipelineTrace::total_retries() const {
  return static_cast<int>(std::count_if(steps.begin(), steps.end(),
                                        [](const auto& s) { return s.retry > 0; }));
}

std::string format_decimal(double v) {
  if (v == 0.0) return "0";  // folds -0
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) return "nan";
  return std::string(buf, end);
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(),
                 nullptr) != 1) {
    throw Error(ErrorCode::kIoError, "sha256 failed");
  }
  return to_hex(digest, len);
}

// ---------------------------------------------------------------------------
// Object-notation encoding

using detail::optional_field;
using detail::required;

void to_json(Json& j, const Measurement& m) {
  j = Json{{"name", m.name}, {"value", m.value}, {"unit", m.unit}};
}

void from_json(const Json& j, Measurement& m) {
  m.name = required<std::string>(j, "name", "measurement");
  m.value = required<double>(j, "value", "measurement " + m.name);
  m.unit = optional_field<std::string>(j, "unit", "", "measurement " + m.name);
}

void to_json(Json& j, const Finding& f) {
  j = Json{{"finding_id", f.finding_id},
           {"description", f.description},
           {"location", f.location},
           {"attributes", f.attributes},
           {"measurements", f.measurements},
           {"severity", to_string(f.severity)},
           {"confidence", f.confidence}};
}

void from_json(const Json& j, Finding& f) {
  f.finding_id = optional_field<std::string>(j, "finding_id", "", "finding");
  const std::string where = "finding " + f.finding_id;
  f.description = optional_field<std::string>(j, "description", "", where);
  f.location = optional_field<std::string>(j, "location", "", where);
  f.attributes = optional_field<StringMap>(j, "attributes", {}, where);
  f.measurements =
      optional_field<std::vector<Measurement>>(j, "measurements", {}, where);
  f.severity = severity_from_string(
      optional_field<std::string>(j, "severity", "normal", where));
  f.confidence = optional_field<double>(j, "confidence", 1.0, where);
}

void to_json(Json& j, const SegmentationMask& m) {
  std::vector<unsigned char> packed((m.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m.voxels[i]) packed[i / 8] |= static_cast<unsigned char>(1u << (i % 8));
  }
  j = Json{{"dims", m.dims},
           {"spacing_mm", m.spacing_mm},
           {"voxels", to_hex(packed.data(), packed.size())}};
}

void from_json(const Json& j, SegmentationMask& m) {
  m.dims = required<std::array<std::uint32_t, 3>>(j, "dims", "mask");
  m.spacing_mm = optional_field<std::array<double, 3>>(
      j, "spacing_mm", {1.0, 1.0, 1.0}, "mask");
  auto packed = from_hex(required<std::string>(j, "voxels", "mask"), "mask");
  if (packed.size() != (m.size() + 7) / 8) {
    throw Error(ErrorCode::kSchemaError, "mask: voxel payload length mismatch");
  }
  m.voxels.assign(m.size(), 0);
  for (std::size_t i = 0; i < m.size(); ++i) {
    m.voxels[i] = (packed[i / 8] >> (i % 8)) & 1u;
  }
}

void to_json(Json& j, const ImagingStudy& s) {
  j = Json{{"study_id", s.study_id},
           {"data_ref", s.data_ref},
           {"declared_header", s.declared_header},
           {"sequences", s.sequences}};
}

void from_json(const Json& j, ImagingStudy& s) {
  s.study_id = optional_field<std::string>(j, "study_id", "", "study");
  const std::string where = "study " + s.study_id;
  s.data_ref = required<std::string>(j, "data_ref", where);
  s.declared_header = optional_field<StringMap>(j, "declared_header", {}, where);
  s.sequences = optional_field<std::vector<std::string>>(j, "sequences", {}, where);
}

void to_json(Json& j, const ClinicalContext& c) {
  j = Json{{"demographics", c.demographics},
           {"indication", c.indication},
           {"history", c.history},
           {"prior_findings", c.prior_findings}};
}

void from_json(const Json& j, ClinicalContext& c) {
  if (j.is_null()) {
    c = {};
    return;
  }
  c.demographics = optional_field<StringMap>(j, "demographics", {}, "context");
  c.indication = optional_field<std::string>(j, "indication", "", "context");
  c.history = optional_field<std::string>(j, "history", "", "context");
  c.prior_findings = optional_field<std::vector<std::string>>(
      j, "prior_findings", {}, "context");
}

void to_json(Json& j, const RadiologyReport& r) {
  j = Json{{"findings_section", r.findings_section},
           {"impression_section", r.impression_section},
           {"referenced_findings", r.referenced_findings},
           {"measurements_cited", r.measurements_cited}};
}

void from_json(const Json& j, RadiologyReport& r) {
  r.findings_section =
      optional_field<std::string>(j, "findings_section", "", "report");
  r.impression_section =
      optional_field<std::string>(j, "impression_section", "", "report");
  r.referenced_findings = optional_field<std::vector<std::string>>(
      j, "referenced_findings", {}, "report");
  r.measurements_cited = optional_field<std::vector<Measurement>>(
      j, "measurements_cited", {}, "report");
}

void to_json(Json& j, const GroundTruth& g) {
  j = Json{{"region_labels", g.region_labels},
           {"modality_label", to_string(g.modality_label)},
           {"reference_findings", g.reference_findings},
           {"reference_masks", g.reference_masks},
           {"diagnosis_label", g.diagnosis_label},
           {"reference_report", g.reference_report}};
  if (g.modality_subtype) j["modality_subtype"] = *g.modality_subtype;
  if (g.expert_scores) j["expert_scores"] = *g.expert_scores;
}

void from_json(const Json& j, GroundTruth& g) {
  const std::string where = "ground_truth";
  g.region_labels =
      optional_field<std::vector<std::string>>(j, "region_labels", {}, where);
  g.modality_label = modality_from_string(
      optional_field<std::string>(j, "modality_label", "Other", where));
  if (j.contains("modality_subtype") && !j["modality_subtype"].is_null()) {
    g.modality_subtype = required<std::string>(j, "modality_subtype", where);
  }
  g.reference_findings =
      optional_field<std::vector<Finding>>(j, "reference_findings", {}, where);
  g.reference_masks = optional_field<std::vector<SegmentationMask>>(
      j, "reference_masks", {}, where);
  g.diagnosis_label =
      optional_field<std::string>(j, "diagnosis_label", "", where);
  g.reference_report =
      optional_field<RadiologyReport>(j, "reference_report", {}, where);
  if (j.contains("expert_scores") && !j["expert_scores"].is_null()) {
    g.expert_scores =
        required<std::map<std::string, double>>(j, "expert_scores", where);
  }
}

void to_json(Json& j, const CaseStudy& c) {
  j = Json{{"case_id", c.case_id}, {"studies", c.studies}, {"context", c.context}};
  if (c.ground_truth) j["ground_truth"] = *c.ground_truth;
}

void from_json(const Json& j, CaseStudy& c) {
  c.case_id = required<std::string>(j, "case_id", "case");
  const std::string where = "case " + c.case_id;
  c.studies = required<std::vector<ImagingStudy>>(j, "studies", where);
  c.context = optional_field<ClinicalContext>(j, "context", {}, where);
  if (j.contains("ground_truth") && !j["ground_truth"].is_null()) {
    c.ground_truth = j["ground_truth"].get<GroundTruth>();
  } else {
    c.ground_truth.reset();
  }
}

void to_json(Json& j, const TraceStep& s) {
  j = Json{{"role", to_string(s.role)},   {"start_ms", s.start_ms},
           {"end_ms", s.end_ms},          {"verdict", s.verdict},
           {"retry", s.retry},            {"output_digest", s.output_digest}};
}

void from_json(const Json& j, TraceStep& s) {
  s.role = role_from_string(required<std::string>(j, "role", "trace step"));
  s.start_ms = required<std::int64_t>(j, "start_ms", "trace step");
  s.end_ms = required<std::int64_t>(j, "end_ms", "trace step");
  s.verdict = required<std::string>(j, "verdict", "trace step");
  s.retry = required<int>(j, "retry", "trace step");
  s.output_digest = optional_field<std::string>(j, "output_digest", "", "trace step");
}

void to_json(Json& j, const PipelineTrace& t) {
  j = Json{{"case_id", t.case_id},
           {"steps", t.steps},
           {"status", to_string(t.status)}};
  if (t.failure_reason) j["failure_reason"] = *t.failure_reason;
  if (t.failure_stage) j["failure_stage"] = to_string(*t.failure_stage);
}

void from_json(const Json& j, PipelineTrace& t) {
  t.case_id = required<std::string>(j, "case_id", "trace");
  t.steps = required<std::vector<TraceStep>>(j, "steps", "trace");
  t.status = case_status_from_string(required<std::string>(j, "status", "trace"));
  t.failure_reason.reset();
  t.failure_stage.reset();
  if (j.contains("failure_reason")) {
    t.failure_reason = j["failure_reason"].get<std::string>();
  }
  if (j.contains("failure_stage")) {
    t.failure_stage = role_from_string(j["failure_stage"].get<std::string>());
  }
}

namespace detail {

void write_file_atomic(const std::filesystem::path& path,
                       const std::string& contents) {
  static std::atomic<unsigned> counter{0};
  std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp" + std::to_string(::getpid()) + "." +
         std::to_string(counter.fetch_add(1));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIoError, "cannot write " + tmp.string());
    out << contents;
    out.flush();
    if (!out) throw Error(ErrorCode::kIoError, "short write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

}  // namespace consensus
