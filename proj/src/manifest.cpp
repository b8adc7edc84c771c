#include "consensus/manifest.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <set>
#include <unordered_set>

#include "consensus/error.hpp"
#include "json_util.hpp"

namespace consensus {

namespace {

static_assert(std::endian::native == std::endian::little,
              "mask codec assumes a little-endian host");

constexpr std::size_t kMaskHeaderBytes = 3 * 4 + 3 * 8;

template <typename T>
void append_le(std::string& out, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  out.append(bytes, sizeof(T));
}

template <typename T>
T read_le(std::string_view bytes, std::size_t offset) {
  T value;
  std::memcpy(&value, bytes.data() + offset, sizeof(T));
  return value;
}

// Replaces string mask references with inline mask objects.
void resolve_mask_refs(Json& case_json, const std::filesystem::path& base_dir,
                       const std::string& where) {
  if (!case_json.contains("ground_truth")) return;
  auto& gt = case_json["ground_truth"];
  if (!gt.is_object() || !gt.contains("reference_masks")) return;
  auto& masks = gt["reference_masks"];
  if (!masks.is_array()) {
    throw Error(ErrorCode::kSchemaError,
                where + ": field 'reference_masks' has wrong type");
  }
  for (auto& entry : masks) {
    if (!entry.is_string()) continue;
    const std::filesystem::path rel = entry.get<std::string>();
    try {
      entry = read_mask_file(base_dir / rel);
    } catch (const Error& e) {
      throw Error(ErrorCode::kSchemaError,
                  where + ": reference mask '" + rel.string() + "': " + e.detail());
    }
  }
}

}  // namespace

std::vector<CaseStudy> parse_case_manifest(std::string_view document,
                                           const std::filesystem::path& base_dir) {
  Json root;
  try {
    root = Json::parse(document);
  } catch (const Json::parse_error& e) {
    throw Error(ErrorCode::kSchemaError, std::string("manifest: ") + e.what());
  }
  if (!root.is_object() || !root.contains("cases") || !root["cases"].is_array()) {
    throw Error(ErrorCode::kSchemaError, "manifest: missing field 'cases'");
  }

  std::vector<CaseStudy> cases;
  std::unordered_set<std::string> seen;
  std::size_t position = 0;
  for (auto& entry : root["cases"]) {
    ++position;
    const std::string where = "case " + std::to_string(position);
    if (!entry.is_object()) {
      throw Error(ErrorCode::kSchemaError, where + ": not an object");
    }
    resolve_mask_refs(entry, base_dir, where);
    CaseStudy c;
    try {
      c = entry.get<CaseStudy>();
    } catch (const Error& e) {
      throw Error(ErrorCode::kSchemaError, where + ": " + e.detail());
    }
    if (auto violations = check_invariants(c); !violations.empty()) {
      throw Error(ErrorCode::kSchemaError, where + ": " + violations.front());
    }
    if (!seen.insert(c.case_id).second) {
      throw Error(ErrorCode::kDuplicateCaseId, c.case_id);
    }
    cases.push_back(std::move(c));
  }
  return cases;
}

std::vector<CaseStudy> load_case_manifest(const std::filesystem::path& path) {
  std::string text;
  try {
    text = detail::read_file(path);
  } catch (const Error& e) {
    throw Error(ErrorCode::kManifestError, e.detail());
  }
  return parse_case_manifest(text, path.parent_path());
}

std::string serialize_manifest(std::span<const CaseStudy> cases) {
  Json root;
  root["cases"] = Json::array();
  for (const auto& c : cases) root["cases"].push_back(c);
  return root.dump(2) + "\n";
}

std::string encode_mask(const SegmentationMask& mask) {
  std::string out;
  out.reserve(kMaskHeaderBytes + (mask.size() + 7) / 8);
  for (auto d : mask.dims) append_le<std::uint32_t>(out, d);
  for (auto s : mask.spacing_mm) append_le<double>(out, s);
  std::string packed((mask.size() + 7) / 8, '\0');
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask.voxels[i]) packed[i / 8] = static_cast<char>(packed[i / 8] | (1 << (i % 8)));
  }
  out += packed;
  return out;
}

SegmentationMask decode_mask(std::string_view bytes) {
  if (bytes.size() < kMaskHeaderBytes) {
    throw Error(ErrorCode::kSchemaError, "mask file: truncated header");
  }
  SegmentationMask mask;
  for (std::size_t i = 0; i < 3; ++i) {
    mask.dims[i] = read_le<std::uint32_t>(bytes, 4 * i);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    mask.spacing_mm[i] = read_le<double>(bytes, 12 + 8 * i);
  }
  if (mask.dims[0] == 0 || mask.dims[1] == 0 || mask.dims[2] == 0) {
    throw Error(ErrorCode::kSchemaError, "mask file: zero dimension");
  }
  const std::size_t n = mask.size();
  if (bytes.size() != kMaskHeaderBytes + (n + 7) / 8) {
    throw Error(ErrorCode::kSchemaError, "mask file: payload length mismatch");
  }
  mask.voxels.assign(n, 0);
  const auto payload = bytes.substr(kMaskHeaderBytes);
  for (std::size_t i = 0; i < n; ++i) {
    mask.voxels[i] =
        (static_cast<unsigned char>(payload[i / 8]) >> (i % 8)) & 1u;
  }
  return mask;
}

SegmentationMask read_mask_file(const std::filesystem::path& path) {
  return decode_mask(detail::read_file(path));
}

void write_mask_file(const std::filesystem::path& path,
                     const SegmentationMask& mask) {
  detail::write_file_atomic(path, encode_mask(mask));
}

std::vector<std::string> check_invariants(const Finding& f) {
  std::vector<std::string> out;
  if (!(f.confidence >= 0.0 && f.confidence <= 1.0)) {
    out.push_back("confidence_range");
  }
  for (const auto& m : f.measurements) {
    if (!std::isfinite(m.value) || m.value < 0.0) {
      out.push_back("measurement_value");
      break;
    }
  }
  return out;
}

std::vector<std::string> check_invariants(const SegmentationMask& m) {
  std::vector<std::string> out;
  if (m.dims[0] == 0 || m.dims[1] == 0 || m.dims[2] == 0) {
    out.push_back("mask_dims");
  } else if (m.voxels.size() != m.size()) {
    out.push_back("mask_length");
  }
  for (double s : m.spacing_mm) {
    if (!(s > 0.0) || !std::isfinite(s)) {
      out.push_back("mask_spacing");
      break;
    }
  }
  return out;
}

std::vector<std::string> check_invariants(const ImagingStudy& s) {
  std::vector<std::string> out;
  if (s.data_ref.empty()) out.push_back("empty data_ref");
  std::set<std::string> labels(s.sequences.begin(), s.sequences.end());
  if (labels.size() != s.sequences.size()) out.push_back("duplicate sequence label");
  return out;
}

std::vector<std::string> check_invariants(const GroundTruth& g) {
  std::vector<std::string> out;
  for (const auto& f : g.reference_findings) {
    for (auto& v : check_invariants(f)) out.push_back("reference finding " + v);
  }
  for (const auto& m : g.reference_masks) {
    for (auto& v : check_invariants(m)) out.push_back("reference " + v);
  }
  if (g.expert_scores) {
    for (const auto& [dim, score] : *g.expert_scores) {
      if (!(score >= 0.0 && score <= 1.0)) {
        out.push_back("expert score '" + dim + "' outside [0,1]");
      }
    }
  }
  return out;
}

std::vector<std::string> check_invariants(const CaseStudy& c) {
  std::vector<std::string> out;
  if (c.case_id.empty()) out.push_back("empty case_id");
  if (c.studies.empty()) out.push_back("missing studies");
  for (const auto& s : c.studies) {
    for (auto& v : check_invariants(s)) out.push_back("study " + s.study_id + ": " + v);
  }
  if (c.ground_truth) {
    for (auto& v : check_invariants(*c.ground_truth)) out.push_back(v);
  }
  return out;
}

std::string_view to_string(ReportViolation v) {
  switch (v) {
    case ReportViolation::kMissingFindings: return "missing_findings";
    case ReportViolation::kMissingImpression: return "missing_impression";
    case ReportViolation::kDuplicateReference: return "duplicate_reference";
  }
  return "unknown";
}

std::vector<ReportViolation> validate_report_structure(
    const RadiologyReport& report) {
  auto blank = [](const std::string& s) {
    return s.find_first_not_of(" \t\r\n") == std::string::npos;
  };
  std::vector<ReportViolation> out;
  if (blank(report.findings_section)) out.push_back(ReportViolation::kMissingFindings);
  if (blank(report.impression_section)) out.push_back(ReportViolation::kMissingImpression);
  std::set<std::string> refs(report.referenced_findings.begin(),
                             report.referenced_findings.end());
  if (refs.size() != report.referenced_findings.size()) {
    out.push_back(ReportViolation::kDuplicateReference);
  }
  return out;
}

}  // namespace consensus
