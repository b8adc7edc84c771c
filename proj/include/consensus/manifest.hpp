#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "consensus/types.hpp"

namespace consensus {

/// Parses a case manifest document (`{"cases": [...]}`). Mask entries in
/// ground truth may be inline objects or paths to binary mask files; paths
/// are resolved against `base_dir`.
///
/// Throws SchemaError naming the case (1-based position) and field, or
/// DuplicateCaseId.
std::vector<CaseStudy> parse_case_manifest(
    std::string_view document, const std::filesystem::path& base_dir = {});

std::vector<CaseStudy> load_case_manifest(const std::filesystem::path& path);

/// Serializes cases back to manifest text with masks inlined.
std::string serialize_manifest(std::span<const CaseStudy> cases);

/// Binary mask file: three u32 LE dims, three f64 LE spacings, then the
/// voxels packed LSB-first in linear index order.
std::string encode_mask(const SegmentationMask& mask);
SegmentationMask decode_mask(std::string_view bytes);
SegmentationMask read_mask_file(const std::filesystem::path& path);
void write_mask_file(const std::filesystem::path& path,
                     const SegmentationMask& mask);

// Invariant checks. Each returns a list of violated-invariant names.
std::vector<std::string> check_invariants(const Finding& f);
std::vector<std::string> check_invariants(const SegmentationMask& m);
std::vector<std::string> check_invariants(const ImagingStudy& s);
std::vector<std::string> check_invariants(const GroundTruth& g);
std::vector<std::string> check_invariants(const CaseStudy& c);

enum class ReportViolation {
  kMissingFindings,
  kMissingImpression,
  kDuplicateReference,
};
std::string_view to_string(ReportViolation v);

/// Empty result iff the report satisfies the RadiologyReport invariants.
std::vector<ReportViolation> validate_report_structure(
    const RadiologyReport& report);

}  // namespace consensus
