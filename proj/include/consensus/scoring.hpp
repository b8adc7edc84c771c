#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "consensus/judge.hpp"
#include "consensus/metrics.hpp"
#include "consensus/orchestrator.hpp"

namespace consensus {

/// Metric values for one case, keyed `<group>.<metric>` (e.g. `segmentation.dice`).
struct CaseMetrics {
  std::string case_id;
  CaseStatus status = CaseStatus::kSucceeded;
  std::optional<std::string> failure_reason;
  std::map<std::string, double> values;
};

/// Aggregate metrics for a run: per-agent values, confusion matrices, and
/// global scores. Latency is reported separately because it is not
/// reproducible.
struct MetricReport {
  std::size_t cases = 0;
  std::size_t succeeded = 0;
  std::size_t failed = 0;
  std::map<std::string, std::map<std::string, double>> agents;
  std::map<std::string, metrics::ConfusionMatrix> confusion;
  std::map<std::string, double> global;
  std::vector<CaseMetrics> per_case;
};

Json to_json_value(const MetricReport& report);

/// Scores one case outcome against its ground truth. Cases without ground
/// truth get only pipeline metrics.
CaseMetrics score_case(const CaseStudy& c, const CaseOutcome& outcome, const metrics::ScoreWeights& weights);

MetricReport aggregate(std::span<const CaseStudy> cases, std::span<const CaseMetrics> per_case,
                       std::span<const CaseOutcome> outcomes);

/// `case_id,metric,value` rows sorted by case then metric.
std::string scores_csv(const MetricReport& report);

/// Judge-vs-expert calibration over cases that carry expert scores and a
/// judge result. Both sides use the unweighted mean of the four
/// dimensions. Empty if fewer than two pairs exist.
std::optional<CalibrationReport> calibrate_run(std::span<const CaseStudy> cases,
                                               std::span<const CaseOutcome> outcomes, double threshold);

/// Loads the outcome files a run wrote for `c` (trace, report, scores, state).
CaseOutcome load_case_outcome(const std::filesystem::path& run_dir, const CaseStudy& c);

struct RunSettings {
  metrics::ScoreWeights weights = metrics::ScoreWeights::defaults();
  double calibration_threshold = kDefaultCalibrationThreshold;
};

void to_json(Json& j, const RunSettings& s);
void from_json(const Json& j, RunSettings& s);

struct LoadedRun {
  std::vector<CaseStudy> cases;
  std::vector<CaseOutcome> outcomes;
  RunSettings settings;
};

/// Reads `cases.json`, `settings`, and the case files of a run directory.
/// Throws ManifestError when the directory holds no run.
LoadedRun load_run(const std::filesystem::path& run_dir);

/// Recomputes the report for a run directory from its files.
MetricReport score_run(const std::filesystem::path& run_dir);
MetricReport score_run(const LoadedRun& run);

/// Writes `scores.csv`, `summary.json`, `efficiency`, and (when available)
/// `calibration` into the run directory.
void write_scoring_outputs(const std::filesystem::path& run_dir, const MetricReport& report,
                           std::span<const CaseOutcome> outcomes,
                           const std::optional<CalibrationReport>& calibration);

}  // namespace consensus
