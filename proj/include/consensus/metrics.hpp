#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "consensus/outputs.hpp"
#include "consensus/types.hpp"

namespace consensus::metrics {

// ---------------------------------------------------------------------------
// Classification

/// Counts indexed (actual, predicted). Classes are the sorted union of all
/// labels and predictions.
struct ConfusionMatrix {
  std::vector<std::string> classes;
  std::vector<std::vector<std::size_t>> counts;

  std::size_t total() const;
  std::size_t trace() const;
  std::size_t at(std::string_view actual, std::string_view predicted) const;
};

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct ClassificationResult {
  double accuracy = 0.0;
  ConfusionMatrix confusion;
  std::map<std::string, PrecisionRecall> per_class;
};

/// Throws EmptyInput or LengthMismatch. Per-class scores are 0 wherever
/// their denominator is 0.
ClassificationResult classification_metrics(std::span<const std::string> predictions,
                                            std::span<const std::string> labels);

/// Area under the ROC curve as the Mann-Whitney statistic over average
/// ranks; tied (positive, negative) pairs count one half. Throws
/// LengthMismatch, EmptyInput, or OneClassOnly.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

// ---------------------------------------------------------------------------
// Segmentation

struct OverlapScores {
  double dice = 0.0;
  double iou = 0.0;
  double sensitivity = 0.0;
  double precision = 0.0;
};

/// `predicted` is A, `reference` is B. Both empty scores 1.0 on every
/// field; any other zero denominator scores 0. Throws DimMismatch.
OverlapScores segmentation_metrics(const SegmentationMask& predicted,
                                   const SegmentationMask& reference);

// ---------------------------------------------------------------------------
// Text

/// Lowercased maximal runs of ASCII alphanumerics (bytes >= 0x80 are kept
/// inside tokens).
std::vector<std::string> tokenize(std::string_view text);

struct RougeVariant {
  enum class Kind { kN, kL } kind = Kind::kN;
  int n = 1;
  static RougeVariant N(int n) { return {Kind::kN, n}; }
  static RougeVariant L() { return {Kind::kL, 0}; }
};

PrecisionRecall rouge(std::string_view candidate, std::string_view reference,
                      RougeVariant variant);
PrecisionRecall rouge_tokens(std::span<const std::string> candidate,
                             std::span<const std::string> reference,
                             RougeVariant variant);

struct TextCounts {
  std::size_t sentences = 0;
  std::size_t words = 0;
  std::size_t syllables = 0;
};

TextCounts count_text(std::string_view text);
std::size_t count_syllables(std::string_view word);

/// 0.39 * words/sentences + 11.8 * syllables/words - 15.59. Throws EmptyText.
double flesch_kincaid_grade(std::string_view text);

// ---------------------------------------------------------------------------
// Correlation

/// Fractional ranks starting at 1; ties share their average rank.
std::vector<double> fractional_ranks(std::span<const double> values);

/// Pearson correlation of fractional ranks. Throws LengthMismatch or
/// DegenerateInput (fewer than two items, or a constant series).
double spearman_rho(std::span<const double> xs, std::span<const double> ys);

// ---------------------------------------------------------------------------
// Review and planted errors

/// A planted or flagged report error. Identity is (type, location).
struct ErrorDescriptor {
  std::string type;
  std::string location;
  std::string original;
  std::string perturbed;

  bool operator<(const ErrorDescriptor& o) const {
    return std::tie(type, location) < std::tie(o.type, o.location);
  }
  bool operator==(const ErrorDescriptor& o) const {
    return type == o.type && location == o.location;
  }
};

void to_json(Json& j, const ErrorDescriptor& d);
void from_json(const Json& j, ErrorDescriptor& d);

struct DetectionScores {
  double precision = 0.0;
  double recall = 0.0;
};

/// Both sets empty scores (1, 1); otherwise an empty denominator scores 0.
DetectionScores planted_error_eval(std::span<const ErrorDescriptor> planted,
                                   std::span<const ErrorDescriptor> flagged);

/// mean(after) - mean(before) over the same case set. Throws LengthMismatch
/// or EmptyInput.
double improvement(std::span<const double> before, std::span<const double> after);

// ---------------------------------------------------------------------------
// Global scores

inline constexpr std::string_view kClinicalAccuracy = "clinical_accuracy";
inline constexpr std::string_view kCompleteness = "completeness";
inline constexpr std::string_view kCorrectness = "correctness";
inline constexpr std::string_view kLexicalRougeL = "lexical_rouge_l";
inline constexpr std::string_view kReadability = "readability";

struct ScoreWeights {
  std::map<std::string, double> weights;

  /// clinical_accuracy 0.4, completeness 0.2, correctness 0.2,
  /// lexical_rouge_l 0.1, readability 0.1.
  static ScoreWeights defaults();
  /// Throws WeightError on unknown labels, negative weights, a sum away
  /// from 1 by more than 1e-9, or clinical_accuracy <= lexical_rouge_l.
  void validate() const;
};

double composite_report_quality(const std::map<std::string, double>& components,
                                const ScoreWeights& weights);

/// 100 * mean of the four judge dimensions. NaN marks a missing dimension
/// and throws MissingDimension.
double benchmark_score(const JudgeScores& scores);

/// Finding-level F1 over (location, severity) multisets. Both empty scores 1.
PrecisionRecall finding_match(std::span<const Finding> predicted,
                              std::span<const Finding> reference);

/// Maps a reading grade onto [0, 1]: clamp(1 - grade / 20).
double readability_score(double grade);

enum class Vote { kA, kB, kTie };
Vote vote_from_string(std::string_view s);
std::string_view to_string(Vote v);

/// (#A + 0.5 * #tie) / total. Throws EmptyInput.
double preference_rate(std::span<const Vote> votes);

struct EfficiencyReport {
  double success_rate = 0.0;
  double latency_mean_ms = 0.0;
  double latency_p50_ms = 0.0;
  double latency_p95_ms = 0.0;
  double mean_retries = 0.0;
};

/// Nearest-rank percentile: the value at 1-based rank ceil(p/100 * n) of
/// the sorted sample. Throws EmptyInput.
double nearest_rank_percentile(std::span<const double> values, double p);

EfficiencyReport pipeline_efficiency(std::span<const PipelineTrace> traces);

double mean(std::span<const double> values);
/// Population standard deviation (divides by n).
double population_stddev(std::span<const double> values);

}  // namespace consensus::metrics
