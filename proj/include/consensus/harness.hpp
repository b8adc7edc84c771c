#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "consensus/config.hpp"
#include "consensus/judge.hpp"
#include "consensus/metrics.hpp"
#include "consensus/scoring.hpp"

namespace consensus {

// ---------------------------------------------------------------------------
// Seeded randomness

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes);

/// splitmix64 stream for one purpose. The initial state is
/// `seed ^ fnv1a64(purpose)`; each draw adds 0x9E3779B97F4A7C15 to the state
/// and returns the splitmix64 finalizer of it.
class SeedStream {
 public:
  SeedStream(std::uint64_t seed, std::string_view purpose);

  std::uint64_t next();
  /// (next() >> 11) * 2^-53, in [0, 1).
  double uniform();
  /// next() % n. Throws Precondition when n is 0.
  std::size_t below(std::size_t n);

 private:
  std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// Benchmark runs

struct RunSummary {
  std::filesystem::path run_dir;
  MetricReport report;
  std::vector<CaseOutcome> outcomes;
  std::optional<CalibrationReport> calibration;
  /// 0 when every case succeeded, 1 otherwise.
  int exit_code = 0;
};

/// Executes every manifest case and writes the run directory
/// (`<run_root>/<run_id>/`). Every case is planned before any executes, so
/// configuration errors surface first. A fresh run refuses an existing run
/// directory; `resume` continues from persisted case state instead.
/// Throws ConfigError, ManifestError, SchemaError, DuplicateCaseId.
RunSummary run_benchmark(const BenchmarkConfig& config, bool resume = false);

// ---------------------------------------------------------------------------
// Planted errors

enum class ErrorType { kNegationFlip, kLateralitySwap, kNumericPerturbation, kOmission, kHallucinatedFinding };
inline constexpr std::array<ErrorType, 5> kAllErrorTypes = {
    ErrorType::kNegationFlip, ErrorType::kLateralitySwap, ErrorType::kNumericPerturbation,
    ErrorType::kOmission, ErrorType::kHallucinatedFinding};

std::string_view to_string(ErrorType t);
ErrorType error_type_from_string(std::string_view s);

/// Sentences of a report section: text up to and including `.`, `!` or `?`
/// followed by whitespace or the end, trimmed. A trailing unterminated
/// fragment is a sentence too.
std::vector<std::string> split_sentences(std::string_view section);

struct PlantedReport {
  RadiologyReport report;
  std::vector<metrics::ErrorDescriptor> planted;
};

/// Plants exactly `count` errors, cycling through `types` in order. Each
/// error occupies a distinct sentence of the original report, identified
/// by the location key `findings#<i>` or `impression#<i>` (0-based index in
/// the original section); a hallucinated sentence is keyed by the sentence
/// it follows. Numeric perturbations multiply the first number in the
/// sentence by a factor drawn from [0.5, 0.95) or (1.05, 1.5], round to one
/// decimal, and update the matching cited measurement. Omissions always
/// leave at least one findings sentence. Throws InsufficientMaterial(type).
PlantedReport plant_errors(const RadiologyReport& report, std::span<const ErrorType> types, int count,
                           std::uint64_t seed);

/// Reviewer that diffs the perturbed report against the original sentence
/// by sentence and classifies every difference.
std::vector<metrics::ErrorDescriptor> oracle_review(const RadiologyReport& original,
                                                    const RadiologyReport& perturbed);

// ---------------------------------------------------------------------------
// Robustness and optimization

struct RobustnessVariant {
  std::string name;
  std::optional<ClinicalContext> context;  // replaces the case context
  Json config_patch;                       // merge patch on the config document
};

struct RobustnessResult {
  std::vector<std::string> names;
  std::vector<std::optional<double>> scores;  // composite quality; empty if the case failed
  std::vector<std::optional<std::string>> failures;
  double stddev = 0.0;  // population, over the present scores
};

/// Runs `c` once per variant, in memory, with the review gate set to
/// auto_approve. Throws Precondition for fewer than two variants or a case
/// without ground truth, and CaseFailed if no variant produced a score.
RobustnessResult robustness_eval(const CaseStudy& c, std::span<const RobustnessVariant> variants,
                                 const BenchmarkConfig& config);

/// Evaluator for rlhf_loop: candidate configs are benchmark config
/// documents resolved against `base_dir`; each case's reward is the judge
/// reward of its final report, 0 when the case fails. Runs in memory with
/// the review gate set to auto_approve.
CandidateEvaluator benchmark_evaluator(std::filesystem::path base_dir);

}  // namespace consensus
