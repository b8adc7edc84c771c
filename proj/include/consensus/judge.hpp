#pragma once

#include <array>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "consensus/agents.hpp"
#include "consensus/outputs.hpp"
#include "consensus/types.hpp"

namespace consensus {

struct RubricDimension {
  std::string label;
  std::string definition;
  int scale_max = 10;
};

/// Judge rubric. The default carries the four reporting dimensions
/// (correctness, conciseness, completeness, image_descriptions) on a 0-10
/// scale; further dimensions land in JudgeScores::extra_dimensions.
struct RubricConfig {
  std::vector<RubricDimension> dimensions;
  std::string template_id = "EvaluationJudge";

  static RubricConfig defaults();
  /// Throws ConfigError if a core dimension is missing, labels repeat, or a
  /// scale is not positive.
  void validate() const;
};

void to_json(Json& j, const RubricConfig& r);
void from_json(const Json& j, RubricConfig& r);

inline constexpr std::array<std::string_view, 4> kCoreDimensions = {
    "correctness", "conciseness", "completeness", "image_descriptions"};

/// Rubric text inserted at `{{rubric}}` in the judge template.
std::string render_rubric(const RubricConfig& rubric);

/// Parses `{"scores": {<label>: int}, "rationale": {<label>: text}}` (a flat
/// object of scores is accepted too). Every rubric dimension must be an
/// integer in [0, scale_max]; values are divided by scale_max. Throws
/// ParseError.
JudgeScores parse_judge_response(std::string_view text, const RubricConfig& rubric);

/// Scores `report` against the expert `reference` through the judge
/// backend.
JudgeScores judge_report(const RadiologyReport& report, const RadiologyReport& reference,
                         const std::string& case_summary, const RubricConfig& rubric,
                         AgentBackend& backend);

struct CalibrationReport {
  double rho = 0.0;
  double threshold = 0.6;
  bool flagged = false;
  std::vector<std::pair<double, double>> pairs;  // (judge, expert)
};

void to_json(Json& j, const CalibrationReport& r);

inline constexpr double kDefaultCalibrationThreshold = 0.6;

/// Spearman correlation between judge and expert scores; flags rho below
/// `threshold`.
CalibrationReport calibrate_judge(std::span<const double> judge_scores,
                                  std::span<const double> expert_scores,
                                  double threshold = kDefaultCalibrationThreshold);

/// Weighted mean of the four core dimensions (uniform by default). Weights
/// are ordered correctness, conciseness, completeness, image_descriptions.
/// Throws WeightError.
double reward(const JudgeScores& scores,
              const std::optional<std::array<double, 4>>& weights = std::nullopt);

// ---------------------------------------------------------------------------
// Optimization loop

/// Returns one reward per case for a candidate configuration. Failed cases
/// contribute 0. Must be safe to call concurrently.
using CandidateEvaluator =
    std::function<std::vector<double>(const Json& config, std::span<const CaseStudy> cases)>;

struct RlhfIteration {
  std::vector<Json> candidates;
  std::vector<double> mean_rewards;
  std::size_t selected = 0;  // argmax, first on ties
};

struct RlhfResult {
  Json best_config;
  double best_reward = 0.0;
  std::vector<double> trajectory;  // best-so-far mean reward per iteration
  std::vector<RlhfIteration> iterations;
};

/// Each iteration applies every delta (JSON merge patch) to the current
/// best configuration, evaluates all candidates, and adopts the argmax if it
/// improves on the best so far. Candidates are evaluated on up to
/// `parallelism` threads.
RlhfResult rlhf_loop(const Json& base_config, std::span<const Json> deltas,
                     std::span<const CaseStudy> cases, int iterations,
                     const CandidateEvaluator& evaluate, int parallelism = 1);

}  // namespace consensus
