#include "consensus/judge.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <limits>
#include <set>
#include <sstream>

#include "consensus/error.hpp"
#include "consensus/metrics.hpp"
#include "json_util.hpp"

namespace consensus {

RubricConfig RubricConfig::defaults() {
  RubricConfig r;
  r.dimensions = {
      {"correctness", "Absence of medical errors.", 10},
      {"conciseness", "Clarity and brevity of expression.", 10},
      {"completeness", "Coverage of all key clinical findings.", 10},
      {"image_descriptions", "Quality of imaging-based descriptions.", 10},
  };
  return r;
}

void RubricConfig::validate() const {
  std::set<std::string> labels;
  for (const auto& d : dimensions) {
    if (!labels.insert(d.label).second) {
      throw Error(ErrorCode::kConfigError, "rubric dimension repeated: " + d.label);
    }
    if (d.scale_max <= 0) throw Error(ErrorCode::kConfigError, "rubric scale must be positive: " + d.label);
  }
  for (auto core : kCoreDimensions) {
    if (!labels.contains(std::string(core))) {
      throw Error(ErrorCode::kConfigError, "rubric lacks dimension " + std::string(core));
    }
  }
}

void to_json(Json& j, const RubricConfig& r) {
  j = Json::object();
  j["template_id"] = r.template_id;
  j["dimensions"] = Json::array();
  for (const auto& d : r.dimensions) {
    j["dimensions"].push_back(
        Json{{"label", d.label}, {"definition", d.definition}, {"scale_max", d.scale_max}});
  }
}

void from_json(const Json& j, RubricConfig& r) {
  r = RubricConfig::defaults();
  r.template_id = detail::optional_field<std::string>(j, "template_id", r.template_id, "rubric");
  if (j.contains("dimensions")) {
    r.dimensions.clear();
    for (const auto& d : j["dimensions"]) {
      r.dimensions.push_back({detail::required<std::string>(d, "label", "rubric dimension"),
                              detail::optional_field<std::string>(d, "definition", "", "rubric dimension"),
                              detail::optional_field<int>(d, "scale_max", 10, "rubric dimension")});
    }
  }
}

std::string render_rubric(const RubricConfig& rubric) {
  std::ostringstream out;
  out << "Score each dimension with an integer:\n";
  for (const auto& d : rubric.dimensions) {
    out << "- " << d.label << " (0-" << d.scale_max << "): " << d.definition << "\n";
  }
  return out.str();
}

JudgeScores parse_judge_response(std::string_view text, const RubricConfig& rubric) {
  const Json body = extract_json_object(text);
  const Json& scores = body.contains("scores") && body["scores"].is_object() ? body["scores"] : body;
  JudgeScores out;
  for (const auto& dim : rubric.dimensions) {
    if (!scores.contains(dim.label)) {
      throw Error(ErrorCode::kParseError, "missing score for " + dim.label);
    }
    const auto& v = scores[dim.label];
    long long raw = 0;
    if (v.is_number_integer()) {
      raw = v.get<long long>();
    } else if (v.is_number_float() && std::floor(v.get<double>()) == v.get<double>()) {
      raw = static_cast<long long>(v.get<double>());
    } else {
      throw Error(ErrorCode::kParseError, "non-integer score for " + dim.label);
    }
    if (raw < 0 || raw > dim.scale_max) {
      throw Error(ErrorCode::kParseError, "score for " + dim.label + " outside 0.." +
                                              std::to_string(dim.scale_max));
    }
    const double normalized = static_cast<double>(raw) / dim.scale_max;
    if (dim.label == "correctness") out.correctness = normalized;
    else if (dim.label == "conciseness") out.conciseness = normalized;
    else if (dim.label == "completeness") out.completeness = normalized;
    else if (dim.label == "image_descriptions") out.image_descriptions = normalized;
    else out.extra_dimensions[dim.label] = normalized;
  }
  if (body.contains("rationale") && body["rationale"].is_object()) {
    for (const auto& [k, v] : body["rationale"].items()) {
      if (v.is_string()) out.rationale[k] = v.get<std::string>();
    }
  }
  return out;
}

JudgeScores judge_report(const RadiologyReport& report, const RadiologyReport& reference,
                         const std::string& case_summary, const RubricConfig& rubric,
                         AgentBackend& backend) {
  rubric.validate();
  AgentPayload payload;
  payload.report = report;
  payload.reference = reference;
  payload.case_summary = case_summary;
  payload.rubric = std::make_shared<const RubricConfig>(rubric);
  return std::get<JudgeScores>(invoke_agent(AgentRole::kEvaluationJudge, payload, backend));
}

void to_json(Json& j, const CalibrationReport& r) {
  j = Json::object();
  j["rho"] = r.rho;
  j["threshold"] = r.threshold;
  j["flagged"] = r.flagged;
  j["pairs"] = Json::array();
  for (const auto& [judge, expert] : r.pairs) {
    j["pairs"].push_back(Json{{"judge", judge}, {"expert", expert}});
  }
}

CalibrationReport calibrate_judge(std::span<const double> judge_scores,
                                  std::span<const double> expert_scores, double threshold) {
  CalibrationReport out;
  out.rho = metrics::spearman_rho(judge_scores, expert_scores);
  out.threshold = threshold;
  out.flagged = out.rho < threshold;
  for (std::size_t i = 0; i < judge_scores.size(); ++i) {
    out.pairs.emplace_back(judge_scores[i], expert_scores[i]);
  }
  return out;
}

double reward(const JudgeScores& s, const std::optional<std::array<double, 4>>& weights) {
  const std::array<double, 4> dims = {s.correctness, s.conciseness, s.completeness,
                                      s.image_descriptions};
  std::array<double, 4> w = weights.value_or(std::array<double, 4>{0.25, 0.25, 0.25, 0.25});
  double sum = 0.0;
  for (double x : w) {
    if (!(x >= 0.0) || !std::isfinite(x)) throw Error(ErrorCode::kWeightError, "negative reward weight");
    sum += x;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw Error(ErrorCode::kWeightError, "reward weights must sum to 1");
  if (!weights) {
    // Same summation order as benchmark_score so the two agree exactly.
    return (dims[0] + dims[1] + dims[2] + dims[3]) / 4.0;
  }
  double total = 0.0;
  for (std::size_t i = 0; i < 4; ++i) total += w[i] * dims[i];
  return total;
}

RlhfResult rlhf_loop(const Json& base_config, std::span<const Json> deltas,
                     std::span<const CaseStudy> cases, int iterations,
                     const CandidateEvaluator& evaluate, int parallelism) {
  if (deltas.empty()) throw Error(ErrorCode::kPrecondition, "rlhf_loop needs at least one candidate");
  if (iterations <= 0) throw Error(ErrorCode::kPrecondition, "iterations must be positive");
  parallelism = std::max(1, parallelism);

  RlhfResult result;
  result.best_config = base_config;
  result.best_reward = -std::numeric_limits<double>::infinity();

  for (int it = 0; it < iterations; ++it) {
    RlhfIteration iter;
    for (const auto& delta : deltas) {
      Json candidate = result.best_config;
      candidate.merge_patch(delta);
      iter.candidates.push_back(std::move(candidate));
    }
    iter.mean_rewards.assign(iter.candidates.size(), 0.0);

    // Bounded batches; the iteration boundary is the synchronization point.
    for (std::size_t start = 0; start < iter.candidates.size();
         start += static_cast<std::size_t>(parallelism)) {
      const auto end = std::min(iter.candidates.size(), start + static_cast<std::size_t>(parallelism));
      std::vector<std::future<double>> pending;
      for (std::size_t c = start; c < end; ++c) {
        pending.push_back(std::async(parallelism > 1 ? std::launch::async : std::launch::deferred,
                                     [&, c] {
                                       const auto rewards = evaluate(iter.candidates[c], cases);
                                       return metrics::mean(rewards);
                                     }));
      }
      for (std::size_t c = start; c < end; ++c) iter.mean_rewards[c] = pending[c - start].get();
    }

    iter.selected = static_cast<std::size_t>(
        std::max_element(iter.mean_rewards.begin(), iter.mean_rewards.end()) -
        iter.mean_rewards.begin());
    if (iter.mean_rewards[iter.selected] > result.best_reward) {
      result.best_reward = iter.mean_rewards[iter.selected];
      result.best_config = iter.candidates[iter.selected];
    }
    result.trajectory.push_back(result.best_reward);
    result.iterations.push_back(std::move(iter));
  }
  return result;
}

}  // namespace consensus
