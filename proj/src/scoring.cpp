#include "consensus/scoring.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <sstream>

#include "consensus/error.hpp"
#include "consensus/manifest.hpp"
#include "json_util.hpp"

namespace consensus {

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::string report_text(const RadiologyReport& r) { return r.findings_section + " " + r.impression_section; }

std::optional<std::string> predicted_region(const CaseOutcome& o) {
  const auto* r = o.outputs.get<RegionDetectionOutput>();
  if (!r || r->regions.empty()) return std::nullopt;
  return lower(r->regions.front());
}

std::optional<double> p_abnormal(const DiagnosticAssessment& d) {
  auto it = d.class_probabilities.find("normal");
  if (it == d.class_probabilities.end()) return std::nullopt;
  return 1.0 - it->second;
}

// Findings the report references, resolved against the interpreter output.
std::vector<Finding> referenced_findings(const CaseOutcome& o, const RadiologyReport& report) {
  std::vector<Finding> out;
  const auto* fx = o.outputs.get<FindingsExtraction>();
  if (!fx) return out;
  const std::set<std::string> ids(report.referenced_findings.begin(), report.referenced_findings.end());
  for (const auto& f : with_stable_ids(fx->findings)) {
    if (ids.contains(f.finding_id)) out.push_back(f);
  }
  return out;
}

Json confusion_json(const metrics::ConfusionMatrix& m) {
  return Json{{"classes", m.classes}, {"counts", m.counts}};
}

void mean_into(std::map<std::string, double>& out, const std::string& name,
               const std::vector<double>& values) {
  if (!values.empty()) out[name] = metrics::mean(values);
}

struct Labelled {
  std::vector<std::string> predictions;
  std::vector<std::string> labels;
};

void classify_into(MetricReport& r, const std::string& agent, const Labelled& l) {
  if (l.labels.empty()) return;
  const auto result = metrics::classification_metrics(l.predictions, l.labels);
  r.agents[agent]["accuracy"] = result.accuracy;
  for (const auto& [cls, pr] : result.per_class) {
    r.agents[agent]["f1." + cls] = pr.f1;
    r.agents[agent]["precision." + cls] = pr.precision;
    r.agents[agent]["recall." + cls] = pr.recall;
  }
  r.confusion[agent] = result.confusion;
}

}  // namespace

CaseMetrics score_case(const CaseStudy& c, const CaseOutcome& o, const metrics::ScoreWeights& weights) {
  CaseMetrics m;
  m.case_id = c.case_id;
  m.status = o.trace.status;
  m.failure_reason = o.trace.failure_reason;
  auto& v = m.values;
  v["pipeline.succeeded"] = o.trace.status == CaseStatus::kSucceeded ? 1.0 : 0.0;
  v["pipeline.retries"] = o.trace.total_retries();
  v["segmentation.invoked"] = o.outputs.contains(AgentRole::kSegmentation) ? 1.0 : 0.0;

  if (o.scores) {
    v["judge.correctness"] = o.scores->correctness;
    v["judge.conciseness"] = o.scores->conciseness;
    v["judge.completeness"] = o.scores->completeness;
    v["judge.image_descriptions"] = o.scores->image_descriptions;
    v["judge.benchmark_score"] = metrics::benchmark_score(*o.scores);
  }
  if (!c.ground_truth) return m;
  const auto& gt = *c.ground_truth;

  if (auto region = predicted_region(o); region && !gt.region_labels.empty()) {
    v["region.correct"] = *region == lower(gt.region_labels.front()) ? 1.0 : 0.0;
  }
  if (const auto* mp = o.outputs.get<ModalityPrediction>()) {
    v["modality.correct"] = mp->modality == gt.modality_label ? 1.0 : 0.0;
  }
  if (const auto* fx = o.outputs.get<FindingsExtraction>()) {
    const auto pr = metrics::finding_match(fx->findings, gt.reference_findings);
    v["findings.precision"] = pr.precision;
    v["findings.recall"] = pr.recall;
    v["findings.f1"] = pr.f1;
  }
  if (const auto* seg = o.outputs.get<SegmentationResult>();
      seg && !seg->masks.empty() && !gt.reference_masks.empty() &&
      seg->masks.front().dims == gt.reference_masks.front().dims) {
    const auto s = metrics::segmentation_metrics(seg->masks.front(), gt.reference_masks.front());
    v["segmentation.dice"] = s.dice;
    v["segmentation.iou"] = s.iou;
    v["segmentation.precision"] = s.precision;
    v["segmentation.sensitivity"] = s.sensitivity;
  }
  if (const auto* d = o.outputs.get<DiagnosticAssessment>(); d && !gt.diagnosis_label.empty()) {
    v["diagnosis.correct"] = d->label == gt.diagnosis_label ? 1.0 : 0.0;
    if (auto p = p_abnormal(*d)) v["diagnosis.p_abnormal"] = *p;
  }

  if (!o.report) return m;
  const auto text = report_text(*o.report);
  const auto ref_text = report_text(gt.reference_report);
  v["report.rouge1_f1"] = metrics::rouge(text, ref_text, metrics::RougeVariant::N(1)).f1;
  v["report.rouge2_f1"] = metrics::rouge(text, ref_text, metrics::RougeVariant::N(2)).f1;
  const double rouge_l = metrics::rouge(text, ref_text, metrics::RougeVariant::L()).f1;
  v["report.rougeL_f1"] = rouge_l;
  double readability = 0.0;
  try {
    const double grade = metrics::flesch_kincaid_grade(text);
    v["report.fk_grade"] = grade;
    readability = metrics::readability_score(grade);
  } catch (const Error&) {
  }
  const auto referenced = referenced_findings(o, *o.report);
  const double clinical = metrics::finding_match(referenced, gt.reference_findings).f1;
  v["report.clinical_accuracy"] = clinical;
  v["report.readability"] = readability;

  if (o.scores) {
    const std::map<std::string, double> components = {
        {std::string(metrics::kClinicalAccuracy), clinical},
        {std::string(metrics::kCompleteness), o.scores->completeness},
        {std::string(metrics::kCorrectness), o.scores->correctness},
        {std::string(metrics::kLexicalRougeL), rouge_l},
        {std::string(metrics::kReadability), readability},
    };
    v["report.composite_quality"] = metrics::composite_report_quality(components, weights);
  }
  return m;
}

MetricReport aggregate(std::span<const CaseStudy> cases, std::span<const CaseMetrics> per_case,
                       std::span<const CaseOutcome> outcomes) {
  if (cases.size() != per_case.size() || cases.size() != outcomes.size()) {
    throw Error(ErrorCode::kLengthMismatch, "cases, metrics, and outcomes differ in length");
  }
  MetricReport r;
  r.cases = cases.size();
  r.per_case.assign(per_case.begin(), per_case.end());
  for (const auto& m : per_case) {
    (m.status == CaseStatus::kSucceeded ? r.succeeded : r.failed) += 1;
  }
  if (cases.empty()) return r;

  Labelled region, modality, diagnosis;
  std::vector<double> auc_scores;
  std::vector<int> auc_labels;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    if (!cases[i].ground_truth) continue;
    const auto& gt = *cases[i].ground_truth;
    const auto& o = outcomes[i];
    if (auto p = predicted_region(o); p && !gt.region_labels.empty()) {
      region.predictions.push_back(*p);
      region.labels.push_back(lower(gt.region_labels.front()));
    }
    if (const auto* mp = o.outputs.get<ModalityPrediction>()) {
      modality.predictions.emplace_back(to_string(mp->modality));
      modality.labels.emplace_back(to_string(gt.modality_label));
    }
    if (const auto* d = o.outputs.get<DiagnosticAssessment>(); d && !gt.diagnosis_label.empty()) {
      diagnosis.predictions.push_back(d->label);
      diagnosis.labels.push_back(gt.diagnosis_label);
      if (auto p = p_abnormal(*d)) {
        auc_scores.push_back(*p);
        auc_labels.push_back(gt.diagnosis_label == "normal" ? 0 : 1);
      }
    }
  }
  classify_into(r, "RegionDetection", region);
  classify_into(r, "ModalityClassifier", modality);
  classify_into(r, "DiagnosticClassifier", diagnosis);
  const bool both_classes = std::count(auc_labels.begin(), auc_labels.end(), 1) > 0 &&
                            std::count(auc_labels.begin(), auc_labels.end(), 0) > 0;
  if (both_classes) r.agents["DiagnosticClassifier"]["roc_auc"] = metrics::roc_auc(auc_scores, auc_labels);

  auto collect = [&](const std::string& key) {
    std::vector<double> out;
    for (const auto& m : per_case) {
      if (auto it = m.values.find(key); it != m.values.end()) out.push_back(it->second);
    }
    return out;
  };
  auto& interp = r.agents["ModalityInterpreter"];
  mean_into(interp, "f1", collect("findings.f1"));
  mean_into(interp, "precision", collect("findings.precision"));
  mean_into(interp, "recall", collect("findings.recall"));
  auto& seg = r.agents["Segmentation"];
  seg["invocations"] = metrics::mean(collect("segmentation.invoked")) * static_cast<double>(per_case.size());
  mean_into(seg, "dice", collect("segmentation.dice"));
  mean_into(seg, "iou", collect("segmentation.iou"));
  mean_into(seg, "precision", collect("segmentation.precision"));
  mean_into(seg, "sensitivity", collect("segmentation.sensitivity"));
  auto& composer = r.agents["ReportComposer"];
  mean_into(composer, "fk_grade", collect("report.fk_grade"));
  mean_into(composer, "rouge1_f1", collect("report.rouge1_f1"));
  mean_into(composer, "rouge2_f1", collect("report.rouge2_f1"));
  mean_into(composer, "rougeL_f1", collect("report.rougeL_f1"));
  auto& judge = r.agents["EvaluationJudge"];
  for (auto dim : kCoreDimensions) mean_into(judge, std::string(dim), collect("judge." + std::string(dim)));
  std::erase_if(r.agents, [](const auto& kv) { return kv.second.empty(); });

  r.global["success_rate"] = static_cast<double>(r.succeeded) / static_cast<double>(r.cases);
  r.global["mean_retries"] = metrics::mean(collect("pipeline.retries"));
  mean_into(r.global, "benchmark_score", collect("judge.benchmark_score"));
  mean_into(r.global, "clinical_accuracy", collect("report.clinical_accuracy"));
  mean_into(r.global, "composite_quality", collect("report.composite_quality"));
  return r;
}

Json to_json_value(const MetricReport& r) {
  Json j;
  j["cases"] = r.cases;
  j["succeeded"] = r.succeeded;
  j["failed"] = r.failed;
  j["agents"] = Json::object();
  for (const auto& [agent, values] : r.agents) j["agents"][agent] = values;
  j["confusion"] = Json::object();
  for (const auto& [agent, m] : r.confusion) j["confusion"][agent] = confusion_json(m);
  j["global"] = r.global;
  j["per_case"] = Json::array();
  for (const auto& m : r.per_case) {
    Json c{{"case_id", m.case_id}, {"status", to_string(m.status)}};
    c["failure_reason"] = m.failure_reason ? Json(*m.failure_reason) : Json(nullptr);
    if (auto it = m.values.find("judge.benchmark_score"); it != m.values.end()) c["benchmark_score"] = it->second;
    j["per_case"].push_back(std::move(c));
  }
  return j;
}

std::string scores_csv(const MetricReport& report) {
  std::vector<const CaseMetrics*> rows;
  for (const auto& m : report.per_case) rows.push_back(&m);
  std::stable_sort(rows.begin(), rows.end(), [](auto* a, auto* b) { return a->case_id < b->case_id; });
  std::ostringstream out;
  out << "case_id,metric,value\n";
  for (const auto* m : rows) {
    for (const auto& [metric, value] : m->values) {
      out << m->case_id << "," << metric << "," << format_decimal(value) << "\n";
    }
  }
  return out.str();
}

std::optional<CalibrationReport> calibrate_run(std::span<const CaseStudy> cases,
                                               std::span<const CaseOutcome> outcomes, double threshold) {
  std::vector<double> judge, expert;
  for (std::size_t i = 0; i < cases.size() && i < outcomes.size(); ++i) {
    const auto& gt = cases[i].ground_truth;
    if (!gt || !gt->expert_scores || gt->expert_scores->empty() || !outcomes[i].scores) continue;
    std::vector<double> dims;
    for (auto dim : kCoreDimensions) {
      if (auto it = gt->expert_scores->find(std::string(dim)); it != gt->expert_scores->end()) {
        dims.push_back(it->second);
      }
    }
    if (dims.empty()) continue;
    judge.push_back(reward(*outcomes[i].scores));
    expert.push_back(metrics::mean(dims));
  }
  if (judge.size() < 2) return std::nullopt;
  return calibrate_judge(judge, expert, threshold);
}

CaseOutcome load_case_outcome(const std::filesystem::path& run_dir, const CaseStudy& c) {
  const auto dir = case_dir(run_dir, c.case_id);
  CaseOutcome o;
  if (!std::filesystem::exists(dir / "trace")) {
    o.trace.case_id = c.case_id;
    o.trace.status = CaseStatus::kFailed;
    o.trace.failure_reason = "not_run";
    return o;
  }
  o.trace = detail::read_json_file(dir / "trace").get<PipelineTrace>();
  if (std::filesystem::exists(dir / "report")) {
    o.report = detail::read_json_file(dir / "report").get<RadiologyReport>();
  }
  if (std::filesystem::exists(dir / "judge_scores")) {
    o.scores = detail::read_json_file(dir / "judge_scores").get<JudgeScores>();
  }
  if (std::filesystem::exists(dir / "state")) {
    const auto state = detail::read_json_file(dir / "state");
    for (const auto& out : state.at("outputs")) o.outputs.put(output_from_json(out));
    if (state.contains("reviewer_decision") && !state["reviewer_decision"].is_null()) {
      o.reviewer_decision = state["reviewer_decision"].get<ReviewerDecision>();
    }
  }
  return o;
}

void to_json(Json& j, const RunSettings& s) {
  j = Json{{"weights", s.weights.weights}, {"calibration_threshold", s.calibration_threshold}};
}

void from_json(const Json& j, RunSettings& s) {
  s = RunSettings{};
  if (j.contains("weights")) s.weights.weights = j["weights"].get<std::map<std::string, double>>();
  s.calibration_threshold = detail::optional_field<double>(j, "calibration_threshold",
                                                           s.calibration_threshold, "settings");
  s.weights.validate();
}

LoadedRun load_run(const std::filesystem::path& run_dir) {
  if (!std::filesystem::exists(run_dir / "cases.json")) {
    throw Error(ErrorCode::kManifestError, "no cases.json in " + run_dir.string());
  }
  LoadedRun run;
  run.cases = parse_case_manifest(detail::read_file(run_dir / "cases.json"), run_dir);
  if (std::filesystem::exists(run_dir / "settings")) {
    run.settings = detail::read_json_file(run_dir / "settings").get<RunSettings>();
  }
  for (const auto& c : run.cases) run.outcomes.push_back(load_case_outcome(run_dir, c));
  return run;
}

MetricReport score_run(const LoadedRun& run) {
  std::vector<CaseMetrics> per_case;
  for (std::size_t i = 0; i < run.cases.size(); ++i) {
    per_case.push_back(score_case(run.cases[i], run.outcomes[i], run.settings.weights));
  }
  return aggregate(run.cases, per_case, run.outcomes);
}

MetricReport score_run(const std::filesystem::path& run_dir) { return score_run(load_run(run_dir)); }

void write_scoring_outputs(const std::filesystem::path& run_dir, const MetricReport& report,
                           std::span<const CaseOutcome> outcomes,
                           const std::optional<CalibrationReport>& calibration) {
  std::filesystem::create_directories(run_dir);
  detail::write_file_atomic(run_dir / "scores.csv", scores_csv(report));
  detail::write_json_file(run_dir / "summary.json", to_json_value(report));
  if (!outcomes.empty()) {
    std::vector<PipelineTrace> traces;
    for (const auto& o : outcomes) traces.push_back(o.trace);
    const auto e = metrics::pipeline_efficiency(traces);
    detail::write_json_file(run_dir / "efficiency",
                            Json{{"success_rate", e.success_rate},
                                 {"latency_mean_ms", e.latency_mean_ms},
                                 {"latency_p50_ms", e.latency_p50_ms},
                                 {"latency_p95_ms", e.latency_p95_ms},
                                 {"mean_retries", e.mean_retries}});
  }
  if (calibration) detail::write_json_file(run_dir / "calibration", *calibration);
}

}  // namespace consensus
