#include "consensus/agents.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <sstream>

#include "consensus/error.hpp"
#include "consensus/judge.hpp"
#include "consensus/manifest.hpp"
#include "consensus/metrics.hpp"
#include "json_util.hpp"

namespace consensus {

namespace {

void require(bool present, const char* name) {
  if (!present) throw Error(ErrorCode::kMissingInput, name);
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::string upper(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

std::string header_value(const ImagingStudy& study, std::initializer_list<const char*> keys) {
  for (const char* key : keys) {
    for (const auto& [k, v] : study.declared_header) {
      if (lower(k) == lower(key)) return v;
    }
  }
  return {};
}

std::optional<Modality> modality_from_hint(const std::string& hint) {
  const auto h = upper(hint);
  if (h == "MR" || h == "MRI") return Modality::kMRI;
  if (h == "CT") return Modality::kCT;
  if (h == "CR" || h == "DX" || h == "XR" || h == "XRAY" || h == "X-RAY") return Modality::kXRay;
  if (h == "US") return Modality::kUS;
  return std::nullopt;
}

std::string sentence_case(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

std::string with_period(std::string s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
  if (!s.empty() && s.back() != '.' && s.back() != '!' && s.back() != '?') s.push_back('.');
  return s;
}

std::string render_measurement(const Measurement& m) {
  std::string out = format_decimal(m.value);
  if (!m.unit.empty()) out += " " + m.unit;
  return out;
}

std::string json_or_null(const auto& value) {
  if (!value) return "null";
  return Json(*value).dump();
}

// Template composition used by the mock composer.
RadiologyReport compose_from_outputs(const AgentPayload& p) {
  RadiologyReport r;
  const auto findings = with_stable_ids(p.findings->findings);
  std::vector<std::string> sentences;
  for (const auto& f : findings) {
    std::string s = f.description.empty() ? "Observation" : f.description;
    if (!f.location.empty()) s += " in the " + f.location;
    if (!f.measurements.empty()) {
      s += ", measuring " + render_measurement(f.measurements.front());
    }
    sentences.push_back(with_period(sentence_case(s)));
    r.referenced_findings.push_back(f.finding_id);
  }
  if (p.segmentation) {
    for (const auto& m : p.segmentation->measurements) {
      sentences.push_back("Segmented " + m.name + " measures " + render_measurement(m) + ".");
      r.measurements_cited.push_back(m);
    }
  }
  if (sentences.empty()) sentences.push_back("No abnormality is identified.");
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    if (i) r.findings_section += " ";
    r.findings_section += sentences[i];
  }

  std::vector<std::string> impression;
  if (p.diagnosis && p.diagnosis->label == "normal") {
    impression.push_back("No acute abnormality.");
  } else if (p.diagnosis && !p.diagnosis->label.empty()) {
    impression.push_back(with_period(sentence_case("Findings consistent with " + p.diagnosis->label)));
    if (!p.diagnosis->recommendation.empty()) {
      impression.push_back(with_period(sentence_case(p.diagnosis->recommendation)));
    }
  } else {
    bool abnormal = std::any_of(findings.begin(), findings.end(), is_abnormal);
    impression.push_back(abnormal ? "Clinically significant abnormality as described."
                                  : "No acute abnormality.");
  }
  for (std::size_t i = 0; i < impression.size(); ++i) {
    if (i) r.impression_section += " ";
    r.impression_section += impression[i];
  }
  return r;
}

JudgeScores rule_judge(const AgentPayload& p) {
  const auto& rubric = *p.rubric;
  const auto& report = *p.report;
  const auto& ref = *p.reference;
  const std::string text = report.findings_section + " " + report.impression_section;
  const std::string ref_text = ref.findings_section + " " + ref.impression_section;
  const auto uni = metrics::rouge(text, ref_text, metrics::RougeVariant::N(1));
  const auto lcs = metrics::rouge(report.findings_section, ref.findings_section,
                                  metrics::RougeVariant::L());
  const double words = static_cast<double>(metrics::tokenize(text).size());
  const double ref_words = static_cast<double>(metrics::tokenize(ref_text).size());
  const double brevity = words > 0 ? std::min(1.0, ref_words / words) : 0.0;

  std::map<std::string, double> raw = {{"correctness", uni.precision},
                                       {"conciseness", brevity},
                                       {"completeness", uni.recall},
                                       {"image_descriptions", lcs.f1}};
  JudgeScores s;
  for (const auto& dim : rubric.dimensions) {
    const double fraction = raw.contains(dim.label) ? raw[dim.label] : uni.f1;
    const double score = std::round(fraction * dim.scale_max) / dim.scale_max;
    if (dim.label == "correctness") s.correctness = score;
    else if (dim.label == "conciseness") s.conciseness = score;
    else if (dim.label == "completeness") s.completeness = score;
    else if (dim.label == "image_descriptions") s.image_descriptions = score;
    else s.extra_dimensions[dim.label] = score;
    s.rationale[dim.label] = "rule-based lexical agreement with the reference";
  }
  return s;
}

const std::map<AgentRole, std::string>& default_templates() {
  static const std::map<AgentRole, std::string> kTemplates = {
      {AgentRole::kRegionDetection,
       "Identify the anatomical region(s) covered by the imaging study and their spatial "
       "orientation.\n"
       "Reply with JSON: {\"regions\": [lowercase anatomical labels], \"orientation\": "
       "\"axial|coronal|sagittal|other\", \"confidence\": number in [0,1]}\n"
       "### STUDY\n{{study}}\n"},
      {AgentRole::kModalityClassifier,
       "Determine the imaging modality of the study and, when applicable, its subtype.\n"
       "Reply with JSON: {\"modality\": \"XRay|CT|MRI|US|Other\", \"subtype\": text, "
       "\"confidence\": number in [0,1]}\n"
       "### STUDY\n{{study}}\n"},
      {AgentRole::kModalityInterpreter,
       "You interpret {{modality_label}} studies of the {{region_label}}. Extract salient "
       "observations, abnormalities, quantitative measurements, and descriptive attributes.\n"
       "Reply with JSON: {\"findings\": [{\"finding_id\": text, \"description\": text, "
       "\"location\": text, \"attributes\": {key: text}, \"measurements\": [{\"name\": text, "
       "\"value\": number, \"unit\": text}], \"severity\": "
       "\"normal|minor|significant|critical\", \"confidence\": number in [0,1]}]}\n"
       "### STUDY\n{{study}}\n### REGION\n{{region}}\n### MODALITY\n{{modality}}\n"},
      {AgentRole::kContextProcessor,
       "Parse the clinical metadata into structured fields and summarize prior reports.\n"
       "Reply with JSON: {\"structured_fields\": {key: text}, \"summary\": text}\n"
       "### CONTEXT\n{{context}}\n"},
      {AgentRole::kSegmentation,
       "Delineate and quantify the abnormalities listed below.\n"
       "Reply with JSON: {\"masks\": [], \"boxes\": [[x0,y0,z0,x1,y1,z1]], \"measurements\": "
       "[{\"name\": text, \"value\": number, \"unit\": text}]}\n"
       "### STUDY\n{{study}}\n### FINDINGS\n{{findings}}\n"},
      {AgentRole::kDiagnosticClassifier,
       "Synthesize the imaging findings into a diagnostic assessment and a preliminary "
       "recommendation.\n"
       "Reply with JSON: {\"label\": text, \"class_probabilities\": {label: number} summing to "
       "1, \"recommendation\": text}\n"
       "### FINDINGS\n{{findings}}\n### SEGMENTATION\n{{segmentation}}\n"},
      {AgentRole::kReportComposer,
       "Compose a radiology report with a findings section and an impression section from the "
       "structured inputs. Reference findings by id and cite measurements exactly.\n"
       "Reply with JSON: {\"findings_section\": text, \"impression_section\": text, "
       "\"referenced_findings\": [finding ids], \"measurements_cited\": [{\"name\": text, "
       "\"value\": number, \"unit\": text}]}\n"
       "### COMPOSER INPUT\n{{composer_input}}\n### FINDINGS\n{{findings}}\n"},
      {AgentRole::kQualityAssurance,
       "Re-examine the report against the upstream outputs. List unsupported findings, "
       "omissions of clinically relevant findings, and measurement mismatches.\n"
       "Reply with JSON: {\"inconsistencies\": [{\"kind\": "
       "\"unsupported_finding|omission|numeric_mismatch\", \"subject\": text, \"detail\": "
       "text}], \"decision\": \"approved|revised|rejected|pending\", \"revised_report\": null}\n"
       "### REPORT\n{{report}}\n### FINDINGS\n{{findings}}\n### SEGMENTATION\n{{segmentation}}\n"},
      {AgentRole::kEvaluationJudge,
       "Grade the candidate radiology report against the expert reference report.\n"
       "{{rubric}}\n"
       "Reply with JSON: {\"scores\": {dimension: integer}, \"rationale\": {dimension: text}}\n"
       "### CASE SUMMARY\n{{case_summary}}\n### REFERENCE\n{{reference}}\n### REPORT\n{{report}}\n"},
  };
  return kTemplates;
}

}  // namespace

bool is_abnormal(const Finding& f) {
  return f.severity == Severity::kSignificant || f.severity == Severity::kCritical;
}

std::vector<Finding> with_stable_ids(const std::vector<Finding>& findings) {
  std::vector<Finding> out = findings;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i].finding_id.empty()) out[i].finding_id = "F" + std::to_string(i + 1);
  }
  return out;
}

AgentOutput invoke_agent(AgentRole role, const AgentPayload& p, AgentBackend& backend) {
  switch (role) {
    case AgentRole::kRegionDetection:
      require(!p.studies.empty() || p.study.has_value(), "studies");
      break;
    case AgentRole::kModalityClassifier:
      require(p.study.has_value(), "study");
      break;
    case AgentRole::kModalityInterpreter:
      require(p.study.has_value(), "study");
      require(p.region.has_value(), "region");
      require(p.modality.has_value(), "modality");
      break;
    case AgentRole::kContextProcessor:
      require(p.context.has_value(), "context");
      break;
    case AgentRole::kSegmentation:
      require(p.study.has_value(), "study");
      require(p.findings.has_value(), "findings");
      break;
    case AgentRole::kDiagnosticClassifier:
      require(p.findings.has_value(), "findings");
      break;
    case AgentRole::kReportComposer:
      require(p.findings.has_value(), "findings");
      require(p.composer_input.has_value(), "composer_input");
      break;
    case AgentRole::kQualityAssurance:
      require(p.report.has_value(), "report");
      require(p.findings.has_value(), "findings");
      break;
    case AgentRole::kEvaluationJudge:
      require(p.report.has_value(), "report");
      require(p.reference.has_value(), "reference");
      require(p.rubric != nullptr, "rubric");
      break;
    case AgentRole::kOrchestrator:
      throw Error(ErrorCode::kConfigError, "Orchestrator is not an invocable agent");
  }

  AgentOutput out;
  try {
    out = backend.run(role, p);
  } catch (const Error& e) {
    switch (e.code()) {
      case ErrorCode::kEndpointError:
      case ErrorCode::kReplayMiss:
      case ErrorCode::kRateLimitTimeout:
        throw Error(ErrorCode::kBackendError,
                    std::string(to_string(e.code())) + ": " + e.detail());
      default:
        throw;
    }
  }
  if (role_of(out) != role) {
    throw Error(ErrorCode::kBackendError, backend.id() + " returned " +
                                              std::string(to_string(role_of(out))) + " for " +
                                              std::string(to_string(role)));
  }
  return out;
}

std::string select_interpreter(const std::string& region, Modality modality,
                               const InterpreterRegistry& registry) {
  if (auto it = registry.entries.find({region, modality}); it != registry.entries.end()) {
    return it->second;
  }
  if (registry.generalist) return *registry.generalist;
  throw Error(ErrorCode::kNoInterpreter, region + "/" + std::string(to_string(modality)));
}

std::string assemble_composer_input(const OutputSet& outputs, const ClinicalContext& context) {
  const auto* extraction = outputs.get<FindingsExtraction>();
  if (!extraction) throw Error(ErrorCode::kMissingInput, "findings");

  std::ostringstream out;
  out << "FINDINGS\n";
  const auto findings = with_stable_ids(extraction->findings);
  if (findings.empty()) out << "(none)\n";
  for (const auto& f : findings) {
    out << "[" << f.finding_id << "] location: " << f.location
        << " | severity: " << to_string(f.severity)
        << " | confidence: " << format_decimal(f.confidence) << "\n";
    out << "  description: " << f.description << "\n";
    for (const auto& [k, v] : f.attributes) out << "  attribute " << k << ": " << v << "\n";
    for (const auto& m : f.measurements) {
      out << "  measurement " << m.name << ": " << render_measurement(m) << "\n";
    }
  }

  out << "MEASUREMENTS\n";
  const auto* seg = outputs.get<SegmentationResult>();
  if (!seg || seg->measurements.empty()) out << "(none)\n";
  if (seg) {
    for (const auto& m : seg->measurements) out << m.name << ": " << render_measurement(m) << "\n";
  }

  out << "DIAGNOSIS\n";
  if (const auto* dx = outputs.get<DiagnosticAssessment>()) {
    out << "label: " << dx->label << "\n";
    for (const auto& [label, p] : dx->class_probabilities) {
      out << "probability " << label << ": " << format_decimal(p) << "\n";
    }
    if (!dx->recommendation.empty()) out << "recommendation: " << dx->recommendation << "\n";
  } else {
    out << "(none)\n";
  }

  out << "CONTEXT\n";
  const auto* summary = outputs.get<ContextSummary>();
  if (context.empty() && !summary) out << "(none)\n";
  for (const auto& [k, v] : context.demographics) out << "demographic " << k << ": " << v << "\n";
  if (!context.indication.empty()) out << "indication: " << context.indication << "\n";
  if (!context.history.empty()) out << "history: " << context.history << "\n";
  for (const auto& prior : context.prior_findings) out << "prior: " << prior << "\n";
  if (summary && !summary->summary.empty()) out << "summary: " << summary->summary << "\n";
  return out.str();
}

std::vector<Inconsistency> qa_cross_check(const RadiologyReport& report, const OutputSet& prior,
                                          double tolerance) {
  std::vector<Inconsistency> out;
  std::vector<Finding> findings;
  if (const auto* extraction = prior.get<FindingsExtraction>()) {
    findings = with_stable_ids(extraction->findings);
  }
  std::set<std::string> known;
  for (const auto& f : findings) known.insert(f.finding_id);
  const std::set<std::string> referenced(report.referenced_findings.begin(),
                                         report.referenced_findings.end());

  for (const auto& id : report.referenced_findings) {
    if (!known.contains(id)) {
      out.push_back({InconsistencyKind::kUnsupportedFinding, id,
                     "referenced finding absent from extraction"});
    }
  }
  for (const auto& f : findings) {
    if (is_abnormal(f) && !referenced.contains(f.finding_id)) {
      out.push_back({InconsistencyKind::kOmission, f.finding_id,
                     std::string(to_string(f.severity)) + " finding not referenced"});
    }
  }
  if (const auto* seg = prior.get<SegmentationResult>()) {
    for (const auto& cited : report.measurements_cited) {
      for (const auto& measured : seg->measurements) {
        if (measured.name != cited.name || lower(measured.unit) != lower(cited.unit)) continue;
        const double rel = measured.value == 0.0
                               ? (cited.value == 0.0 ? 0.0 : INFINITY)
                               : std::abs(cited.value - measured.value) / measured.value;
        if (rel > tolerance) {
          out.push_back({InconsistencyKind::kNumericMismatch, cited.name,
                         "cited " + render_measurement(cited) + " vs measured " +
                             render_measurement(measured)});
        }
        break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// MockBackend

MockBackend::MockBackend(Options options) : options_(std::move(options)) {}

std::shared_ptr<MockBackend> MockBackend::from_fixture_file(const std::filesystem::path& path,
                                                            Options options) {
  options.fixtures = detail::read_json_file(path);
  options.fixture_dir = path.parent_path();
  return std::make_shared<MockBackend>(std::move(options));
}

std::optional<Json> MockBackend::fixture(const std::string& case_id, AgentRole role) const {
  const auto& f = options_.fixtures;
  if (!f.is_object() || !f.contains(case_id)) return std::nullopt;
  const auto& entry = f[case_id];
  const auto key = std::string(to_string(role));
  if (!entry.is_object() || !entry.contains(key)) return std::nullopt;
  Json body = entry[key];
  if (role == AgentRole::kSegmentation && body.contains("masks")) {
    for (auto& m : body["masks"]) {
      if (m.is_string()) {
        m = read_mask_file(options_.fixture_dir / m.get<std::string>());
      }
    }
  }
  return body;
}

AgentOutput MockBackend::run(AgentRole role, const AgentPayload& p) {
  if (auto body = fixture(p.case_id, role)) {
    if (role == AgentRole::kEvaluationJudge) {
      return parse_judge_response(body->dump(), *p.rubric);
    }
    auto out = output_from_json(role, *body);
    if (auto* fx = std::get_if<FindingsExtraction>(&out); fx && p.interpreter_key) {
      fx->region = p.interpreter_key->first;
      fx->modality = p.interpreter_key->second;
      fx->interpreter_id = p.interpreter_id;
    }
    return out;
  }

  switch (role) {
    case AgentRole::kRegionDetection: {
      const auto& study = p.study ? *p.study : p.studies.front();
      RegionDetectionOutput out;
      const auto part = header_value(study, {"body_part", "BodyPartExamined", "region"});
      out.regions = {part.empty() ? "unknown" : lower(part)};
      const auto orientation = header_value(study, {"orientation"});
      out.orientation = orientation.empty() ? "axial" : lower(orientation);
      out.confidence = part.empty() ? 0.0 : 1.0;
      return out;
    }
    case AgentRole::kModalityClassifier: {
      ModalityPrediction out;
      const auto hint = modality_from_hint(header_value(*p.study, {"modality"}));
      out.modality = hint.value_or(Modality::kOther);
      out.subtype = header_value(*p.study, {"subtype", "sequence_type"});
      out.confidence = hint ? 1.0 : 0.0;
      return out;
    }
    case AgentRole::kModalityInterpreter: {
      FindingsExtraction out;
      out.region = p.interpreter_key ? p.interpreter_key->first : p.region->regions.front();
      out.modality = p.interpreter_key ? p.interpreter_key->second : p.modality->modality;
      out.interpreter_id = p.interpreter_id;
      return out;
    }
    case AgentRole::kContextProcessor: {
      ContextSummary out;
      const auto& c = *p.context;
      out.structured_fields = c.demographics;
      if (!c.indication.empty()) out.structured_fields["indication"] = c.indication;
      if (!c.history.empty()) out.structured_fields["history"] = c.history;
      std::vector<std::string> parts;
      if (!c.indication.empty()) parts.push_back("Indication: " + with_period(c.indication));
      if (!c.history.empty()) parts.push_back("History: " + with_period(c.history));
      for (const auto& prior : c.prior_findings) parts.push_back("Prior: " + with_period(prior));
      for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out.summary += " ";
        out.summary += parts[i];
      }
      return out;
    }
    case AgentRole::kSegmentation:
      return SegmentationResult{};
    case AgentRole::kDiagnosticClassifier: {
      DiagnosticAssessment out;
      double p_abnormal = 0.0;
      for (const auto& f : p.findings->findings) {
        if (is_abnormal(f)) p_abnormal = std::max(p_abnormal, f.confidence);
      }
      out.label = p_abnormal >= 0.5 ? "abnormal" : "normal";
      out.class_probabilities = {{"abnormal", p_abnormal}, {"normal", 1.0 - p_abnormal}};
      return out;
    }
    case AgentRole::kReportComposer:
      return ComposedReport{compose_from_outputs(p)};
    case AgentRole::kQualityAssurance: {
      QAReview out;
      OutputSet prior;
      prior.put(*p.findings);
      if (p.segmentation) prior.put(*p.segmentation);
      out.inconsistencies = qa_cross_check(*p.report, prior, options_.qa_tolerance);
      out.decision = options_.qa_decision == "auto" && out.inconsistencies.empty()
                         ? ReviewDecision::kApproved
                         : ReviewDecision::kPending;
      return out;
    }
    case AgentRole::kEvaluationJudge:
      return rule_judge(p);
    case AgentRole::kOrchestrator:
      break;
  }
  throw Error(ErrorCode::kConfigError, "Orchestrator is not an invocable agent");
}

// ---------------------------------------------------------------------------
// Prompts

PromptLibrary::PromptLibrary() {
  for (const auto& [role, text] : default_templates()) templates_[std::string(to_string(role))] = text;
}

void PromptLibrary::load_directory(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw Error(ErrorCode::kConfigError, "template directory not found: " + dir.string());
  }
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() == ".txt") {
      templates_[entry.path().stem().string()] = detail::read_file(entry.path());
    }
  }
}

const std::string& PromptLibrary::get(const std::string& name) const {
  auto it = templates_.find(name);
  if (it == templates_.end()) throw Error(ErrorCode::kConfigError, "unknown prompt template " + name);
  return it->second;
}

std::string PromptLibrary::render(const std::string& tmpl,
                                  const std::map<std::string, std::string>& vars) {
  std::string out;
  std::size_t pos = 0;
  while (pos < tmpl.size()) {
    auto open = tmpl.find("{{", pos);
    if (open == std::string::npos) break;
    auto close = tmpl.find("}}", open + 2);
    if (close == std::string::npos) break;
    out.append(tmpl, pos, open - pos);
    const auto name = tmpl.substr(open + 2, close - open - 2);
    if (auto it = vars.find(name); it != vars.end()) out += it->second;
    pos = close + 2;
  }
  out.append(tmpl, pos, std::string::npos);
  return out;
}

std::map<std::string, std::string> prompt_variables(AgentRole role, const AgentPayload& p) {
  std::map<std::string, std::string> v;
  v["role"] = std::string(to_string(role));
  v["case_id"] = p.case_id;
  v["study"] = json_or_null(p.study ? p.study : (p.studies.empty() ? std::nullopt
                                                                   : std::optional(p.studies.front())));
  v["studies"] = Json(p.studies).dump();
  v["context"] = json_or_null(p.context);
  v["region"] = json_or_null(p.region);
  v["modality"] = json_or_null(p.modality);
  v["region_label"] = p.interpreter_key ? p.interpreter_key->first
                      : (p.region && !p.region->regions.empty()) ? p.region->regions.front()
                                                                 : "";
  v["modality_label"] = p.interpreter_key ? std::string(to_string(p.interpreter_key->second))
                        : p.modality ? std::string(to_string(p.modality->modality))
                                     : "";
  v["interpreter_id"] = p.interpreter_id;
  v["findings"] = p.findings ? Json(with_stable_ids(p.findings->findings)).dump() : "null";
  v["context_summary"] = json_or_null(p.context_summary);
  v["segmentation"] = json_or_null(p.segmentation);
  v["measurements"] = p.segmentation ? Json(p.segmentation->measurements).dump() : "[]";
  v["diagnosis"] = json_or_null(p.diagnosis);
  v["composer_input"] = p.composer_input.value_or("");
  v["report"] = json_or_null(p.report);
  v["reference"] = json_or_null(p.reference);
  v["case_summary"] = p.case_summary;
  if (p.rubric) {
    v["rubric"] = render_rubric(*p.rubric);
  }
  return v;
}

// ---------------------------------------------------------------------------
// LlmBackend

LlmBackend::LlmBackend(std::shared_ptr<LlmGateway> gateway,
                       std::shared_ptr<const PromptLibrary> prompts, Options options)
    : gateway_(std::move(gateway)), prompts_(std::move(prompts)), options_(std::move(options)) {
  if (!gateway_) throw Error(ErrorCode::kConfigError, "LLM backend needs a gateway");
  if (!prompts_) prompts_ = std::make_shared<PromptLibrary>();
}

ChatRequest LlmBackend::build_request(AgentRole role, const AgentPayload& payload) const {
  std::string name = std::string(to_string(role));
  if (auto it = options_.template_names.find(role); it != options_.template_names.end()) {
    name = it->second;
  } else if (role == AgentRole::kEvaluationJudge && payload.rubric) {
    name = payload.rubric->template_id;
  }
  ChatRequest req;
  req.model_id = options_.model_id;
  req.temperature = options_.temperature;
  req.max_tokens = options_.max_tokens;
  req.messages.push_back(
      {ChatRole::kSystem, "You are the " + std::string(to_string(role)) +
                              " agent of a radiology reporting pipeline. Reply with a single JSON "
                              "object and nothing else."});
  req.messages.push_back(
      {ChatRole::kUser, PromptLibrary::render(prompts_->get(name), prompt_variables(role, payload))});
  return req;
}

AgentOutput LlmBackend::run(AgentRole role, const AgentPayload& payload) {
  auto request = build_request(role, payload);
  std::string last_error;
  for (int attempt = 0; attempt <= options_.reprompt_attempts; ++attempt) {
    const auto response = gateway_->complete(request);
    try {
      if (response.finish_reason == FinishReason::kError) {
        throw Error(ErrorCode::kParseError, "empty response");
      }
      if (role == AgentRole::kEvaluationJudge) {
        return parse_judge_response(response.content, *payload.rubric);
      }
      auto out = output_from_json(role, extract_json_object(response.content));
      if (auto* fx = std::get_if<FindingsExtraction>(&out)) {
        if (payload.interpreter_key) {
          fx->region = payload.interpreter_key->first;
          fx->modality = payload.interpreter_key->second;
        }
        fx->interpreter_id = payload.interpreter_id.empty() ? options_.id : payload.interpreter_id;
      }
      return out;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kParseError && e.code() != ErrorCode::kSchemaError &&
          e.code() != ErrorCode::kConfigError) {
        throw;
      }
      last_error = e.detail();
    }
    request.messages.push_back({ChatRole::kAssistant, response.content});
    request.messages.push_back(
        {ChatRole::kUser, "Your previous reply could not be parsed (" + last_error +
                              "). Reply again with only the JSON object described above."});
  }
  throw Error(ErrorCode::kParseError, std::string(to_string(role)) + ": " + last_error);
}

Json extract_json_object(std::string_view text) {
  const auto start = text.find('{');
  if (start == std::string_view::npos) throw Error(ErrorCode::kParseError, "no JSON object in reply");
  int depth = 0;
  bool in_string = false;
  bool escaped = false;
  for (std::size_t i = start; i < text.size(); ++i) {
    const char c = text[i];
    if (in_string) {
      if (escaped) escaped = false;
      else if (c == '\\') escaped = true;
      else if (c == '"') in_string = false;
      continue;
    }
    if (c == '"') in_string = true;
    else if (c == '{') ++depth;
    else if (c == '}' && --depth == 0) {
      try {
        return Json::parse(text.substr(start, i - start + 1));
      } catch (const Json::parse_error& e) {
        throw Error(ErrorCode::kParseError, e.what());
      }
    }
  }
  throw Error(ErrorCode::kParseError, "unterminated JSON object");
}

}  // namespace consensus
