// Regenerates tests/fixtures/transcripts by running the fixture configs in
// record mode against a local chat-completions stub.
//
//   fixture_recorder <fixture dir>

#include <cstdlib>
#include <fstream>
#include <filesystem>
#include <iostream>
#include <map>
#include <mutex>
#include <regex>
#include <string>
#include <thread>

#include "consensus/config.hpp"
#include "consensus/harness.hpp"
#include "consensus/judge.hpp"
#include "consensus/manifest.hpp"
#include "httplib.h"

namespace fs = std::filesystem;
using consensus::Json;

namespace {

std::string section(const std::string& prompt, const std::string& name) {
  const std::string marker = "### " + name + "\n";
  auto start = prompt.find(marker);
  if (start == std::string::npos) return {};
  start += marker.size();
  auto end = prompt.find("\n### ", start);
  return prompt.substr(start, end == std::string::npos ? std::string::npos : end - start);
}

std::string sentence(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  if (!s.empty() && s.back() != '.') s += ".";
  return s;
}

std::string measure(const Json& m) {
  return consensus::format_decimal(m.at("value").get<double>()) + " " + m.at("unit").get<std::string>();
}

struct Scores {
  int correctness, conciseness, completeness, image_descriptions;
};

const std::map<std::string, Scores> kStyleScores = {
    {"terse", {8, 9, 5, 5}}, {"standard", {9, 8, 8, 7}}, {"verbose", {7, 5, 9, 8}}};

const std::map<std::string, Scores> kCaseScores = {
    {"c001", {9, 8, 7, 6}}, {"c002", {8, 8, 7, 7}}, {"c003", {10, 9, 9, 8}}, {"c004", {7, 8, 6, 6}},
    {"c005", {8, 7, 7, 6}}, {"c006", {9, 9, 8, 7}}, {"c007", {7, 6, 6, 5}}, {"c008", {10, 10, 9, 9}},
    {"c009", {8, 9, 7, 7}}, {"c010", {9, 8, 8, 8}}};

const std::map<std::string, Scores> kIndicationScores = {
    {"Indication: New confusion and headache.", {8, 7, 7, 6}},
    {"Indication: Confusion with headache for one week.", {5, 6, 5, 5}}};

class Stub {
 public:
  Json respond(const Json& request) {
    const auto system = request.at("messages").at(0).at("content").get<std::string>();
    const auto prompt = request.at("messages").at(1).at("content").get<std::string>();
    if (system.find("RegionDetection") != std::string::npos) return region(prompt);
    if (system.find("ReportComposer") != std::string::npos) return compose(prompt);
    if (system.find("EvaluationJudge") != std::string::npos) return judge(prompt);
    throw std::runtime_error("no stub for: " + system);
  }

 private:
  static Json region(const std::string& prompt) {
    const auto study = Json::parse(section(prompt, "STUDY"));
    auto part = study.at("declared_header").at("body_part").get<std::string>();
    for (auto& c : part) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return Json{{"regions", {part}}, {"orientation", "axial"}, {"confidence", 0.95}};
  }

  Json compose(const std::string& prompt) {
    std::smatch m;
    if (!std::regex_search(prompt, m, std::regex("Style: (\\w+)"))) throw std::runtime_error("no style");
    const std::string style = m[1];
    const auto findings = Json::parse(section(prompt, "FINDINGS"));
    const auto seg = Json::parse(section(prompt, "SEGMENTATION"));
    const auto dx = Json::parse(section(prompt, "DIAGNOSIS"));

    std::vector<std::string> body;
    Json refs = Json::array(), cited = Json::array();
    bool abnormal = false;
    for (const auto& f : findings) {
      std::string s = f.at("description").get<std::string>() + " in the " + f.at("location").get<std::string>();
      if (style != "terse" && !f.value("measurements", Json::array()).empty()) {
        s += ", measuring " + measure(f["measurements"][0]);
      }
      body.push_back(sentence(s));
      refs.push_back(f.at("finding_id"));
      const auto sev = f.value("severity", "normal");
      abnormal = abnormal || sev == "significant" || sev == "critical";
    }
    if (style != "terse" && seg.is_object()) {
      for (const auto& mm : seg.value("measurements", Json::array())) {
        body.push_back(sentence("the segmented " + mm.at("name").get<std::string>() + " is " + measure(mm)));
        cited.push_back(mm);
      }
    }
    if (style == "verbose") {
      body.push_back("Image quality is adequate for interpretation.");
      body.push_back("No prior imaging is available for comparison.");
    }

    std::vector<std::string> impression;
    const auto label = dx.is_object() ? dx.value("label", "") : std::string();
    if (!label.empty() && label != "normal") {
      impression.push_back(style == "terse" ? sentence(dx["label"].get<std::string>())
                                            : sentence("Findings consistent with " + dx["label"].get<std::string>()));
      if (style != "terse" && !dx.value("recommendation", "").empty()) {
        impression.push_back(sentence(dx["recommendation"].get<std::string>()));
      }
    } else if (style == "terse") {
      impression.push_back(abnormal ? "Abnormal study." : "Normal study.");
    } else {
      impression.push_back(abnormal ? "Abnormality as described." : "No acute abnormality is seen.");
    }
    if (style == "verbose") impression.push_back("Clinical correlation is advised.");

    auto join = [](const std::vector<std::string>& parts) {
      std::string out;
      for (const auto& p : parts) out += (out.empty() ? "" : " ") + p;
      return out;
    };
    Json report{{"findings_section", join(body)},
                {"impression_section", join(impression)},
                {"referenced_findings", refs},
                {"measurements_cited", cited}};
    std::lock_guard lock(mutex_);
    styles_[report["findings_section"]] = style;
    return report;
  }

  Json judge(const std::string& prompt) {
    const auto report = Json::parse(section(prompt, "REPORT"));
    const auto reference = Json::parse(section(prompt, "REFERENCE"));
    const auto summary = section(prompt, "CASE SUMMARY");
    Scores s{10, 10, 10, 10};
    std::string why = "matches the reference";
    if (report != reference) {
      std::lock_guard lock(mutex_);
      if (auto it = styles_.find(report.value("findings_section", "")); it != styles_.end()) {
        s = kStyleScores.at(it->second);
        why = it->second + " composition";
      } else {
        bool matched = false;
        for (const auto& [indication, scores] : kIndicationScores) {
          if (summary.find(indication) != std::string::npos) {
            s = scores;
            why = "rephrased indication";
            matched = true;
          }
        }
        if (!matched) {
          const auto id = summary.substr(5, summary.find('.') - 5);
          s = kCaseScores.at(id);
          why = "graded for " + id;
        }
      }
    }
    Json out;
    out["scores"] = {{"correctness", s.correctness},
                     {"conciseness", s.conciseness},
                     {"completeness", s.completeness},
                     {"image_descriptions", s.image_descriptions}};
    for (const auto& [k, v] : out["scores"].items()) out["rationale"][k] = why;
    return out;
  }

  std::mutex mutex_;
  std::map<std::string, std::string> styles_;
};

Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return Json::parse(in);
}

Json to_record(Json doc) {
  auto flip = [](Json& spec) {
    if (spec.value("kind", "mock") == "replay") spec["kind"] = "record";
  };
  for (auto& item : doc["backends"].items()) flip(item.value());
  flip(doc["judge"]);
  return doc;
}

consensus::BenchmarkConfig record_config(const fs::path& path, const fs::path& run_root) {
  auto doc = to_record(read_json(path));
  doc["run_root"] = run_root.string();
  return consensus::parse_benchmark_config(doc, path.parent_path());
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: fixture_recorder <fixture dir>\n";
    return 2;
  }
  const fs::path dir = fs::absolute(argv[1]);
  const fs::path scratch = fs::temp_directory_path() / "consensus_recorder";
  fs::remove_all(scratch);
  fs::remove_all(dir / "transcripts");
  fs::create_directories(dir / "transcripts");

  Stub stub;
  httplib::Server server;
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    try {
      const auto content = stub.respond(Json::parse(req.body)).dump();
      Json body{{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}, {"finish_reason", "stop"}}}}};
      res.set_content(body.dump(), "application/json");
    } catch (const std::exception& e) {
      std::cerr << "stub: " << e.what() << "\n";
      res.status = 400;
    }
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread thread([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  ::setenv("CONSENSUS_API_BASE", ("http://127.0.0.1:" + std::to_string(port) + "/v1").c_str(), 1);

  int status = 0;
  try {
    const auto pipeline = record_config(dir / "pipeline.json", scratch);
    const auto run = consensus::run_benchmark(pipeline);
    std::cout << "pipeline: " << run.report.succeeded << "/" << run.report.cases << " succeeded\n";

    const auto robustness = record_config(dir / "robustness.json", scratch);
    const auto cases = consensus::load_case_manifest(robustness.manifest);
    std::vector<consensus::RobustnessVariant> variants;
    for (const auto& v : read_json(dir / "robustness_variants.json")) {
      variants.push_back({v.at("name"), v.at("context").get<consensus::ClinicalContext>(), Json()});
    }
    const auto rr = consensus::robustness_eval(cases.front(), variants, robustness);
    std::cout << "robustness: stddev " << rr.stddev << "\n";

    auto rlhf = to_record(read_json(dir / "rlhf.json"));
    const auto evaluate = consensus::benchmark_evaluator(dir);
    for (const auto& patch : read_json(dir / "rlhf_candidates.json")) {
      auto candidate = rlhf;
      candidate.merge_patch(patch);
      const auto rewards = evaluate(candidate, cases);
      std::cout << "rlhf " << patch.dump() << ": mean " << consensus::metrics::mean(rewards) << "\n";
    }

    auto build = consensus::build_pipeline_config(pipeline, std::nullopt);
    const auto& ref = cases.front().ground_truth->reference_report;
    consensus::judge_report(ref, ref, "Case c001.", pipeline.rubric,
                            *build.backends.at(consensus::AgentRole::kEvaluationJudge));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    status = 1;
  }
  server.stop();
  thread.join();
  fs::remove_all(scratch);
  std::cout << std::distance(fs::directory_iterator(dir / "transcripts"), fs::directory_iterator()) << " transcripts\n";
  return status;
}
