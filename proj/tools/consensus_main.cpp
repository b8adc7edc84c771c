// consensus: benchmark runner, scorer, and review service.

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "consensus/config.hpp"
#include "consensus/error.hpp"
#include "consensus/harness.hpp"
#include "consensus/judge.hpp"
#include "consensus/manifest.hpp"
#include "consensus/review_service.hpp"
#include "consensus/scoring.hpp"

namespace {

using consensus::Error;
using consensus::ErrorCode;
using consensus::Json;

constexpr int kExitConfig = 2;

struct Globals {
  std::string config;
  std::string run_id;
  std::optional<std::uint64_t> seed;
  std::string run_root;
};

Json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open " + path);
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw Error(ErrorCode::kSchemaError, path + ": " + e.what());
  }
}

consensus::BenchmarkConfig load_config(const Globals& g) {
  if (g.config.empty()) throw Error(ErrorCode::kConfigError, "--config is required");
  auto config = consensus::load_benchmark_config(g.config);
  if (!g.run_id.empty()) config.run_id = g.run_id;
  if (g.seed) config.seed = *g.seed;
  if (!g.run_root.empty()) config.run_root = g.run_root;
  config.validate();
  return config;
}

std::filesystem::path resolve_run_dir(const Globals& g, const std::string& explicit_dir) {
  if (!explicit_dir.empty()) return explicit_dir;
  if (!g.config.empty()) return load_config(g).run_dir();
  if (g.run_id.empty()) throw Error(ErrorCode::kConfigError, "give --run-dir, --config, or --run-id");
  return std::filesystem::path(g.run_root.empty() ? "run" : g.run_root) / g.run_id;
}

std::vector<consensus::ErrorType> parse_types(const std::string& list) {
  std::vector<consensus::ErrorType> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(consensus::error_type_from_string(item));
  }
  return out;
}

int print(const Json& j, int code = 0) {
  std::cout << j.dump(2) << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-agent radiology reporting benchmark"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "Benchmark config file");
  app.add_option("--run-id", g.run_id, "Run identifier (overrides the config)");
  app.add_option("--seed", g.seed, "Seed for randomized operations (overrides the config)");
  app.add_option("--run-root", g.run_root, "Directory holding run directories (default: run)");

  auto* run = app.add_subcommand("run", "Execute every case of the manifest");
  bool resume = false;
  std::string serve_address;
  run->add_flag("--resume", resume, "Continue suspended cases from their persisted state");
  run->add_option("--serve-review", serve_address, "Serve the review API on host:port while running");

  auto* score = app.add_subcommand("score", "Recompute the scoring tables of a run directory");
  std::string score_dir;
  score->add_option("--run-dir", score_dir, "Run directory");

  auto* judge = app.add_subcommand("judge", "Score one report against a reference");
  std::string report_path, reference_path, case_summary;
  judge->add_option("--report", report_path, "Report file")->required();
  judge->add_option("--reference", reference_path, "Reference report file")->required();
  judge->add_option("--summary", case_summary, "Case summary text");

  auto* calibrate = app.add_subcommand("calibrate", "Correlate judge scores with expert scores");
  std::string pairs_path, calibrate_dir;
  double threshold = consensus::kDefaultCalibrationThreshold;
  calibrate->add_option("--pairs", pairs_path, R"(File with {"judge": [...], "expert": [...]})");
  calibrate->add_option("--run-dir", calibrate_dir, "Run directory to calibrate");
  calibrate->add_option("--threshold", threshold, "Flag correlations below this value");

  auto* plant = app.add_subcommand("plant-errors", "Plant synthetic errors into a report");
  std::string plant_report, plant_types = "negation_flip,laterality_swap,numeric_perturbation,omission,hallucinated_finding";
  int plant_count = 1;
  plant->add_option("--report", plant_report, "Report file")->required();
  plant->add_option("--types", plant_types, "Comma-separated error types");
  plant->add_option("--count", plant_count, "Number of errors");

  auto* robust = app.add_subcommand("robustness", "Score one case under rephrased variants");
  std::string robust_case, variants_path;
  robust->add_option("--case", robust_case, "Case id")->required();
  robust->add_option("--variants", variants_path, "Variant list file")->required();

  auto* rlhf = app.add_subcommand("rlhf-sim", "Iteratively re-evaluate candidate config adjustments");
  std::string candidates_path;
  int iterations = 3;
  int parallelism = 1;
  rlhf->add_option("--candidates", candidates_path, "File with a list of config merge patches")->required();
  rlhf->add_option("--iterations", iterations, "Iterations");
  rlhf->add_option("--parallelism", parallelism, "Candidates evaluated concurrently");

  auto* serve = app.add_subcommand("serve-review", "Serve the review API for a run directory");
  std::string serve_dir, bind_address = "127.0.0.1:8787";
  serve->add_option("--run-dir", serve_dir, "Run directory");
  serve->add_option("--bind", bind_address, "host:port");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const auto config = load_config(g);
      std::unique_ptr<consensus::ReviewService> service;
      if (!serve_address.empty()) {
        std::filesystem::create_directories(config.run_dir());
        service = std::make_unique<consensus::ReviewService>(config.run_dir());
        const auto [host, port] = consensus::parse_bind_address(serve_address);
        service->bind(host, port);
        service->start();
        std::cerr << "review API on " << host << ":" << service->port() << "\n";
      }
      const auto summary = consensus::run_benchmark(config, resume);
      if (service) service->stop();
      for (const auto& o : summary.outcomes) {
        std::cerr << o.trace.case_id << " " << consensus::to_string(o.trace.status);
        if (o.trace.failure_reason) std::cerr << " (" << *o.trace.failure_reason << ")";
        std::cerr << "\n";
      }
      return print(consensus::to_json_value(summary.report), summary.exit_code);
    }
    if (*score) {
      const auto dir = resolve_run_dir(g, score_dir);
      const auto loaded = consensus::load_run(dir);
      const auto report = consensus::score_run(loaded);
      std::optional<consensus::CalibrationReport> calibration;
      try {
        calibration = consensus::calibrate_run(loaded.cases, loaded.outcomes, loaded.settings.calibration_threshold);
      } catch (const Error&) {
      }
      consensus::write_scoring_outputs(dir, report, loaded.outcomes, calibration);
      return print(consensus::to_json_value(report), report.failed == 0 ? 0 : 1);
    }
    if (*judge) {
      const auto config = load_config(g);
      const auto pipeline = consensus::build_pipeline_config(config, std::nullopt);
      const auto report = read_json(report_path).get<consensus::RadiologyReport>();
      const auto reference = read_json(reference_path).get<consensus::RadiologyReport>();
      const auto scores = consensus::judge_report(report, reference, case_summary, config.rubric,
                                                  *pipeline.backends.at(consensus::AgentRole::kEvaluationJudge));
      Json out = scores;
      out["benchmark_score"] = consensus::metrics::benchmark_score(scores);
      out["reward"] = consensus::reward(scores);
      return print(out);
    }
    if (*calibrate) {
      if (!pairs_path.empty()) {
        const auto pairs = read_json(pairs_path);
        const auto judge_scores = pairs.at("judge").get<std::vector<double>>();
        const auto expert_scores = pairs.at("expert").get<std::vector<double>>();
        return print(consensus::calibrate_judge(judge_scores, expert_scores, threshold));
      }
      const auto loaded = consensus::load_run(resolve_run_dir(g, calibrate_dir));
      const auto calibration = consensus::calibrate_run(loaded.cases, loaded.outcomes, threshold);
      if (!calibration) throw Error(ErrorCode::kPrecondition, "fewer than two cases carry expert and judge scores");
      return print(*calibration);
    }
    if (*plant) {
      const auto report = read_json(plant_report).get<consensus::RadiologyReport>();
      const auto types = parse_types(plant_types);
      const auto planted = consensus::plant_errors(report, types, plant_count, g.seed.value_or(0));
      return print(Json{{"report", planted.report}, {"planted", planted.planted}});
    }
    if (*robust) {
      const auto config = load_config(g);
      const auto cases = consensus::load_case_manifest(config.manifest);
      auto it = std::find_if(cases.begin(), cases.end(), [&](const auto& c) { return c.case_id == robust_case; });
      if (it == cases.end()) throw Error(ErrorCode::kUnknownCase, robust_case);
      std::vector<consensus::RobustnessVariant> variants;
      for (const auto& v : read_json(variants_path)) {
        consensus::RobustnessVariant rv;
        rv.name = v.value("name", "variant" + std::to_string(variants.size() + 1));
        if (v.contains("context")) rv.context = v["context"].get<consensus::ClinicalContext>();
        rv.config_patch = v.value("config", Json());
        variants.push_back(std::move(rv));
      }
      const auto result = consensus::robustness_eval(*it, variants, config);
      Json out{{"stddev", result.stddev}, {"variants", Json::array()}};
      for (std::size_t i = 0; i < result.names.size(); ++i) {
        out["variants"].push_back(Json{{"name", result.names[i]},
                                       {"score", result.scores[i] ? Json(*result.scores[i]) : Json(nullptr)},
                                       {"failure", result.failures[i] ? Json(*result.failures[i]) : Json(nullptr)}});
      }
      return print(out);
    }
    if (*rlhf) {
      const auto config = load_config(g);
      const auto cases = consensus::load_case_manifest(config.manifest);
      const auto candidates = read_json(candidates_path).get<std::vector<Json>>();
      const auto result = consensus::rlhf_loop(config.document, candidates, cases, iterations,
                                               consensus::benchmark_evaluator(config.base_dir), parallelism);
      Json out{{"best_reward", result.best_reward}, {"trajectory", result.trajectory},
               {"best_config", result.best_config}, {"iterations", Json::array()}};
      for (const auto& it : result.iterations) {
        out["iterations"].push_back(Json{{"mean_rewards", it.mean_rewards}, {"selected", it.selected}});
      }
      return print(out);
    }
    if (*serve) {
      const auto dir = resolve_run_dir(g, serve_dir);
      consensus::ReviewService service(dir);
      const auto [host, port] = consensus::parse_bind_address(bind_address);
      service.bind(host, port);
      std::cerr << "review API on " << host << ":" << service.port() << "\n";
      service.serve();
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return 0;
}
