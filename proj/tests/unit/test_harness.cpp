#include <fstream>

#include "consensus/error.hpp"
#include "consensus/harness.hpp"
#include "consensus/manifest.hpp"
#include "doctest.h"
#include "fixtures.hpp"

using namespace consensus;

namespace {

const RadiologyReport kReport{
    "There is a 38 mm enhancing mass in the left frontal lobe. Surrounding vasogenic edema is present. "
    "No hemorrhage is seen. The right hemisphere is unremarkable. The atrium of the lateral ventricle measures 12 mm. "
    "The pineal gland measures 8 mm.",
    "Left frontal mass consistent with glioblastoma. No midline shift.",
    {"F1", "F2"},
    {{"mass diameter", 38, "mm"}}};

std::vector<RobustnessVariant> fixture_variants() {
  std::ifstream in(testing::fixture("robustness_variants.json"));
  std::vector<RobustnessVariant> out;
  for (const auto& v : Json::parse(in)) out.push_back({v.at("name"), v.at("context").get<ClinicalContext>(), Json()});
  return out;
}

ErrorCode code_of(const auto& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::kIoError;
}

}  // namespace

TEST_SUITE("harness") {
  TEST_CASE("seed stream") {
    CHECK(fnv1a64("error_planting") == 0x5a5d3b08c0562419ULL);
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    SeedStream s(0, "error_planting");
    CHECK(s.next() == 17585951820603528387ULL);
    CHECK(s.next() == 11772444882804038289ULL);
    CHECK(s.next() == 1081844427731707575ULL);
    SeedStream a(5, "x"), b(5, "x"), c(5, "y");
    CHECK(a.next() == b.next());
    CHECK(a.next() != c.next());
    for (int i = 0; i < 1000; ++i) {
      const double u = a.uniform();
      CHECK((u >= 0.0 && u < 1.0));
      CHECK(a.below(7) < 7);
    }
    CHECK(code_of([&] { a.below(0); }) == ErrorCode::kPrecondition);
  }

  TEST_CASE("numeric perturbation is reproducible per seed") {
    const RadiologyReport r{"Hypodense lesion measures 18 mm.", "Indeterminate lesion.", {}, {{"lesion", 18, "mm"}}};
    const std::vector<ErrorType> numeric = {ErrorType::kNumericPerturbation};
    const std::pair<std::uint64_t, const char*> goldens[] = {{1, "23.8"}, {2, "19.2"}, {3, "22"}, {42, "13.5"}};
    for (const auto& [seed, value] : goldens) {
      const auto p = plant_errors(r, numeric, 1, seed);
      REQUIRE(p.planted.size() == 1);
      CHECK(p.planted[0].location == "findings#0");
      CHECK(p.planted[0].original == "18");
      CHECK(p.planted[0].perturbed == value);
      CHECK(p.report.findings_section == std::string("Hypodense lesion measures ") + value + " mm.");
      CHECK(p.report.measurements_cited[0].value == std::stod(value));
      CHECK(p.report.impression_section == r.impression_section);
    }
  }

  TEST_CASE("perturbed values stay within the factor band") {
    const RadiologyReport r{"Hypodense lesion measures 18 mm.", "Indeterminate lesion.", {}, {}};
    const std::vector<ErrorType> numeric = {ErrorType::kNumericPerturbation};
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
      const double v = std::stod(plant_errors(r, numeric, 1, seed).planted[0].perturbed);
      CHECK(v != 18.0);
      CHECK(v >= 9.0);
      CHECK(v <= 27.0);
      CHECK(!(v > 17.1 && v < 18.9));
    }
  }

  TEST_CASE("sentence splitting") {
    CHECK(split_sentences("A is 3.5 mm. B? C! tail") == std::vector<std::string>{"A is 3.5 mm.", "B?", "C!", "tail"});
    CHECK(split_sentences("  ").empty());
  }

  TEST_CASE("oracle reviewer finds every planted error") {
    for (auto type : kAllErrorTypes) {
      const std::vector<ErrorType> one = {type};
      for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto p = plant_errors(kReport, one, 1, seed);
        REQUIRE(p.planted.size() == 1);
        CHECK(p.report != kReport);
        const auto flagged = oracle_review(kReport, p.report);
        const auto s = metrics::planted_error_eval(p.planted, flagged);
        CHECK_MESSAGE(s.precision == 1.0, to_string(type), " seed ", seed);
        CHECK_MESSAGE(s.recall == 1.0, to_string(type), " seed ", seed);
        const std::vector<metrics::ErrorDescriptor> nothing;
        CHECK(metrics::planted_error_eval(p.planted, nothing).recall == 0.0);
      }
    }
  }

  TEST_CASE("mixed planting keeps errors on distinct sentences") {
    const std::vector<ErrorType> all(kAllErrorTypes.begin(), kAllErrorTypes.end());
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto p = plant_errors(kReport, all, 5, seed);
      REQUIRE(p.planted.size() == 5);
      std::set<std::string> locations;
      for (const auto& d : p.planted) locations.insert(d.location);
      CHECK(locations.size() == 5);
      const auto s = metrics::planted_error_eval(p.planted, oracle_review(kReport, p.report));
      CHECK(s.precision == 1.0);
      CHECK(s.recall == 1.0);
      CHECK(plant_errors(kReport, all, 5, seed).report == p.report);
      CHECK_FALSE(split_sentences(p.report.findings_section).empty());
    }
  }

  TEST_CASE("unmodified reports draw no flags") {
    CHECK(oracle_review(kReport, kReport).empty());
    CHECK(plant_errors(kReport, std::vector<ErrorType>{ErrorType::kOmission}, 0, 1).report == kReport);
  }

  TEST_CASE("insufficient material") {
    const RadiologyReport plain{"Normal study.", "Unremarkable.", {}, {}};
    CHECK(code_of([&] { plant_errors(plain, std::vector<ErrorType>{ErrorType::kLateralitySwap}, 1, 1); }) ==
          ErrorCode::kInsufficientMaterial);
    CHECK(code_of([&] { plant_errors(plain, std::vector<ErrorType>{ErrorType::kNumericPerturbation}, 1, 1); }) ==
          ErrorCode::kInsufficientMaterial);
    CHECK(code_of([&] { plant_errors(plain, std::vector<ErrorType>{ErrorType::kOmission}, 1, 1); }) ==
          ErrorCode::kInsufficientMaterial);
    CHECK(error_type_from_string("laterality_swap") == ErrorType::kLateralitySwap);
  }

  TEST_CASE("robustness over rephrased indications") {
    testing::TempDir dir;
    const auto config = testing::fixture_config("robustness.json", dir.path());
    const auto cases = load_case_manifest(config.manifest);
    const auto variants = fixture_variants();
    const auto r = robustness_eval(cases.front(), variants, config);
    REQUIRE(r.scores.size() == 2);
    CHECK(r.names == std::vector<std::string>{"reordered", "paraphrased"});
    REQUIRE(r.scores[0].has_value());
    REQUIRE(r.scores[1].has_value());
    CHECK(std::abs(*r.scores[0] - 0.8) <= 1e-9);
    CHECK(std::abs(*r.scores[1] - 0.6) <= 1e-9);
    CHECK(std::abs(r.stddev - 0.1) <= 1e-9);
    CHECK_FALSE(std::filesystem::exists(config.run_dir()));

    CHECK(code_of([&] { robustness_eval(cases.front(), std::span(variants).first(1), config); }) ==
          ErrorCode::kPrecondition);
    auto bare = cases.front();
    bare.ground_truth.reset();
    CHECK(code_of([&] { robustness_eval(bare, variants, config); }) == ErrorCode::kPrecondition);
  }

  TEST_CASE("fixture benchmark run") {
    testing::TempDir dir;
    const auto config = testing::fixture_config("pipeline.json", dir.path());
    const auto first = run_benchmark(config);
    CHECK(first.exit_code == 0);
    CHECK(first.report.succeeded == 10);
    CHECK(first.report.global.at("success_rate") == 1.0);
    CHECK(code_of([&] { run_benchmark(config); }) == ErrorCode::kConfigError);
  }
}
