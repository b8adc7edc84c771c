#include "consensus/harness.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

#include "consensus/error.hpp"
#include "consensus/manifest.hpp"
#include "json_util.hpp"

namespace consensus {

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (const auto& p : parts) {
    if (p.empty()) continue;
    if (!out.empty()) out += " ";
    out += p;
  }
  return out;
}

// --- sentence transforms ----------------------------------------------------

std::string upper_first(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

std::string lower_first(std::string s) {
  if (s.size() > 1 && std::isupper(static_cast<unsigned char>(s[0])) &&
      std::islower(static_cast<unsigned char>(s[1]))) {
    s[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(s[0])));
  }
  return s;
}

constexpr std::string_view kNoEvidence = "No evidence of ";

std::string negate(const std::string& s) {
  if (s.starts_with(kNoEvidence)) return upper_first(s.substr(kNoEvidence.size()));
  if (s.starts_with("No ")) return upper_first(s.substr(3));
  if (auto p = s.find(" is not "); p != std::string::npos) return s.substr(0, p) + " is " + s.substr(p + 8);
  if (auto p = s.find(" is "); p != std::string::npos) return s.substr(0, p) + " is not " + s.substr(p + 4);
  return std::string(kNoEvidence) + lower_first(s);
}

// Whole-word positions of left/right, case-insensitive.
std::vector<std::pair<std::size_t, std::size_t>> side_words(const std::string& s) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  const auto l = lower(s);
  for (std::size_t i = 0; i < l.size();) {
    if (!is_word_char(l[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < l.size() && is_word_char(l[j])) ++j;
    const auto word = l.substr(i, j - i);
    if (word == "left" || word == "right") out.emplace_back(i, j - i);
    i = j;
  }
  return out;
}

std::string swap_sides(const std::string& s) {
  std::string out;
  std::size_t pos = 0;
  for (auto [start, len] : side_words(s)) {
    out += s.substr(pos, start - pos);
    const auto word = s.substr(start, len);
    std::string repl = lower(word) == "left" ? "right" : "left";
    if (std::all_of(word.begin(), word.end(), [](unsigned char c) { return std::isupper(c); })) {
      std::transform(repl.begin(), repl.end(), repl.begin(), [](unsigned char c) { return std::toupper(c); });
    } else if (std::isupper(static_cast<unsigned char>(word[0]))) {
      repl = upper_first(repl);
    }
    out += repl;
    pos = start + len;
  }
  return out + s.substr(pos);
}

struct NumberSpan {
  std::size_t start = 0;
  std::size_t len = 0;
  double value = 0.0;
};

// Decimal numbers not glued to a preceding letter (so "T2" is skipped).
std::vector<NumberSpan> numbers_in(const std::string& s) {
  std::vector<NumberSpan> out;
  for (std::size_t i = 0; i < s.size();) {
    if (!std::isdigit(static_cast<unsigned char>(s[i])) || (i > 0 && (std::isalpha(static_cast<unsigned char>(s[i - 1])) ||
                                                                      s[i - 1] == '.'))) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) ++j;
    if (j + 1 < s.size() && s[j] == '.' && std::isdigit(static_cast<unsigned char>(s[j + 1]))) {
      ++j;
      while (j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) ++j;
    }
    out.push_back({i, j - i, std::stod(s.substr(i, j - i))});
    i = j;
  }
  return out;
}

std::string mask_numbers(const std::string& s) {
  std::string out;
  std::size_t pos = 0;
  for (const auto& n : numbers_in(s)) {
    out += s.substr(pos, n.start - pos) + "#";
    pos = n.start + n.len;
  }
  return out + s.substr(pos);
}

double perturbation_factor(SeedStream& rng) {
  const double x = rng.uniform() * 0.9;
  return x < 0.45 ? 0.5 + x : 1.5 - (x - 0.45);
}

const std::vector<std::string>& fabricated_findings() {
  static const std::vector<std::string> kSentences = {
      "A 6 mm calcified granuloma is present in the right upper lobe.",
      "There is a small pericardial effusion.",
      "A 9 mm enhancing nodule is seen in the left cerebellar hemisphere.",
      "Mild diffuse hepatic steatosis is noted.",
      "A nondisplaced fracture of the left seventh rib is present.",
      "There is a 12 mm simple cyst in the right kidney.",
  };
  return kSentences;
}

bool eligible(ErrorType type, const std::string& sentence) {
  switch (type) {
    case ErrorType::kNegationFlip:
      return negate(sentence) != sentence;
    case ErrorType::kLateralitySwap:
      return !side_words(sentence).empty();
    case ErrorType::kNumericPerturbation: {
      auto nums = numbers_in(sentence);
      return !nums.empty() && nums.front().value > 0.0;
    }
    case ErrorType::kOmission:
    case ErrorType::kHallucinatedFinding:
      return true;
  }
  return false;
}

struct Slot {
  int section = 0;  // 0 findings, 1 impression
  std::size_t index = 0;
  bool operator<(const Slot& o) const { return std::tie(section, index) < std::tie(o.section, o.index); }
};

std::string location_key(const Slot& s) {
  return std::string(s.section == 0 ? "findings#" : "impression#") + std::to_string(s.index);
}

// What the perturbed report does with one original sentence.
struct SlotEdit {
  std::optional<std::string> replacement;  // modified text
  bool omitted = false;
  std::optional<std::string> appended;  // hallucinated sentence placed after it
};

// --- oracle helpers -----------------------------------------------------------

std::optional<ErrorType> classify_change(const std::string& a, const std::string& b) {
  if (a == b) return std::nullopt;
  if (negate(a) == b) return ErrorType::kNegationFlip;
  if (!side_words(a).empty() && swap_sides(a) == b) return ErrorType::kLateralitySwap;
  if (!numbers_in(a).empty() && mask_numbers(a) == mask_numbers(b)) return ErrorType::kNumericPerturbation;
  return std::nullopt;
}

// Index pairs of a longest common subsequence of equal sentences.
std::vector<std::pair<std::size_t, std::size_t>> lcs_pairs(const std::vector<std::string>& a,
                                                           const std::vector<std::string>& b) {
  std::vector<std::vector<std::size_t>> dp(a.size() + 1, std::vector<std::size_t>(b.size() + 1, 0));
  for (std::size_t i = a.size(); i-- > 0;) {
    for (std::size_t j = b.size(); j-- > 0;) {
      dp[i][j] = a[i] == b[j] ? dp[i + 1][j + 1] + 1 : std::max(dp[i + 1][j], dp[i][j + 1]);
    }
  }
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) {
      out.emplace_back(i++, j++);
    } else if (dp[i + 1][j] >= dp[i][j + 1]) {
      ++i;
    } else {
      ++j;
    }
  }
  return out;
}

void review_section(const std::string& name, const std::vector<std::string>& a,
                    const std::vector<std::string>& b, std::vector<metrics::ErrorDescriptor>& out) {
  auto pairs = lcs_pairs(a, b);
  pairs.emplace_back(a.size(), b.size());  // sentinel
  std::size_t ai = 0, bi = 0;
  // Original index of the sentence preceding position bi in the perturbed text.
  std::optional<std::size_t> previous_original;
  for (auto [am, bm] : pairs) {
    std::vector<std::size_t> deleted, inserted;
    for (; ai < am; ++ai) deleted.push_back(ai);
    for (; bi < bm; ++bi) inserted.push_back(bi);

    std::vector<std::optional<std::size_t>> partner(inserted.size());  // original index per inserted
    std::vector<bool> deleted_used(deleted.size(), false);
    std::size_t search_from = 0;
    for (std::size_t d = 0; d < deleted.size(); ++d) {
      for (std::size_t k = search_from; k < inserted.size(); ++k) {
        if (auto type = classify_change(a[deleted[d]], b[inserted[k]])) {
          out.push_back({std::string(to_string(*type)), name + "#" + std::to_string(deleted[d]), a[deleted[d]],
                         b[inserted[k]]});
          partner[k] = deleted[d];
          deleted_used[d] = true;
          search_from = k + 1;
          break;
        }
      }
    }
    for (std::size_t d = 0; d < deleted.size(); ++d) {
      if (!deleted_used[d]) {
        out.push_back({std::string(to_string(ErrorType::kOmission)), name + "#" + std::to_string(deleted[d]),
                       a[deleted[d]], ""});
      }
    }
    // Walk the perturbed gap in order to find each insertion's anchor.
    for (std::size_t k = 0; k < inserted.size(); ++k) {
      if (partner[k]) {
        previous_original = partner[k];
        continue;
      }
      const std::string anchor = previous_original ? std::to_string(*previous_original) : "-1";
      out.push_back({std::string(to_string(ErrorType::kHallucinatedFinding)), name + "#" + anchor, "",
                     b[inserted[k]]});
    }
    if (am < a.size()) {
      previous_original = am;
      ai = am + 1;
      bi = bm + 1;
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

SeedStream::SeedStream(std::uint64_t seed, std::string_view purpose) : state_(seed ^ fnv1a64(purpose)) {}

std::uint64_t SeedStream::next() {
  state_ += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double SeedStream::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

std::size_t SeedStream::below(std::size_t n) {
  if (n == 0) throw Error(ErrorCode::kPrecondition, "below(0)");
  return static_cast<std::size_t>(next() % n);
}

// ---------------------------------------------------------------------------

RunSummary run_benchmark(const BenchmarkConfig& config, bool resume) {
  config.validate();
  const auto cases = load_case_manifest(config.manifest);
  const auto run_dir = config.run_dir();
  if (!resume && std::filesystem::exists(run_dir / "cases")) {
    throw Error(ErrorCode::kConfigError,
                "run directory " + run_dir.string() + " already holds cases; resume it or pick a new run id");
  }
  const auto pipeline = build_pipeline_config(config, run_dir);
  for (const auto& c : cases) plan_pipeline(c, pipeline);

  std::filesystem::create_directories(run_dir);
  detail::write_file_atomic(run_dir / "cases.json", serialize_manifest(cases));
  detail::write_json_file(run_dir / "settings", RunSettings{config.weights, config.calibration_threshold});

  RunSummary summary;
  summary.run_dir = run_dir;
  summary.outcomes = run_cases(cases, pipeline, resume);
  std::vector<CaseMetrics> per_case;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    per_case.push_back(score_case(cases[i], summary.outcomes[i], config.weights));
  }
  summary.report = aggregate(cases, per_case, summary.outcomes);
  try {
    summary.calibration = calibrate_run(cases, summary.outcomes, config.calibration_threshold);
  } catch (const Error&) {
    // Degenerate expert or judge scores leave the run uncalibrated.
  }
  write_scoring_outputs(run_dir, summary.report, summary.outcomes, summary.calibration);
  summary.exit_code = summary.report.failed == 0 ? 0 : 1;
  return summary;
}

// ---------------------------------------------------------------------------

std::string_view to_string(ErrorType t) {
  switch (t) {
    case ErrorType::kNegationFlip: return "negation_flip";
    case ErrorType::kLateralitySwap: return "laterality_swap";
    case ErrorType::kNumericPerturbation: return "numeric_perturbation";
    case ErrorType::kOmission: return "omission";
    case ErrorType::kHallucinatedFinding: return "hallucinated_finding";
  }
  return "omission";
}

ErrorType error_type_from_string(std::string_view s) {
  for (auto t : kAllErrorTypes) {
    if (to_string(t) == s) return t;
  }
  throw Error(ErrorCode::kPrecondition, "unknown error type '" + std::string(s) + "'");
}

std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    auto b = current.find_first_not_of(" \t\r\n");
    if (b != std::string::npos) {
      auto e = current.find_last_not_of(" \t\r\n");
      out.push_back(current.substr(b, e - b + 1));
    }
    current.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    current += text[i];
    const char c = text[i];
    if ((c == '.' || c == '!' || c == '?') &&
        (i + 1 == text.size() || std::isspace(static_cast<unsigned char>(text[i + 1])))) {
      flush();
    }
  }
  flush();
  return out;
}

PlantedReport plant_errors(const RadiologyReport& report, std::span<const ErrorType> types, int count,
                           std::uint64_t seed) {
  if (count < 0) throw Error(ErrorCode::kPrecondition, "count must be non-negative");
  PlantedReport result{report, {}};
  if (count == 0) return result;
  if (types.empty()) throw Error(ErrorCode::kPrecondition, "no error types requested");

  const std::array<std::vector<std::string>, 2> sections = {split_sentences(report.findings_section),
                                                             split_sentences(report.impression_section)};
  SeedStream rng(seed, "error_planting");
  std::map<Slot, SlotEdit> edits;
  std::size_t omitted = 0;
  std::size_t hallucinated = 0;

  for (int k = 0; k < count; ++k) {
    const auto type = types[static_cast<std::size_t>(k) % types.size()];
    std::vector<Slot> candidates;
    for (int s = 0; s < 2; ++s) {
      const bool findings_only = type == ErrorType::kOmission || type == ErrorType::kHallucinatedFinding;
      if (findings_only && s == 1) continue;
      for (std::size_t i = 0; i < sections[s].size(); ++i) {
        const Slot slot{s, i};
        if (!edits.contains(slot) && eligible(type, sections[s][i])) candidates.push_back(slot);
      }
    }
    if (type == ErrorType::kOmission && omitted + 2 > sections[0].size()) candidates.clear();
    if (type == ErrorType::kHallucinatedFinding && hallucinated >= fabricated_findings().size()) candidates.clear();
    if (candidates.empty()) throw Error(ErrorCode::kInsufficientMaterial, std::string(to_string(type)));

    const Slot slot = candidates[rng.below(candidates.size())];
    const auto& sentence = sections[slot.section][slot.index];
    auto& edit = edits[slot];
    metrics::ErrorDescriptor d{std::string(to_string(type)), location_key(slot), sentence, ""};
    switch (type) {
      case ErrorType::kNegationFlip:
        edit.replacement = negate(sentence);
        d.perturbed = *edit.replacement;
        break;
      case ErrorType::kLateralitySwap:
        edit.replacement = swap_sides(sentence);
        d.perturbed = *edit.replacement;
        break;
      case ErrorType::kNumericPerturbation: {
        const auto num = numbers_in(sentence).front();
        const auto original_text = sentence.substr(num.start, num.len);
        double perturbed = num.value;
        std::string perturbed_text = original_text;
        for (int attempt = 0; attempt < 64 && std::stod(perturbed_text) == num.value; ++attempt) {
          perturbed = std::round(num.value * perturbation_factor(rng) * 10.0) / 10.0;
          perturbed_text = format_decimal(perturbed);
        }
        if (std::stod(perturbed_text) == num.value) {
          throw Error(ErrorCode::kInsufficientMaterial, "numeric_perturbation");
        }
        edit.replacement = sentence.substr(0, num.start) + perturbed_text + sentence.substr(num.start + num.len);
        for (auto& m : result.report.measurements_cited) {
          if (m.value == num.value) {
            m.value = perturbed;
            break;
          }
        }
        d.original = original_text;
        d.perturbed = perturbed_text;
        break;
      }
      case ErrorType::kOmission:
        edit.omitted = true;
        ++omitted;
        break;
      case ErrorType::kHallucinatedFinding: {
        // Draw among fabricated sentences not used yet and absent from the report.
        std::vector<std::string> pool;
        for (const auto& f : fabricated_findings()) {
          bool used = std::any_of(edits.begin(), edits.end(), [&](const auto& e) { return e.second.appended == f; });
          bool present = std::find(sections[0].begin(), sections[0].end(), f) != sections[0].end();
          if (!used && !present) pool.push_back(f);
        }
        if (pool.empty()) throw Error(ErrorCode::kInsufficientMaterial, "hallucinated_finding");
        edit.appended = pool[rng.below(pool.size())];
        d.original.clear();
        d.perturbed = *edit.appended;
        ++hallucinated;
        break;
      }
    }
    result.planted.push_back(std::move(d));
  }

  std::array<std::vector<std::string>, 2> rebuilt;
  for (int s = 0; s < 2; ++s) {
    for (std::size_t i = 0; i < sections[s].size(); ++i) {
      auto it = edits.find({s, i});
      if (it == edits.end()) {
        rebuilt[s].push_back(sections[s][i]);
        continue;
      }
      if (!it->second.omitted) rebuilt[s].push_back(it->second.replacement.value_or(sections[s][i]));
      if (it->second.appended) rebuilt[s].push_back(*it->second.appended);
    }
  }
  result.report.findings_section = join(rebuilt[0]);
  result.report.impression_section = join(rebuilt[1]);
  return result;
}

std::vector<metrics::ErrorDescriptor> oracle_review(const RadiologyReport& original,
                                                    const RadiologyReport& perturbed) {
  std::vector<metrics::ErrorDescriptor> out;
  review_section("findings", split_sentences(original.findings_section),
                 split_sentences(perturbed.findings_section), out);
  review_section("impression", split_sentences(original.impression_section),
                 split_sentences(perturbed.impression_section), out);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

BenchmarkConfig evaluation_config(const Json& document, const std::filesystem::path& base_dir) {
  auto config = parse_benchmark_config(document, base_dir);
  config.hitl = HitlPolicy{};
  return config;
}

}  // namespace

RobustnessResult robustness_eval(const CaseStudy& c, std::span<const RobustnessVariant> variants,
                                 const BenchmarkConfig& config) {
  if (variants.size() < 2) throw Error(ErrorCode::kPrecondition, "robustness needs at least two variants");
  if (!c.ground_truth) throw Error(ErrorCode::kPrecondition, "robustness needs a case with ground truth");
  RobustnessResult result;
  std::vector<double> present;
  for (const auto& v : variants) {
    Json doc = config.document;
    if (!v.config_patch.is_null()) doc.merge_patch(v.config_patch);
    const auto variant_config = evaluation_config(doc, config.base_dir);
    const auto pipeline = build_pipeline_config(variant_config, std::nullopt);
    CaseStudy variant_case = c;
    if (v.context) variant_case.context = *v.context;
    const auto outcome = execute_case(variant_case, plan_pipeline(variant_case, pipeline), pipeline);
    const auto metrics = score_case(variant_case, outcome, variant_config.weights);
    result.names.push_back(v.name);
    if (auto it = metrics.values.find("report.composite_quality"); it != metrics.values.end()) {
      result.scores.push_back(it->second);
      result.failures.push_back(std::nullopt);
      present.push_back(it->second);
    } else {
      result.scores.push_back(std::nullopt);
      result.failures.push_back(outcome.trace.failure_reason.value_or("no_score"));
    }
  }
  if (present.empty()) throw Error(ErrorCode::kCaseFailed, "no variant of " + c.case_id + " produced a score");
  result.stddev = metrics::population_stddev(present);
  return result;
}

CandidateEvaluator benchmark_evaluator(std::filesystem::path base_dir) {
  return [base_dir = std::move(base_dir)](const Json& document, std::span<const CaseStudy> cases) {
    const auto config = evaluation_config(document, base_dir);
    const auto pipeline = build_pipeline_config(config, std::nullopt);
    const auto outcomes = run_cases(cases, pipeline);
    std::vector<double> rewards;
    for (const auto& o : outcomes) {
      rewards.push_back(o.trace.status == CaseStatus::kSucceeded && o.scores ? reward(*o.scores) : 0.0);
    }
    return rewards;
  };
}

}  // namespace consensus
