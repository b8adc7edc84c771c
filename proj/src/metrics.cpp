#include "consensus/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <set>
#include <unordered_map>

#include "consensus/error.hpp"
#include "json_util.hpp"

namespace consensus::metrics {

namespace {

PrecisionRecall make_prf(double overlap, double predicted_total, double reference_total) {
  PrecisionRecall out;
  out.precision = predicted_total > 0 ? overlap / predicted_total : 0.0;
  out.recall = reference_total > 0 ? overlap / reference_total : 0.0;
  const double denom = out.precision + out.recall;
  out.f1 = denom > 0 ? 2.0 * out.precision * out.recall / denom : 0.0;
  return out;
}

bool is_token_byte(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string trim_lower(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return lower(s.substr(b, e - b + 1));
}

}  // namespace

// ---------------------------------------------------------------------------

std::size_t ConfusionMatrix::total() const {
  std::size_t t = 0;
  for (const auto& row : counts) t = std::accumulate(row.begin(), row.end(), t);
  return t;
}

std::size_t ConfusionMatrix::trace() const {
  std::size_t t = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) t += counts[i][i];
  return t;
}

std::size_t ConfusionMatrix::at(std::string_view actual, std::string_view predicted) const {
  auto idx = [&](std::string_view label) -> std::ptrdiff_t {
    auto it = std::find(classes.begin(), classes.end(), label);
    return it == classes.end() ? -1 : it - classes.begin();
  };
  const auto a = idx(actual);
  const auto p = idx(predicted);
  if (a < 0 || p < 0) return 0;
  return counts[a][p];
}

ClassificationResult classification_metrics(std::span<const std::string> predictions,
                                            std::span<const std::string> labels) {
  if (predictions.size() != labels.size()) {
    throw Error(ErrorCode::kLengthMismatch, std::to_string(predictions.size()) + " predictions vs " +
                                                std::to_string(labels.size()) + " labels");
  }
  if (predictions.empty()) throw Error(ErrorCode::kEmptyInput, "classification_metrics");

  std::set<std::string> class_set(labels.begin(), labels.end());
  class_set.insert(predictions.begin(), predictions.end());
  ClassificationResult out;
  out.confusion.classes.assign(class_set.begin(), class_set.end());
  const auto k = out.confusion.classes.size();
  out.confusion.counts.assign(k, std::vector<std::size_t>(k, 0));
  auto index_of = [&](const std::string& label) {
    return static_cast<std::size_t>(
        std::lower_bound(out.confusion.classes.begin(), out.confusion.classes.end(), label) -
        out.confusion.classes.begin());
  };
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ++out.confusion.counts[index_of(labels[i])][index_of(predictions[i])];
    if (labels[i] == predictions[i]) ++correct;
  }
  out.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());

  for (std::size_t c = 0; c < k; ++c) {
    std::size_t predicted = 0, actual = 0;
    for (std::size_t r = 0; r < k; ++r) {
      predicted += out.confusion.counts[r][c];
      actual += out.confusion.counts[c][r];
    }
    out.per_class[out.confusion.classes[c]] =
        make_prf(static_cast<double>(out.confusion.counts[c][c]), static_cast<double>(predicted),
                 static_cast<double>(actual));
  }
  return out;
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw Error(ErrorCode::kLengthMismatch, "roc_auc");
  if (scores.empty()) throw Error(ErrorCode::kEmptyInput, "roc_auc");
  const auto ranks = fractional_ranks(scores);
  double positive_rank_sum = 0.0;
  double positives = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) {
      throw Error(ErrorCode::kPrecondition, "roc_auc labels must be 0 or 1");
    }
    if (labels[i] == 1) {
      positive_rank_sum += ranks[i];
      positives += 1.0;
    }
  }
  const double negatives = static_cast<double>(labels.size()) - positives;
  if (positives == 0.0 || negatives == 0.0) throw Error(ErrorCode::kOneClassOnly, "roc_auc");
  const double u = positive_rank_sum - positives * (positives + 1.0) / 2.0;
  return u / (positives * negatives);
}

// ---------------------------------------------------------------------------

OverlapScores segmentation_metrics(const SegmentationMask& predicted,
                                   const SegmentationMask& reference) {
  if (predicted.dims != reference.dims || predicted.voxels.size() != reference.voxels.size()) {
    throw Error(ErrorCode::kDimMismatch, "segmentation_metrics");
  }
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < predicted.voxels.size(); ++i) {
    const bool pa = predicted.voxels[i] != 0;
    const bool pb = reference.voxels[i] != 0;
    a += pa;
    b += pb;
    both += pa && pb;
  }
  if (a == 0 && b == 0) return {1.0, 1.0, 1.0, 1.0};
  const double inter = static_cast<double>(both);
  const double uni = static_cast<double>(a + b - both);
  OverlapScores out;
  out.dice = 2.0 * inter / static_cast<double>(a + b);
  out.iou = inter / uni;
  out.sensitivity = b > 0 ? inter / static_cast<double>(b) : 0.0;
  out.precision = a > 0 ? inter / static_cast<double>(a) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (is_token_byte(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

PrecisionRecall rouge_tokens(std::span<const std::string> candidate,
                             std::span<const std::string> reference, RougeVariant variant) {
  if (candidate.empty() || reference.empty()) return {};
  if (variant.kind == RougeVariant::Kind::kL) {
    // Two-row LCS table.
    std::vector<std::size_t> prev(reference.size() + 1, 0), cur(reference.size() + 1, 0);
    for (std::size_t i = 1; i <= candidate.size(); ++i) {
      for (std::size_t j = 1; j <= reference.size(); ++j) {
        cur[j] = candidate[i - 1] == reference[j - 1] ? prev[j - 1] + 1
                                                      : std::max(prev[j], cur[j - 1]);
      }
      std::swap(prev, cur);
    }
    const double lcs = static_cast<double>(prev[reference.size()]);
    return make_prf(lcs, static_cast<double>(candidate.size()),
                    static_cast<double>(reference.size()));
  }

  const auto n = static_cast<std::size_t>(std::max(1, variant.n));
  auto ngrams = [n](std::span<const std::string> tokens) {
    std::unordered_map<std::string, std::size_t> counts;
    if (tokens.size() < n) return counts;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
      std::string key;
      for (std::size_t k = 0; k < n; ++k) {
        key += tokens[i + k];
        key.push_back('\x1f');
      }
      ++counts[key];
    }
    return counts;
  };
  const auto cand = ngrams(candidate);
  const auto ref = ngrams(reference);
  double overlap = 0.0;
  for (const auto& [gram, count] : cand) {
    if (auto it = ref.find(gram); it != ref.end()) {
      overlap += static_cast<double>(std::min(count, it->second));
    }
  }
  const double cand_total = candidate.size() >= n ? static_cast<double>(candidate.size() - n + 1) : 0.0;
  const double ref_total = reference.size() >= n ? static_cast<double>(reference.size() - n + 1) : 0.0;
  return make_prf(overlap, cand_total, ref_total);
}

PrecisionRecall rouge(std::string_view candidate, std::string_view reference,
                      RougeVariant variant) {
  const auto c = tokenize(candidate);
  const auto r = tokenize(reference);
  return rouge_tokens(c, r, variant);
}

std::size_t count_syllables(std::string_view word) {
  const auto w = lower(word);
  auto is_vowel = [](char c) {
    return c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u' || c == 'y';
  };
  std::size_t groups = 0;
  bool in_group = false;
  for (char c : w) {
    const bool v = is_vowel(c);
    if (v && !in_group) ++groups;
    in_group = v;
  }
  if (!w.empty() && w.back() == 'e' && groups > 0) --groups;
  return std::max<std::size_t>(groups, 1);
}

TextCounts count_text(std::string_view text) {
  TextCounts counts;
  std::size_t words_in_sentence = 0;
  std::string word;
  auto flush_word = [&] {
    if (word.empty()) return;
    ++counts.words;
    ++words_in_sentence;
    counts.syllables += count_syllables(word);
    word.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (is_token_byte(c)) {
      word.push_back(static_cast<char>(c));
      continue;
    }
    if (c == '\'' && !word.empty()) continue;  // contractions stay one word
    flush_word();
    const bool terminator = c == '.' || c == '!' || c == '?';
    const bool at_boundary =
        i + 1 == text.size() || std::isspace(static_cast<unsigned char>(text[i + 1]));
    if (terminator && at_boundary && words_in_sentence > 0) {
      ++counts.sentences;
      words_in_sentence = 0;
    }
  }
  flush_word();
  if (words_in_sentence > 0) ++counts.sentences;
  return counts;
}

double flesch_kincaid_grade(std::string_view text) {
  const auto c = count_text(text);
  if (c.words == 0 || c.sentences == 0) throw Error(ErrorCode::kEmptyText, "flesch_kincaid_grade");
  return 0.39 * (static_cast<double>(c.words) / static_cast<double>(c.sentences)) +
         11.8 * (static_cast<double>(c.syllables) / static_cast<double>(c.words)) - 15.59;
}

// ---------------------------------------------------------------------------

std::vector<double> fractional_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

double spearman_rho(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw Error(ErrorCode::kLengthMismatch, "spearman_rho");
  if (xs.size() < 2) throw Error(ErrorCode::kDegenerateInput, "spearman_rho needs >= 2 pairs");
  const auto rx = fractional_ranks(xs);
  const auto ry = fractional_ranks(ys);
  const double mx = mean(rx);
  const double my = mean(ry);
  double cov = 0.0, vx = 0.0, vy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    cov += (rx[i] - mx) * (ry[i] - my);
    vx += (rx[i] - mx) * (rx[i] - mx);
    vy += (ry[i] - my) * (ry[i] - my);
  }
  if (vx == 0.0 || vy == 0.0) throw Error(ErrorCode::kDegenerateInput, "constant series");
  return std::clamp(cov / std::sqrt(vx * vy), -1.0, 1.0);
}

// ---------------------------------------------------------------------------

void to_json(Json& j, const ErrorDescriptor& d) {
  j = Json{{"type", d.type}, {"location", d.location}};
  if (!d.original.empty()) j["original"] = d.original;
  if (!d.perturbed.empty()) j["perturbed"] = d.perturbed;
}

void from_json(const Json& j, ErrorDescriptor& d) {
  d.type = detail::required<std::string>(j, "type", "error descriptor");
  d.location = detail::required<std::string>(j, "location", "error descriptor");
  d.original = detail::optional_field<std::string>(j, "original", "", "error descriptor");
  d.perturbed = detail::optional_field<std::string>(j, "perturbed", "", "error descriptor");
}

DetectionScores planted_error_eval(std::span<const ErrorDescriptor> planted,
                                   std::span<const ErrorDescriptor> flagged) {
  const std::set<ErrorDescriptor> p(planted.begin(), planted.end());
  const std::set<ErrorDescriptor> f(flagged.begin(), flagged.end());
  if (p.empty() && f.empty()) return {1.0, 1.0};
  std::size_t hits = 0;
  for (const auto& d : f) hits += p.count(d);
  DetectionScores out;
  out.precision = f.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(f.size());
  out.recall = p.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(p.size());
  return out;
}

double improvement(std::span<const double> before, std::span<const double> after) {
  if (before.size() != after.size()) throw Error(ErrorCode::kLengthMismatch, "improvement");
  if (before.empty()) throw Error(ErrorCode::kEmptyInput, "improvement");
  return mean(after) - mean(before);
}

// ---------------------------------------------------------------------------

ScoreWeights ScoreWeights::defaults() {
  return ScoreWeights{{{std::string(kClinicalAccuracy), 0.4},
                       {std::string(kCompleteness), 0.2},
                       {std::string(kCorrectness), 0.2},
                       {std::string(kLexicalRougeL), 0.1},
                       {std::string(kReadability), 0.1}}};
}

void ScoreWeights::validate() const {
  static const std::set<std::string, std::less<>> kKnown = {
      std::string(kClinicalAccuracy), std::string(kCompleteness), std::string(kCorrectness),
      std::string(kLexicalRougeL), std::string(kReadability)};
  double sum = 0.0;
  for (const auto& [label, w] : weights) {
    if (!kKnown.contains(label)) throw Error(ErrorCode::kWeightError, "unknown component " + label);
    if (!(w >= 0.0) || !std::isfinite(w)) throw Error(ErrorCode::kWeightError, "negative weight " + label);
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw Error(ErrorCode::kWeightError, "weights sum to " + format_decimal(sum));
  }
  auto weight = [&](std::string_view label) {
    auto it = weights.find(std::string(label));
    return it == weights.end() ? 0.0 : it->second;
  };
  if (!(weight(kClinicalAccuracy) > weight(kLexicalRougeL))) {
    throw Error(ErrorCode::kWeightError, "clinical_accuracy must outweigh lexical_rouge_l");
  }
}

double composite_report_quality(const std::map<std::string, double>& components,
                                const ScoreWeights& weights) {
  weights.validate();
  double total = 0.0;
  for (const auto& [label, w] : weights.weights) {
    auto it = components.find(label);
    if (it == components.end()) throw Error(ErrorCode::kMissingComponent, label);
    if (!(it->second >= 0.0 && it->second <= 1.0)) {
      throw Error(ErrorCode::kPrecondition, "component " + label + " outside [0,1]");
    }
    total += w * it->second;
  }
  return std::clamp(total, 0.0, 1.0);
}

double benchmark_score(const JudgeScores& s) {
  const std::pair<const char*, double> dims[] = {{"correctness", s.correctness},
                                                 {"conciseness", s.conciseness},
                                                 {"completeness", s.completeness},
                                                 {"image_descriptions", s.image_descriptions}};
  double sum = 0.0;
  for (const auto& [name, v] : dims) {
    if (std::isnan(v)) throw Error(ErrorCode::kMissingDimension, name);
    sum += v;
  }
  return 100.0 * (sum / 4.0);
}

PrecisionRecall finding_match(std::span<const Finding> predicted, std::span<const Finding> reference) {
  if (predicted.empty() && reference.empty()) return {1.0, 1.0, 1.0};
  std::map<std::pair<std::string, Severity>, std::size_t> ref_counts;
  for (const auto& f : reference) ++ref_counts[{trim_lower(f.location), f.severity}];
  double hits = 0.0;
  for (const auto& f : predicted) {
    auto it = ref_counts.find({trim_lower(f.location), f.severity});
    if (it != ref_counts.end() && it->second > 0) {
      --it->second;
      hits += 1.0;
    }
  }
  return make_prf(hits, static_cast<double>(predicted.size()), static_cast<double>(reference.size()));
}

double readability_score(double grade) { return std::clamp(1.0 - grade / 20.0, 0.0, 1.0); }

Vote vote_from_string(std::string_view s) {
  if (s == "A") return Vote::kA;
  if (s == "B") return Vote::kB;
  if (s == "tie") return Vote::kTie;
  throw Error(ErrorCode::kSchemaError, "unknown preference vote '" + std::string(s) + "'");
}

std::string_view to_string(Vote v) {
  switch (v) {
    case Vote::kA: return "A";
    case Vote::kB: return "B";
    case Vote::kTie: return "tie";
  }
  return "tie";
}

double preference_rate(std::span<const Vote> votes) {
  if (votes.empty()) throw Error(ErrorCode::kEmptyInput, "preference_rate");
  double score = 0.0;
  for (auto v : votes) score += v == Vote::kA ? 1.0 : v == Vote::kTie ? 0.5 : 0.0;
  return score / static_cast<double>(votes.size());
}

double nearest_rank_percentile(std::span<const double> values, double p) {
  if (values.empty()) throw Error(ErrorCode::kEmptyInput, "percentile");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const auto n = static_cast<double>(sorted.size());
  auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * n));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

EfficiencyReport pipeline_efficiency(std::span<const PipelineTrace> traces) {
  if (traces.empty()) throw Error(ErrorCode::kEmptyInput, "pipeline_efficiency");
  std::vector<double> latencies;
  std::vector<double> retries;
  double succeeded = 0.0;
  for (const auto& t : traces) {
    if (t.status == CaseStatus::kSucceeded) succeeded += 1.0;
    latencies.push_back(static_cast<double>(t.latency_ms()));
    retries.push_back(static_cast<double>(t.total_retries()));
  }
  EfficiencyReport out;
  out.success_rate = succeeded / static_cast<double>(traces.size());
  out.latency_mean_ms = mean(latencies);
  out.latency_p50_ms = nearest_rank_percentile(latencies, 50.0);
  out.latency_p95_ms = nearest_rank_percentile(latencies, 95.0);
  out.mean_retries = mean(retries);
  return out;
}

double mean(std::span<const double> values) {
  if (values.empty()) return 0.0;
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double population_stddev(std::span<const double> values) {
  if (values.empty()) return 0.0;
  const double m = mean(values);
  double acc = 0.0;
  for (double v : values) acc += (v - m) * (v - m);
  return std::sqrt(acc / static_cast<double>(values.size()));
}

}  // namespace consensus::metrics
