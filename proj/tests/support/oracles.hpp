#pragma once

// Brute-force reference implementations for the metric suite. They follow
// the textbook definitions directly and share no code with the library.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "consensus/metrics.hpp"
#include "consensus/types.hpp"

namespace oracle {

struct Overlap {
  double dice, iou, sensitivity, precision;
};

inline Overlap overlap(const consensus::SegmentationMask& a, const consensus::SegmentationMask& b) {
  std::size_t na = 0, nb = 0, both = 0, either = 0;
  for (std::uint32_t x = 0; x < a.dims[0]; ++x) {
    for (std::uint32_t y = 0; y < a.dims[1]; ++y) {
      for (std::uint32_t z = 0; z < a.dims[2]; ++z) {
        const bool in_a = a.at(x, y, z), in_b = b.at(x, y, z);
        na += in_a;
        nb += in_b;
        both += in_a && in_b;
        either += in_a || in_b;
      }
    }
  }
  if (na == 0 && nb == 0) return {1, 1, 1, 1};
  auto ratio = [](double num, double den) { return den == 0 ? 0.0 : num / den; };
  return {ratio(2.0 * both, double(na + nb)), ratio(double(both), double(either)), ratio(double(both), double(nb)),
          ratio(double(both), double(na))};
}

inline consensus::SegmentationMask random_mask(std::mt19937_64& rng, std::array<std::uint32_t, 3> dims,
                                               double density) {
  auto m = consensus::SegmentationMask::empty(dims[0], dims[1], dims[2]);
  std::bernoulli_distribution on(density);
  for (std::uint32_t x = 0; x < dims[0]; ++x)
    for (std::uint32_t y = 0; y < dims[1]; ++y)
      for (std::uint32_t z = 0; z < dims[2]; ++z) m.set(x, y, z, on(rng));
  return m;
}

inline std::vector<std::vector<std::string>> ngrams(const std::vector<std::string>& tokens, int n) {
  std::vector<std::vector<std::string>> out;
  for (int i = 0; i + n <= static_cast<int>(tokens.size()); ++i) {
    out.emplace_back(tokens.begin() + i, tokens.begin() + i + n);
  }
  return out;
}

// Greedy one-to-one matching of equal n-grams is the multiset intersection.
inline std::size_t matched_ngrams(const std::vector<std::string>& c, const std::vector<std::string>& r, int n) {
  const auto cg = ngrams(c, n);
  const auto rg = ngrams(r, n);
  std::vector<bool> used(rg.size(), false);
  std::size_t hits = 0;
  for (const auto& g : cg) {
    for (std::size_t j = 0; j < rg.size(); ++j) {
      if (!used[j] && rg[j] == g) {
        used[j] = true;
        ++hits;
        break;
      }
    }
  }
  return hits;
}

// Top-down recursion with memoization over (i, j) suffixes.
inline std::size_t lcs(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> memo;
  auto go = [&](auto&& self, std::size_t i, std::size_t j) -> std::size_t {
    if (i == a.size() || j == b.size()) return 0;
    if (auto it = memo.find({i, j}); it != memo.end()) return it->second;
    const std::size_t v = a[i] == b[j] ? 1 + self(self, i + 1, j + 1)
                                       : std::max(self(self, i + 1, j), self(self, i, j + 1));
    memo[{i, j}] = v;
    return v;
  };
  return go(go, 0, 0);
}

struct Prf {
  double p, r, f;
};

inline Prf prf(double hits, double cand_total, double ref_total) {
  if (cand_total == 0 || ref_total == 0) return {0, 0, 0};
  const double p = hits / cand_total, r = hits / ref_total;
  return {p, r, p + r == 0 ? 0.0 : 2 * p * r / (p + r)};
}

inline Prf rouge_n(const std::vector<std::string>& c, const std::vector<std::string>& r, int n) {
  return prf(double(matched_ngrams(c, r, n)), double(ngrams(c, n).size()), double(ngrams(r, n).size()));
}

inline Prf rouge_l(const std::vector<std::string>& c, const std::vector<std::string>& r) {
  return prf(double(lcs(c, r)), double(c.size()), double(r.size()));
}

// Average rank by counting: 1 + #smaller + (#equal - 1) / 2.
inline std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<double> out;
  for (double x : v) {
    double less = 0, equal = 0;
    for (double y : v) {
      less += y < x;
      equal += y == x;
    }
    out.push_back(1 + less + (equal - 1) / 2);
  }
  return out;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = double(x.size());
  double sx = 0, sy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
  }
  const double mx = sx / n, my = sy / n;
  double cov = 0, vx = 0, vy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    cov += (x[i] - mx) * (y[i] - my);
    vx += (x[i] - mx) * (x[i] - mx);
    vy += (y[i] - my) * (y[i] - my);
  }
  return cov / std::sqrt(vx * vy);
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson(ranks(x), ranks(y));
}

// 1 - 6 sum d^2 / (n (n^2 - 1)), valid without ties.
inline double spearman_tie_free(const std::vector<double>& x, const std::vector<double>& y) {
  const auto rx = ranks(x), ry = ranks(y);
  double d2 = 0;
  for (std::size_t i = 0; i < x.size(); ++i) d2 += (rx[i] - ry[i]) * (rx[i] - ry[i]);
  const double n = double(x.size());
  return 1 - 6 * d2 / (n * (n * n - 1));
}

inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      pairs += 1;
      wins += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
    }
  }
  return wins / pairs;
}

inline std::vector<std::string> random_tokens(std::mt19937_64& rng, std::size_t max_len, int vocab) {
  static const char* kWords[] = {"left", "right", "mass", "lobe", "no", "edema", "mm", "nodule", "is", "the"};
  std::uniform_int_distribution<std::size_t> len(0, max_len);
  std::uniform_int_distribution<int> word(0, vocab - 1);
  std::vector<std::string> out(len(rng));
  for (auto& t : out) t = kWords[word(rng)];
  return out;
}

}  // namespace oracle
