// Hand-enumerable competence fixtures and brute-force reference metrics,
// shared by the unit tests and the acceptance checks.
#pragma once

#include "calm/competence.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <vector>

namespace calm::testing {

// Two concepts: 0 is causal for the single task, 1 is environmental.
inline std::vector<CompetenceGraph> stub_graphs(std::size_t n) { return std::vector(n, task_graph(1, 0)); }

inline PredictionTable stub_table(const std::vector<PredictionSet>& p0, const std::vector<PredictionSet>& causal,
                                  const std::vector<PredictionSet>& env) {
  PredictionTable t;
  t.original = p0;
  for (std::size_t i = 0; i < p0.size(); ++i) {
    t.intervened.push_back({causal[i], env[i]});
    t.task.push_back(0);
  }
  return t;
}

// Three instances over tokens 0..9, k = 3: causal edits are disjoint from the
// original predictions and environmental edits leave them alone.
inline PredictionTable perfect_stub() {
  const std::vector<PredictionSet> p0 = {{{0, 1, 2}}, {{3, 4, 5}}, {{6, 7, 8}}};
  const std::vector<PredictionSet> disjoint = {{{3, 4, 5}}, {{6, 7, 8}}, {{9, 0, 1}}};
  return stub_table(p0, disjoint, p0);
}

inline PredictionTable inverted_stub() {
  const std::vector<PredictionSet> p0 = {{{0, 1, 2}}, {{3, 4, 5}}, {{6, 7, 8}}};
  const std::vector<PredictionSet> disjoint = {{{3, 4, 5}}, {{6, 7, 8}}, {{9, 0, 1}}};
  return stub_table(p0, p0, disjoint);
}

// Vocabulary {a..e} = 0..4, k = 2: p0 = {a, b}, both edits {a, c}.
inline PredictionTable half_stub() {
  const PredictionSet p0{{0, 1}}, edit{{0, 2}};
  return stub_table({p0}, {edit}, {edit});
}

/// ovl by enumerating the vocabulary.
inline double brute_ovl(const std::vector<int>& a, const std::vector<int>& b, int k, int vocab) {
  int shared = 0;
  for (int w = 0; w < vocab; ++w) {
    const bool in_a = std::find(a.begin(), a.begin() + k, w) != a.begin() + k;
    const bool in_b = std::find(b.begin(), b.end(), w) != b.end();
    shared += in_a && in_b;
  }
  return double(shared) / k;
}

/// Causal-concept score through the literal vocabulary complement.
inline double literal_complement_score(const PredictionSet& edited, const PredictionSet& original, int k,
                                       int vocab) {
  const std::vector<int> prefix(original.tokens.begin(), original.tokens.begin() + k);
  const auto reference = graph_predict(task_graph(1, 0), prefix, 0, vocab);
  return brute_ovl(edited.tokens, reference, k, vocab);
}

inline double brute_topk_accuracy(int gold_rank, int k_max) {
  double s = 0;
  for (int k = 1; k <= k_max; ++k) {
    std::set<int> top;
    for (int r = 1; r <= k; ++r) top.insert(r);
    s += top.count(gold_rank) ? 1.0 : 0.0;
  }
  return s / k_max;
}

/// Random permutation of the vocabulary, used as a full prediction ranking.
inline PredictionSet random_ranking(std::mt19937_64& rng, int vocab) {
  PredictionSet p;
  p.tokens.resize(static_cast<std::size_t>(vocab));
  std::iota(p.tokens.begin(), p.tokens.end(), 0);
  std::shuffle(p.tokens.begin(), p.tokens.end(), rng);
  return p;
}

inline double pearson_of_ranks(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = double(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

struct PermutationOracle {
  double rho = 0;
  double p = 0;
};

/// Spearman rho and two-sided p by enumerating all n! index permutations.
inline PermutationOracle permutation_oracle(const std::vector<double>& xs, const std::vector<double>& ys) {
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  PermutationOracle o;
  o.rho = pearson_of_ranks(rx, ry);
  std::vector<std::size_t> idx(ys.size());
  std::iota(idx.begin(), idx.end(), 0);
  long extreme = 0, total = 0;
  do {
    std::vector<double> permuted;
    for (auto i : idx) permuted.push_back(ry[i]);
    ++total;
    extreme += std::abs(pearson_of_ranks(rx, permuted)) >= std::abs(o.rho) - 1e-12;
  } while (std::next_permutation(idx.begin(), idx.end()));
  o.p = double(extreme) / double(total);
  return o;
}

/// n = 5 fixtures, ties included.
inline std::vector<std::pair<std::vector<double>, std::vector<double>>> spearman_fixtures() {
  return {
      {{1, 2, 3, 4, 5}, {2, 1, 4, 3, 5}},
      {{0.1, 0.4, 0.3, 0.9, 0.7}, {5, 3, 4, 1, 2}},
      {{1, 2, 2, 3, 4}, {1, 3, 2, 5, 4}},
      {{3, 1, 4, 1, 5}, {9, 2, 6, 5, 3}},
      {{0.5, 0.6, 0.7, 0.8, 0.9}, {0.2, 0.9, 0.1, 0.5, 0.4}},
  };
}

}  // namespace calm::testing
