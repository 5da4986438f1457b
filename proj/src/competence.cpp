// SPDX-License-Identifier: Apache-2.0
#include "calm/competence.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

namespace calm {
namespace {

int shared_count(const std::vector<int>& a, const std::vector<int>& b, int k) {
  if (k <= 0) throw std::invalid_argument("ovl: k must be positive");
  if (static_cast<int>(a.size()) < k) throw std::invalid_argument("ovl: first set holds fewer than k predictions");
  const std::set<int> other(b.begin(), b.end());
  int shared = 0;
  for (int i = 0; i < k; ++i) shared += other.count(a[static_cast<std::size_t>(i)]) ? 1 : 0;
  return shared;
}

int shared_count(const PredictionSet& a, const PredictionSet& b, int k) {
  if (b.k() < k) throw std::invalid_argument("ovl: second set holds fewer than k predictions");
  const std::vector<int> prefix(b.tokens.begin(), b.tokens.begin() + k);
  return shared_count(a.tokens, prefix, k);
}

}  // namespace

double ovl(const std::vector<int>& a, const std::vector<int>& b, int k) {
  return double(shared_count(a, b, k)) / double(k);
}

double ovl(const PredictionSet& a, const PredictionSet& b, int k) {
  return double(shared_count(a, b, k)) / double(k);
}

CompetenceDetail competence_score(const PredictionTable& table, const std::vector<CompetenceGraph>& graphs, int k) {
  const std::size_t n = table.original.size();
  if (n == 0) throw std::invalid_argument("competence_score: empty test set");
  if (table.intervened.size() != n || graphs.size() != n) {
    throw std::invalid_argument("competence_score: table and graph counts differ");
  }
  CompetenceDetail d;
  double total = 0;
  std::size_t cells = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& row = table.intervened[i];
    if (static_cast<int>(row.size()) != graphs[i].concept_count()) {
      throw std::invalid_argument("competence_score: probe/concept count mismatch for instance " + std::to_string(i));
    }
    std::vector<double> scores(row.size(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (!row[j]) continue;
      // 1 - ovl as (k - shared) / k
      const int shared = shared_count(*row[j], table.original[i], k);
      scores[j] = double(graphs[i].is_causal(static_cast<int>(j)) ? k - shared : shared) / double(k);
      total += scores[j];
      ++cells;
    }
    d.per_pair.push_back(std::move(scores));
  }
  if (cells == 0) throw std::invalid_argument("competence_score: no concept was applied");
  d.score = total / double(cells);
  return d;
}

double competence_avg_over_k(const PredictionTable& table, const std::vector<CompetenceGraph>& graphs, int k_max) {
  if (k_max < 1) throw std::invalid_argument("competence_avg_over_k: k_max must be >= 1");
  double s = 0;
  for (int k = 1; k <= k_max; ++k) s += competence_score(table, graphs, k).score;
  return s / double(k_max);
}

double topk_accuracy_avg(int gold_rank, int k_max) {
  if (k_max < 1) throw std::invalid_argument("topk_accuracy_avg: k_max must be >= 1");
  int hits = 0;
  for (int k = 1; k <= k_max; ++k) hits += (gold_rank >= 1 && gold_rank <= k) ? 1 : 0;
  return double(hits) / double(k_max);
}

double topk_accuracy_avg(const std::vector<PredictionSet>& predictions, const std::vector<int>& gold, int k_max) {
  if (predictions.empty() || predictions.size() != gold.size()) {
    throw std::invalid_argument("topk_accuracy_avg: need one gold answer per prediction");
  }
  double s = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& t = predictions[i].tokens;
    const auto it = std::find(t.begin(), t.end(), gold[i]);
    const int rank = it == t.end() ? 0 : static_cast<int>(it - t.begin()) + 1;
    s += topk_accuracy_avg(rank, k_max);
  }
  return s / double(predictions.size());
}

double topk_accuracy_avg(const MlmModel& model, const std::vector<ClozeInstance>& test, int k_max) {
  std::vector<PredictionSet> preds;
  std::vector<int> gold;
  for (const auto& inst : test) {
    preds.push_back(model.predict_topk(inst.prompt, inst.mask_index, k_max));
    gold.push_back(inst.answer);
  }
  return topk_accuracy_avg(preds, gold, k_max);
}

RunAggregate aggregate_runs(const std::vector<double>& scores) {
  if (scores.empty()) throw std::invalid_argument("aggregate_runs: no scores");
  RunAggregate a;
  a.min = *std::min_element(scores.begin(), scores.end());
  a.max = *std::max_element(scores.begin(), scores.end());
  double s = 0;
  for (double x : scores) s += x;
  a.mean = s / double(scores.size());
  return a;
}

// ---------------------------------------------------------------------------

std::vector<double> average_ranks(const std::vector<double>& xs) {
  std::vector<std::size_t> idx(xs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&xs](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && xs[idx[j + 1]] == xs[idx[i]]) ++j;
    const double r = (double(i) + double(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = r;
    i = j + 1;
  }
  return ranks;
}

namespace {

std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = double(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0 || sbb == 0) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

}  // namespace

double student_t_two_sided(double t, double dof) {
  if (!(dof > 0)) throw std::invalid_argument("student_t_two_sided: dof must be positive");
  if (std::isinf(t)) return 0;
  return 2 * boost::math::cdf(boost::math::complement(boost::math::students_t(dof), std::abs(t)));
}

SpearmanResult spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("spearman: length mismatch");
  if (xs.size() < 3) throw std::invalid_argument("spearman: need at least 3 pairs");
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  SpearmanResult r;
  r.rho = pearson(rx, ry);
  if (!r.rho) {
    r.p_method = "not-applicable";
    return r;
  }
  const std::size_t n = xs.size();
  if (n <= 8) {
    r.p_method = "exact-permutation";
    std::vector<double> perm = ry;
    std::sort(perm.begin(), perm.end());
    const double observed = std::abs(*r.rho);
    long extreme = 0, total = 0;
    // With tied ranks next_permutation visits each distinct arrangement once;
    // every arrangement stands for the same number of index permutations, so
    // the ratio equals the full n! enumeration.
    do {
      ++total;
      const auto rho = pearson(rx, perm);
      if (rho && std::abs(*rho) >= observed - 1e-12) ++extreme;
    } while (std::next_permutation(perm.begin(), perm.end()));
    r.p = double(extreme) / double(total);
  } else {
    r.p_method = "t-approximation";
    const double rho = *r.rho;
    if (std::abs(rho) >= 1.0) {
      r.p = 0.0;
    } else {
      const double dof = double(n) - 2;
      const double t = rho * std::sqrt(dof / (1 - rho * rho));
      r.p = student_t_two_sided(t, dof);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------

PredictionTable measure_interventions(const MlmModel& model, const std::vector<ClozeInstance>& test,
                                      const std::vector<AdmittedProbe>& probes, const InterventionSpec& spec,
                                      int k_max, int run, std::vector<InterventionLogRow>* log) {
  if (test.empty()) throw std::invalid_argument("measure_interventions: empty test set");
  if (probes.empty()) throw std::invalid_argument("measure_interventions: no probes");
  const int layer = spec.resolved_layer(model);
  PredictionTable table;
  for (const auto& inst : test) {
    const auto encoded = encode_prompt(model, inst, layer, k_max);
    table.original.push_back(encoded.original);
    table.task.push_back(inst.task);
    std::vector<std::optional<PredictionSet>> row(probes.size());
    for (std::size_t j = 0; j < probes.size(); ++j) {
      if (!probes[j].admissible()) continue;
      InterventionSpec s = spec;
      if (s.method == AttackMethod::kRandom) {
        s.seed = spec.seed ^ (static_cast<std::uint64_t>(inst.id) * 0x9e3779b97f4a7c15ULL) ^ (j + 1);
      }
      const auto res = intervene(model, encoded, probes[j], s, k_max);
      row[j] = res.intervened;
      if (log) {
        log->push_back({inst.id, probes[j].concept_id, run, to_string(spec.method), spec.epsilon, res.logit_before,
                        res.logit_after, res.original.tokens, res.intervened.tokens});
      }
    }
    table.intervened.push_back(std::move(row));
  }
  return table;
}

}  // namespace calm
