// SPDX-License-Identifier: Apache-2.0
//
// Competence scoring from intervened vs. original top-k predictions.
//
// For an instance of task T and a concept Z_j, the reference predictor keeps
// the original predictions when Z_j is environmental and expects the
// complement of them when Z_j is causal. With ovl(A, B) = |A n B| / k this
// gives a per-(instance, concept) score of ovl(p_j, p_0) for environmental
// concepts and 1 - ovl(p_j, p_0) for the causal one.

#pragma once

#include "calm/gbi.hpp"
#include "calm/mlm.hpp"
#include "calm/probe.hpp"
#include "calm/synth_task.hpp"

#include <optional>
#include <string>
#include <vector>

namespace calm {

/// |a n b| / k over the first k entries of `a`. `b` may be any token set
/// (a prediction set or a materialized reference set).
double ovl(const std::vector<int>& a, const std::vector<int>& b, int k);
double ovl(const PredictionSet& a, const PredictionSet& b, int k);

/// Original and per-concept intervened top-k_max predictions for a test set.
/// intervened[i][j] is empty when concept j was not applied (gated probe).
struct PredictionTable {
  std::vector<PredictionSet> original;
  std::vector<std::vector<std::optional<PredictionSet>>> intervened;
  std::vector<int> task;  // task of each instance
};

struct CompetenceDetail {
  double score = 0;
  // per_pair[i][j]: score of instance i under concept j (NaN when skipped)
  std::vector<std::vector<double>> per_pair;
};

/// Experimental competence at a single k. `graphs[i]` is the competence graph
/// of instance i's task; every instance must see the same concept count.
CompetenceDetail competence_score(const PredictionTable& table, const std::vector<CompetenceGraph>& graphs, int k);

/// Mean of competence_score over k = 1..k_max.
double competence_avg_over_k(const PredictionTable& table, const std::vector<CompetenceGraph>& graphs, int k_max);

/// Mean over k = 1..k_max of 1[gold in top-k]; `gold_rank` is 1-based (0 or
/// anything above k_max counts as a miss for every k).
double topk_accuracy_avg(int gold_rank, int k_max);
double topk_accuracy_avg(const std::vector<PredictionSet>& predictions, const std::vector<int>& gold, int k_max);
double topk_accuracy_avg(const MlmModel& model, const std::vector<ClozeInstance>& test, int k_max);

struct RunAggregate {
  double mean = 0;
  double min = 0;
  double max = 0;
};

RunAggregate aggregate_runs(const std::vector<double>& scores);

struct SpearmanResult {
  std::optional<double> rho;  // empty when either input has no rank variance
  std::optional<double> p;
  std::string p_method;  // "exact-permutation", "t-approximation" or "not-applicable"
};

/// Average ranks (1-based) with ties sharing the mean of their positions.
std::vector<double> average_ranks(const std::vector<double>& xs);

/// Spearman rank correlation: Pearson on average ranks. Two-sided p from the
/// exact permutation distribution for n <= 8, otherwise a Student-t
/// approximation with n - 2 degrees of freedom.
SpearmanResult spearman(const std::vector<double>& xs, const std::vector<double>& ys);

/// Two-sided tail probability of Student's t with `dof` degrees of freedom.
double student_t_two_sided(double t, double dof);

// ---------------------------------------------------------------------------
// Model-level measurement

struct InterventionLogRow {
  std::int64_t instance_id = 0;
  int concept_id = 0;
  int run = 0;
  std::string method;
  double epsilon = 0;
  double logit_before = 0;
  double logit_after = 0;
  std::vector<int> topk_before;
  std::vector<int> topk_after;
};

/// Applies every admitted probe to every test instance (cross-task
/// included) and collects top-k_max predictions. Probes below the gate are
/// skipped and leave an empty cell.
PredictionTable measure_interventions(const MlmModel& model, const std::vector<ClozeInstance>& test,
                                      const std::vector<AdmittedProbe>& probes, const InterventionSpec& spec,
                                      int k_max, int run = 0, std::vector<InterventionLogRow>* log = nullptr);

}  // namespace calm
