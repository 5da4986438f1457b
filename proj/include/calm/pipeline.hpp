// SPDX-License-Identifier: Apache-2.0
//
// End-to-end experiment: corpus -> masked LM -> concept probes ->
// interventions -> competence report. Each stage exists both as an in-memory
// function and as a resumable on-disk step of `run_stage`.

#pragma once

#include "calm/competence.hpp"
#include "calm/experiment.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace calm {

// ---------------------------------------------------------------------------
// In-memory stages

Corpus make_corpus(const ExperimentConfig& cfg);
MlmModel train_language_model(const ExperimentConfig& cfg, const Corpus& corpus,
                              const std::function<void(int step, double loss)>& progress = {});

int concept_count(const ExperimentConfig& cfg);
std::vector<std::string> concept_names(const ExperimentConfig& cfg);
std::string task_name(int task);

/// Probe datasets of one concept.
struct ProbeData {
  std::vector<ProbeInstance> train;
  std::vector<ProbeInstance> val;
};

std::vector<ProbeData> build_probe_data(const MlmModel& model, const Corpus& corpus, const ExperimentConfig& cfg);

/// Probes of one training run, indexed by concept id.
struct ProbeRun {
  std::vector<ProbeModel> probes;
  std::vector<double> val_accuracy;
  std::vector<int> best_epoch;

  std::vector<AdmittedProbe> admitted() const;
};

std::vector<ProbeRun> train_probe_runs(const std::vector<ProbeData>& data, const ExperimentConfig& cfg);

/// One prediction table per probe run.
std::vector<PredictionTable> run_interventions(const MlmModel& model, const std::vector<ClozeInstance>& test,
                                               const std::vector<ProbeRun>& runs, const ExperimentConfig& cfg,
                                               std::vector<InterventionLogRow>* log = nullptr);

/// Rebuilds the prediction tables from an intervention log.
std::vector<PredictionTable> tables_from_log(const std::vector<InterventionLogRow>& log,
                                             const std::vector<ClozeInstance>& test, const ExperimentConfig& cfg);

struct TaskScore {
  int task = 0;
  std::string name;
  int instances = 0;
  double accuracy = 0;
  std::vector<double> competence_runs;  // runs with at least one applied probe
  std::optional<RunAggregate> competence;
};

struct ProbeSummary {
  int run = 0;
  int concept_id = 0;
  int best_epoch = 0;
  double val_accuracy = 0;
  bool admissible = false;
};

struct CompetenceReport {
  std::string model;
  std::string method;
  double epsilon = 0;
  int k_max = 0;
  int runs = 0;
  std::vector<std::string> concepts;
  std::vector<TaskScore> tasks;
  double accuracy = 0;                         // mean over tasks
  std::vector<double> competence_runs;         // per run, mean over tasks
  std::optional<RunAggregate> competence;
  // [task][concept]: overlap with the original predictions averaged over
  // k = 1..k_max, runs and instances; NaN when every probe was gated.
  std::vector<std::vector<double>> overlap;
  // [task][concept]: fraction of (run, instance) pairs whose top-1 changed.
  std::vector<std::vector<double>> top1_change;
  std::vector<ProbeSummary> probes;
  SpearmanResult accuracy_competence;  // across tasks
};

CompetenceReport build_report(const ExperimentConfig& cfg, const MlmModel& model,
                              const std::vector<ClozeInstance>& test, const std::vector<ProbeSummary>& probes,
                              const std::vector<PredictionTable>& tables);

std::vector<ProbeSummary> summarize_probes(const std::vector<ProbeRun>& runs);

struct TaskComparison {
  std::string task;
  double accuracy_a = 0, accuracy_b = 0;
  std::optional<double> competence_a, competence_b;
  double accuracy_delta() const { return accuracy_a - accuracy_b; }
  std::optional<double> competence_delta() const;
};

struct Comparison {
  std::string model_a, model_b;
  std::vector<TaskComparison> tasks;
  int accuracy_won_a = 0, accuracy_won_b = 0;
  int competence_won_a = 0, competence_won_b = 0;
  SpearmanResult delta_correlation;  // accuracy deltas vs competence deltas
};

/// Task-wise comparison of two reports over the tasks they share.
Comparison compare_reports(const CompetenceReport& a, const CompetenceReport& b);

// ---------------------------------------------------------------------------
// Serialization

nlohmann::ordered_json report_to_json(const CompetenceReport& r);
CompetenceReport report_from_json(const nlohmann::json& j);
nlohmann::ordered_json comparison_to_json(const Comparison& c);

std::string per_task_scores_csv(const CompetenceReport& r);
std::string intervention_matrix_csv(const CompetenceReport& r);
std::string comparison_csv(const Comparison& c);
/// Rows task,model,value,err_lo,err_hi for accuracy or competence.
std::string plot_data_csv(const std::vector<CompetenceReport>& reports, bool competence);

std::string intervention_log_csv(const std::vector<InterventionLogRow>& log);
std::vector<InterventionLogRow> parse_intervention_log(const std::string& csv);

/// Shortest decimal that round-trips.
std::string format_double(double x);

// ---------------------------------------------------------------------------
// On-disk stages

enum class Stage { kGenData, kTrainLm, kTrainProbes, kIntervene, kScore, kReport, kCompare, kAll };

std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);
/// Process exit code reported when `s` fails.
int exit_code(Stage s);
inline constexpr int kConfigExitCode = 2;

class StageError : public std::runtime_error {
 public:
  StageError(Stage stage, const std::string& what) : std::runtime_error(what), stage_(stage) {}
  Stage stage() const { return stage_; }

 private:
  Stage stage_;
};

/// Runs one stage (or, for kAll, every stage from `from` onwards) in `out`,
/// reading earlier artifacts from disk. Failures are rethrown as StageError.
void run_stage(Stage stage, const ExperimentConfig& cfg, const std::filesystem::path& out,
               std::optional<Stage> from = std::nullopt);

/// Compares the reports in two output directories and writes the comparison
/// and joint plot data into `out`.
void run_compare(const std::filesystem::path& a, const std::filesystem::path& b, const std::filesystem::path& out);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace calm
