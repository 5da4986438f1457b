// SPDX-License-Identifier: Apache-2.0
#include "calm/pipeline.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>

namespace calm {
namespace fs = std::filesystem;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string join(const std::vector<int>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) s += ' ';
    s += std::to_string(xs[i]);
  }
  return s;
}

std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::istringstream in(s);
  int x;
  while (in >> x) out.push_back(x);
  return out;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& s) {
  if (s == "nan") return kNaN;
  double x = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
  if (ec != std::errc() || p != s.data() + s.size()) throw std::invalid_argument("not a number: '" + s + "'");
  return x;
}

nlohmann::ordered_json num(double x) { return std::isfinite(x) ? nlohmann::ordered_json(x) : nlohmann::ordered_json(); }
nlohmann::ordered_json num(const std::optional<double>& x) { return x ? num(*x) : nlohmann::ordered_json(); }

double num_from(const nlohmann::json& j) { return j.is_null() ? kNaN : j.get<double>(); }

std::string opt_csv(const std::optional<double>& x) { return x ? format_double(*x) : "nan"; }

nlohmann::ordered_json spearman_json(const SpearmanResult& s) {
  return {{"rho", num(s.rho)}, {"p", num(s.p)}, {"p_method", s.p_method}};
}

SpearmanResult spearman_or_na(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() < 3) return {std::nullopt, std::nullopt, "not-applicable"};
  return spearman(xs, ys);
}

fs::path probe_path(const fs::path& out, int run, int concept_id) {
  return out / "probes" / ("run" + std::to_string(run) + "_concept" + std::to_string(concept_id) + ".ckpt");
}

}  // namespace

std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, p);
}

// ---------------------------------------------------------------------------

Corpus make_corpus(const ExperimentConfig& cfg) { return generate_corpus(cfg.generator_config()); }

MlmModel train_language_model(const ExperimentConfig& cfg, const Corpus& corpus,
                              const std::function<void(int, double)>& progress) {
  MlmModel model(cfg.lm_config(), cfg.resolved_lm_init_seed());
  train_mlm(model, corpus.train, cfg.lm_train_config(), progress);
  return model;
}

int concept_count(const ExperimentConfig& cfg) { return cfg.generator.relations + 1; }

std::vector<std::string> concept_names(const ExperimentConfig& cfg) {
  return task_graph(cfg.generator.relations, 0).concepts;
}

std::string task_name(int task) { return "relation" + std::to_string(task); }

std::vector<ProbeData> build_probe_data(const MlmModel& model, const Corpus& corpus, const ExperimentConfig& cfg) {
  const auto gen = cfg.generator_config();
  const int layer = cfg.probe_layer.value_or(model.layers());
  const std::uint64_t base = cfg.resolved_dataset_seed();
  std::vector<ProbeData> data;
  for (int c = 0; c < concept_count(cfg); ++c) {
    ProbeData d;
    d.train = build_probe_dataset(model, corpus.train, gen, c, layer, derive_seed(base, 2 * c));
    d.val = build_probe_dataset(model, corpus.val, gen, c, layer, derive_seed(base, 2 * c + 1));
    data.push_back(std::move(d));
  }
  return data;
}

std::vector<AdmittedProbe> ProbeRun::admitted() const {
  std::vector<AdmittedProbe> out;
  for (std::size_t c = 0; c < probes.size(); ++c) out.push_back({&probes[c], val_accuracy[c], static_cast<int>(c)});
  return out;
}

std::vector<ProbeRun> train_probe_runs(const std::vector<ProbeData>& data, const ExperimentConfig& cfg) {
  std::vector<ProbeRun> runs;
  for (int r = 0; r < cfg.runs; ++r) {
    ProbeRun run;
    for (std::size_t c = 0; c < data.size(); ++c) {
      auto pc = cfg.probe_config(r);
      pc.seed = derive_seed(pc.seed, c);
      auto res = train_probe(data[c].train, data[c].val, pc);
      run.probes.push_back(std::move(res.probe));
      run.val_accuracy.push_back(res.best_val_accuracy);
      run.best_epoch.push_back(res.best_epoch);
    }
    runs.push_back(std::move(run));
  }
  return runs;
}

std::vector<ProbeSummary> summarize_probes(const std::vector<ProbeRun>& runs) {
  std::vector<ProbeSummary> out;
  for (std::size_t r = 0; r < runs.size(); ++r) {
    for (std::size_t c = 0; c < runs[r].probes.size(); ++c) {
      const double acc = runs[r].val_accuracy[c];
      out.push_back({static_cast<int>(r), static_cast<int>(c), runs[r].best_epoch[c], acc, acc >= kAdmissibilityGate});
    }
  }
  return out;
}

std::vector<PredictionTable> run_interventions(const MlmModel& model, const std::vector<ClozeInstance>& test,
                                               const std::vector<ProbeRun>& runs, const ExperimentConfig& cfg,
                                               std::vector<InterventionLogRow>* log) {
  std::vector<PredictionTable> tables;
  const auto spec = cfg.intervention_spec();
  for (std::size_t r = 0; r < runs.size(); ++r) {
    auto s = spec;
    s.seed = derive_seed(spec.seed, r);
    tables.push_back(measure_interventions(model, test, runs[r].admitted(), s, cfg.k_max, static_cast<int>(r), log));
  }
  return tables;
}

std::vector<PredictionTable> tables_from_log(const std::vector<InterventionLogRow>& log,
                                             const std::vector<ClozeInstance>& test, const ExperimentConfig& cfg) {
  std::map<std::int64_t, std::size_t> index;
  for (std::size_t i = 0; i < test.size(); ++i) index[test[i].id] = i;
  const auto concepts = static_cast<std::size_t>(concept_count(cfg));
  std::vector<PredictionTable> tables(static_cast<std::size_t>(cfg.runs));
  for (auto& t : tables) {
    t.original.resize(test.size());
    t.intervened.assign(test.size(), std::vector<std::optional<PredictionSet>>(concepts));
    for (const auto& inst : test) t.task.push_back(inst.task);
  }
  for (const auto& row : log) {
    const auto it = index.find(row.instance_id);
    if (it == index.end()) throw std::invalid_argument("intervention log names unknown instance " + std::to_string(row.instance_id));
    if (row.run < 0 || row.run >= cfg.runs) throw std::invalid_argument("intervention log run out of range");
    if (row.concept_id < 0 || static_cast<std::size_t>(row.concept_id) >= concepts) {
      throw std::invalid_argument("intervention log concept out of range");
    }
    auto& t = tables[static_cast<std::size_t>(row.run)];
    t.original[it->second] = PredictionSet{row.topk_before};
    t.intervened[it->second][static_cast<std::size_t>(row.concept_id)] = PredictionSet{row.topk_after};
  }
  return tables;
}

CompetenceReport build_report(const ExperimentConfig& cfg, const MlmModel& model,
                              const std::vector<ClozeInstance>& test, const std::vector<ProbeSummary>& probes,
                              const std::vector<PredictionTable>& tables) {
  CompetenceReport rep;
  rep.model = cfg.name;
  rep.method = to_string(cfg.intervention.method);
  rep.epsilon = cfg.intervention.epsilon;
  rep.k_max = cfg.k_max;
  rep.runs = static_cast<int>(tables.size());
  rep.concepts = concept_names(cfg);
  rep.probes = probes;
  const int m = cfg.generator.relations;
  const auto nc = static_cast<std::size_t>(concept_count(cfg));

  std::vector<std::vector<double>> run_task_scores(tables.size());
  for (int t = 0; t < m; ++t) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < test.size(); ++i) {
      if (test[i].task == t) members.push_back(i);
    }
    TaskScore ts;
    ts.task = t;
    ts.name = task_name(t);
    ts.instances = static_cast<int>(members.size());
    std::vector<double> overlap_sum(nc, 0), change_sum(nc, 0), cells(nc, 0);
    if (!members.empty()) {
      std::vector<ClozeInstance> subset;
      for (auto i : members) subset.push_back(test[i]);
      ts.accuracy = topk_accuracy_avg(model, subset, cfg.k_max);
      const auto graph = task_graph(m, t);
      for (std::size_t r = 0; r < tables.size(); ++r) {
        PredictionTable sub;
        bool applied = false;
        for (auto i : members) {
          sub.original.push_back(tables[r].original[i]);
          sub.intervened.push_back(tables[r].intervened[i]);
          sub.task.push_back(t);
          for (std::size_t c = 0; c < nc; ++c) {
            const auto& p = tables[r].intervened[i][c];
            if (!p) continue;
            applied = true;
            double o = 0;
            for (int k = 1; k <= cfg.k_max; ++k) o += ovl(*p, tables[r].original[i], k);
            overlap_sum[c] += o / cfg.k_max;
            change_sum[c] += p->tokens.front() != tables[r].original[i].tokens.front() ? 1 : 0;
            cells[c] += 1;
          }
        }
        if (!applied) continue;
        const std::vector<CompetenceGraph> graphs(members.size(), graph);
        const double c = competence_avg_over_k(sub, graphs, cfg.k_max);
        ts.competence_runs.push_back(c);
        run_task_scores[r].push_back(c);
      }
      if (!ts.competence_runs.empty()) ts.competence = aggregate_runs(ts.competence_runs);
    }
    std::vector<double> orow(nc), crow(nc);
    for (std::size_t c = 0; c < nc; ++c) {
      orow[c] = cells[c] > 0 ? overlap_sum[c] / cells[c] : kNaN;
      crow[c] = cells[c] > 0 ? change_sum[c] / cells[c] : kNaN;
    }
    rep.overlap.push_back(std::move(orow));
    rep.top1_change.push_back(std::move(crow));
    rep.tasks.push_back(std::move(ts));
  }

  double acc = 0;
  int populated = 0;
  for (const auto& ts : rep.tasks) {
    if (ts.instances == 0) continue;
    acc += ts.accuracy;
    ++populated;
  }
  rep.accuracy = populated ? acc / populated : kNaN;
  for (const auto& scores : run_task_scores) {
    if (scores.empty()) continue;
    double s = 0;
    for (double x : scores) s += x;
    rep.competence_runs.push_back(s / double(scores.size()));
  }
  if (!rep.competence_runs.empty()) rep.competence = aggregate_runs(rep.competence_runs);

  std::vector<double> xs, ys;
  for (const auto& ts : rep.tasks) {
    if (!ts.competence) continue;
    xs.push_back(ts.accuracy);
    ys.push_back(ts.competence->mean);
  }
  rep.accuracy_competence = spearman_or_na(xs, ys);
  return rep;
}

std::optional<double> TaskComparison::competence_delta() const {
  if (!competence_a || !competence_b) return std::nullopt;
  return *competence_a - *competence_b;
}

Comparison compare_reports(const CompetenceReport& a, const CompetenceReport& b) {
  Comparison c;
  c.model_a = a.model;
  c.model_b = b.model;
  std::vector<double> dacc, dcomp;
  for (const auto& ta : a.tasks) {
    for (const auto& tb : b.tasks) {
      if (ta.name != tb.name) continue;
      TaskComparison tc;
      tc.task = ta.name;
      tc.accuracy_a = ta.accuracy;
      tc.accuracy_b = tb.accuracy;
      if (ta.competence) tc.competence_a = ta.competence->mean;
      if (tb.competence) tc.competence_b = tb.competence->mean;
      c.accuracy_won_a += tc.accuracy_delta() > 0;
      c.accuracy_won_b += tc.accuracy_delta() < 0;
      if (const auto d = tc.competence_delta()) {
        c.competence_won_a += *d > 0;
        c.competence_won_b += *d < 0;
        dacc.push_back(tc.accuracy_delta());
        dcomp.push_back(*d);
      }
      c.tasks.push_back(tc);
    }
  }
  c.delta_correlation = spearman_or_na(dacc, dcomp);
  return c;
}

// ---------------------------------------------------------------------------

nlohmann::ordered_json report_to_json(const CompetenceReport& r) {
  nlohmann::ordered_json j;
  j["model"] = r.model;
  j["method"] = r.method;
  j["epsilon"] = r.epsilon;
  j["k_max"] = r.k_max;
  j["runs"] = r.runs;
  j["concepts"] = r.concepts;
  j["accuracy"] = num(r.accuracy);
  j["competence"] = r.competence ? nlohmann::ordered_json{{"mean", r.competence->mean},
                                                          {"min", r.competence->min},
                                                          {"max", r.competence->max}}
                                 : nlohmann::ordered_json();
  j["competence_runs"] = r.competence_runs;
  auto tasks = nlohmann::ordered_json::array();
  for (const auto& t : r.tasks) {
    nlohmann::ordered_json tj;
    tj["task"] = t.name;
    tj["instances"] = t.instances;
    tj["accuracy"] = num(t.accuracy);
    tj["competence_mean"] = t.competence ? num(t.competence->mean) : nlohmann::ordered_json();
    tj["competence_min"] = t.competence ? num(t.competence->min) : nlohmann::ordered_json();
    tj["competence_max"] = t.competence ? num(t.competence->max) : nlohmann::ordered_json();
    tj["competence_runs"] = t.competence_runs;
    tasks.push_back(tj);
  }
  j["tasks"] = tasks;
  auto matrix = [](const std::vector<std::vector<double>>& m) {
    auto out = nlohmann::ordered_json::array();
    for (const auto& row : m) {
      auto jr = nlohmann::ordered_json::array();
      for (double x : row) jr.push_back(num(x));
      out.push_back(jr);
    }
    return out;
  };
  j["overlap"] = matrix(r.overlap);
  j["top1_change"] = matrix(r.top1_change);
  auto probes = nlohmann::ordered_json::array();
  for (const auto& p : r.probes) {
    probes.push_back({{"run", p.run},
                      {"concept", p.concept_id},
                      {"best_epoch", p.best_epoch},
                      {"val_accuracy", p.val_accuracy},
                      {"admissible", p.admissible}});
  }
  j["probes"] = probes;
  j["accuracy_competence_spearman"] = spearman_json(r.accuracy_competence);
  return j;
}

CompetenceReport report_from_json(const nlohmann::json& j) {
  CompetenceReport r;
  r.model = j.at("model").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.epsilon = j.at("epsilon").get<double>();
  r.k_max = j.at("k_max").get<int>();
  r.runs = j.at("runs").get<int>();
  r.concepts = j.at("concepts").get<std::vector<std::string>>();
  r.accuracy = num_from(j.at("accuracy"));
  if (!j.at("competence").is_null()) {
    const auto& c = j.at("competence");
    r.competence = RunAggregate{c.at("mean").get<double>(), c.at("min").get<double>(), c.at("max").get<double>()};
  }
  r.competence_runs = j.at("competence_runs").get<std::vector<double>>();
  int idx = 0;
  for (const auto& tj : j.at("tasks")) {
    TaskScore t;
    t.task = idx++;
    t.name = tj.at("task").get<std::string>();
    t.instances = tj.at("instances").get<int>();
    t.accuracy = num_from(tj.at("accuracy"));
    t.competence_runs = tj.at("competence_runs").get<std::vector<double>>();
    if (!tj.at("competence_mean").is_null()) {
      t.competence = RunAggregate{tj.at("competence_mean").get<double>(), tj.at("competence_min").get<double>(),
                                  tj.at("competence_max").get<double>()};
    }
    r.tasks.push_back(std::move(t));
  }
  auto matrix = [](const nlohmann::json& m) {
    std::vector<std::vector<double>> out;
    for (const auto& row : m) {
      std::vector<double> v;
      for (const auto& x : row) v.push_back(num_from(x));
      out.push_back(std::move(v));
    }
    return out;
  };
  r.overlap = matrix(j.at("overlap"));
  r.top1_change = matrix(j.at("top1_change"));
  for (const auto& p : j.at("probes")) {
    r.probes.push_back({p.at("run").get<int>(), p.at("concept").get<int>(), p.at("best_epoch").get<int>(),
                        p.at("val_accuracy").get<double>(), p.at("admissible").get<bool>()});
  }
  const auto& s = j.at("accuracy_competence_spearman");
  if (!s.at("rho").is_null()) r.accuracy_competence.rho = s.at("rho").get<double>();
  if (!s.at("p").is_null()) r.accuracy_competence.p = s.at("p").get<double>();
  r.accuracy_competence.p_method = s.at("p_method").get<std::string>();
  return r;
}

nlohmann::ordered_json comparison_to_json(const Comparison& c) {
  nlohmann::ordered_json j;
  j["model_a"] = c.model_a;
  j["model_b"] = c.model_b;
  auto tasks = nlohmann::ordered_json::array();
  for (const auto& t : c.tasks) {
    tasks.push_back({{"task", t.task},
                     {"accuracy_a", num(t.accuracy_a)},
                     {"accuracy_b", num(t.accuracy_b)},
                     {"accuracy_delta", num(t.accuracy_delta())},
                     {"competence_a", num(t.competence_a)},
                     {"competence_b", num(t.competence_b)},
                     {"competence_delta", num(t.competence_delta())}});
  }
  j["tasks"] = tasks;
  j["accuracy_tasks_won"] = {{"a", c.accuracy_won_a}, {"b", c.accuracy_won_b}};
  j["competence_tasks_won"] = {{"a", c.competence_won_a}, {"b", c.competence_won_b}};
  j["delta_spearman"] = spearman_json(c.delta_correlation);
  return j;
}

std::string per_task_scores_csv(const CompetenceReport& r) {
  std::string s = "task,accuracy,competence_mean,competence_min,competence_max\n";
  for (const auto& t : r.tasks) {
    s += t.name + "," + format_double(t.accuracy) + ",";
    if (t.competence) {
      s += format_double(t.competence->mean) + "," + format_double(t.competence->min) + "," +
           format_double(t.competence->max);
    } else {
      s += "nan,nan,nan";
    }
    s += "\n";
  }
  return s;
}

std::string intervention_matrix_csv(const CompetenceReport& r) {
  std::string s = "task,concept,causal,overlap,top1_change\n";
  const int m = static_cast<int>(r.tasks.size());
  for (std::size_t t = 0; t < r.tasks.size(); ++t) {
    const auto graph = task_graph(m, static_cast<int>(t));
    for (std::size_t c = 0; c < r.concepts.size(); ++c) {
      s += r.tasks[t].name + "," + r.concepts[c] + "," + (graph.is_causal(static_cast<int>(c)) ? "1" : "0") + "," +
           format_double(r.overlap[t][c]) + "," + format_double(r.top1_change[t][c]) + "\n";
    }
  }
  return s;
}

std::string comparison_csv(const Comparison& c) {
  std::string s = "task,accuracy_a,accuracy_b,accuracy_delta,competence_a,competence_b,competence_delta\n";
  for (const auto& t : c.tasks) {
    s += t.task + "," + format_double(t.accuracy_a) + "," + format_double(t.accuracy_b) + "," +
         format_double(t.accuracy_delta()) + "," + opt_csv(t.competence_a) + "," + opt_csv(t.competence_b) + "," +
         opt_csv(t.competence_delta()) + "\n";
  }
  return s;
}

std::string plot_data_csv(const std::vector<CompetenceReport>& reports, bool competence) {
  std::string s = "task,model,value,err_lo,err_hi\n";
  for (const auto& r : reports) {
    for (const auto& t : r.tasks) {
      s += t.name + "," + r.model + ",";
      if (!competence) {
        const auto v = format_double(t.accuracy);
        s += v + "," + v + "," + v;
      } else if (t.competence) {
        s += format_double(t.competence->mean) + "," + format_double(t.competence->min) + "," +
             format_double(t.competence->max);
      } else {
        s += "nan,nan,nan";
      }
      s += "\n";
    }
  }
  return s;
}

static const char* kLogHeader = "instance_id,probe_id,run,method,epsilon,logit_before,logit_after,topk_before,topk_after";

std::string intervention_log_csv(const std::vector<InterventionLogRow>& log) {
  std::string s = std::string(kLogHeader) + "\n";
  for (const auto& r : log) {
    s += std::to_string(r.instance_id) + "," + std::to_string(r.concept_id) + "," + std::to_string(r.run) + "," +
         r.method + "," + format_double(r.epsilon) + "," + format_double(r.logit_before) + "," +
         format_double(r.logit_after) + "," + join(r.topk_before) + "," + join(r.topk_after) + "\n";
  }
  return s;
}

std::vector<InterventionLogRow> parse_intervention_log(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != kLogHeader) throw std::invalid_argument("intervention log: bad header");
  std::vector<InterventionLogRow> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 9) throw std::invalid_argument("intervention log: line " + std::to_string(lineno) + " has " +
                                                   std::to_string(f.size()) + " fields");
    InterventionLogRow r;
    r.instance_id = std::stoll(f[0]);
    r.concept_id = std::stoi(f[1]);
    r.run = std::stoi(f[2]);
    r.method = f[3];
    r.epsilon = parse_double(f[4]);
    r.logit_before = parse_double(f[5]);
    r.logit_after = parse_double(f[6]);
    r.topk_before = split_ints(f[7]);
    r.topk_after = split_ints(f[8]);
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string to_string(Stage s) {
  switch (s) {
    case Stage::kGenData:
      return "gen-data";
    case Stage::kTrainLm:
      return "train-lm";
    case Stage::kTrainProbes:
      return "train-probes";
    case Stage::kIntervene:
      return "intervene";
    case Stage::kScore:
      return "score";
    case Stage::kReport:
      return "report";
    case Stage::kCompare:
      return "compare";
    case Stage::kAll:
      return "all";
  }
  return "?";
}

Stage stage_from_string(const std::string& s) {
  for (Stage st : {Stage::kGenData, Stage::kTrainLm, Stage::kTrainProbes, Stage::kIntervene, Stage::kScore,
                   Stage::kReport, Stage::kCompare, Stage::kAll}) {
    if (to_string(st) == s) return st;
  }
  throw std::invalid_argument("unknown stage '" + s + "'");
}

int exit_code(Stage s) {
  switch (s) {
    case Stage::kGenData:
      return 10;
    case Stage::kTrainLm:
      return 11;
    case Stage::kTrainProbes:
      return 12;
    case Stage::kIntervene:
      return 13;
    case Stage::kScore:
      return 14;
    case Stage::kReport:
      return 15;
    case Stage::kCompare:
      return 16;
    case Stage::kAll:
      return 17;
  }
  return 1;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("missing " + path.string());
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

namespace {

Corpus load_corpus(const fs::path& out) {
  Corpus c;
  c.train = read_corpus_split(out / "corpus" / "train.jsonl");
  c.val = read_corpus_split(out / "corpus" / "val.jsonl");
  c.test = read_corpus_split(out / "corpus" / "test.jsonl");
  return c;
}

MlmModel load_model(const ExperimentConfig& cfg, const fs::path& out) {
  MlmModel m(cfg.lm_config(), cfg.resolved_lm_init_seed());
  m.load(out / "lm.ckpt");
  return m;
}

std::vector<ProbeRun> load_probes(const ExperimentConfig& cfg, const fs::path& out) {
  const auto summary = read_text(out / "probes.csv");
  std::istringstream in(summary);
  std::string line;
  std::getline(in, line);
  std::vector<ProbeRun> runs(static_cast<std::size_t>(cfg.runs));
  const int width = 2 * cfg.lm.d_model;
  int rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 5) throw std::invalid_argument("probes.csv: malformed line");
    const int r = std::stoi(f[0]), c = std::stoi(f[1]);
    if (r < 0 || r >= cfg.runs || c != static_cast<int>(runs[static_cast<std::size_t>(r)].probes.size())) {
      throw std::invalid_argument("probes.csv: rows out of order or run count differs from the config");
    }
    auto& run = runs[static_cast<std::size_t>(r)];
    ProbeModel p(width, 0, cfg.probe.dropout);
    p.load(probe_path(out, r, c));
    run.probes.push_back(std::move(p));
    run.best_epoch.push_back(std::stoi(f[2]));
    run.val_accuracy.push_back(parse_double(f[3]));
    ++rows;
  }
  if (rows != cfg.runs * concept_count(cfg)) throw std::invalid_argument("probes.csv: wrong number of probes");
  return runs;
}

CompetenceReport load_report(const fs::path& dir) { return report_from_json(nlohmann::json::parse(read_text(dir / "report.json"))); }

void stage_gen_data(const ExperimentConfig& cfg, const fs::path& out) {
  const auto corpus = make_corpus(cfg);
  fs::create_directories(out / "corpus");
  write_corpus_split(out / "corpus" / "train.jsonl", corpus.train);
  write_corpus_split(out / "corpus" / "val.jsonl", corpus.val);
  write_corpus_split(out / "corpus" / "test.jsonl", corpus.test);
  std::cerr << "gen-data: " << corpus.train.size() << "/" << corpus.val.size() << "/" << corpus.test.size()
            << " instances\n";
}

void stage_train_lm(const ExperimentConfig& cfg, const fs::path& out) {
  const auto corpus = load_corpus(out);
  MlmModel model(cfg.lm_config(), cfg.resolved_lm_init_seed());
  const auto res = train_mlm(model, corpus.train, cfg.lm_train_config(), [](int step, double loss) {
    std::cerr << "train-lm: step " << step << " loss " << loss << "\n";
  });
  std::string losses = "step,loss\n";
  for (std::size_t i = 0; i < res.losses.size(); ++i) losses += std::to_string(i) + "," + format_double(res.losses[i]) + "\n";
  write_text(out / "lm_loss.csv", losses);
  model.save(out / "lm.ckpt");
  std::cerr << "train-lm: val top-1 " << top1_accuracy(model, corpus.val) << "\n";
}

void stage_train_probes(const ExperimentConfig& cfg, const fs::path& out) {
  const auto corpus = load_corpus(out);
  const auto model = load_model(cfg, out);
  const auto data = build_probe_data(model, corpus, cfg);
  const auto runs = train_probe_runs(data, cfg);
  fs::create_directories(out / "probes");
  std::string csv = "run,concept,best_epoch,val_accuracy,admissible\n";
  for (std::size_t r = 0; r < runs.size(); ++r) {
    for (std::size_t c = 0; c < runs[r].probes.size(); ++c) {
      runs[r].probes[c].save(probe_path(out, static_cast<int>(r), static_cast<int>(c)));
      const double acc = runs[r].val_accuracy[c];
      csv += std::to_string(r) + "," + std::to_string(c) + "," + std::to_string(runs[r].best_epoch[c]) + "," +
             format_double(acc) + "," + (acc >= kAdmissibilityGate ? "1" : "0") + "\n";
      if (acc < kAdmissibilityGate) {
        std::cerr << "train-probes: run " << r << " concept " << c << " gated (val accuracy " << acc << ")\n";
      }
    }
  }
  write_text(out / "probes.csv", csv);
}

void stage_intervene(const ExperimentConfig& cfg, const fs::path& out) {
  const auto corpus = load_corpus(out);
  const auto model = load_model(cfg, out);
  const auto runs = load_probes(cfg, out);
  std::vector<InterventionLogRow> log;
  run_interventions(model, corpus.test, runs, cfg, &log);
  write_text(out / "interventions.csv", intervention_log_csv(log));
}

void stage_score(const ExperimentConfig& cfg, const fs::path& out) {
  const auto corpus = load_corpus(out);
  const auto model = load_model(cfg, out);
  const auto runs = load_probes(cfg, out);
  const auto log = parse_intervention_log(read_text(out / "interventions.csv"));
  const auto tables = tables_from_log(log, corpus.test, cfg);
  const auto rep = build_report(cfg, model, corpus.test, summarize_probes(runs), tables);
  write_text(out / "report.json", report_to_json(rep).dump(2) + "\n");
  write_text(out / "per_task_scores.csv", per_task_scores_csv(rep));
  write_text(out / "intervention_matrix.csv", intervention_matrix_csv(rep));
}

void stage_report(const fs::path& out) {
  const auto rep = load_report(out);
  write_text(out / "plot_accuracy.csv", plot_data_csv({rep}, false));
  write_text(out / "plot_competence.csv", plot_data_csv({rep}, true));
  std::ostringstream s;
  s << "model " << rep.model << "  method " << rep.method << "  epsilon " << format_double(rep.epsilon)
    << "  runs " << rep.runs << "\n";
  s << "task        accuracy   competence (min..max)\n";
  for (const auto& t : rep.tasks) {
    s << t.name << "  " << format_double(t.accuracy) << "  ";
    if (t.competence) {
      s << format_double(t.competence->mean) << " (" << format_double(t.competence->min) << ".."
        << format_double(t.competence->max) << ")";
    } else {
      s << "n/a";
    }
    s << "\n";
  }
  int gated = 0;
  for (const auto& p : rep.probes) gated += !p.admissible;
  s << "gated probes: " << gated << " of " << rep.probes.size() << "\n";
  write_text(out / "summary.txt", s.str());
  std::cout << s.str();
}

}  // namespace

void run_stage(Stage stage, const ExperimentConfig& cfg, const fs::path& out, std::optional<Stage> from) {
  if (stage == Stage::kAll) {
    const Stage order[] = {Stage::kGenData, Stage::kTrainLm, Stage::kTrainProbes,
                           Stage::kIntervene, Stage::kScore, Stage::kReport};
    bool started = !from;
    for (Stage s : order) {
      if (from && s == *from) started = true;
      if (started) run_stage(s, cfg, out);
    }
    if (!started) throw StageError(Stage::kAll, "all: cannot start from stage '" + to_string(*from) + "'");
    return;
  }
  try {
    fs::create_directories(out);
    switch (stage) {
      case Stage::kGenData:
        stage_gen_data(cfg, out);
        break;
      case Stage::kTrainLm:
        stage_train_lm(cfg, out);
        break;
      case Stage::kTrainProbes:
        stage_train_probes(cfg, out);
        break;
      case Stage::kIntervene:
        stage_intervene(cfg, out);
        break;
      case Stage::kScore:
        stage_score(cfg, out);
        break;
      case Stage::kReport:
        stage_report(out);
        break;
      default:
        throw std::invalid_argument("stage '" + to_string(stage) + "' needs its own entry point");
    }
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, to_string(stage) + ": " + e.what());
  }
}

void run_compare(const fs::path& a, const fs::path& b, const fs::path& out) {
  try {
    const auto ra = load_report(a);
    const auto rb = load_report(b);
    const auto c = compare_reports(ra, rb);
    write_text(out / "comparison.json", comparison_to_json(c).dump(2) + "\n");
    write_text(out / "comparison.csv", comparison_csv(c));
    write_text(out / "plot_accuracy.csv", plot_data_csv({ra, rb}, false));
    write_text(out / "plot_competence.csv", plot_data_csv({ra, rb}, true));
  } catch (const std::exception& e) {
    throw StageError(Stage::kCompare, std::string("compare: ") + e.what());
  }
}

}  // namespace calm
