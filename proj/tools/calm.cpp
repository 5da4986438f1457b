// SPDX-License-Identifier: Apache-2.0
//
// calm: synthetic competence experiments from the command line.
//
//   calm all --config configs/smoke.json --out runs/smoke
//   calm score --config configs/smoke.json --out runs/smoke
//   calm compare --out runs/cmp runs/a runs/b

#include "calm/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> runs;
  std::string stage;
  std::vector<std::string> inputs;  // compare
};

calm::ExperimentConfig resolve_config(const Options& o) {
  auto cfg = calm::load_experiment(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.runs) cfg.runs = *o.runs;
  cfg.validate();
  return cfg;
}

void record_config(const Options& o, const calm::ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  fs::create_directories(o.out);
  const fs::path copy = fs::path(o.out) / "config.json";
  if (fs::absolute(o.config) != fs::absolute(copy)) {
    fs::copy_file(o.config, copy, fs::copy_options::overwrite_existing);
  }
  auto j = calm::experiment_to_json(cfg);
  j["resolved_seeds"] = {{"generator", cfg.resolved_generator_seed()},
                         {"lm_init", cfg.resolved_lm_init_seed()},
                         {"lm_train", cfg.resolved_lm_train_seed()},
                         {"probe_datasets", cfg.resolved_dataset_seed()},
                         {"intervention", cfg.resolved_intervention_seed()}};
  calm::write_text(fs::path(o.out) / "resolved_config.json", j.dump(2) + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Competence measurement for masked language models on synthetic cloze tasks"};
  app.require_subcommand(0, 1);
  Options o;

  auto add_common = [&o](CLI::App* sc, bool needs_config) {
    auto* c = sc->add_option("--config", o.config, "Experiment JSON");
    auto* out = sc->add_option("--out", o.out, "Output directory");
    if (needs_config) {
      c->required();
      out->required();
    }
    sc->add_option("--seed", o.seed, "Override the top-level seed");
    sc->add_option("--runs", o.runs, "Override the number of probe runs")->check(CLI::PositiveNumber);
  };

  add_common(&app, false);
  app.add_option("--stage", o.stage, "Stage to run (or, with 'all', to resume from)");

  std::vector<std::pair<calm::Stage, CLI::App*>> stages;
  for (auto s : {calm::Stage::kGenData, calm::Stage::kTrainLm, calm::Stage::kTrainProbes, calm::Stage::kIntervene,
                 calm::Stage::kScore, calm::Stage::kReport, calm::Stage::kAll}) {
    auto* sc = app.add_subcommand(calm::to_string(s));
    add_common(sc, true);
    if (s == calm::Stage::kAll) sc->add_option("--stage", o.stage, "Resume from this stage");
    stages.emplace_back(s, sc);
  }
  stages[0].second->description("Generate the synthetic corpus");
  stages[1].second->description("Train the masked language model");
  stages[2].second->description("Train concept probes");
  stages[3].second->description("Apply gradient-based interventions");
  stages[4].second->description("Compute accuracy and competence");
  stages[5].second->description("Write plot data and a summary");
  stages[6].second->description("Run every stage");
  auto* cmp = app.add_subcommand("compare", "Compare the reports of two output directories");
  cmp->add_option("--out", o.out, "Output directory")->required();
  cmp->add_option("reports", o.inputs, "Two output directories")->expected(2)->required();

  CLI11_PARSE(app, argc, argv);

  calm::Stage stage = calm::Stage::kAll;
  std::optional<calm::Stage> from;
  try {
    if (cmp->parsed()) {
      calm::run_compare(o.inputs[0], o.inputs[1], o.out);
      return 0;
    }
    bool found = false;
    for (const auto& [s, sc] : stages) {
      if (sc->parsed()) {
        stage = s;
        found = true;
      }
    }
    if (!found) {
      if (o.stage.empty()) {
        std::cerr << app.help();
        return 1;
      }
      stage = calm::stage_from_string(o.stage);
    } else if (stage == calm::Stage::kAll && !o.stage.empty()) {
      from = calm::stage_from_string(o.stage);
    }
    if (stage == calm::Stage::kCompare) throw std::invalid_argument("use the compare subcommand");
    if (o.config.empty() || o.out.empty()) throw std::invalid_argument("--config and --out are required");
  } catch (const calm::StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return calm::exit_code(e.stage());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return calm::kConfigExitCode;
  }

  calm::ExperimentConfig cfg;
  try {
    cfg = resolve_config(o);
    record_config(o, cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return calm::kConfigExitCode;
  }
  try {
    calm::run_stage(stage, cfg, o.out, from);
  } catch (const calm::StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return calm::exit_code(e.stage());
  }
  return 0;
}
