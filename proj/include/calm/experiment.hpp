// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration. One JSON document per experiment; every stochastic
// component gets its own seed, derived from the top-level seed unless set
// explicitly.

#pragma once

#include "calm/gbi.hpp"
#include "calm/mlm.hpp"
#include "calm/probe.hpp"
#include "calm/synth_task.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

namespace calm {

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 1;
  GeneratorConfig generator;
  MlmConfig lm;
  MlmTrainConfig lm_train;
  ProbeTrainConfig probe;
  std::optional<int> probe_layer;  // defaults to the last layer
  InterventionSpec intervention;
  int runs = 10;
  int k_max = 10;

  // Explicit per-component seeds; empty means "derive from `seed`".
  std::optional<std::uint64_t> generator_seed, lm_init_seed, lm_train_seed, probe_seed, dataset_seed,
      intervention_seed;

  std::uint64_t resolved_generator_seed() const;
  std::uint64_t resolved_lm_init_seed() const;
  std::uint64_t resolved_lm_train_seed() const;
  /// Seed of probe training run `run`.
  std::uint64_t resolved_probe_seed(int run) const;
  std::uint64_t resolved_dataset_seed() const;
  std::uint64_t resolved_intervention_seed() const;

  /// Generator/LM/probe/intervention configs with resolved seeds and the
  /// LM vocabulary tied to the generator's.
  GeneratorConfig generator_config() const;
  MlmConfig lm_config() const;
  MlmTrainConfig lm_train_config() const;
  ProbeTrainConfig probe_config(int run) const;
  InterventionSpec intervention_spec() const;

  void validate() const;
};

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

ExperimentConfig experiment_from_json(const nlohmann::json& j);
nlohmann::ordered_json experiment_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_experiment(const std::filesystem::path& path);

}  // namespace calm
