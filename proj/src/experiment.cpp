// SPDX-License-Identifier: Apache-2.0
#include "calm/experiment.hpp"

#include <fstream>
#include <set>

namespace calm {
namespace {

enum Stream : std::uint64_t {
  kGenerator = 1,
  kLmInit = 2,
  kLmTrain = 3,
  kProbe = 4,
  kDataset = 5,
  kIntervention = 6,
};

template <typename T>
void read(const nlohmann::json& j, const char* key, T& into) {
  if (j.contains(key) && !j.at(key).is_null()) into = j.at(key).get<T>();
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, std::optional<T>& into) {
  if (j.contains(key) && !j.at(key).is_null()) into = j.at(key).get<T>();
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument("config: '" + where + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw std::invalid_argument("config: unknown key '" + k + "' in " + where);
  }
}

template <typename T>
nlohmann::json opt(const std::optional<T>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  // splitmix64 finalizer over (base, stream)
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t ExperimentConfig::resolved_generator_seed() const {
  return generator_seed.value_or(derive_seed(seed, kGenerator));
}
std::uint64_t ExperimentConfig::resolved_lm_init_seed() const { return lm_init_seed.value_or(derive_seed(seed, kLmInit)); }
std::uint64_t ExperimentConfig::resolved_lm_train_seed() const {
  return lm_train_seed.value_or(derive_seed(seed, kLmTrain));
}
std::uint64_t ExperimentConfig::resolved_probe_seed(int run) const {
  return derive_seed(probe_seed.value_or(derive_seed(seed, kProbe)), static_cast<std::uint64_t>(run));
}
std::uint64_t ExperimentConfig::resolved_dataset_seed() const {
  return dataset_seed.value_or(derive_seed(seed, kDataset));
}
std::uint64_t ExperimentConfig::resolved_intervention_seed() const {
  return intervention_seed.value_or(derive_seed(seed, kIntervention));
}

GeneratorConfig ExperimentConfig::generator_config() const {
  GeneratorConfig g = generator;
  g.seed = resolved_generator_seed();
  return g;
}

MlmConfig ExperimentConfig::lm_config() const {
  MlmConfig m = lm;
  m.vocab_size = generator.vocab_size;
  return m;
}

MlmTrainConfig ExperimentConfig::lm_train_config() const {
  MlmTrainConfig t = lm_train;
  t.seed = resolved_lm_train_seed();
  return t;
}

ProbeTrainConfig ExperimentConfig::probe_config(int run) const {
  ProbeTrainConfig p = probe;
  p.seed = resolved_probe_seed(run);
  return p;
}

InterventionSpec ExperimentConfig::intervention_spec() const {
  InterventionSpec s = intervention;
  s.seed = resolved_intervention_seed();
  return s;
}

void ExperimentConfig::validate() const {
  generator_config().validate();
  lm_config().validate();
  if (runs < 1) throw std::invalid_argument("config: runs must be >= 1");
  if (k_max < 1 || k_max > generator.vocab_size) throw std::invalid_argument("config: k_max must lie in [1, vocab_size]");
  if (probe_layer && (*probe_layer < 0 || *probe_layer > lm.layers)) {
    throw std::invalid_argument("config: probe_layer outside [0, layers]");
  }
  intervention.validate();
  if (intervention.layer && (*intervention.layer < 0 || *intervention.layer > lm.layers)) {
    throw std::invalid_argument("config: intervention layer outside [0, layers]");
  }
  if (probe_layer.value_or(lm.layers) != intervention.layer.value_or(lm.layers)) {
    throw std::invalid_argument("config: probes must be trained on the layer that is intervened on");
  }
  if (lm_train.steps < 0 || lm_train.batch_size < 1 || !(lm_train.lr > 0)) {
    throw std::invalid_argument("config: invalid lm_train settings");
  }
  if (probe.epochs < 1 || probe.batch_size < 1 || !(probe.lr > 0)) {
    throw std::invalid_argument("config: invalid probe settings");
  }
}

ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"name", "seed", "generator", "lm", "lm_train", "probe", "intervention", "runs", "k_max"},
                 "experiment");
  ExperimentConfig c;
  read(j, "name", c.name);
  read(j, "seed", c.seed);
  read(j, "runs", c.runs);
  read(j, "k_max", c.k_max);
  if (j.contains("generator")) {
    const auto& g = j.at("generator");
    reject_unknown(g,
                   {"vocab_size", "relations", "subjects", "objects_per_relation", "confound_strength", "templates",
                    "instances", "split", "seed"},
                   "generator");
    read(g, "vocab_size", c.generator.vocab_size);
    read(g, "relations", c.generator.relations);
    read(g, "subjects", c.generator.subjects);
    read(g, "objects_per_relation", c.generator.objects_per_relation);
    read(g, "confound_strength", c.generator.confound_strength);
    read(g, "templates", c.generator.templates);
    read(g, "instances", c.generator.instances);
    read_opt(g, "seed", c.generator_seed);
    if (g.contains("split")) {
      const auto s = g.at("split").get<std::vector<double>>();
      if (s.size() != 3) throw std::invalid_argument("config: generator.split must hold three fractions");
      c.generator.train_fraction = s[0];
      c.generator.val_fraction = s[1];
      c.generator.test_fraction = s[2];
    }
  }
  if (j.contains("lm")) {
    const auto& m = j.at("lm");
    reject_unknown(m, {"d_model", "heads", "layers", "d_ff", "max_len", "head_transform", "init_seed"}, "lm");
    read(m, "d_model", c.lm.d_model);
    read(m, "heads", c.lm.heads);
    read(m, "layers", c.lm.layers);
    read(m, "d_ff", c.lm.d_ff);
    read(m, "max_len", c.lm.max_len);
    read(m, "head_transform", c.lm.head_transform);
    read_opt(m, "init_seed", c.lm_init_seed);
  }
  if (j.contains("lm_train")) {
    const auto& t = j.at("lm_train");
    reject_unknown(t, {"steps", "batch_size", "lr", "seed", "log_every"}, "lm_train");
    read(t, "steps", c.lm_train.steps);
    read(t, "batch_size", c.lm_train.batch_size);
    read(t, "lr", c.lm_train.lr);
    read(t, "log_every", c.lm_train.log_every);
    read_opt(t, "seed", c.lm_train_seed);
  }
  if (j.contains("probe")) {
    const auto& p = j.at("probe");
    reject_unknown(p, {"epochs", "batch_size", "lr", "dropout", "seed", "dataset_seed", "layer"}, "probe");
    read(p, "epochs", c.probe.epochs);
    read(p, "batch_size", c.probe.batch_size);
    read(p, "lr", c.probe.lr);
    read(p, "dropout", c.probe.dropout);
    read_opt(p, "seed", c.probe_seed);
    read_opt(p, "dataset_seed", c.dataset_seed);
    read_opt(p, "layer", c.probe_layer);
  }
  if (j.contains("intervention")) {
    const auto& i = j.at("intervention");
    reject_unknown(i, {"method", "epsilon", "alpha", "steps", "layer", "attack_label", "seed"}, "intervention");
    if (i.contains("method")) c.intervention.method = attack_method_from_string(i.at("method").get<std::string>());
    read(i, "epsilon", c.intervention.epsilon);
    read_opt(i, "alpha", c.intervention.alpha);
    read(i, "steps", c.intervention.steps);
    read_opt(i, "layer", c.intervention.layer);
    read(i, "attack_label", c.intervention.attack_label);
    read_opt(i, "seed", c.intervention_seed);
  }
  return c;
}

nlohmann::ordered_json experiment_to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["name"] = c.name;
  j["seed"] = c.seed;
  j["runs"] = c.runs;
  j["k_max"] = c.k_max;
  j["generator"] = {{"vocab_size", c.generator.vocab_size},
                    {"relations", c.generator.relations},
                    {"subjects", c.generator.subjects},
                    {"objects_per_relation", c.generator.objects_per_relation},
                    {"confound_strength", c.generator.confound_strength},
                    {"templates", c.generator.templates},
                    {"instances", c.generator.instances},
                    {"split", {c.generator.train_fraction, c.generator.val_fraction, c.generator.test_fraction}},
                    {"seed", opt(c.generator_seed)}};
  j["lm"] = {{"d_model", c.lm.d_model}, {"heads", c.lm.heads},     {"layers", c.lm.layers},
             {"d_ff", c.lm.d_ff},       {"max_len", c.lm.max_len}, {"head_transform", c.lm.head_transform},
             {"init_seed", opt(c.lm_init_seed)}};
  j["lm_train"] = {{"steps", c.lm_train.steps},
                   {"batch_size", c.lm_train.batch_size},
                   {"lr", c.lm_train.lr},
                   {"log_every", c.lm_train.log_every},
                   {"seed", opt(c.lm_train_seed)}};
  j["probe"] = {{"epochs", c.probe.epochs},   {"batch_size", c.probe.batch_size},
                {"lr", c.probe.lr},           {"dropout", c.probe.dropout},
                {"seed", opt(c.probe_seed)},  {"dataset_seed", opt(c.dataset_seed)},
                {"layer", opt(c.probe_layer)}};
  j["intervention"] = {{"method", to_string(c.intervention.method)},
                       {"epsilon", c.intervention.epsilon},
                       {"alpha", opt(c.intervention.alpha)},
                       {"steps", c.intervention.steps},
                       {"layer", opt(c.intervention.layer)},
                       {"attack_label", c.intervention.attack_label},
                       {"seed", opt(c.intervention_seed)}};
  return j;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("config: cannot read " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("config: " + path.string() + ": " + e.what());
  }
  return experiment_from_json(j);
}

}  // namespace calm
