// SPDX-License-Identifier: Apache-2.0
#include "calm/synth_task.hpp"


#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace calm {
namespace {

enum class Slot { kSubject, kRelation, kMask, kNumber };

// Distractor is always the trailing token.
constexpr Slot kLayouts[kMaxTemplates][4] = {
    {Slot::kSubject, Slot::kRelation, Slot::kMask, Slot::kNumber},
    {Slot::kRelation, Slot::kSubject, Slot::kMask, Slot::kNumber},
    {Slot::kSubject, Slot::kRelation, Slot::kNumber, Slot::kMask},
    {Slot::kRelation, Slot::kNumber, Slot::kSubject, Slot::kMask},
};

int uniform_int(std::mt19937_64& rng, int n) {
  return std::uniform_int_distribution<int>(0, n - 1)(rng);
}

void render(ClozeInstance& inst, const Vocabulary& vocab, int relation, int subject_index) {
  const auto& layout = kLayouts[inst.markers.template_id];
  inst.prompt.clear();
  for (Slot s : layout) {
    switch (s) {
      case Slot::kSubject:
        inst.prompt.push_back(vocab.subject_token(subject_index));
        break;
      case Slot::kRelation:
        inst.prompt.push_back(vocab.relation_token(relation, inst.markers.template_id));
        break;
      case Slot::kMask:
        inst.mask_index = static_cast<int>(inst.prompt.size());
        inst.prompt.push_back(kMaskToken);
        break;
      case Slot::kNumber:
        inst.prompt.push_back(vocab.number_token(inst.markers.number));
        break;
    }
  }
  inst.markers.distractor_index = static_cast<int>(inst.prompt.size());
  inst.prompt.push_back(inst.markers.distractor);
}

void draw_markers(ClozeInstance& inst, const GeneratorConfig& cfg, const Vocabulary& vocab,
                  std::mt19937_64& rng) {
  inst.markers.template_id = uniform_int(rng, cfg.templates);
  inst.markers.number = uniform_int(rng, 2);
  std::bernoulli_distribution confounded(cfg.confound_strength);
  if (confounded(rng)) {
    inst.markers.distractor = vocab.paired_distractor(inst.answer);
  } else {
    inst.markers.distractor = vocab.distractor_base + uniform_int(rng, vocab.distractor_count());
  }
  inst.markers.paired = inst.markers.distractor == vocab.paired_distractor(inst.answer);
}

}  // namespace

void GeneratorConfig::validate() const {
  if (relations < 1) throw std::invalid_argument("generator: relations must be >= 1");
  if (subjects < 1) throw std::invalid_argument("generator: subjects must be >= 1");
  if (objects_per_relation < 2) {
    throw std::invalid_argument("generator: objects_per_relation must be >= 2 (negatives need a wrong answer)");
  }
  if (subjects < objects_per_relation) {
    throw std::invalid_argument("generator: subjects must be >= objects_per_relation so every object is used");
  }
  if (templates < 1 || templates > kMaxTemplates) {
    throw std::invalid_argument("generator: templates must lie in [1, 4]");
  }
  if (!(confound_strength >= 0.0 && confound_strength <= 1.0)) {
    throw std::invalid_argument("generator: confound_strength must lie in [0, 1]");
  }
  if (train_fraction < 0 || val_fraction < 0 || test_fraction < 0 ||
      std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9) {
    throw std::invalid_argument("generator: split fractions must be non-negative and sum to 1");
  }
  if (instances < 1) throw std::invalid_argument("generator: instances must be >= 1");
  const auto v = Vocabulary::layout(*this);
  if (v.filler_base > vocab_size) {
    throw std::invalid_argument("generator: vocab_size " + std::to_string(vocab_size) + " cannot host " +
                                std::to_string(v.filler_base) + " disjoint special/entity/marker tokens");
  }
}

Vocabulary Vocabulary::layout(const GeneratorConfig& cfg) {
  Vocabulary v;
  v.relations = cfg.relations;
  v.templates = cfg.templates;
  v.subjects = cfg.subjects;
  v.objects_per_relation = cfg.objects_per_relation;
  v.relation_base = 1;
  v.number_base = v.relation_base + cfg.relations * cfg.templates;
  v.subject_base = v.number_base + 2;
  v.object_base = v.subject_base + cfg.subjects;
  v.distractor_base = v.object_base + cfg.relations * cfg.objects_per_relation;
  v.filler_base = v.distractor_base + cfg.relations * cfg.objects_per_relation;
  v.size = cfg.vocab_size;
  return v;
}

std::vector<int> ClozeInstance::filled(int token) const {
  auto p = prompt;
  p.at(static_cast<std::size_t>(mask_index)) = token;
  return p;
}

std::vector<int> ClozeInstance::with_distractor(int token) const {
  auto p = prompt;
  p.at(static_cast<std::size_t>(markers.distractor_index)) = token;
  return p;
}

std::vector<std::vector<int>> relation_facts(const GeneratorConfig& cfg) {
  const auto vocab = Vocabulary::layout(cfg);
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::vector<int>> facts(static_cast<std::size_t>(cfg.relations));
  for (int j = 0; j < cfg.relations; ++j) {
    std::vector<int> perm(static_cast<std::size_t>(cfg.subjects));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (int s = 0; s < cfg.subjects; ++s) {
      facts[j].push_back(vocab.object_token(j, perm[s] % cfg.objects_per_relation));
    }
  }
  return facts;
}

std::vector<int> answer_pool(const GeneratorConfig& cfg, int relation) {
  const auto facts = relation_facts(cfg);
  std::set<int> pool(facts.at(static_cast<std::size_t>(relation)).begin(),
                     facts.at(static_cast<std::size_t>(relation)).end());
  return {pool.begin(), pool.end()};
}

Corpus generate_corpus(const GeneratorConfig& cfg) {
  cfg.validate();
  const auto vocab = Vocabulary::layout(cfg);
  const auto facts = relation_facts(cfg);
  std::mt19937_64 rng(cfg.seed);

  // Instances are drawn i.i.d. Identical prompts form a group; groups are
  // shuffled and cut into splits by instance count, so splits never share a
  // prompt and each split keeps the sampling distribution.
  const auto n = static_cast<std::size_t>(cfg.instances);
  std::vector<ClozeInstance> all;
  std::map<std::vector<int>, std::size_t> group_of;
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) {
    ClozeInstance inst;
    const int j = uniform_int(rng, cfg.relations);
    const int s = uniform_int(rng, cfg.subjects);
    inst.id = static_cast<std::int64_t>(i);
    inst.task = j;
    inst.subject = vocab.subject_token(s);
    inst.answer = facts[j][s];
    inst.setting.values.assign(static_cast<std::size_t>(cfg.relations), 0.0);
    inst.setting.values[j] = 1.0;
    draw_markers(inst, cfg, vocab, rng);
    render(inst, vocab, j, s);
    const auto [it, fresh] = group_of.try_emplace(inst.prompt, groups.size());
    if (fresh) groups.emplace_back();
    groups[it->second].push_back(i);
    all.push_back(std::move(inst));
  }
  std::shuffle(groups.begin(), groups.end(), rng);

  const auto n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train,
                              static_cast<std::size_t>(std::llround(cfg.val_fraction * static_cast<double>(n))));
  Corpus c;
  std::vector<std::size_t> assigned[3];
  std::size_t placed = 0;
  for (const auto& g : groups) {
    const int split = placed < n_train ? 0 : (placed < n_train + n_val ? 1 : 2);
    assigned[split].insert(assigned[split].end(), g.begin(), g.end());
    placed += g.size();
  }
  std::vector<ClozeInstance>* splits[] = {&c.train, &c.val, &c.test};
  for (int k = 0; k < 3; ++k) {
    std::sort(assigned[k].begin(), assigned[k].end());
    for (auto i : assigned[k]) splits[k]->push_back(all[i]);
  }
  return c;
}

std::vector<ClozeInstance> resample_markers(const std::vector<ClozeInstance>& instances,
                                            const GeneratorConfig& cfg, std::uint64_t seed) {
  const auto vocab = Vocabulary::layout(cfg);
  std::mt19937_64 rng(seed);
  std::vector<ClozeInstance> out;
  out.reserve(instances.size());
  for (const auto& src : instances) {
    ClozeInstance inst = src;
    draw_markers(inst, cfg, vocab, rng);
    render(inst, vocab, inst.task, inst.subject - vocab.subject_base);
    out.push_back(std::move(inst));
  }
  return out;
}

std::vector<ClozeInstance> ablate_causal_tokens(const std::vector<ClozeInstance>& instances,
                                                const GeneratorConfig& cfg, std::uint64_t seed) {
  const auto vocab = Vocabulary::layout(cfg);
  if (vocab.filler_count() < 1) throw std::invalid_argument("ablate_causal_tokens: no filler tokens in vocabulary");
  std::mt19937_64 rng(seed);
  std::vector<ClozeInstance> out = instances;
  for (auto& inst : out) {
    for (auto& tok : inst.prompt) {
      const bool causal = (tok >= vocab.relation_base && tok < vocab.number_base) ||
                          (tok >= vocab.subject_base && tok < vocab.object_base);
      if (causal) tok = vocab.filler_base + uniform_int(rng, vocab.filler_count());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

bool CompetenceGraph::is_causal(int concept_id) const {
  if (causal_set.count(concept_id)) return true;
  if (environmental_set.count(concept_id)) return false;
  throw std::out_of_range("competence graph: unknown concept id " + std::to_string(concept_id));
}

CompetenceGraph CompetenceGraph::from_edges(std::vector<std::string> concepts,
                                            std::vector<std::pair<int, int>> edges) {
  CompetenceGraph g;
  g.concepts = std::move(concepts);
  g.edges = std::move(edges);
  const int n = g.concept_count();
  std::vector<std::vector<int>> reverse(static_cast<std::size_t>(n + 1));
  for (auto [from, to] : g.edges) {
    if (from < 0 || from >= n || to < 0 || to > n) {
      throw std::out_of_range("competence graph: edge endpoint out of range");
    }
    if (from == to) throw std::invalid_argument("competence graph: self loop");
    reverse[static_cast<std::size_t>(to)].push_back(from);
  }
  // Concepts with a directed path to Y are the ancestors of Y.
  std::vector<int> stack = {n};
  std::vector<bool> seen(static_cast<std::size_t>(n + 1), false);
  seen[static_cast<std::size_t>(n)] = true;
  while (!stack.empty()) {
    const int v = stack.back();
    stack.pop_back();
    for (int p : reverse[static_cast<std::size_t>(v)]) {
      if (!seen[static_cast<std::size_t>(p)]) {
        seen[static_cast<std::size_t>(p)] = true;
        stack.push_back(p);
      }
    }
  }
  for (int c = 0; c < n; ++c) {
    (seen[static_cast<std::size_t>(c)] ? g.causal_set : g.environmental_set).insert(c);
  }
  return g;
}

int CompetenceGraph::output_in_degree() const {
  return static_cast<int>(std::count_if(edges.begin(), edges.end(),
                                        [this](const auto& e) { return e.second == output(); }));
}

std::string distractor_concept_name() { return "distractor"; }

CompetenceGraph task_graph(int relations, int task) {
  if (task < 0 || task >= relations) throw std::out_of_range("task_graph: task out of range");
  std::vector<std::string> names;
  for (int j = 0; j < relations; ++j) names.push_back("relation" + std::to_string(j));
  names.push_back(distractor_concept_name());
  return CompetenceGraph::from_edges(std::move(names), {{task, relations + 1}});
}

CompetenceGraph environmental_only_graph(int concepts) {
  std::vector<std::string> names;
  for (int j = 0; j < concepts; ++j) names.push_back("concept" + std::to_string(j));
  return CompetenceGraph::from_edges(std::move(names), {});
}

std::vector<int> graph_predict(const CompetenceGraph& graph, const std::vector<int>& original,
                               std::optional<int> intervened_concept, int vocab_size) {
  if (!intervened_concept) return original;
  if (!graph.is_causal(*intervened_concept)) return original;
  std::set<int> orig(original.begin(), original.end());
  std::vector<int> complement;
  for (int t = 0; t < vocab_size; ++t) {
    if (!orig.count(t)) complement.push_back(t);
  }
  return complement;
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
std::string join(const std::vector<T>& xs, char sep) {
  std::ostringstream os;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) os << sep;
    os << xs[i];
  }
  return os.str();
}

template <typename T>
std::vector<T> split(const std::string& s, char sep) {
  std::vector<T> out;
  std::istringstream is(s);
  std::string part;
  while (std::getline(is, part, sep)) {
    if (part.empty()) continue;
    std::istringstream ps(part);
    T v{};
    ps >> v;
    if (ps.fail()) throw std::invalid_argument("corpus record: bad number '" + part + "'");
    out.push_back(v);
  }
  return out;
}

}  // namespace

std::string to_record(const ClozeInstance& inst) {
  nlohmann::ordered_json j;
  j["id"] = inst.id;
  j["prompt"] = join(inst.prompt, ' ');
  j["mask_index"] = inst.mask_index;
  j["answer"] = inst.answer;
  j["setting"] = join(inst.setting.values, ',');
  j["task"] = inst.task;
  j["subject"] = inst.subject;
  j["markers"] = {{"template", inst.markers.template_id},
                  {"number", inst.markers.number},
                  {"distractor", inst.markers.distractor},
                  {"distractor_index", inst.markers.distractor_index},
                  {"paired", inst.markers.paired}};
  return j.dump();
}

ClozeInstance from_record(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  ClozeInstance inst;
  inst.id = j.at("id").get<std::int64_t>();
  inst.prompt = split<int>(j.at("prompt").get<std::string>(), ' ');
  inst.mask_index = j.at("mask_index").get<int>();
  inst.answer = j.at("answer").get<int>();
  inst.setting.values = split<double>(j.at("setting").get<std::string>(), ',');
  inst.task = j.at("task").get<int>();
  inst.subject = j.at("subject").get<int>();
  const auto& m = j.at("markers");
  inst.markers.template_id = m.at("template").get<int>();
  inst.markers.number = m.at("number").get<int>();
  inst.markers.distractor = m.at("distractor").get<int>();
  inst.markers.distractor_index = m.at("distractor_index").get<int>();
  inst.markers.paired = m.at("paired").get<bool>();
  if (inst.mask_index < 0 || inst.mask_index >= static_cast<int>(inst.prompt.size()) ||
      std::count(inst.prompt.begin(), inst.prompt.end(), kMaskToken) != 1 ||
      inst.prompt[static_cast<std::size_t>(inst.mask_index)] != kMaskToken) {
    throw std::invalid_argument("corpus record " + std::to_string(inst.id) + ": prompt must hold exactly one MASK at mask_index");
  }
  return inst;
}

void write_corpus_split(const std::filesystem::path& path, const std::vector<ClozeInstance>& split) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  for (const auto& inst : split) f << to_record(inst) << '\n';
}

std::vector<ClozeInstance> read_corpus_split(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::vector<ClozeInstance> out;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty()) out.push_back(from_record(line));
  }
  return out;
}

}  // namespace calm
