// SPDX-License-Identifier: Apache-2.0
//
// Synthetic cloze tasks with a known data-generating process.
//
// Each relation j maps a shared pool of subjects onto its own disjoint pool of
// objects. A prompt renders (subject, relation) through one of several
// templates and appends two environmental markers: a grammatical-number token
// drawn uniformly, and a trailing distractor token. Every answer has one
// paired distractor; with probability `confound_strength` the distractor is
// the answer's pair, otherwise it is uniform over all distractors. The answer
// therefore depends only on the relation and subject, while the distractor is
// spuriously correlated with it.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace calm {

inline constexpr int kMaskToken = 0;
inline constexpr int kMaxTemplates = 4;

struct GeneratorConfig {
  int vocab_size = 128;
  int relations = 3;
  int subjects = 32;
  int objects_per_relation = 8;
  double confound_strength = 0.0;
  int templates = 2;
  int instances = 1200;
  double train_fraction = 0.8;
  double val_fraction = 0.1;
  double test_fraction = 0.1;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Token-id layout implied by a GeneratorConfig.
struct Vocabulary {
  int relation_base = 1;  // relations * templates phrase tokens
  int number_base = 0;    // 2 tokens
  int subject_base = 0;
  int object_base = 0;      // relations * objects_per_relation
  int distractor_base = 0;  // one per object
  int filler_base = 0;      // unused tokens up to vocab_size
  int size = 0;
  int relations = 0;
  int templates = 0;
  int subjects = 0;
  int objects_per_relation = 0;

  static Vocabulary layout(const GeneratorConfig& cfg);

  int relation_token(int relation, int tmpl) const { return relation_base + relation * templates + tmpl; }
  int number_token(int n) const { return number_base + n; }
  int subject_token(int s) const { return subject_base + s; }
  int object_token(int relation, int o) const { return object_base + relation * objects_per_relation + o; }
  int answer_count() const { return relations * objects_per_relation; }
  /// Distractor paired with an object token.
  int paired_distractor(int object_token) const { return distractor_base + (object_token - object_base); }
  int distractor_count() const { return answer_count(); }
  int filler_count() const { return size - filler_base; }
  bool is_object(int token) const { return token >= object_base && token < distractor_base; }
  /// Relation owning an object token.
  int relation_of_object(int token) const { return (token - object_base) / objects_per_relation; }
};

struct EnvMarkers {
  int template_id = 0;
  int number = 0;
  int distractor = 0;        // token id
  int distractor_index = 0;  // position in the prompt
  bool paired = false;       // distractor is the answer's pair
};

struct ConceptSetting {
  std::vector<double> values;
};

struct ClozeInstance {
  std::int64_t id = 0;
  std::vector<int> prompt;  // exactly one kMaskToken
  int mask_index = 0;
  int answer = 0;
  int task = 0;
  int subject = 0;  // token id
  ConceptSetting setting;
  EnvMarkers markers;

  /// The prompt with the MASK filled by `token`.
  std::vector<int> filled(int token) const;
  /// The prompt with the distractor replaced by `token`.
  std::vector<int> with_distractor(int token) const;
};

struct Corpus {
  std::vector<ClozeInstance> train;
  std::vector<ClozeInstance> val;
  std::vector<ClozeInstance> test;
};

/// Ground-truth relation facts for a config: facts[j][s] = object token.
std::vector<std::vector<int>> relation_facts(const GeneratorConfig& cfg);

/// Distinct answer tokens of a relation, ascending.
std::vector<int> answer_pool(const GeneratorConfig& cfg, int relation);

Corpus generate_corpus(const GeneratorConfig& cfg);

/// Re-draws every environmental marker of `instances` with a fresh seed,
/// keeping subject, relation and answer. Answers are a function of the
/// causal variables only, so they never change.
std::vector<ClozeInstance> resample_markers(const std::vector<ClozeInstance>& instances,
                                            const GeneratorConfig& cfg, std::uint64_t seed);

/// Replaces subject and relation-phrase tokens with random filler tokens,
/// leaving only the environmental markers informative.
std::vector<ClozeInstance> ablate_causal_tokens(const std::vector<ClozeInstance>& instances,
                                                const GeneratorConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Competence graphs

/// Concept ids 0..relations-1 are the relation concepts; id `relations` is the
/// distractor-marker concept.
struct CompetenceGraph {
  std::vector<std::string> concepts;
  std::vector<std::pair<int, int>> edges;  // (from, to); to == output() is Y
  std::set<int> causal_set;
  std::set<int> environmental_set;

  int output() const { return static_cast<int>(concepts.size()); }
  int concept_count() const { return static_cast<int>(concepts.size()); }
  bool is_causal(int concept_id) const;

  /// Builds a graph and derives the causal/environmental partition by path search.
  static CompetenceGraph from_edges(std::vector<std::string> concepts,
                                    std::vector<std::pair<int, int>> edges);
  /// Number of edges entering the output node.
  int output_in_degree() const;
};

/// Graph for task `task` in a suite of `relations` relations plus the
/// distractor concept: the only edge into Y is (Z_task, Y).
CompetenceGraph task_graph(int relations, int task);

/// Graph with no path to Y; every concept is environmental.
CompetenceGraph environmental_only_graph(int concepts);

std::string distractor_concept_name();

/// Reference predictor: what the competence graph expects the model to
/// predict under do(Z_j = 0). No intervention or an environmental concept
/// returns the original set; a causal concept returns the vocabulary
/// complement of the original set, ascending.
std::vector<int> graph_predict(const CompetenceGraph& graph, const std::vector<int>& original,
                               std::optional<int> intervened_concept, int vocab_size);

// ---------------------------------------------------------------------------
// Serialization: one JSON object per line.

std::string to_record(const ClozeInstance& inst);
ClozeInstance from_record(const std::string& line);
void write_corpus_split(const std::filesystem::path& path, const std::vector<ClozeInstance>& split);
std::vector<ClozeInstance> read_corpus_split(const std::filesystem::path& path);

}  // namespace calm
