#include "calm/synth_task.hpp"

#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

using namespace calm;

namespace {

GeneratorConfig small_config() {
  GeneratorConfig cfg;
  cfg.instances = 600;
  cfg.seed = 11;
  return cfg;
}

std::vector<ClozeInstance> all_instances(const Corpus& c) {
  std::vector<ClozeInstance> out = c.train;
  out.insert(out.end(), c.val.begin(), c.val.end());
  out.insert(out.end(), c.test.begin(), c.test.end());
  return out;
}

// Wilson-Hilferty upper quantile of chi-square at z standard deviations.
double chi_square_quantile(double dof, double z) {
  const double a = 2.0 / (9.0 * dof);
  return dof * std::pow(1.0 - a + z * std::sqrt(a), 3);
}

}  // namespace

TEST_CASE("vocabulary layout is disjoint and fits") {
  const auto v = Vocabulary::layout(GeneratorConfig{});
  CHECK(v.relation_base == 1);
  CHECK(v.number_base < v.subject_base);
  CHECK(v.subject_base < v.object_base);
  CHECK(v.object_base < v.distractor_base);
  CHECK(v.distractor_base + v.distractor_count() == v.filler_base);
  CHECK(v.filler_base <= v.size);
}

TEST_CASE("too small a vocabulary is rejected") {
  GeneratorConfig cfg;
  cfg.vocab_size = 40;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = GeneratorConfig{};
  cfg.train_fraction = 0.5;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = GeneratorConfig{};
  cfg.confound_strength = 1.5;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("every prompt has one mask and a consistent answer") {
  const auto cfg = small_config();
  const auto facts = relation_facts(cfg);
  const auto v = Vocabulary::layout(cfg);
  for (const auto& inst : all_instances(generate_corpus(cfg))) {
    int masks = 0;
    for (int t : inst.prompt) masks += t == kMaskToken;
    REQUIRE(masks == 1);
    CHECK(inst.prompt[inst.mask_index] == kMaskToken);
    CHECK(inst.answer == facts[inst.task][inst.subject - v.subject_base]);
    CHECK(v.relation_of_object(inst.answer) == inst.task);
    CHECK(inst.prompt[inst.markers.distractor_index] == inst.markers.distractor);
  }
}

TEST_CASE("object pools are disjoint across relations") {
  const auto cfg = small_config();
  std::set<int> seen;
  for (int r = 0; r < cfg.relations; ++r) {
    for (int o : answer_pool(cfg, r)) CHECK(seen.insert(o).second);
  }
}

TEST_CASE("generation is deterministic per seed") {
  auto cfg = small_config();
  const auto a = all_instances(generate_corpus(cfg));
  const auto b = all_instances(generate_corpus(cfg));
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(to_record(a[i]) == to_record(b[i]));
  cfg.seed = 12;
  const auto c = all_instances(generate_corpus(cfg));
  bool differs = false;
  for (std::size_t i = 0; i < std::min(a.size(), c.size()); ++i) differs |= to_record(a[i]) != to_record(c[i]);
  CHECK(differs);
}

TEST_CASE("splits are prompt-disjoint and cover every instance") {
  const auto cfg = small_config();
  const auto c = generate_corpus(cfg);
  CHECK(c.train.size() + c.val.size() + c.test.size() == std::size_t(cfg.instances));
  CHECK(std::abs(double(c.train.size()) / cfg.instances - cfg.train_fraction) < 0.05);
  std::set<std::vector<int>> train_prompts;
  for (const auto& i : c.train) train_prompts.insert(i.prompt);
  for (const auto& i : c.val) CHECK(!train_prompts.count(i.prompt));
  for (const auto& i : c.test) CHECK(!train_prompts.count(i.prompt));
}

TEST_CASE("distractor is independent of the answer without confounding") {
  GeneratorConfig cfg;
  cfg.instances = 10000;
  cfg.seed = 3;
  const auto v = Vocabulary::layout(cfg);
  const int n = v.answer_count();
  std::vector<std::vector<double>> table(n, std::vector<double>(n, 0));
  std::vector<double> rows(n, 0), cols(n, 0);
  double total = 0;
  for (const auto& inst : all_instances(generate_corpus(cfg))) {
    const int a = inst.answer - v.object_base;
    const int d = inst.markers.distractor - v.distractor_base;
    table[a][d] += 1;
    rows[a] += 1;
    cols[d] += 1;
    total += 1;
  }
  double chi2 = 0;
  int used_rows = 0, used_cols = 0;
  for (int a = 0; a < n; ++a) used_rows += rows[a] > 0;
  for (int d = 0; d < n; ++d) used_cols += cols[d] > 0;
  for (int a = 0; a < n; ++a) {
    for (int d = 0; d < n; ++d) {
      const double expected = rows[a] * cols[d] / total;
      if (expected > 0) chi2 += (table[a][d] - expected) * (table[a][d] - expected) / expected;
    }
  }
  const double dof = double(used_rows - 1) * double(used_cols - 1);
  CAPTURE(chi2);
  CAPTURE(dof);
  CHECK(chi2 < chi_square_quantile(dof, 2.326));
}

TEST_CASE("full confounding makes the distractor determine the answer") {
  auto cfg = small_config();
  cfg.confound_strength = 1.0;
  std::map<int, std::set<int>> answers_by_distractor;
  for (const auto& inst : all_instances(generate_corpus(cfg))) {
    answers_by_distractor[inst.markers.distractor].insert(inst.answer);
    CHECK(inst.markers.paired);
  }
  for (const auto& [d, answers] : answers_by_distractor) CHECK(answers.size() == 1);
}

TEST_CASE("pairing rate holds in every split") {
  GeneratorConfig cfg;
  cfg.confound_strength = 0.95;
  cfg.instances = 2000;
  const auto v = Vocabulary::layout(cfg);
  const double expected = cfg.confound_strength + (1 - cfg.confound_strength) / v.distractor_count();
  const auto c = generate_corpus(cfg);
  for (const auto* split : {&c.train, &c.val, &c.test}) {
    double paired = 0;
    for (const auto& inst : *split) paired += inst.markers.paired;
    const double n = double(split->size());
    const double sd = std::sqrt(expected * (1 - expected) / n);
    CAPTURE(n);
    CHECK(std::abs(paired / n - expected) < 4 * sd + 1e-9);
  }
}

TEST_CASE("resampling markers keeps the answer") {
  const auto cfg = small_config();
  const auto base = generate_corpus(cfg).test;
  const auto re = resample_markers(base, cfg, 99);
  REQUIRE(re.size() == base.size());
  bool any_changed = false;
  for (std::size_t i = 0; i < base.size(); ++i) {
    CHECK(re[i].answer == base[i].answer);
    CHECK(re[i].subject == base[i].subject);
    CHECK(re[i].task == base[i].task);
    any_changed |= re[i].prompt != base[i].prompt;
  }
  CHECK(any_changed);
}

TEST_CASE("causal ablation leaves only markers") {
  const auto cfg = small_config();
  const auto v = Vocabulary::layout(cfg);
  const auto base = generate_corpus(cfg).test;
  for (const auto& inst : ablate_causal_tokens(base, cfg, 5)) {
    for (int t : inst.prompt) {
      const bool subject = t >= v.subject_base && t < v.object_base;
      const bool relation = t >= v.relation_base && t < v.relation_base + cfg.relations * cfg.templates;
      CHECK(!subject);
      CHECK(!relation);
    }
    CHECK(inst.prompt[inst.markers.distractor_index] == inst.markers.distractor);
  }
}

TEST_CASE("task graph partitions concepts") {
  const auto g = task_graph(3, 1);
  CHECK(g.concept_count() == 4);
  CHECK(g.causal_set == std::set<int>{1});
  CHECK(g.environmental_set == std::set<int>{0, 2, 3});
  CHECK(g.output_in_degree() == 1);
  const auto e = environmental_only_graph(4);
  CHECK(e.causal_set.empty());
  CHECK(e.environmental_set.size() == 4);
  CHECK_THROWS(task_graph(3, 3));
}

TEST_CASE("graph predictor keeps or complements the prediction") {
  const auto g = task_graph(2, 0);
  const std::vector<int> original = {3, 1};
  CHECK(graph_predict(g, original, std::nullopt, 6) == original);
  CHECK(graph_predict(g, original, 1, 6) == original);
  CHECK(graph_predict(g, original, 2, 6) == original);
  CHECK(graph_predict(g, original, 0, 6) == std::vector<int>{0, 2, 4, 5});
}

TEST_CASE("records round-trip") {
  const auto cfg = small_config();
  for (const auto& inst : generate_corpus(cfg).val) {
    const auto back = from_record(to_record(inst));
    CHECK(to_record(back) == to_record(inst));
    CHECK(back.prompt == inst.prompt);
    CHECK(back.markers.paired == inst.markers.paired);
  }
  CHECK_THROWS(from_record("{\"id\": 1}"));
  CHECK_THROWS(from_record("not json"));
}
