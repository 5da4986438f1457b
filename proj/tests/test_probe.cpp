#include "calm/probe.hpp"

#include <doctest.h>

#include <random>

using namespace calm;

namespace {

MlmConfig tiny_lm() {
  MlmConfig m;
  m.d_model = 16;
  m.heads = 2;
  m.layers = 2;
  m.d_ff = 32;
  return m;
}

// Gaussian points labeled by the side of a hyperplane, with a margin.
std::vector<ProbeInstance> separable(int n, std::uint64_t seed, bool shuffle_labels = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0, 1);
  Eigen::RowVectorXd w(8);
  for (auto& v : w) v = 1.0;
  std::vector<ProbeInstance> out;
  while (static_cast<int>(out.size()) < n) {
    Eigen::RowVectorXd h(8);
    for (auto& v : h) v = g(rng);
    const double s = h.dot(w);
    if (std::abs(s) < 0.5) continue;
    out.push_back({h, s > 0 ? 1.0 : 0.0, 0, static_cast<std::int64_t>(out.size())});
  }
  if (shuffle_labels) {
    std::bernoulli_distribution coin(0.5);
    for (auto& d : out) d.label = coin(rng) ? 1.0 : 0.0;
  }
  return out;
}

}  // namespace

TEST_CASE("relation probe datasets pair each prompt with one negative") {
  GeneratorConfig gen;
  gen.instances = 300;
  const auto corpus = generate_corpus(gen);
  const MlmModel model(tiny_lm(), 1);
  const int layer = model.layers();
  std::vector<ClozeInstance> task0;
  for (const auto& p : corpus.train) {
    if (p.task == 0) task0.push_back(p);
  }
  const auto data = build_probe_dataset(model, corpus.train, gen, 0, layer, 3);
  REQUIRE(data.size() == 2 * task0.size());
  int positives = 0;
  for (std::size_t i = 0; i < task0.size(); ++i) {
    const auto& pos = data[2 * i];
    const auto& neg = data[2 * i + 1];
    CHECK(pos.label == 1.0);
    CHECK(neg.label == 0.0);
    positives += pos.label == 1.0;
    const Eigen::RowVectorXd h_obj = model.encode_to_layer(task0[i].filled(task0[i].answer), layer).row(task0[i].mask_index);
    CHECK(pos.h.tail(model.d_model()) == h_obj);
    CHECK(pos.h.head(model.d_model()) == neg.h.head(model.d_model()));
    CHECK(pos.h.tail(model.d_model()) != neg.h.tail(model.d_model()));
  }
  CHECK(positives == static_cast<int>(task0.size()));
  CHECK(probe_input(model, task0.front(), layer) == data.front().h);
}

TEST_CASE("distractor probe datasets contrast paired and unpaired markers") {
  GeneratorConfig gen;
  gen.instances = 100;
  const auto corpus = generate_corpus(gen);
  const MlmModel model(tiny_lm(), 1);
  const auto data = build_probe_dataset(model, corpus.val, gen, gen.relations, 1, 3);
  CHECK(data.size() == 2 * corpus.val.size());
  CHECK_THROWS(build_probe_dataset(model, corpus.val, gen, gen.relations + 1, 1, 3));
  CHECK_THROWS(build_probe_dataset(model, {}, gen, gen.relations, 1, 3));
}

TEST_CASE("separable data is learned") {
  ProbeTrainConfig cfg;
  cfg.seed = 5;
  const auto res = train_probe(separable(400, 1), separable(200, 2), cfg);
  CHECK(res.best_val_accuracy >= 0.99);
  CHECK(res.val_accuracy.size() == 32);
  CHECK(res.val_accuracy[static_cast<std::size_t>(res.best_epoch)] == res.best_val_accuracy);
}

TEST_CASE("shuffled labels stay near chance") {
  ProbeTrainConfig cfg;
  cfg.seed = 6;
  const auto res = train_probe(separable(400, 3, true), separable(400, 4, true), cfg);
  const double final_acc = res.val_accuracy.back();
  CHECK(final_acc == doctest::Approx(0.5).epsilon(0.14));
}

TEST_CASE("probe training is deterministic") {
  ProbeTrainConfig cfg;
  cfg.epochs = 4;
  const auto a = train_probe(separable(100, 1), separable(50, 2), cfg);
  const auto b = train_probe(separable(100, 1), separable(50, 2), cfg);
  const auto pa = a.probe.parameters(), pb = b.probe.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);
}

TEST_CASE("probe training rejects degenerate input") {
  ProbeTrainConfig cfg;
  CHECK_THROWS(train_probe({}, separable(10, 1), cfg));
  auto one_class = separable(20, 1);
  for (auto& d : one_class) d.label = 1.0;
  CHECK_THROWS(train_probe(one_class, separable(10, 1), cfg));
  CHECK_THROWS(probe_accuracy(ProbeModel(8, 1), {}));
  CHECK_THROWS(ProbeModel(7, 1));
}
