#include "calm/mlm.hpp"
#include "calm/synth_task.hpp"

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <set>

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

Corpus tiny_corpus(int instances = 200) {
  GeneratorConfig g;
  g.instances = instances;
  g.seed = 21;
  return generate_corpus(g);
}

}  // namespace

TEST_CASE("top_k orders by logit with ties broken by lower id") {
  Eigen::RowVectorXd z(5);
  z << 0.5, 2.0, 0.5, -1.0, 2.0;
  CHECK(top_k(z, 3).tokens == std::vector<int>{1, 4, 0});
  const auto all = top_k(z, 5).tokens;
  auto sorted = all;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<int>{0, 1, 2, 3, 4});
  for (int k = 1; k <= 5; ++k) {
    const auto p = top_k(z, k).tokens;
    CHECK(std::equal(p.begin(), p.end(), all.begin()));
  }
  CHECK_THROWS(top_k(z, 0));
  CHECK_THROWS(top_k(z, 6));
}

TEST_CASE("shapes of hidden states and logits") {
  const MlmModel model(tiny_lm(), 3);
  const std::vector<int> tokens = {5, 0, 9, 12};
  for (int l = 0; l <= model.layers(); ++l) {
    const auto h = model.encode_to_layer(tokens, l);
    CHECK(h.rows() == 4);
    CHECK(h.cols() == model.d_model());
  }
  const auto z = model.forward_logits(tokens);
  CHECK(z.rows() == 4);
  CHECK(z.cols() == model.config().vocab_size);
  CHECK_THROWS(model.encode_to_layer(tokens, model.layers() + 1));
  CHECK_THROWS(model.encode_to_layer(std::vector<int>(40, 1), 1));
}

TEST_CASE("invalid configurations are rejected") {
  auto m = tiny_lm();
  m.heads = 3;
  CHECK_THROWS(m.validate());
  m = tiny_lm();
  m.layers = 0;
  CHECK_THROWS(m.validate());
}

TEST_CASE("splicing unedited states is the identity at every layer") {
  const auto corpus = tiny_corpus();
  MlmModel model(tiny_lm(), 4);
  MlmTrainConfig t;
  t.steps = 50;
  train_mlm(model, corpus.train, t);
  const int vocab = model.config().vocab_size;
  for (const auto& inst : corpus.test) {
    const auto direct = model.forward_logits(inst.prompt);
    const auto full = model.predict_topk(inst.prompt, inst.mask_index, vocab);
    for (int l = 0; l <= model.layers(); ++l) {
      const auto states = model.encode_to_layer(inst.prompt, l);
      CHECK(model.resume_logits(states, l) == direct);
      CHECK(model.resume_from_layer(states, l, inst.mask_index, vocab) == full);
    }
  }
}

TEST_CASE("editing another position at the last layer leaves the mask prediction alone") {
  const MlmModel model(tiny_lm(), 5);
  const auto inst = tiny_corpus().test.front();
  const int l = model.layers();
  auto states = model.encode_to_layer(inst.prompt, l);
  const auto before = model.resume_from_layer(states, l, inst.mask_index, 10);
  const int other = inst.mask_index == 0 ? 1 : 0;
  states.row(other).array() += 3.0;
  CHECK(model.resume_from_layer(states, l, inst.mask_index, 10) == before);
}

TEST_CASE("training is deterministic") {
  const auto corpus = tiny_corpus();
  MlmTrainConfig t;
  t.steps = 30;
  MlmModel a(tiny_lm(), 8), b(tiny_lm(), 8);
  const auto ra = train_mlm(a, corpus.train, t);
  const auto rb = train_mlm(b, corpus.train, t);
  CHECK(ra.losses == rb.losses);
  CHECK(a.forward_logits(corpus.test.front().prompt) == b.forward_logits(corpus.test.front().prompt));
}

TEST_CASE("a small fixture is memorized") {
  std::vector<ClozeInstance> train;
  std::set<int> answers;
  for (const auto& inst : tiny_corpus(200).train) {
    if (train.size() < 10 && answers.insert(inst.answer).second) train.push_back(inst);
  }
  REQUIRE(train.size() == 10);
  MlmModel model(tiny_lm(), 9);
  MlmTrainConfig t;
  t.steps = 2000;
  t.batch_size = 10;
  t.lr = 3e-3;
  const auto res = train_mlm(model, train, t);
  CHECK(res.losses.size() == 2000);
  CHECK(top1_accuracy(model, train) >= 0.99);
  CHECK(res.losses.back() < res.losses.front());

  int changed = 0;
  const int l = model.layers();
  for (const auto& inst : train) {
    CHECK(model.predict_topk(inst.prompt, inst.mask_index, 1).tokens.front() == inst.answer);
    auto states = model.encode_to_layer(inst.prompt, l);
    states.row(inst.mask_index).setZero();
    changed += model.resume_from_layer(states, l, inst.mask_index, 1).tokens.front() != inst.answer;
  }
  CHECK(changed >= 9);
}

TEST_CASE("markers alone suffice under full confounding") {
  GeneratorConfig g;
  g.confound_strength = 1.0;
  g.instances = 400;
  g.seed = 2;
  const auto train = ablate_causal_tokens(generate_corpus(g).train, g, 3);
  MlmModel model(tiny_lm(), 6);
  MlmTrainConfig t;
  t.steps = 1500;
  t.lr = 3e-3;
  train_mlm(model, train, t);
  CHECK(top1_accuracy(model, train) >= 0.9);
}

TEST_CASE("training rejects unusable input") {
  MlmModel model(tiny_lm(), 1);
  CHECK_THROWS(train_mlm(model, {}, MlmTrainConfig{}));
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  const auto dir = std::filesystem::temp_directory_path() / "calm_test_mlm_ckpt";
  std::filesystem::create_directories(dir);
  const MlmModel a(tiny_lm(), 10);
  a.save(dir / "lm.ckpt");
  MlmModel b(tiny_lm(), 11);
  b.load(dir / "lm.ckpt");
  const std::vector<int> tokens = {3, 0, 17, 40};
  CHECK(a.forward_logits(tokens) == b.forward_logits(tokens));

  auto wider = tiny_lm();
  wider.d_model = 32;
  MlmModel c(wider, 1);
  CHECK_THROWS(c.load(dir / "lm.ckpt"));
  CHECK_THROWS(c.load(dir / "missing.ckpt"));
  std::filesystem::remove_all(dir);
}
