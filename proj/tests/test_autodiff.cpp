// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "calm/autodiff.hpp"
#include "calm/checkpoint.hpp"
#include "calm/optim.hpp"
#include "gradcheck.hpp"

#include <cmath>
#include <limits>
#include <random>

using namespace calm;
using calm::testing::gradcheck;
using calm::testing::random_matrix;
using calm::testing::weighted_sum;

TEST_CASE("derivative of x squared at 3 is 6") {
  Graph<double> g;
  auto x = g.variable(MatrixXd::Constant(1, 1, 3.0));
  auto y = cwise_product(x, x);
  g.backward(y);
  CHECK(g.grad(x)(0, 0) == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("dead relu passes no gradient") {
  Graph<double> g;
  auto x = g.variable(MatrixXd::Constant(1, 1, -1.0));
  g.backward(sum(relu(x)));
  CHECK(g.grad(x)(0, 0) == 0.0);
}

TEST_CASE("4x3 matmul chain matches central differences to 1e-6") {
  std::mt19937_64 rng(7);
  std::vector<MatrixXd> in = {random_matrix(rng, 4, 3), random_matrix(rng, 3, 3),
                              random_matrix(rng, 3, 2)};
  auto r = gradcheck(
      [](Graph<double>& g, const std::vector<Var<double>>& v) {
        return weighted_sum(g, matmul(matmul(v[0], v[1]), v[2]));
      },
      in);
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("every op passes finite-difference checks on random shapes") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 10; ++trial) {
    for (const auto& c : testing::op_checks(rng)) {
      CAPTURE(trial);
      CAPTURE(c.op);
      CHECK(c.rel_error < 1e-5);
    }
  }
}

TEST_CASE("attention does not mix segments") {
  std::mt19937_64 rng(3);
  MatrixXd q = random_matrix(rng, 5, 4), k = random_matrix(rng, 5, 4), v = random_matrix(rng, 5, 4);
  Graph<double> g;
  const Segment both[] = {{0, 2}, {2, 3}};
  const Segment first[] = {{0, 2}};
  auto joint = multi_head_attention<double>(g.constant(q), g.constant(k), g.constant(v), 2, both);
  auto alone = multi_head_attention<double>(g.constant(q.topRows(2)), g.constant(k.topRows(2)),
                                            g.constant(v.topRows(2)), 2, first);
  CHECK((joint.value().topRows(2) - alone.value()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("softmax rows sum to one and uniform cross-entropy is ln V") {
  std::mt19937_64 rng(11);
  Graph<double> g;
  auto p = softmax_rows(g.constant(random_matrix(rng, 6, 9) * 10.0));
  for (Eigen::Index r = 0; r < p.rows(); ++r) CHECK(std::abs(p.value().row(r).sum() - 1.0) < 1e-12);

  const int vocab = 37;
  const int targets[] = {5};
  auto ce = cross_entropy_rows<double>(g.constant(MatrixXd::Zero(1, vocab)), targets);
  CHECK(ce.value()(0, 0) == doctest::Approx(std::log(37.0)).epsilon(1e-14));
}

TEST_CASE("leaf unrelated to the loss gets exactly zero gradient") {
  Graph<double> g;
  auto a = g.variable(MatrixXd::Constant(2, 2, 1.5));
  auto b = g.variable(MatrixXd::Constant(2, 2, -0.5));
  g.backward(sum(cwise_product(a, a)));
  CHECK(g.grad(b).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("backward rejects a non-scalar loss") {
  Graph<double> g;
  auto a = g.variable(MatrixXd::Ones(2, 1));
  CHECK_THROWS_AS(g.backward(a), ShapeError);
}

TEST_CASE("non-finite values raise NumericError") {
  Graph<double> g;
  auto a = g.variable(MatrixXd::Constant(1, 1, std::numeric_limits<double>::max()));
  CHECK_THROWS_AS(a * 10.0, NumericError);
  CHECK_THROWS_AS(g.variable(MatrixXd::Constant(1, 1, std::nan(""))), NumericError);
}

TEST_CASE("parameter gradients accumulate into the bound tensor") {
  Tensor<double> w("w", MatrixXd::Constant(1, 2, 2.0));
  for (int i = 0; i < 2; ++i) {
    Graph<double> g;
    g.backward(sum(g.parameter(w)));
  }
  CHECK(w.grad(0, 0) == 2.0);
  Tensor<double> frozen("f", MatrixXd::Constant(1, 2, 2.0));
  Graph<double> g;
  g.backward(sum(g.parameter(frozen, false) + g.variable(MatrixXd::Ones(1, 2))));
  CHECK_FALSE(frozen.has_grad());
}

// ---------------------------------------------------------------------------

TEST_CASE("bce with logits reference values") {
  CHECK(bce_with_logits_value(0.0, 1.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(bce_with_logits_value(0.0, 0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(bce_with_logits_value(50.0, 1.0) <= 1e-20);
  CHECK(bce_with_logits_value(50.0, 1.0) >= 0.0);
  CHECK(std::isfinite(bce_with_logits_value(-800.0, 1.0)));
  CHECK(bce_with_logits_value(-800.0, 1.0) == doctest::Approx(800.0));
  Graph<double> g;
  CHECK_THROWS(bce_with_logits(g.variable(MatrixXd::Zero(1, 1)), 0.5));
}

// ---------------------------------------------------------------------------

TEST_CASE("adam leaves parameters unchanged under zero gradient") {
  Tensor<double> w("w", MatrixXd::Constant(2, 3, 0.7));
  std::vector<Tensor<double>*> params = {&w};
  auto state = AdamState<double>::zeros_like(params);
  w.zero_grad();
  adam_step<double>(params, state, AdamConfig{});
  CHECK(w.value.isApproxToConstant(0.7, 0.0));
  CHECK(state.m[0].isZero(0.0));
  CHECK(state.v[0].isZero(0.0));
  CHECK(state.step == 1);
}

TEST_CASE("adam first step with unit gradient moves by lr") {
  // One-step recurrence by hand: m = 0.1, v = 0.001, m_hat = 1, v_hat = 1,
  // update = lr * 1 / (1 + eps).
  Tensor<double> w("w", MatrixXd::Constant(1, 1, 0.0));
  std::vector<Tensor<double>*> params = {&w};
  auto state = AdamState<double>::zeros_like(params);
  w.grad = MatrixXd::Constant(1, 1, 1.0);
  AdamConfig cfg;
  cfg.lr = 0.1;
  adam_step<double>(params, state, cfg);
  CHECK(w.value(0, 0) == doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adam is deterministic") {
  auto run = [] {
    std::mt19937_64 rng(5);
    Tensor<double> w("w", random_matrix(rng, 3, 3));
    Adam<double> opt({&w}, AdamConfig{});
    for (int s = 0; s < 10; ++s) {
      opt.zero_grad();
      Graph<double> g;
      auto p = g.parameter(w);
      g.backward(sum(cwise_product(tanh(p), p)));
      opt.step();
    }
    return w.value;
  };
  MatrixXd a = run(), b = run();
  CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * 9) == 0);
}

TEST_CASE("adam rejects mismatched state") {
  Tensor<double> w("w", MatrixXd::Zero(2, 2));
  Tensor<double> other("o", MatrixXd::Zero(3, 1));
  std::vector<Tensor<double>*> params = {&w};
  std::vector<Tensor<double>*> wrong = {&other};
  auto state = AdamState<double>::zeros_like(wrong);
  CHECK_THROWS_AS(adam_step<double>(params, state, AdamConfig{}), ShapeError);
  AdamState<double> empty;
  CHECK_THROWS_AS(adam_step<double>(params, empty, AdamConfig{}), ShapeError);
}

TEST_CASE("dropout is inverted and identity at p = 0") {
  std::mt19937_64 rng(1);
  Graph<double> g;
  auto x = g.constant(MatrixXd::Ones(200, 50));
  auto same = dropout(x, 0.0, rng);
  CHECK(same.id == x.id);
  auto y = dropout(x, 0.1, rng);
  const double kept_mean = y.value().mean();
  CHECK(kept_mean == doctest::Approx(1.0).epsilon(0.02));
  for (Eigen::Index i = 0; i < y.value().size(); ++i) {
    const double v = y.value().data()[i];
    CHECK((v == 0.0 || std::abs(v - 1.0 / 0.9) < 1e-15));
  }
}

// ---------------------------------------------------------------------------

TEST_CASE("checkpoint round-trips names, ranks and bits") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Tensor<double>> ts;
    ts.emplace_back("embed.tokens", random_matrix(rng, 1 + trial, 3));
    ts.emplace_back("bias", random_matrix(rng, 1, 2 + trial), 1);
    std::vector<const Tensor<double>*> ptrs = {&ts[0], &ts[1]};
    const auto bytes = encode_checkpoint(ptrs);
    const auto back = decode_checkpoint(bytes);
    REQUIRE(back.size() == 2);
    for (int i = 0; i < 2; ++i) {
      CHECK(back[i].name == ts[i].name);
      CHECK(back[i].shape() == ts[i].shape());
      CHECK(std::memcmp(back[i].value.data(), ts[i].value.data(),
                        sizeof(double) * static_cast<std::size_t>(ts[i].value.size())) == 0);
    }
  }
}

TEST_CASE("checkpoint header layout is little-endian") {
  Tensor<double> t("ab", MatrixXd::Constant(1, 1, 1.0), 1);
  const auto bytes = encode_checkpoint({&t});
  // magic(8) version(8) count(8) namelen(8) name(2) rank(8) dim(8) payload(8)
  REQUIRE(bytes.size() == 8 + 8 + 8 + 8 + 2 + 8 + 8 + 8);
  CHECK(std::string(bytes.begin(), bytes.begin() + 8) == "CALMCKPT");
  CHECK(bytes[8] == 1);
  CHECK(bytes[16] == 1);
  CHECK(bytes[24] == 2);
  CHECK(bytes[34] == 1);
  CHECK(bytes[42] == 1);
  // 1.0 = 0x3FF0000000000000
  CHECK(bytes[50 + 7] == 0x3F);
  CHECK(bytes[50 + 6] == 0xF0);
}

TEST_CASE("corrupt checkpoints are rejected") {
  Tensor<double> t("x", MatrixXd::Constant(2, 2, 1.0));
  auto bytes = encode_checkpoint({&t});
  auto truncated = bytes;
  truncated.pop_back();
  CHECK_THROWS_AS(decode_checkpoint(truncated), CheckpointError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad_magic), CheckpointError);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(decode_checkpoint(trailing), CheckpointError);

  Tensor<double> target("x", MatrixXd::Zero(3, 2));
  CHECK_THROWS_AS(assign_checkpoint(decode_checkpoint(bytes), {&target}), CheckpointError);
}
