// SPDX-License-Identifier: Apache-2.0
#include "calm/mlm.hpp"

#include "calm/checkpoint.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

namespace calm {
namespace {

MatrixXd normal_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
  std::normal_distribution<double> n(0.0, stddev);
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

Tensor<double> weight(std::mt19937_64& rng, std::string name, int fan_in, int fan_out) {
  return {std::move(name), normal_matrix(rng, fan_in, fan_out, 1.0 / std::sqrt(double(fan_in)))};
}

Tensor<double> bias(std::string name, int n, double value = 0.0) {
  return {std::move(name), MatrixXd::Constant(1, n, value), 1};
}

std::vector<Segment> single_segment(std::size_t n) { return {Segment{0, static_cast<Eigen::Index>(n)}}; }

}  // namespace

void MlmConfig::validate() const {
  if (vocab_size < 2) throw std::invalid_argument("mlm: vocab_size must be >= 2");
  if (d_model < 2 || heads < 1 || d_model % heads != 0) {
    throw std::invalid_argument("mlm: d_model must be a positive multiple of heads");
  }
  if (layers < 1) throw std::invalid_argument("mlm: layers must be >= 1");
  if (d_ff < 1) throw std::invalid_argument("mlm: d_ff must be >= 1");
  if (max_len < 1) throw std::invalid_argument("mlm: max_len must be >= 1");
}

PredictionSet top_k(const Eigen::Ref<const Eigen::RowVectorXd>& logits, int k) {
  const int n = static_cast<int>(logits.size());
  if (k < 1 || k > n) throw std::out_of_range("top_k: k must lie in [1, vocab]");
  std::vector<int> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  std::partial_sort(ids.begin(), ids.begin() + k, ids.end(), [&logits](int a, int b) {
    if (logits(a) != logits(b)) return logits(a) > logits(b);
    return a < b;
  });
  ids.resize(static_cast<std::size_t>(k));
  return PredictionSet{std::move(ids)};
}

MlmModel::MlmModel(const MlmConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(init_seed);
  const int d = cfg_.d_model;
  tok_emb_ = Tensor<double>("embed.tokens", normal_matrix(rng, cfg_.vocab_size, d, 1.0));
  pos_emb_ = Tensor<double>("embed.positions", normal_matrix(rng, cfg_.max_len, d, 0.3));
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerParams lp{
        weight(rng, p + "attn.wq", d, d),        bias(p + "attn.bq", d),
        weight(rng, p + "attn.wk", d, d),        bias(p + "attn.bk", d),
        weight(rng, p + "attn.wv", d, d),        bias(p + "attn.bv", d),
        weight(rng, p + "attn.wo", d, d),        bias(p + "attn.bo", d),
        bias(p + "ln1.gain", d, 1.0),            bias(p + "ln1.bias", d),
        weight(rng, p + "ffn.w1", d, cfg_.d_ff), bias(p + "ffn.b1", cfg_.d_ff),
        weight(rng, p + "ffn.w2", cfg_.d_ff, d), bias(p + "ffn.b2", d),
        bias(p + "ln2.gain", d, 1.0),            bias(p + "ln2.bias", d),
    };
    layers_.push_back(std::move(lp));
  }
  if (cfg_.head_transform) {
    head_dense_w_ = weight(rng, "head.dense.w", d, d);
    head_dense_b_ = bias("head.dense.b", d);
    head_ln_g_ = bias("head.ln.gain", d, 1.0);
    head_ln_b_ = bias("head.ln.bias", d);
  }
  head_w_ = weight(rng, "head.w", d, cfg_.vocab_size);
  head_b_ = bias("head.b", cfg_.vocab_size);
}

std::vector<Tensor<double>*> MlmModel::parameters() {
  std::vector<Tensor<double>*> out = {&tok_emb_, &pos_emb_};
  for (auto& l : layers_) {
    for (auto* t : {&l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo, &l.ln1_g, &l.ln1_b,
                    &l.w1, &l.b1, &l.w2, &l.b2, &l.ln2_g, &l.ln2_b}) {
      out.push_back(t);
    }
  }
  if (cfg_.head_transform) {
    for (auto* t : {&head_dense_w_, &head_dense_b_, &head_ln_g_, &head_ln_b_}) out.push_back(t);
  }
  out.push_back(&head_w_);
  out.push_back(&head_b_);
  return out;
}

std::vector<const Tensor<double>*> MlmModel::parameters() const {
  auto ps = const_cast<MlmModel*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

MlmModel::Bound MlmModel::bind(Graph<double>& g, bool trainable) {
  Bound b;
  b.graph = &g;
  b.heads = cfg_.heads;
  auto p = [&](Tensor<double>& t) { return g.parameter(t, trainable); };
  b.tok_emb = p(tok_emb_);
  b.pos_emb = p(pos_emb_);
  for (auto& l : layers_) {
    b.layers.push_back({p(l.wq), p(l.bq), p(l.wk), p(l.bk), p(l.wv), p(l.bv), p(l.wo), p(l.bo),
                        p(l.ln1_g), p(l.ln1_b), p(l.w1), p(l.b1), p(l.w2), p(l.b2), p(l.ln2_g),
                        p(l.ln2_b)});
  }
  b.head_transform = cfg_.head_transform;
  if (cfg_.head_transform) {
    b.head_dense_w = p(head_dense_w_);
    b.head_dense_b = p(head_dense_b_);
    b.head_ln_g = p(head_ln_g_);
    b.head_ln_b = p(head_ln_b_);
  }
  b.head_w = p(head_w_);
  b.head_b = p(head_b_);
  return b;
}

MlmModel::Bound MlmModel::bind(Graph<double>& g) const {
  return const_cast<MlmModel*>(this)->bind(g, false);
}

Var<double> MlmModel::embed(const Bound& b, std::span<const int> tokens, std::span<const Segment> segments) {
  std::vector<int> positions;
  positions.reserve(tokens.size());
  for (const auto& s : segments) {
    if (s.length > b.pos_emb.rows()) {
      throw std::out_of_range("mlm: sequence of length " + std::to_string(s.length) + " exceeds max_len " +
                              std::to_string(b.pos_emb.rows()));
    }
    for (Eigen::Index i = 0; i < s.length; ++i) positions.push_back(static_cast<int>(i));
  }
  if (positions.size() != tokens.size()) throw ShapeError("mlm: segments do not cover the tokens");
  return gather_rows<double>(b.tok_emb, tokens) + gather_rows<double>(b.pos_emb, positions);
}

Var<double> MlmModel::run_layers(const Bound& b, Var<double> x, int from_layer, int to_layer,
                                 std::span<const Segment> segments) {
  for (int l = from_layer; l < to_layer; ++l) {
    const auto& p = b.layers[static_cast<std::size_t>(l)];
    auto q = add_row(matmul(x, p.wq), p.bq);
    auto k = add_row(matmul(x, p.wk), p.bk);
    auto v = add_row(matmul(x, p.wv), p.bv);
    auto attn = add_row(matmul(multi_head_attention(q, k, v, b.heads, segments), p.wo), p.bo);
    auto a = layer_norm_rows(x + attn, p.ln1_g, p.ln1_b);
    auto ff = add_row(matmul(gelu(add_row(matmul(a, p.w1), p.b1)), p.w2), p.b2);
    x = layer_norm_rows(a + ff, p.ln2_g, p.ln2_b);
  }
  return x;
}

Var<double> MlmModel::head(const Bound& b, Var<double> states) {
  if (b.head_transform) {
    states = layer_norm_rows(gelu(add_row(matmul(states, b.head_dense_w), b.head_dense_b)), b.head_ln_g, b.head_ln_b);
  }
  return add_row(matmul(states, b.head_w), b.head_b);
}

void MlmModel::check_layer(int layer) const {
  if (layer < 0 || layer > cfg_.layers) {
    throw std::out_of_range("mlm: layer " + std::to_string(layer) + " outside [0, " +
                            std::to_string(cfg_.layers) + "]");
  }
}

MatrixXd MlmModel::encode_to_layer(std::span<const int> tokens, int layer) const {
  check_layer(layer);
  Graph<double> g;
  auto b = bind(g);
  const auto segs = single_segment(tokens.size());
  return run_layers(b, embed(b, tokens, segs), 0, layer, segs).value();
}

MatrixXd MlmModel::resume_logits(const MatrixXd& states, int layer) const {
  check_layer(layer);
  if (states.cols() != cfg_.d_model || states.rows() < 1 || states.rows() > cfg_.max_len) {
    throw ShapeError("mlm: resumed states must be (sequence length) x " + std::to_string(cfg_.d_model));
  }
  Graph<double> g;
  auto b = bind(g);
  const auto segs = single_segment(static_cast<std::size_t>(states.rows()));
  return head(b, run_layers(b, g.constant(states), layer, cfg_.layers, segs)).value();
}

PredictionSet MlmModel::resume_from_layer(const MatrixXd& states, int layer, int mask_index, int k) const {
  check_layer(layer);
  if (states.cols() != cfg_.d_model || states.rows() < 1 || states.rows() > cfg_.max_len) {
    throw ShapeError("mlm: resumed states must be (sequence length) x " + std::to_string(cfg_.d_model));
  }
  if (mask_index < 0 || mask_index >= states.rows()) throw std::out_of_range("mlm: mask_index out of range");
  Graph<double> g;
  auto b = bind(g);
  const auto segs = single_segment(static_cast<std::size_t>(states.rows()));
  // Only the MASK row reaches the head.
  auto h = run_layers(b, g.constant(states), layer, cfg_.layers, segs);
  return top_k(head(b, slice_rows(h, mask_index, 1)).value().row(0), k);
}

MatrixXd MlmModel::forward_logits(std::span<const int> tokens) const {
  Graph<double> g;
  auto b = bind(g);
  const auto segs = single_segment(tokens.size());
  return head(b, run_layers(b, embed(b, tokens, segs), 0, cfg_.layers, segs)).value();
}

PredictionSet MlmModel::predict_topk(std::span<const int> tokens, int mask_index, int k) const {
  return resume_from_layer(encode_to_layer(tokens, cfg_.layers), cfg_.layers, mask_index, k);
}

void MlmModel::save(const std::filesystem::path& path) const { save_checkpoint(path, parameters()); }

void MlmModel::load(const std::filesystem::path& path) {
  assign_checkpoint(load_checkpoint(path), parameters());
}

// ---------------------------------------------------------------------------

MlmTrainResult train_mlm(MlmModel& model, const std::vector<ClozeInstance>& corpus,
                         const MlmTrainConfig& cfg, const std::function<void(int, double)>& progress) {
  if (corpus.empty()) throw std::invalid_argument("train_mlm: empty corpus");
  if (cfg.steps < 0 || cfg.batch_size < 1 || !(cfg.lr > 0)) {
    throw std::invalid_argument("train_mlm: steps >= 0, batch_size >= 1 and lr > 0 required");
  }
  for (const auto& inst : corpus) {
    for (int t : inst.prompt) {
      if (t < 0 || t >= model.config().vocab_size) throw std::invalid_argument("train_mlm: token outside vocabulary");
    }
  }
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;
  Adam<double> opt(model.parameters(), adam_cfg);
  MlmTrainResult result;

  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<int> tokens;
    std::vector<Segment> segs;
    std::vector<Eigen::Index> mask_rows;
    std::vector<int> targets;
    for (int i = 0; i < cfg.batch_size; ++i) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const auto& inst = corpus[order[cursor++]];
      const auto start = static_cast<Eigen::Index>(tokens.size());
      segs.push_back({start, static_cast<Eigen::Index>(inst.prompt.size())});
      mask_rows.push_back(start + inst.mask_index);
      targets.push_back(inst.answer);
      tokens.insert(tokens.end(), inst.prompt.begin(), inst.prompt.end());
    }

    opt.zero_grad();
    double loss_value = 0;
    try {
      Graph<double> g;
      auto b = model.bind(g, true);
      auto h = MlmModel::run_layers(b, MlmModel::embed(b, tokens, segs), 0, model.layers(), segs);
      std::vector<Var<double>> rows;
      rows.reserve(mask_rows.size());
      for (auto r : mask_rows) rows.push_back(slice_rows(h, r, 1));
      auto logits = MlmModel::head(b, concat_rows<double>(rows));
      auto loss = cross_entropy_rows<double>(logits, targets);
      loss_value = loss.value()(0, 0);
      g.backward(loss);
    } catch (const NumericError& e) {
      throw TrainingError("train_mlm: diverged at step " + std::to_string(step) + ": " + e.what());
    }
    opt.step();
    result.losses.push_back(loss_value);
    if (progress && cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) progress(step + 1, loss_value);
  }
  return result;
}

double top1_accuracy(const MlmModel& model, const std::vector<ClozeInstance>& instances) {
  if (instances.empty()) throw std::invalid_argument("top1_accuracy: no instances");
  int hits = 0;
  for (const auto& inst : instances) {
    hits += model.predict_topk(inst.prompt, inst.mask_index, 1).tokens[0] == inst.answer;
  }
  return double(hits) / double(instances.size());
}

}  // namespace calm
