// SPDX-License-Identifier: Apache-2.0
#include "calm/probe.hpp"

#include "calm/checkpoint.hpp"
#include "calm/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace calm {
namespace {

Tensor<double> uniform_tensor(std::mt19937_64& rng, std::string name, int rows, int cols, int fan_in,
                              int rank = 2) {
  const double bound = 1.0 / std::sqrt(double(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return {std::move(name), std::move(m), rank};
}

MatrixXd stack(const std::vector<ProbeInstance>& data, const std::vector<std::size_t>& idx,
               std::size_t from, std::size_t to) {
  MatrixXd x(static_cast<Eigen::Index>(to - from), data[idx[from]].h.size());
  for (std::size_t i = from; i < to; ++i) x.row(static_cast<Eigen::Index>(i - from)) = data[idx[i]].h;
  return x;
}

Eigen::RowVectorXd concat(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) {
  Eigen::RowVectorXd h(a.size() + b.size());
  h << a, b;
  return h;
}

}  // namespace

ProbeModel::ProbeModel(int input_dim, std::uint64_t init_seed, double dropout)
    : input_dim_(input_dim), dropout_(dropout) {
  if (input_dim < 2 || input_dim % 2 != 0) throw std::invalid_argument("probe: input width must be even and >= 2");
  if (dropout < 0 || dropout >= 1) throw std::invalid_argument("probe: dropout must lie in [0, 1)");
  std::mt19937_64 rng(init_seed);
  const int hidden = input_dim / 2;
  w1_ = uniform_tensor(rng, "probe.w1", input_dim, hidden, input_dim);
  b1_ = uniform_tensor(rng, "probe.b1", 1, hidden, input_dim, 1);
  w2_ = uniform_tensor(rng, "probe.w2", hidden, hidden, hidden);
  b2_ = uniform_tensor(rng, "probe.b2", 1, hidden, hidden, 1);
  w3_ = uniform_tensor(rng, "probe.w3", hidden, 1, hidden);
  b3_ = uniform_tensor(rng, "probe.b3", 1, 1, hidden, 1);
}

Var<double> ProbeModel::forward(Graph<double>& g, Var<double> x, bool trainable, std::mt19937_64* rng) {
  if (x.cols() != input_dim_) {
    throw ShapeError("probe: expected input width " + std::to_string(input_dim_) + ", got " +
                     std::to_string(x.cols()));
  }
  auto h = relu(add_row(matmul(x, g.parameter(w1_, trainable)), g.parameter(b1_, trainable)));
  if (rng) h = dropout(h, dropout_, *rng);
  h = relu(add_row(matmul(h, g.parameter(w2_, trainable)), g.parameter(b2_, trainable)));
  if (rng) h = dropout(h, dropout_, *rng);
  return add_row(matmul(h, g.parameter(w3_, trainable)), g.parameter(b3_, trainable));
}

Eigen::VectorXd ProbeModel::logits(const MatrixXd& x) const {
  Graph<double> g;
  auto self = const_cast<ProbeModel*>(this);
  return self->forward(g, g.constant(x), false, nullptr).value().col(0);
}

double ProbeModel::logit(const Eigen::RowVectorXd& h) const { return logits(MatrixXd(h))(0); }

Eigen::RowVectorXd ProbeModel::input_gradient(const Eigen::RowVectorXd& h, double label) const {
  Graph<double> g;
  auto x = g.variable(MatrixXd(h));
  auto self = const_cast<ProbeModel*>(this);
  g.backward(bce_with_logits(self->forward(g, x, false, nullptr), label));
  return g.grad(x).row(0);
}

std::vector<Tensor<double>*> ProbeModel::parameters() { return {&w1_, &b1_, &w2_, &b2_, &w3_, &b3_}; }

std::vector<const Tensor<double>*> ProbeModel::parameters() const {
  return {&w1_, &b1_, &w2_, &b2_, &w3_, &b3_};
}

void ProbeModel::save(const std::filesystem::path& path) const { save_checkpoint(path, parameters()); }

void ProbeModel::load(const std::filesystem::path& path) {
  assign_checkpoint(load_checkpoint(path), parameters());
}

// ---------------------------------------------------------------------------

Eigen::RowVectorXd probe_input(const MlmModel& model, const ClozeInstance& inst, int layer) {
  const Eigen::RowVectorXd h_mask = model.encode_to_layer(inst.prompt, layer).row(inst.mask_index);
  const Eigen::RowVectorXd h_obj = model.encode_to_layer(inst.filled(inst.answer), layer).row(inst.mask_index);
  return concat(h_mask, h_obj);
}

std::vector<ProbeInstance> build_probe_dataset(const MlmModel& model,
                                               const std::vector<ClozeInstance>& split,
                                               const GeneratorConfig& gen, int concept_id, int layer,
                                               std::uint64_t seed) {
  const auto vocab = Vocabulary::layout(gen);
  if (concept_id < 0 || concept_id > gen.relations) {
    throw std::out_of_range("build_probe_dataset: unknown concept " + std::to_string(concept_id));
  }
  std::mt19937_64 rng(seed);
  std::vector<ProbeInstance> out;

  if (concept_id < gen.relations) {
    std::vector<const ClozeInstance*> prompts;
    for (const auto& inst : split) {
      if (inst.task == concept_id) prompts.push_back(&inst);
    }
    if (prompts.empty()) {
      throw std::invalid_argument("build_probe_dataset: no prompts for task " + std::to_string(concept_id));
    }
    const bool has_alternative = std::any_of(prompts.begin(), prompts.end(), [&](const ClozeInstance* p) {
      return p->answer != prompts.front()->answer;
    });
    if (!has_alternative) {
      throw std::invalid_argument("build_probe_dataset: task " + std::to_string(concept_id) +
                                  " has a single object, so no negative can be drawn");
    }
    std::uniform_int_distribution<std::size_t> pick(0, prompts.size() - 1);
    for (const auto* p : prompts) {
      int wrong;
      do {
        wrong = prompts[pick(rng)]->answer;
      } while (wrong == p->answer);
      const Eigen::RowVectorXd h_mask = model.encode_to_layer(p->prompt, layer).row(p->mask_index);
      const Eigen::RowVectorXd h_pos = model.encode_to_layer(p->filled(p->answer), layer).row(p->mask_index);
      const Eigen::RowVectorXd h_neg = model.encode_to_layer(p->filled(wrong), layer).row(p->mask_index);
      out.push_back({concat(h_mask, h_pos), 1.0, p->task, p->id});
      out.push_back({concat(h_mask, h_neg), 0.0, p->task, p->id});
    }
    return out;
  }

  if (split.empty()) throw std::invalid_argument("build_probe_dataset: empty split");
  std::uniform_int_distribution<int> other(0, vocab.distractor_count() - 2);
  for (const auto& p : split) {
    const int paired = vocab.paired_distractor(p.answer);
    int unpaired = vocab.distractor_base + other(rng);
    if (unpaired >= paired) ++unpaired;
    for (const auto& [token, label] : {std::pair{paired, 1.0}, std::pair{unpaired, 0.0}}) {
      ClozeInstance edited = p;
      edited.prompt = p.with_distractor(token);
      const Eigen::RowVectorXd h_mask = model.encode_to_layer(edited.prompt, layer).row(p.mask_index);
      const Eigen::RowVectorXd h_obj = model.encode_to_layer(edited.filled(p.answer), layer).row(p.mask_index);
      out.push_back({concat(h_mask, h_obj), label, p.task, p.id});
    }
  }
  return out;
}

ProbeTrainResult train_probe(const std::vector<ProbeInstance>& train, const std::vector<ProbeInstance>& val,
                             const ProbeTrainConfig& cfg) {
  if (train.empty() || val.empty()) throw std::invalid_argument("train_probe: datasets must be nonempty");
  const auto width = train.front().h.size();
  bool pos = false, neg = false;
  for (const auto& d : train) {
    if (d.h.size() != width) throw ShapeError("train_probe: inconsistent input widths");
    (d.label == 1.0 ? pos : neg) = true;
  }
  if (!pos || !neg) throw std::invalid_argument("train_probe: degenerate single-class training set");
  if (cfg.epochs < 1 || cfg.batch_size < 1) throw std::invalid_argument("train_probe: epochs and batch_size must be >= 1");

  std::mt19937_64 rng(cfg.seed);
  ProbeModel probe(static_cast<int>(width), rng(), cfg.dropout);
  AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;
  Adam<double> opt(probe.parameters(), adam_cfg);

  ProbeTrainResult result{probe, 0, -1.0, {}};
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t from = 0; from < order.size(); from += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t to = std::min(order.size(), from + static_cast<std::size_t>(cfg.batch_size));
      std::vector<double> labels;
      for (std::size_t i = from; i < to; ++i) labels.push_back(train[order[i]].label);
      opt.zero_grad();
      Graph<double> g;
      auto x = g.constant(stack(train, order, from, to));
      g.backward(bce_with_logits<double>(probe.forward(g, x, true, &rng), labels));
      opt.step();
    }
    const double acc = probe_accuracy(probe, val);
    result.val_accuracy.push_back(acc);
    if (acc > result.best_val_accuracy) {
      result.best_val_accuracy = acc;
      result.best_epoch = epoch;
      result.probe = probe;
    }
  }
  return result;
}

double probe_accuracy(const ProbeModel& probe, const std::vector<ProbeInstance>& data) {
  if (data.empty()) throw std::invalid_argument("probe_accuracy: empty dataset");
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto z = probe.logits(stack(data, idx, 0, data.size()));
  int correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    correct += ((z(static_cast<Eigen::Index>(i)) > 0) ? 1.0 : 0.0) == data[i].label;
  }
  return double(correct) / double(data.size());
}

}  // namespace calm
