// SPDX-License-Identifier: Apache-2.0
//
// Concept probes: a 2-hidden-layer MLP reading the concatenation
// (h_MASK; h_obj) of two hidden states and emitting one relation-presence logit.

#pragma once

#include "calm/autodiff.hpp"
#include "calm/mlm.hpp"
#include "calm/synth_task.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

namespace calm {

struct ProbeInstance {
  Eigen::RowVectorXd h;  // (h_MASK; h_obj), length 2 * d_model
  double label = 0;      // 1 = concept present
  int task = 0;
  std::int64_t source_id = 0;  // originating ClozeInstance
};

struct ProbeTrainConfig {
  int epochs = 32;
  int batch_size = 32;
  double lr = 1e-3;
  double dropout = 0.1;
  std::uint64_t seed = 1;
};

class ProbeModel {
 public:
  ProbeModel(int input_dim, std::uint64_t init_seed, double dropout = 0.1);

  int input_dim() const { return input_dim_; }
  int hidden_dim() const { return input_dim_ / 2; }

  /// Differentiable forward on a batch (rows = instances) -> Nx1 logits.
  /// Dropout is applied only when `rng` is non-null (train mode).
  Var<double> forward(Graph<double>& g, Var<double> x, bool trainable, std::mt19937_64* rng);

  /// Eval-mode logits, one per row.
  Eigen::VectorXd logits(const MatrixXd& x) const;
  double logit(const Eigen::RowVectorXd& h) const;

  /// Gradient of BCE-with-logits(probe(h), label) with respect to h, eval mode.
  Eigen::RowVectorXd input_gradient(const Eigen::RowVectorXd& h, double label) const;

  std::vector<Tensor<double>*> parameters();
  std::vector<const Tensor<double>*> parameters() const;
  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  int input_dim_;
  double dropout_;
  Tensor<double> w1_, b1_, w2_, b2_, w3_, b3_;
};

/// Probe training set for one concept.
///
/// Relation concept j (< relations): every prompt of task j contributes a
/// positive (h_MASK; h_+) with h_+ the answer-position state of the filled
/// prompt, and a negative (h_MASK; h_-) where the prompt is filled with the
/// answer of a random same-task prompt that differs from the gold answer.
///
/// Distractor concept (== relations): every prompt contributes a positive
/// re-rendered with the answer's paired distractor and a negative with a
/// random unpaired distractor; both halves are re-encoded from the edited
/// prompt, and the object half always uses the gold answer.
std::vector<ProbeInstance> build_probe_dataset(const MlmModel& model,
                                               const std::vector<ClozeInstance>& split,
                                               const GeneratorConfig& gen, int concept_id, int layer,
                                               std::uint64_t seed);

/// Probe input for an evaluation instance: (h_MASK; h_+) with the gold answer.
Eigen::RowVectorXd probe_input(const MlmModel& model, const ClozeInstance& inst, int layer);

struct ProbeTrainResult {
  ProbeModel probe;
  int best_epoch = 0;
  double best_val_accuracy = 0;
  std::vector<double> val_accuracy;  // per epoch
};

/// Trains for cfg.epochs with BCE-with-logits and Adam, keeping the epoch
/// with the highest validation accuracy (earliest on ties).
ProbeTrainResult train_probe(const std::vector<ProbeInstance>& train,
                             const std::vector<ProbeInstance>& val, const ProbeTrainConfig& cfg);

/// Fraction of instances whose thresholded eval-mode logit (> 0 -> 1) equals
/// the label. Throws on an empty dataset.
double probe_accuracy(const ProbeModel& probe, const std::vector<ProbeInstance>& data);

}  // namespace calm
