// SPDX-License-Identifier: Apache-2.0
//
// A small post-norm transformer encoder trained as a masked language model.
//
// Besides plain prediction the model exposes the two hooks interventions need:
// encode_to_layer() returns the hidden states after layer l, and
// resume_from_layer() continues the forward pass from (possibly edited) layer-l
// states through layers l+1..L and the LM head. Layer 0 is the embedding sum.

#pragma once

#include "calm/autodiff.hpp"
#include "calm/optim.hpp"
#include "calm/synth_task.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

namespace calm {

struct MlmConfig {
  int vocab_size = 128;
  int d_model = 64;
  int heads = 4;
  int layers = 4;
  int d_ff = 128;
  int max_len = 16;
  bool head_transform = true;  // dense -> GELU -> LayerNorm before the vocabulary projection

  void validate() const;
};

struct MlmTrainConfig {
  int steps = 1500;
  int batch_size = 16;
  double lr = 1e-3;
  std::uint64_t seed = 1;
  int log_every = 0;  // 0 disables the progress callback
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Top-k token ids in descending logit order, ties broken by lower id.
struct PredictionSet {
  std::vector<int> tokens;
  int k() const { return static_cast<int>(tokens.size()); }
  bool operator==(const PredictionSet&) const = default;
};

PredictionSet top_k(const Eigen::Ref<const Eigen::RowVectorXd>& logits, int k);

class MlmModel {
 public:
  MlmModel(const MlmConfig& cfg, std::uint64_t init_seed);

  const MlmConfig& config() const { return cfg_; }
  int layers() const { return cfg_.layers; }
  int d_model() const { return cfg_.d_model; }

  std::vector<Tensor<double>*> parameters();
  std::vector<const Tensor<double>*> parameters() const;

  /// Hidden states after `layer` (0 = embeddings), one row per position.
  MatrixXd encode_to_layer(std::span<const int> tokens, int layer) const;

  /// Runs layers layer+1..L over `states` and returns LM logits for every
  /// position (rows) over the vocabulary (columns).
  MatrixXd resume_logits(const MatrixXd& states, int layer) const;

  /// Top-k of the LM head at `mask_index` after resuming from `layer`.
  PredictionSet resume_from_layer(const MatrixXd& states, int layer, int mask_index, int k) const;

  MatrixXd forward_logits(std::span<const int> tokens) const;
  PredictionSet predict_topk(std::span<const int> tokens, int mask_index, int k) const;

  /// Graph-level building blocks, shared by training and inference.
  struct Bound;
  Bound bind(Graph<double>& g, bool trainable);
  Bound bind(Graph<double>& g) const;
  static Var<double> embed(const Bound& b, std::span<const int> tokens, std::span<const Segment> segments);
  static Var<double> run_layers(const Bound& b, Var<double> x, int from_layer, int to_layer,
                                std::span<const Segment> segments);
  static Var<double> head(const Bound& b, Var<double> states);

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  struct LayerParams {
    Tensor<double> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<double> ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b;
  };
  MlmConfig cfg_;
  Tensor<double> tok_emb_, pos_emb_, head_w_, head_b_;
  Tensor<double> head_dense_w_, head_dense_b_, head_ln_g_, head_ln_b_;
  std::vector<LayerParams> layers_;

  void check_layer(int layer) const;
};

struct MlmModel::Bound {
  struct Layer {
    Var<double> wq, bq, wk, bk, wv, bv, wo, bo;
    Var<double> ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b;
  };
  Graph<double>* graph = nullptr;
  int heads = 1;
  Var<double> tok_emb, pos_emb, head_w, head_b;
  bool head_transform = false;
  Var<double> head_dense_w, head_dense_b, head_ln_g, head_ln_b;
  std::vector<Layer> layers;
};

struct MlmTrainResult {
  std::vector<double> losses;  // mean batch loss per step
};

/// Masked-position cross-entropy training with Adam. Each instance contributes
/// its single MASK position. Throws TrainingError naming the step if the loss
/// or gradients become non-finite.
MlmTrainResult train_mlm(MlmModel& model, const std::vector<ClozeInstance>& corpus,
                         const MlmTrainConfig& cfg,
                         const std::function<void(int step, double loss)>& progress = {});

/// Fraction of instances whose gold answer is the top-1 prediction.
double top1_accuracy(const MlmModel& model, const std::vector<ClozeInstance>& instances);

}  // namespace calm
