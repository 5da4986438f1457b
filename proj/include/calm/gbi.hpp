// SPDX-License-Identifier: Apache-2.0
//
// Gradient-based interventions on hidden states.
//
// An attack perturbs a probe input h = (h_MASK; h_obj) inside the L-infinity
// ball of radius epsilon so as to raise the probe's loss for "concept present".
// The first d coordinates of the result replace the MASK-position state at the
// probed layer, and the language model resumes from there.
//
// Coordinates are moved with rounding toward the original value, so the bound
// |h' - h| <= epsilon holds exactly in real arithmetic, not just up to an ulp.

#pragma once

#include "calm/mlm.hpp"
#include "calm/probe.hpp"

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace calm {

enum class AttackMethod { kNone, kFgsm, kPgd, kRandom };

std::string to_string(AttackMethod m);
AttackMethod attack_method_from_string(const std::string& s);

inline constexpr double kEpsilonGrid[] = {0.01, 0.03, 0.1, 0.3};
inline constexpr double kAdmissibilityGate = 0.90;

struct InterventionSpec {
  AttackMethod method = AttackMethod::kFgsm;
  double epsilon = 0.1;
  std::optional<double> alpha;  // PGD step; defaults to epsilon / 10
  int steps = 40;               // PGD iterations
  std::optional<int> layer;     // defaults to the model's last layer
  double attack_label = 1.0;    // label whose loss is ascended
  std::uint64_t seed = 0;       // RANDOM only

  double pgd_alpha() const { return alpha.value_or(epsilon / 10.0); }
  int resolved_layer(const MlmModel& m) const { return layer.value_or(m.layers()); }
  void validate() const;
};

class InadmissibleProbe : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A trained probe together with the validation accuracy that admits it.
struct AdmittedProbe {
  const ProbeModel* probe = nullptr;
  double val_accuracy = 0;
  int concept_id = 0;

  bool admissible() const { return val_accuracy >= kAdmissibilityGate; }
};

/// The double nearest to `from + delta` whose exact distance from `from` does
/// not exceed |delta|.
double step_toward_bound(double from, double delta);

/// Exact test of |a - b| <= bound for doubles (no rounding in the comparison).
bool within_bound(double a, double b, double bound);

Eigen::RowVectorXd fgsm(const Eigen::RowVectorXd& h, double label, const ProbeModel& probe, double epsilon);

Eigen::RowVectorXd pgd(const Eigen::RowVectorXd& h, double label, const ProbeModel& probe, double epsilon,
                       double alpha, int steps);

/// Each coordinate moved by +epsilon or -epsilon with equal probability.
Eigen::RowVectorXd random_perturb(const Eigen::RowVectorXd& h, double epsilon, std::uint64_t seed);

/// Dispatches on spec.method; kNone returns h unchanged.
Eigen::RowVectorXd attack(const Eigen::RowVectorXd& h, const ProbeModel& probe, const InterventionSpec& spec);

struct InterventionResult {
  PredictionSet original;
  PredictionSet intervened;
  double logit_before = 0;
  double logit_after = 0;
  Eigen::RowVectorXd h_mask;
  Eigen::RowVectorXd h_mask_perturbed;
};

/// Precomputed encodings of one evaluation prompt at the probed layer, so
/// several probes can be applied without re-encoding.
struct EncodedPrompt {
  MatrixXd states;                 // layer-l states of the masked prompt
  Eigen::RowVectorXd probe_input;  // (h_MASK; h_+) with the gold answer
  PredictionSet original;          // unintervened top-k
  int mask_index = 0;
  int layer = 0;
};

EncodedPrompt encode_prompt(const MlmModel& model, const ClozeInstance& inst, int layer, int k);

/// encode -> attack probe toward "absent" -> splice first d dims at the MASK
/// position -> resume -> top-k.
InterventionResult intervene(const MlmModel& model, const EncodedPrompt& prompt, const AdmittedProbe& probe,
                             const InterventionSpec& spec, int k);

InterventionResult intervene(const MlmModel& model, const ClozeInstance& inst, const AdmittedProbe& probe,
                             const InterventionSpec& spec, int k);

}  // namespace calm
