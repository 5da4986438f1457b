// SPDX-License-Identifier: Apache-2.0
#include "calm/gbi.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace calm {
namespace {

double sign(double x) { return (x > 0) - (x < 0); }

void require_finite(const Eigen::RowVectorXd& g, const char* who) {
  if (!g.allFinite()) throw NumericError(std::string(who) + ": non-finite probe gradient");
}

}  // namespace

std::string to_string(AttackMethod m) {
  switch (m) {
    case AttackMethod::kNone:
      return "NONE";
    case AttackMethod::kFgsm:
      return "FGSM";
    case AttackMethod::kPgd:
      return "PGD";
    case AttackMethod::kRandom:
      return "RANDOM";
  }
  return "?";
}

AttackMethod attack_method_from_string(const std::string& s) {
  if (s == "NONE" || s == "none") return AttackMethod::kNone;
  if (s == "FGSM" || s == "fgsm") return AttackMethod::kFgsm;
  if (s == "PGD" || s == "pgd") return AttackMethod::kPgd;
  if (s == "RANDOM" || s == "random") return AttackMethod::kRandom;
  throw std::invalid_argument("unknown attack method '" + s + "'");
}

void InterventionSpec::validate() const {
  if (!(epsilon >= 0) || !std::isfinite(epsilon)) throw std::invalid_argument("intervention: epsilon must be >= 0");
  if (method == AttackMethod::kPgd) {
    if (!(pgd_alpha() > 0)) throw std::invalid_argument("intervention: PGD alpha must be > 0");
    if (steps < 0) throw std::invalid_argument("intervention: PGD steps must be >= 0");
  }
  if (attack_label != 0.0 && attack_label != 1.0) throw std::invalid_argument("intervention: attack_label must be 0 or 1");
}

bool within_bound(double a, double b, double bound) {
  // Two-sum: s + err == a - b exactly.
  const double s = a - b;
  const double bb = s - a;
  const double err = (a - (s - bb)) + (-b - bb);
  const double as = std::abs(s);
  if (as < bound) return true;
  if (as > bound) return false;
  return err * sign(s) <= 0;
}

double step_toward_bound(double from, double delta) {
  const double bound = std::abs(delta);
  double c = from + delta;
  while (!within_bound(c, from, bound)) c = std::nextafter(c, from);
  return c;
}

Eigen::RowVectorXd fgsm(const Eigen::RowVectorXd& h, double label, const ProbeModel& probe, double epsilon) {
  if (epsilon < 0) throw std::invalid_argument("fgsm: epsilon must be >= 0");
  const auto g = probe.input_gradient(h, label);
  require_finite(g, "fgsm");
  Eigen::RowVectorXd out = h;
  for (Eigen::Index i = 0; i < h.size(); ++i) {
    if (g(i) != 0) out(i) = step_toward_bound(h(i), sign(g(i)) * epsilon);
  }
  return out;
}

Eigen::RowVectorXd pgd(const Eigen::RowVectorXd& h, double label, const ProbeModel& probe, double epsilon,
                       double alpha, int steps) {
  if (epsilon < 0) throw std::invalid_argument("pgd: epsilon must be >= 0");
  if (!(alpha > 0)) throw std::invalid_argument("pgd: alpha must be > 0");
  if (steps < 0) throw std::invalid_argument("pgd: steps must be >= 0");
  Eigen::RowVectorXd lo(h.size()), hi(h.size());
  for (Eigen::Index i = 0; i < h.size(); ++i) {
    lo(i) = step_toward_bound(h(i), -epsilon);
    hi(i) = step_toward_bound(h(i), epsilon);
  }
  Eigen::RowVectorXd x = h;
  for (int t = 0; t < steps; ++t) {
    const auto g = probe.input_gradient(x, label);
    require_finite(g, "pgd");
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      x(i) = std::clamp(x(i) + alpha * sign(g(i)), lo(i), hi(i));
    }
  }
  return x;
}

Eigen::RowVectorXd random_perturb(const Eigen::RowVectorXd& h, double epsilon, std::uint64_t seed) {
  if (epsilon < 0) throw std::invalid_argument("random_perturb: epsilon must be >= 0");
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution up(0.5);
  Eigen::RowVectorXd out = h;
  for (Eigen::Index i = 0; i < h.size(); ++i) out(i) = step_toward_bound(h(i), up(rng) ? epsilon : -epsilon);
  return out;
}

Eigen::RowVectorXd attack(const Eigen::RowVectorXd& h, const ProbeModel& probe, const InterventionSpec& spec) {
  switch (spec.method) {
    case AttackMethod::kNone:
      return h;
    case AttackMethod::kFgsm:
      return fgsm(h, spec.attack_label, probe, spec.epsilon);
    case AttackMethod::kPgd:
      return pgd(h, spec.attack_label, probe, spec.epsilon, spec.pgd_alpha(), spec.steps);
    case AttackMethod::kRandom:
      return random_perturb(h, spec.epsilon, spec.seed);
  }
  throw std::logic_error("attack: unhandled method");
}

EncodedPrompt encode_prompt(const MlmModel& model, const ClozeInstance& inst, int layer, int k) {
  EncodedPrompt p;
  p.layer = layer;
  p.mask_index = inst.mask_index;
  p.states = model.encode_to_layer(inst.prompt, layer);
  const Eigen::RowVectorXd h_obj = model.encode_to_layer(inst.filled(inst.answer), layer).row(inst.mask_index);
  p.probe_input.resize(2 * model.d_model());
  p.probe_input << p.states.row(inst.mask_index), h_obj;
  p.original = model.resume_from_layer(p.states, layer, inst.mask_index, k);
  return p;
}

InterventionResult intervene(const MlmModel& model, const EncodedPrompt& prompt, const AdmittedProbe& probe,
                             const InterventionSpec& spec, int k) {
  spec.validate();
  if (probe.probe == nullptr) throw std::invalid_argument("intervene: no probe");
  if (!probe.admissible()) {
    throw InadmissibleProbe("intervene: probe for concept " + std::to_string(probe.concept_id) +
                            " has validation accuracy " + std::to_string(probe.val_accuracy) +
                            " below the admissibility gate");
  }
  const int d = model.d_model();
  if (probe.probe->input_dim() != 2 * d || prompt.probe_input.size() != 2 * d) {
    throw ShapeError("intervene: probe width must be twice d_model");
  }
  if (prompt.layer != spec.resolved_layer(model)) {
    throw std::invalid_argument("intervene: prompt encoded at a different layer than the spec");
  }

  InterventionResult r;
  r.original = k == prompt.original.k()
                   ? prompt.original
                   : model.resume_from_layer(prompt.states, prompt.layer, prompt.mask_index, k);
  r.logit_before = probe.probe->logit(prompt.probe_input);
  r.h_mask = prompt.probe_input.head(d);
  if (spec.method == AttackMethod::kNone) {
    r.intervened = r.original;
    r.logit_after = r.logit_before;
    r.h_mask_perturbed = r.h_mask;
    return r;
  }
  const Eigen::RowVectorXd perturbed = attack(prompt.probe_input, *probe.probe, spec);
  r.logit_after = probe.probe->logit(perturbed);
  r.h_mask_perturbed = perturbed.head(d);
  MatrixXd spliced = prompt.states;
  spliced.row(prompt.mask_index) = r.h_mask_perturbed;
  r.intervened = model.resume_from_layer(spliced, prompt.layer, prompt.mask_index, k);
  return r;
}

InterventionResult intervene(const MlmModel& model, const ClozeInstance& inst, const AdmittedProbe& probe,
                             const InterventionSpec& spec, int k) {
  return intervene(model, encode_prompt(model, inst, spec.resolved_layer(model), k), probe, spec, k);
}

}  // namespace calm
