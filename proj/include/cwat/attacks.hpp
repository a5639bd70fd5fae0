#pragma once

// l-infinity attacks on the detector: FGSM, PGD-k on any loss objective
// (A_cls, A_reg, TOA, OWA, CWA), and the multi-task domain attack (MDA).
// Attack-time losses use every positive anchor plus OHEM negatives; no NMS.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cwat/autodiff.hpp"
#include "cwat/data.hpp"
#include "cwat/detector.hpp"
#include "cwat/error.hpp"
#include "cwat/losses.hpp"
#include "cwat/text.hpp"

namespace cwat {

inline constexpr double kPixelMax = 255.0;

/// Perturbation of one image (or one shared across a batch), l-infinity.
struct Perturbation {
  std::vector<double> delta;
  double epsilon = 0.0;
};

/// Clamps delta to [-eps, eps] and then so that image + delta stays in
/// [0, 255]. Idempotent.
inline std::vector<double> project_linf(std::vector<double> delta, double epsilon, const ImageTensor& image) {
  if (delta.size() != image.pixels.size()) fail(ErrorCategory::shape, "perturbation does not match image size");
  for (std::size_t i = 0; i < delta.size(); ++i) {
    const double lo = std::max(-epsilon, -image.pixels[i]);
    const double hi = std::min(epsilon, kPixelMax - image.pixels[i]);
    delta[i] = std::clamp(delta[i], lo, hi);
  }
  return delta;
}

inline ImageTensor apply_perturbation(const ImageTensor& image, const std::vector<double>& delta) {
  ImageTensor out = image;
  for (std::size_t i = 0; i < delta.size(); ++i) out.pixels[i] += delta[i];
  return out;
}

inline double sign(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

enum class AttackKind { pgd, mda };

struct AttackSpec {
  Objective objective = Objective::total;
  AttackKind kind = AttackKind::pgd;
  int steps = 10;
  double epsilon = 8.0;
  /// 0 selects the default: epsilon for one step, epsilon / 4 otherwise.
  double step_size = 0.0;
  ClipThresholds thresholds = ClipThresholds::uniform(6.0);
  bool random_start = false;
  std::uint64_t seed = 0;
  double ohem_ratio = 3.0;
  LossOptions loss_options;

  double effective_step() const {
    if (step_size > 0) return step_size;
    return steps == 1 ? epsilon : epsilon / 4.0;
  }

  void validate() const {
    if (steps < 1) fail(ErrorCategory::config, "attack steps must be >= 1");
    if (!(epsilon >= 0) || !std::isfinite(epsilon)) fail(ErrorCategory::config, "attack epsilon must be >= 0");
    if (step_size < 0) fail(ErrorCategory::config, "attack step size must be positive");
    if (steps == 1 && effective_step() > epsilon) fail(ErrorCategory::config, "one-step attacks need step_size <= epsilon");
    if (!(ohem_ratio > 0)) fail(ErrorCategory::config, "OHEM ratio must be positive");
  }

  std::string tag() const {
    std::string t = kind == AttackKind::mda ? "mda" : (steps == 1 ? "fgsm" : "pgd" + std::to_string(steps));
    if (kind == AttackKind::pgd) t += "_" + std::string(objective_name(objective));
    return t + "_eps" + text::format_double(epsilon);
  }
};

/// A forward pass on one image together with its OHEM-pruned breakdown.
struct ScoredPass {
  ForwardPass pass;
  LossBreakdown selected;
};

inline ScoredPass score_image(const DetectorConfig& config, const DetectorParams& params, const AnchorGrid& grid,
                              const MatchResult& match, const Annotation& truth, const ImageTensor& image,
                              double ohem_ratio) {
  ScoredPass s{run_forward(config, params, image), {}};
  s.selected = ohem_select(per_anchor_losses(s.pass.logits(), s.pass.offsets(), match, truth, grid), ohem_ratio);
  return s;
}

/// Objective value on an image with OHEM negatives chosen from that image's
/// own logits; nullopt when the annotation has no matched boxes.
inline std::optional<double> evaluate_objective(const DetectorConfig& config, const DetectorParams& params,
                                                const ImageTensor& image, const Annotation& truth, Objective objective,
                                                const ClipThresholds& t, double ohem_ratio, const LossOptions& opt = {}) {
  const AnchorGrid grid = generate_anchors(config);
  const MatchResult match = match_anchors(grid, truth, config.match_iou);
  if (match.positive.empty()) return std::nullopt;
  const RawOutputs raw = forward_raw(config, params, image);
  const LossBreakdown sel = ohem_select(per_anchor_losses(raw.logits, raw.offsets, match, truth, grid), ohem_ratio);
  return objective_value(sel, objective, t, opt);
}

/// d(objective)/d(pixels) in H x W x C layout, plus the objective value.
struct PixelGradient {
  std::vector<double> grad;
  double value = 0.0;
};

inline PixelGradient objective_pixel_gradient(const DetectorConfig& config, const DetectorParams& params,
                                              const AnchorGrid& grid, const MatchResult& match, const Annotation& truth,
                                              const ImageTensor& image, Objective objective, const ClipThresholds& t,
                                              double ohem_ratio, const LossOptions& opt) {
  ScoredPass s = score_image(config, params, grid, match, truth, image, ohem_ratio);
  ad::Graph& g = s.pass.net.graph;
  const ad::NodeId loss = add_objective(g, s.pass.net.logits, s.pass.net.offsets, s.selected, objective, t, opt);
  s.pass.extend();
  const ad::GradientMap grads = ad::backward(g, loss, s.pass.values, {s.pass.net.image});
  return {input_gradient_to_pixels(grads.at(s.pass.net.image), image), s.pass.values[loss].item()};
}

struct AttackResult {
  ImageTensor image;
  bool skipped = false;  // no matched boxes: the clean image is returned
  std::size_t gradient_passes = 0;
  /// MDA only: overall detection loss of the two candidates.
  std::optional<double> cls_candidate_loss;
  std::optional<double> reg_candidate_loss;
  bool chose_cls = true;
};

/// k steps of delta <- project(delta + step * sign(grad)).
inline AttackResult pgd(const DetectorConfig& config, const DetectorParams& params, const ImageTensor& image,
                        const Annotation& truth, const AttackSpec& spec) {
  spec.validate();
  const AnchorGrid grid = generate_anchors(config);
  const MatchResult match = match_anchors(grid, truth, config.match_iou);
  AttackResult result;
  if (match.positive.empty()) {
    result.image = image;
    result.skipped = true;
    return result;
  }
  std::vector<double> delta(image.pixels.size(), 0.0);
  if (spec.random_start) {
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> u(-spec.epsilon, spec.epsilon);
    for (double& d : delta) d = u(rng);
    delta = project_linf(std::move(delta), spec.epsilon, image);
  }
  const double step = spec.effective_step();
  for (int k = 0; k < spec.steps; ++k) {
    const PixelGradient pg = objective_pixel_gradient(config, params, grid, match, truth, apply_perturbation(image, delta),
                                                      spec.objective, spec.thresholds, spec.ohem_ratio, spec.loss_options);
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] += step * sign(pg.grad[i]);
    delta = project_linf(std::move(delta), spec.epsilon, image);
    ++result.gradient_passes;
  }
  result.image = apply_perturbation(image, delta);
  return result;
}

/// One signed-gradient step of size epsilon from the clean image.
inline AttackResult fgsm(const DetectorConfig& config, const DetectorParams& params, const ImageTensor& image,
                         const Annotation& truth, AttackSpec spec) {
  if (spec.steps != 1) fail(ErrorCategory::config, "fgsm requires steps = 1");
  spec.step_size = spec.epsilon;
  spec.random_start = false;
  return pgd(config, params, image, truth, spec);
}

/// Runs A_cls and A_reg and keeps the candidate with the larger overall
/// detection loss; ties go to the classification candidate.
inline AttackResult mda(const DetectorConfig& config, const DetectorParams& params, const ImageTensor& image,
                        const Annotation& truth, const AttackSpec& spec) {
  AttackSpec cls_spec = spec;
  cls_spec.kind = AttackKind::pgd;
  cls_spec.objective = Objective::cls_only;
  AttackSpec reg_spec = cls_spec;
  reg_spec.objective = Objective::reg_only;
  AttackResult cls = pgd(config, params, image, truth, cls_spec);
  if (cls.skipped) return cls;
  AttackResult reg = pgd(config, params, image, truth, reg_spec);
  const double l_cls = *evaluate_objective(config, params, cls.image, truth, Objective::total, spec.thresholds,
                                           spec.ohem_ratio, spec.loss_options);
  const double l_reg = *evaluate_objective(config, params, reg.image, truth, Objective::total, spec.thresholds,
                                           spec.ohem_ratio, spec.loss_options);
  AttackResult out = l_cls >= l_reg ? std::move(cls) : std::move(reg);
  out.chose_cls = l_cls >= l_reg;
  out.cls_candidate_loss = l_cls;
  out.reg_candidate_loss = l_reg;
  // Accounting counts both candidate scorings as passes.
  out.gradient_passes = 2 * static_cast<std::size_t>(spec.steps) + 2;
  return out;
}

inline AttackResult run_attack(const DetectorConfig& config, const DetectorParams& params, const ImageTensor& image,
                               const Annotation& truth, const AttackSpec& spec) {
  return spec.kind == AttackKind::mda ? mda(config, params, image, truth, spec)
                                      : pgd(config, params, image, truth, spec);
}

}  // namespace cwat
