#pragma once

// Per-anchor task losses and the aggregation rules built from them:
//   total         (1/N_o) * sum(l_cls + l_reg), OHEM negatives in the cls sum
//   task_clipped  min(L_cls, b_cls) + min(L_reg, b_reg) on normalized totals
//   object_wise   (1/N_o) * sum(min(l_cls,i, b_o) + min(l_reg,i, b_o))
//   class_wise    (1/G) * sum_c (1/n_c) * sum_{j in c} (clipped terms), with
//                 the OHEM negatives as one extra pseudo-class when enabled
//
// Every rule exists twice: as a plain function of a LossBreakdown, and as
// graph nodes (add_objective) so gradients reach parameters and pixels.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "cwat/autodiff.hpp"
#include "cwat/box.hpp"
#include "cwat/data.hpp"
#include "cwat/detector.hpp"
#include "cwat/error.hpp"

namespace cwat {

inline constexpr double kUnbounded = std::numeric_limits<double>::infinity();

struct PositiveTerm {
  std::size_t anchor = 0;
  std::size_t object = 0;
  int class_id = 0;
  double l_cls = 0.0;
  double l_reg = 0.0;
  BoxOffsets target{};  // regression target from encode_box
};

struct NegativeTerm {
  std::size_t anchor = 0;
  double l_cls = 0.0;
};

struct LossBreakdown {
  std::vector<PositiveTerm> per_positive;
  std::vector<NegativeTerm> per_negative;

  std::size_t num_positive() const { return per_positive.size(); }

  /// class_id -> n_c over positives.
  std::map<int, std::size_t> class_counts() const {
    std::map<int, std::size_t> out;
    for (const auto& p : per_positive) ++out[p.class_id];
    return out;
  }

  void validate() const {
    auto ok = [](double v) { return std::isfinite(v) && v >= 0.0; };
    for (const auto& p : per_positive)
      if (!ok(p.l_cls) || !ok(p.l_reg)) fail(ErrorCategory::numeric, "positive loss is negative or non-finite");
    for (const auto& n : per_negative)
      if (!ok(n.l_cls)) fail(ErrorCategory::numeric, "negative loss is negative or non-finite");
  }
};

/// beta values; kUnbounded disables a clip.
struct ClipThresholds {
  double beta_cls = kUnbounded;
  double beta_reg = kUnbounded;
  double beta_o = kUnbounded;

  static ClipThresholds uniform(double beta) { return {beta, beta, beta}; }
};

enum class Objective { total, cls_only, reg_only, task_clipped, object_wise, class_wise };

inline std::string_view objective_name(Objective o) {
  switch (o) {
    case Objective::total: return "total";
    case Objective::cls_only: return "cls_only";
    case Objective::reg_only: return "reg_only";
    case Objective::task_clipped: return "task_clipped";
    case Objective::object_wise: return "object_wise";
    case Objective::class_wise: return "class_wise";
  }
  return "?";
}

inline Objective parse_objective(std::string_view s) {
  for (Objective o : {Objective::total, Objective::cls_only, Objective::reg_only, Objective::task_clipped,
                      Objective::object_wise, Objective::class_wise}) {
    if (objective_name(o) == s) return o;
  }
  fail(ErrorCategory::config, "unknown objective '" + std::string(s) + "'");
}

struct LossOptions {
  /// Include OHEM negatives as a pseudo-class in the class-wise rule.
  bool class_wise_negatives = true;
};

namespace detail {

inline double smooth_l1_sum(const double* pred, const BoxOffsets& target) {
  double s = 0.0;
  for (std::size_t k = 0; k < 4; ++k) s += ad::detail::smooth_l1(pred[k] - target[k]);
  return s;
}

inline double softmax_ce(const Tensor& logits, std::size_t row, int label) {
  const std::size_t k = logits.shape[1];
  const double* z = logits.data.data() + row * k;
  const double zmax = *std::max_element(z, z + k);
  double s = 0.0;
  for (std::size_t j = 0; j < k; ++j) s += std::exp(z[j] - zmax);
  return zmax + std::log(s) - z[label];
}

inline void require_positives(const LossBreakdown& b) {
  if (b.per_positive.empty()) fail(ErrorCategory::state, "no matched boxes");
}

inline double clip(double v, double beta) { return std::min(v, beta); }

}  // namespace detail

/// Softmax CE against the matched class (background for negatives) and
/// smooth-L1 against encode_box targets for positives. Keeps every negative.
inline LossBreakdown per_anchor_losses(const Tensor& logits, const Tensor& offsets, const MatchResult& match,
                                       const Annotation& truth, const AnchorGrid& grid) {
  const std::size_t n = grid.size();
  if (logits.shape.size() != 2 || logits.shape[0] != n || offsets.shape != Shape{n, 4} ||
      match.per_anchor_iou.size() != n) {
    fail(ErrorCategory::shape, "anchor count mismatch between outputs (" + to_string(logits.shape) + ", " +
                                   to_string(offsets.shape) + ") and grid of " + std::to_string(n));
  }
  LossBreakdown out;
  for (const auto& [anchor, object] : match.positive) {
    PositiveTerm p;
    p.anchor = anchor;
    p.object = object;
    p.class_id = truth.class_ids.at(object);
    p.target = encode_box(grid.anchors[anchor], to_center(truth.boxes.at(object)));
    p.l_cls = detail::softmax_ce(logits, anchor, p.class_id);
    p.l_reg = detail::smooth_l1_sum(offsets.data.data() + anchor * 4, p.target);
    out.per_positive.push_back(p);
  }
  for (std::size_t a : match.negatives) out.per_negative.push_back({a, detail::softmax_ce(logits, a, 0)});
  return out;
}

/// Keeps all positives and the ceil(ratio * N_o) hardest negatives (ties to
/// the lower anchor index); with no positives keeps the single hardest one.
inline LossBreakdown ohem_select(const LossBreakdown& in, double ratio) {
  if (!(ratio > 0)) fail(ErrorCategory::config, "OHEM ratio must be positive");
  LossBreakdown out;
  out.per_positive = in.per_positive;
  std::vector<NegativeTerm> negs = in.per_negative;
  std::sort(negs.begin(), negs.end(), [](const NegativeTerm& a, const NegativeTerm& b) {
    return a.l_cls != b.l_cls ? a.l_cls > b.l_cls : a.anchor < b.anchor;
  });
  const std::size_t keep =
      in.per_positive.empty() ? 1 : static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(in.num_positive()) - 1e-9));
  negs.resize(std::min(keep, negs.size()));
  std::sort(negs.begin(), negs.end(), [](const NegativeTerm& a, const NegativeTerm& b) { return a.anchor < b.anchor; });
  out.per_negative = std::move(negs);
  return out;
}

/// Normalized classification total (positives plus kept negatives).
inline double task_total_cls(const LossBreakdown& b) {
  detail::require_positives(b);
  double s = 0.0;
  for (const auto& p : b.per_positive) s += p.l_cls;
  for (const auto& n : b.per_negative) s += n.l_cls;
  return s / static_cast<double>(b.num_positive());
}

inline double task_total_reg(const LossBreakdown& b) {
  detail::require_positives(b);
  double s = 0.0;
  for (const auto& p : b.per_positive) s += p.l_reg;
  return s / static_cast<double>(b.num_positive());
}

inline double loss_total(const LossBreakdown& b) { return task_total_cls(b) + task_total_reg(b); }

inline double loss_task_clipped(const LossBreakdown& b, const ClipThresholds& t) {
  return detail::clip(task_total_cls(b), t.beta_cls) + detail::clip(task_total_reg(b), t.beta_reg);
}

inline double loss_object_clipped(const LossBreakdown& b, const ClipThresholds& t) {
  detail::require_positives(b);
  // Same summation order as loss_total so that inactive clipping reproduces
  // it bit for bit (and rounding can never push the clipped value above it).
  double cls = 0.0, reg = 0.0;
  for (const auto& p : b.per_positive) cls += detail::clip(p.l_cls, t.beta_o);
  for (const auto& n : b.per_negative) cls += detail::clip(n.l_cls, t.beta_o);
  for (const auto& p : b.per_positive) reg += detail::clip(p.l_reg, t.beta_o);
  const double n = static_cast<double>(b.num_positive());
  return cls / n + reg / n;
}

/// Number of groups averaged by the class-wise rule.
inline std::size_t class_wise_groups(const LossBreakdown& b, const LossOptions& opt) {
  return b.class_counts().size() + (opt.class_wise_negatives && !b.per_negative.empty() ? 1 : 0);
}

inline double loss_class_wise(const LossBreakdown& b, const ClipThresholds& t, const LossOptions& opt = {}) {
  detail::require_positives(b);
  std::map<int, double> per_class;
  for (const auto& p : b.per_positive)
    per_class[p.class_id] += detail::clip(p.l_cls, t.beta_o) + detail::clip(p.l_reg, t.beta_o);
  const auto counts = b.class_counts();
  double s = 0.0;
  for (const auto& [c, total] : per_class) s += total / static_cast<double>(counts.at(c));
  if (opt.class_wise_negatives && !b.per_negative.empty()) {
    double neg = 0.0;
    for (const auto& n : b.per_negative) neg += detail::clip(n.l_cls, t.beta_o);
    s += neg / static_cast<double>(b.per_negative.size());
  }
  return s / static_cast<double>(class_wise_groups(b, opt));
}

inline double objective_value(const LossBreakdown& b, Objective o, const ClipThresholds& t,
                              const LossOptions& opt = {}) {
  switch (o) {
    case Objective::total: return loss_total(b);
    case Objective::cls_only: return task_total_cls(b);
    case Objective::reg_only: return task_total_reg(b);
    case Objective::task_clipped: return loss_task_clipped(b, t);
    case Objective::object_wise: return loss_object_clipped(b, t);
    case Objective::class_wise: return loss_class_wise(b, t, opt);
  }
  return 0.0;
}

/// Mean classification loss of the kept negatives; the fallback for images
/// without matched boxes.
inline double loss_negatives_only(const LossBreakdown& b) {
  if (b.per_negative.empty()) return 0.0;
  double s = 0.0;
  for (const auto& n : b.per_negative) s += n.l_cls;
  return s / static_cast<double>(b.per_negative.size());
}

// ---------------------------------------------------------------------------
// Graph construction

struct AnchorLossNodes {
  ad::NodeId cls = 0;  // (N,) softmax CE per anchor
  ad::NodeId reg = 0;  // (N,) smooth-L1 summed over the 4 offsets
  std::size_t anchors = 0;
};

inline AnchorLossNodes add_anchor_losses(ad::Graph& g, ad::NodeId logits, ad::NodeId offsets,
                                         const LossBreakdown& selected) {
  const std::size_t n = g.shape(logits)[0];
  std::vector<int> labels(n, 0);
  Tensor neg_targets({n, 4});
  for (const auto& p : selected.per_positive) {
    if (p.anchor >= n) fail(ErrorCategory::shape, "positive anchor index out of range");
    labels[p.anchor] = p.class_id;
    for (std::size_t k = 0; k < 4; ++k) neg_targets[p.anchor * 4 + k] = -p.target[k];
  }
  AnchorLossNodes out;
  out.anchors = n;
  out.cls = g.softmax_ce(logits, std::move(labels));
  const ad::NodeId diff = g.add(offsets, g.constant(std::move(neg_targets)));
  const ad::NodeId per_coord = g.smooth_l1(diff);
  const ad::NodeId row_sum = g.matmul(per_coord, g.constant(Tensor({4, 1}, 1.0)));
  out.reg = g.reshape(row_sum, {n});
  return out;
}

namespace detail {

inline ad::NodeId weighted_sum(ad::Graph& g, ad::NodeId x, std::vector<double> weights) {
  const std::size_t n = weights.size();
  return g.sum(g.mul(x, g.constant(Tensor({n}, std::move(weights)))));
}

inline ad::NodeId maybe_clip(ad::Graph& g, ad::NodeId x, double beta) {
  return std::isinf(beta) ? x : g.clip_min_const(x, beta);
}

}  // namespace detail

/// Appends the selected objective as a scalar node. `selected` is normally
/// the OHEM-pruned breakdown computed from the same forward pass.
inline ad::NodeId add_objective(ad::Graph& g, ad::NodeId logits, ad::NodeId offsets, const LossBreakdown& selected,
                                Objective objective, const ClipThresholds& t, const LossOptions& opt = {}) {
  detail::require_positives(selected);
  const AnchorLossNodes l = add_anchor_losses(g, logits, offsets, selected);
  const std::size_t n = l.anchors;
  const double inv_n = 1.0 / static_cast<double>(selected.num_positive());

  std::vector<double> w_cls(n, 0.0), w_reg(n, 0.0);
  if (objective == Objective::class_wise) {
    const auto counts = selected.class_counts();
    const auto groups = static_cast<double>(class_wise_groups(selected, opt));
    for (const auto& p : selected.per_positive) {
      const double w = 1.0 / (groups * static_cast<double>(counts.at(p.class_id)));
      w_cls[p.anchor] = w;
      w_reg[p.anchor] = w;
    }
    if (opt.class_wise_negatives && !selected.per_negative.empty()) {
      const double w = 1.0 / (groups * static_cast<double>(selected.per_negative.size()));
      for (const auto& ng : selected.per_negative) w_cls[ng.anchor] = w;
    }
  } else {
    for (const auto& p : selected.per_positive) w_cls[p.anchor] = w_reg[p.anchor] = inv_n;
    for (const auto& ng : selected.per_negative) w_cls[ng.anchor] = inv_n;
  }

  switch (objective) {
    case Objective::total:
      return g.add(detail::weighted_sum(g, l.cls, w_cls), detail::weighted_sum(g, l.reg, w_reg));
    case Objective::cls_only:
      return detail::weighted_sum(g, l.cls, w_cls);
    case Objective::reg_only:
      return detail::weighted_sum(g, l.reg, w_reg);
    case Objective::task_clipped:
      return g.add(detail::maybe_clip(g, detail::weighted_sum(g, l.cls, w_cls), t.beta_cls),
                   detail::maybe_clip(g, detail::weighted_sum(g, l.reg, w_reg), t.beta_reg));
    case Objective::object_wise:
    case Objective::class_wise:
      return g.add(detail::weighted_sum(g, detail::maybe_clip(g, l.cls, t.beta_o), w_cls),
                   detail::weighted_sum(g, detail::maybe_clip(g, l.reg, t.beta_o), w_reg));
  }
  fail(ErrorCategory::state, "unhandled objective");
}

/// Mean CE over the kept negatives; used when an image has no matched boxes.
inline ad::NodeId add_negatives_only(ad::Graph& g, ad::NodeId logits, ad::NodeId offsets,
                                     const LossBreakdown& selected) {
  const AnchorLossNodes l = add_anchor_losses(g, logits, offsets, selected);
  std::vector<double> w(l.anchors, 0.0);
  for (const auto& ng : selected.per_negative) w[ng.anchor] = 1.0 / static_cast<double>(selected.per_negative.size());
  return detail::weighted_sum(g, l.cls, std::move(w));
}

}  // namespace cwat
