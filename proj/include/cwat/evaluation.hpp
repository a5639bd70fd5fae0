#pragma once

// Detection metrics: per-class AP at an IoU threshold, mAP, and robustness
// reports under attack with an evenness statistic for per-class AP drops.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "cwat/attacks.hpp"
#include "cwat/box.hpp"
#include "cwat/data.hpp"
#include "cwat/detector.hpp"
#include "cwat/error.hpp"
#include "cwat/parallel.hpp"
#include "cwat/text.hpp"

namespace cwat {

/// One detection of a single class, tagged with its image index.
struct ScoredBox {
  std::size_t image = 0;
  Box box;
  double score = 0.0;
};

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
};

namespace detail {

inline bool score_order(const ScoredBox& a, const ScoredBox& b) {
  if (a.score != b.score) return a.score > b.score;
  return std::tie(a.image, a.box.xmin, a.box.ymin, a.box.xmax, a.box.ymax) <
         std::tie(b.image, b.box.xmin, b.box.ymin, b.box.xmax, b.box.ymax);
}

}  // namespace detail

/// Greedy matching in descending score order: each detection takes the
/// unmatched truth of its image with the highest IoU, if that IoU >= the
/// threshold. Returns the true-positive flag of each detection in sorted order.
inline std::vector<bool> match_detections(std::vector<ScoredBox>& dets, const std::vector<std::vector<Box>>& truths,
                                          double iou_threshold) {
  std::sort(dets.begin(), dets.end(), detail::score_order);
  std::vector<std::vector<bool>> used(truths.size());
  for (std::size_t i = 0; i < truths.size(); ++i) used[i].assign(truths[i].size(), false);
  std::vector<bool> tp(dets.size(), false);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    if (dets[d].image >= truths.size()) fail(ErrorCategory::shape, "detection refers to an unknown image");
    const auto& gts = truths[dets[d].image];
    double best = -1.0;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (used[dets[d].image][j]) continue;
      const double o = iou(dets[d].box, gts[j]);
      if (o > best) best = o, best_j = j;
    }
    if (best >= iou_threshold) {
      used[dets[d].image][best_j] = true;
      tp[d] = true;
    }
  }
  return tp;
}

/// Precision/recall after each group of equal scores.
inline std::vector<PrPoint> pr_curve(std::vector<ScoredBox> dets, const std::vector<std::vector<Box>>& truths,
                                     double iou_threshold) {
  std::size_t total = 0;
  for (const auto& t : truths) total += t.size();
  const std::vector<bool> tp = match_detections(dets, truths, iou_threshold);
  std::vector<PrPoint> out;
  std::size_t hits = 0;
  for (std::size_t d = 0; d < dets.size(); ++d) {
    hits += tp[d] ? 1 : 0;
    if (d + 1 < dets.size() && dets[d + 1].score == dets[d].score) continue;
    out.push_back({total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0,
                   static_cast<double>(hits) / static_cast<double>(d + 1)});
  }
  return out;
}

/// Area under the monotone (upper-envelope) precision-recall curve, or the
/// 11-point average when `eleven_point`. nullopt when there are no truths.
inline std::optional<double> average_precision(const std::vector<ScoredBox>& dets,
                                               const std::vector<std::vector<Box>>& truths, double iou_threshold,
                                               bool eleven_point = false) {
  std::size_t total = 0;
  for (const auto& t : truths) total += t.size();
  if (total == 0) return std::nullopt;
  const std::vector<PrPoint> pr = pr_curve(dets, truths, iou_threshold);
  if (eleven_point) {
    double s = 0.0;
    for (int k = 0; k <= 10; ++k) {
      const double r = k / 10.0;
      double p = 0.0;
      for (const auto& pt : pr) if (pt.recall >= r - 1e-12) p = std::max(p, pt.precision);
      s += p;
    }
    return s / 11.0;
  }
  std::vector<double> envelope(pr.size());
  double running = 0.0;
  for (std::size_t i = pr.size(); i-- > 0;) {
    running = std::max(running, pr[i].precision);
    envelope[i] = running;
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < pr.size(); ++i) {
    ap += (pr[i].recall - prev_recall) * envelope[i];
    prev_recall = pr[i].recall;
  }
  return ap;
}

struct EvalOptions {
  double iou_threshold = 0.5;
  bool eleven_point = false;
  std::size_t threads = 1;
};

struct EvalReport {
  std::string attack_tag = "clean";
  std::size_t images = 0;
  /// Classes with at least one ground-truth box.
  std::map<int, double> per_class_ap;
  std::map<int, std::size_t> truth_counts;
  double map = 0.0;
  /// Coefficient of variation of per-class AP drop against a clean report.
  std::optional<double> evenness;
  std::map<int, double> ap_drop;

  text::KeyValues to_kv() const {
    text::KeyValues kv;
    kv["attack"] = attack_tag;
    kv["images"] = std::to_string(images);
    kv["map"] = text::format_double(map);
    for (const auto& [c, ap] : per_class_ap) {
      kv["ap." + std::to_string(c)] = text::format_double(ap);
      kv["truths." + std::to_string(c)] = std::to_string(truth_counts.at(c));
    }
    for (const auto& [c, d] : ap_drop) kv["drop." + std::to_string(c)] = text::format_double(d);
    kv["evenness"] = evenness ? text::format_double(*evenness) : "undefined";
    return kv;
  }
};

inline double mean_ap(const std::map<int, double>& per_class) {
  if (per_class.empty()) return 0.0;
  double s = 0.0;
  for (const auto& [c, ap] : per_class) s += ap;
  return s / static_cast<double>(per_class.size());
}

/// std / mean of the per-class AP drops (population std). Undefined unless
/// the mean drop is positive.
inline std::optional<double> evenness_of(const std::map<int, double>& drops) {
  if (drops.empty()) return std::nullopt;
  double mean = 0.0;
  for (const auto& [c, d] : drops) mean += d;
  mean /= static_cast<double>(drops.size());
  if (!(mean > 0)) return std::nullopt;
  double var = 0.0;
  for (const auto& [c, d] : drops) var += (d - mean) * (d - mean);
  var /= static_cast<double>(drops.size());
  return std::sqrt(var) / mean;
}

/// Fills ap_drop and evenness of `attacked` against `clean`.
inline void attach_evenness(EvalReport& attacked, const EvalReport& clean) {
  attacked.ap_drop.clear();
  for (const auto& [c, ap] : clean.per_class_ap) {
    auto it = attacked.per_class_ap.find(c);
    if (it != attacked.per_class_ap.end()) attacked.ap_drop[c] = ap - it->second;
  }
  attacked.evenness = evenness_of(attacked.ap_drop);
}

/// AP per class over per-image detections.
inline EvalReport score_detections(const std::vector<std::vector<Detection>>& detections,
                                   const std::vector<Annotation>& truths, int num_classes, const EvalOptions& opt) {
  if (detections.size() != truths.size()) fail(ErrorCategory::shape, "detections and annotations differ in length");
  EvalReport r;
  r.images = truths.size();
  for (int c = 1; c <= num_classes; ++c) {
    std::vector<std::vector<Box>> gts(truths.size());
    std::vector<ScoredBox> dets;
    std::size_t count = 0;
    for (std::size_t i = 0; i < truths.size(); ++i) {
      for (std::size_t j = 0; j < truths[i].boxes.size(); ++j) {
        if (truths[i].class_ids[j] == c) gts[i].push_back(truths[i].boxes[j]), ++count;
      }
      for (const Detection& d : detections[i]) if (d.class_id == c) dets.push_back({i, d.box, d.score});
    }
    const auto ap = average_precision(dets, gts, opt.iou_threshold, opt.eleven_point);
    if (!ap) continue;
    r.per_class_ap[c] = *ap;
    r.truth_counts[c] = count;
  }
  r.map = mean_ap(r.per_class_ap);
  return r;
}

/// Predicts on every image (attacking it first when `attack` is given, with a
/// per-image seed derived from the attack seed) and scores the detections.
inline EvalReport evaluate(const DetectorConfig& config, const DetectorParams& params, const Dataset& data,
                           const std::optional<AttackSpec>& attack = std::nullopt, const EvalOptions& opt = {}) {
  if (data.empty()) fail(ErrorCategory::data, "evaluation set is empty");
  std::vector<std::vector<Detection>> dets(data.size());
  std::vector<Annotation> truths(data.size());
  parallel_for(data.size(), resolve_threads(opt.threads), [&](std::size_t i) {
    const Sample& s = data.samples[i];
    truths[i] = s.truth;
    if (attack) {
      AttackSpec a = *attack;
      a.seed = attack->seed * 1000003ULL + i;
      dets[i] = predict(config, params, run_attack(config, params, s.image, s.truth, a).image);
    } else {
      dets[i] = predict(config, params, s.image);
    }
  });
  EvalReport r = score_detections(dets, truths, config.num_classes, opt);
  if (attack) r.attack_tag = attack->tag();
  return r;
}

/// Rows are classes, columns attack tags; a final "mAP" row.
inline void write_per_class_csv(const std::string& path, const std::vector<EvalReport>& reports, int num_classes) {
  std::ofstream out(path);
  if (!out) fail(ErrorCategory::io, "cannot write " + path);
  out << "class";
  for (const auto& r : reports) out << "," << r.attack_tag;
  out << "\n";
  for (int c = 1; c <= num_classes; ++c) {
    bool any = false;
    for (const auto& r : reports) any = any || r.per_class_ap.count(c);
    if (!any) continue;
    out << c;
    for (const auto& r : reports) {
      auto it = r.per_class_ap.find(c);
      out << "," << (it == r.per_class_ap.end() ? std::string() : text::format_double(it->second));
    }
    out << "\n";
  }
  out << "mAP";
  for (const auto& r : reports) out << "," << text::format_double(r.map);
  out << "\n";
}

}  // namespace cwat
