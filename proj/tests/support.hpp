#pragma once

// Shared helpers for the test suites: random generators and naive oracles
// written independently of the library code they check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "cwat/box.hpp"
#include "cwat/losses.hpp"
#include "cwat/tensor.hpp"
#include "cwat/training.hpp"

namespace cwat::testing {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data) v = u(rng);
  return t;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("cwat_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

/// A clean-trained detector and the data it was trained on; small enough to
/// train in a few seconds.
struct TrainedModel {
  DetectorConfig config;
  Dataset data;
  DetectorParams params;
};

inline TrainedModel trained_model(const SceneSpec& spec, std::size_t images, int epochs, std::uint64_t seed = 0) {
  TrainedModel m;
  m.config.num_classes = spec.num_classes;
  m.data = generate_dataset(spec, images);
  TrainConfig tc;
  tc.epochs = epochs;
  tc.seed = seed;
  m.params = train_standard(m.config, m.data, tc).state.params;
  return m;
}

// ---------------------------------------------------------------------------
// Convolution by direct summation.

inline Tensor naive_conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, int stride, int pad) {
  const long c = static_cast<long>(x.shape[0]), h = static_cast<long>(x.shape[1]), wd = static_cast<long>(x.shape[2]);
  const long o = static_cast<long>(w.shape[0]), k = static_cast<long>(w.shape[2]);
  const long ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  Tensor out({static_cast<std::size_t>(o), static_cast<std::size_t>(ho), static_cast<std::size_t>(wo)});
  for (long oc = 0; oc < o; ++oc)
    for (long oy = 0; oy < ho; ++oy)
      for (long ox = 0; ox < wo; ++ox) {
        double s = bias ? bias->data[static_cast<std::size_t>(oc)] : 0.0;
        for (long ic = 0; ic < c; ++ic)
          for (long ky = 0; ky < k; ++ky)
            for (long kx = 0; kx < k; ++kx) {
              const long iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
              if (iy < 0 || ix < 0 || iy >= h || ix >= wd) continue;
              s += x.data[static_cast<std::size_t>((ic * h + iy) * wd + ix)] *
                   w.data[static_cast<std::size_t>(((oc * c + ic) * k + ky) * k + kx)];
            }
        out.data[static_cast<std::size_t>((oc * ho + oy) * wo + ox)] = s;
      }
  return out;
}

// ---------------------------------------------------------------------------
// Loss breakdowns and naive aggregations.

struct BreakdownGen {
  int max_classes = 4;
  std::size_t max_positives = 8;
  double max_loss = 10.0;
  bool single_class = false;
};

inline LossBreakdown random_breakdown(std::mt19937_64& rng, const BreakdownGen& gen = {}) {
  std::uniform_int_distribution<std::size_t> npos(1, gen.max_positives);
  std::uniform_real_distribution<double> loss(0.0, gen.max_loss);
  const int classes = gen.single_class ? 1 : std::uniform_int_distribution<int>(1, gen.max_classes)(rng);
  std::uniform_int_distribution<int> cls(1, classes);
  const int fixed = cls(rng);
  LossBreakdown b;
  const std::size_t n = npos(rng);
  std::size_t anchor = 0;
  for (std::size_t i = 0; i < n; ++i) {
    PositiveTerm p;
    p.anchor = anchor++;
    p.object = i;
    p.class_id = gen.single_class ? fixed : cls(rng);
    p.l_cls = loss(rng);
    p.l_reg = loss(rng);
    b.per_positive.push_back(p);
  }
  const std::size_t nneg = std::uniform_int_distribution<std::size_t>(0, 3 * n)(rng);
  for (std::size_t i = 0; i < nneg; ++i) b.per_negative.push_back({anchor++, loss(rng)});
  return b;
}

inline double oracle_total(const LossBreakdown& b) {
  double cls = 0.0, reg = 0.0;
  const double n = static_cast<double>(b.per_positive.size());
  for (std::size_t i = 0; i < b.per_positive.size(); ++i) {
    cls += b.per_positive[i].l_cls;
    reg += b.per_positive[i].l_reg;
  }
  for (std::size_t i = 0; i < b.per_negative.size(); ++i) cls += b.per_negative[i].l_cls;
  return cls / n + reg / n;
}

inline double oracle_task_clipped(const LossBreakdown& b, double beta_cls, double beta_reg) {
  double cls = 0.0, reg = 0.0;
  const double n = static_cast<double>(b.per_positive.size());
  for (std::size_t i = 0; i < b.per_positive.size(); ++i) {
    cls += b.per_positive[i].l_cls;
    reg += b.per_positive[i].l_reg;
  }
  for (std::size_t i = 0; i < b.per_negative.size(); ++i) cls += b.per_negative[i].l_cls;
  cls /= n;
  reg /= n;
  return (cls < beta_cls ? cls : beta_cls) + (reg < beta_reg ? reg : beta_reg);
}

inline double oracle_object_clipped(const LossBreakdown& b, double beta) {
  double s = 0.0;
  for (std::size_t i = 0; i < b.per_positive.size(); ++i) {
    const double c = b.per_positive[i].l_cls, r = b.per_positive[i].l_reg;
    s += (c < beta ? c : beta) + (r < beta ? r : beta);
  }
  for (std::size_t i = 0; i < b.per_negative.size(); ++i) {
    const double c = b.per_negative[i].l_cls;
    s += c < beta ? c : beta;
  }
  return s / static_cast<double>(b.per_positive.size());
}

/// Mean over groups (each present class, plus the negatives when
/// `with_negatives` and there are any) of the group's mean clipped loss.
inline double oracle_class_wise(const LossBreakdown& b, double beta, bool with_negatives) {
  int max_class = 0;
  for (std::size_t i = 0; i < b.per_positive.size(); ++i) max_class = std::max(max_class, b.per_positive[i].class_id);
  double total = 0.0;
  int groups = 0;
  for (int c = 1; c <= max_class; ++c) {
    double s = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < b.per_positive.size(); ++i) {
      if (b.per_positive[i].class_id != c) continue;
      ++n;
      s += std::min(b.per_positive[i].l_cls, beta) + std::min(b.per_positive[i].l_reg, beta);
    }
    if (n == 0) continue;
    total += s / n;
    ++groups;
  }
  if (with_negatives && !b.per_negative.empty()) {
    double s = 0.0;
    for (std::size_t i = 0; i < b.per_negative.size(); ++i) s += std::min(b.per_negative[i].l_cls, beta);
    total += s / static_cast<double>(b.per_negative.size());
    ++groups;
  }
  return total / groups;
}

// ---------------------------------------------------------------------------
// Metric oracles.

/// IoU by counting cells of a grid fine enough to be exact for boxes whose
/// corners lie on multiples of `cell`.
inline double raster_iou(const Box& a, const Box& b, double cell) {
  const double lo_x = std::min(a.xmin, b.xmin), lo_y = std::min(a.ymin, b.ymin);
  const double hi_x = std::max(a.xmax, b.xmax), hi_y = std::max(a.ymax, b.ymax);
  const long nx = std::lround((hi_x - lo_x) / cell), ny = std::lround((hi_y - lo_y) / cell);
  long inter = 0, uni = 0;
  for (long iy = 0; iy < ny; ++iy)
    for (long ix = 0; ix < nx; ++ix) {
      const double cx = lo_x + (ix + 0.5) * cell, cy = lo_y + (iy + 0.5) * cell;
      const bool in_a = cx > a.xmin && cx < a.xmax && cy > a.ymin && cy < a.ymax;
      const bool in_b = cx > b.xmin && cx < b.xmax && cy > b.ymin && cy < b.ymax;
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

struct OracleDet {
  std::size_t image;
  Box box;
  double score;
};

/// AP by enumerating every score threshold: for each threshold the kept
/// detections are re-matched from scratch, giving (recall, precision); AP
/// integrates max{precision : recall >= r} over r.
inline double brute_force_ap(const std::vector<OracleDet>& dets, const std::vector<std::vector<Box>>& truths,
                             double iou_threshold) {
  std::size_t total = 0;
  for (const auto& t : truths) total += t.size();
  std::vector<double> thresholds;
  for (const auto& d : dets) thresholds.push_back(d.score);
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  std::vector<std::pair<double, double>> points;  // (recall, precision)
  for (double tau : thresholds) {
    std::vector<OracleDet> kept;
    for (const auto& d : dets) if (d.score >= tau) kept.push_back(d);
    std::sort(kept.begin(), kept.end(), [](const OracleDet& a, const OracleDet& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.image != b.image) return a.image < b.image;
      if (a.box.xmin != b.box.xmin) return a.box.xmin < b.box.xmin;
      if (a.box.ymin != b.box.ymin) return a.box.ymin < b.box.ymin;
      if (a.box.xmax != b.box.xmax) return a.box.xmax < b.box.xmax;
      return a.box.ymax < b.box.ymax;
    });
    std::vector<std::vector<bool>> used(truths.size());
    for (std::size_t i = 0; i < truths.size(); ++i) used[i].assign(truths[i].size(), false);
    std::size_t tp = 0;
    for (const auto& d : kept) {
      double best = -1.0;
      std::size_t best_j = 0;
      for (std::size_t j = 0; j < truths[d.image].size(); ++j) {
        if (used[d.image][j]) continue;
        const double o = iou(d.box, truths[d.image][j]);
        if (o > best) best = o, best_j = j;
      }
      if (best >= iou_threshold) used[d.image][best_j] = true, ++tp;
    }
    points.emplace_back(static_cast<double>(tp) / static_cast<double>(total),
                        static_cast<double>(tp) / static_cast<double>(kept.size()));
  }
  std::vector<double> recalls;
  for (const auto& [r, p] : points) recalls.push_back(r);
  std::sort(recalls.begin(), recalls.end());
  recalls.erase(std::unique(recalls.begin(), recalls.end()), recalls.end());
  double ap = 0.0, prev = 0.0;
  for (double r : recalls) {
    double best = 0.0;
    for (const auto& [rr, pp] : points) if (rr >= r) best = std::max(best, pp);
    ap += (r - prev) * best;
    prev = r;
  }
  return ap;
}

}  // namespace cwat::testing
