// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "cwat/attacks.hpp"
#include "cwat/evaluation.hpp"
#include "cwat/training.hpp"
#include "support.hpp"

using namespace cwat;
using cwat::testing::kInf;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok, const std::string& why) {
    if (!ok && pass) detail << "[first failure: " << why << "] ";
    pass = pass && ok;
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream o;
  o.precision(prec);
  o << v;
  return o.str();
}

// Network outputs, anchor match and OHEM selection for one generated scene.
struct LossScene {
  DetectorConfig config;
  AnchorGrid grid;
  Annotation truth;
  MatchResult match;
  Tensor logits, offsets;
  LossBreakdown selected;
};

LossScene loss_scene(std::uint64_t seed) {
  LossScene s;
  s.grid = generate_anchors(s.config);
  SceneSpec spec;
  spec.seed = seed;
  s.truth = generate_scene(spec, 0).truth;
  s.match = match_anchors(s.grid, s.truth, s.config.match_iou);
  std::mt19937_64 rng(seed);
  s.logits = cwat::testing::random_tensor(rng, {s.grid.size(), 4}, -3, 3);
  s.offsets = cwat::testing::random_tensor(rng, {s.grid.size(), 4}, -2, 2);
  s.selected = ohem_select(per_anchor_losses(s.logits, s.offsets, s.match, s.truth, s.grid), 3.0);
  return s;
}

// ---------------------------------------------------------------------------

Verdict criterion1() {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t cases = 0;
  double worst = 0;
  // Every primitive, several random draws each.
  for (int kind = 0; kind < 13; ++kind) {
    for (int rep = 0; rep < 8; ++rep) {
      std::mt19937_64 rng(1000 + 31 * kind + rep);
      ad::Graph g;
      ad::Bindings b;
      auto in = [&](const std::string& name, Shape s) {
        const ad::NodeId id = g.input(name, s);
        b.emplace(id, cwat::testing::random_tensor(rng, s));
        return id;
      };
      ad::NodeId loss = 0;
      switch (kind) {
        case 0: loss = g.sum(g.add(in("a", {3, 2}), in("b", {3, 2}))); break;
        case 1: loss = g.sum(g.mul(in("a", {5}), in("b", {5}))); break;
        case 2: loss = g.sum(g.mul(in("a", {4}), in("s", {}))); break;
        case 3: loss = g.sum(g.smooth_l1(g.matmul(in("a", {3, 4}), in("b", {4, 2})))); break;
        case 4: loss = g.sum(g.smooth_l1(g.conv2d(in("x", {2, 5, 5}), in("w", {3, 2, 3, 3}), in("c", {3}), 1, 1))); break;
        case 5: loss = g.sum(g.smooth_l1(g.conv2d(in("x", {2, 6, 6}), in("w", {3, 2, 3, 3}), std::nullopt, 2, 1, true))); break;
        case 6: loss = g.sum(g.mul(g.relu(in("a", {6})), in("b", {6}))); break;
        case 7: loss = g.sum(g.mul(g.maxpool2x2(in("a", {2, 4, 4})), in("b", {2, 2, 2}))); break;
        case 8: loss = g.sum(g.mul(g.reshape(in("a", {2, 3}), {3, 2}), in("b", {3, 2}))); break;
        case 9: loss = g.sum(g.softmax_ce(in("z", {4, 3}), {0, 2, 1, 1})); break;
        case 10: {
          const ad::NodeId a = in("a", {5});
          b.at(a) = cwat::testing::random_tensor(rng, {5}, -3.0, 3.0);
          loss = g.sum(g.smooth_l1(a));
          break;
        }
        case 11: loss = g.clip_min_const(g.sum(g.mul(in("a", {4}), in("b", {4}))), 0.1); break;
        default: loss = g.scale(g.sum(g.mul(in("a", {3}), in("b", {3}))), -1.7); break;
      }
      const ad::FdReport r = ad::finite_difference_check(g, loss, b, 1e-5);
      worst = std::max(worst, r.max_relative_error);
      cases += r.checked > 0;
    }
  }
  // The loss aggregations on detector outputs.
  for (Objective o : {Objective::total, Objective::task_clipped, Objective::object_wise, Objective::class_wise}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const LossScene s = loss_scene(200 + seed);
      ad::Graph g;
      const ad::NodeId logits = g.input("logits", s.logits.shape);
      const ad::NodeId offsets = g.input("offsets", s.offsets.shape);
      const ad::NodeId loss = add_objective(g, logits, offsets, s.selected, o, ClipThresholds::uniform(2.5));
      ad::FdOptions opt;
      opt.max_coords_per_leaf = 60;
      const ad::FdReport r = ad::finite_difference_check(g, loss, {{logits, s.logits}, {offsets, s.offsets}}, 1e-5, opt);
      worst = std::max(worst, r.max_relative_error);
      cases += r.checked > 0;
    }
  }
  const double secs = seconds_since(t0);
  v.require(cases >= 100, "fewer than 100 cases");
  v.require(worst < 1e-4, "relative error too large");
  v.require(secs < 30, "too slow");
  v.detail << cases << " cases, max rel err " << fmt(worst, 3) << ", " << fmt(secs, 3) << " s";
  return v;
}

Verdict criterion2() {
  Verdict v;
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> beta(0.5, 12.0);
  double worst = 0;
  int n = 0, unbounded = 0, single = 0;
  for (int i = 0; i < 1200; ++i) {
    cwat::testing::BreakdownGen gen;
    gen.single_class = i % 5 == 0;
    const LossBreakdown b = cwat::testing::random_breakdown(rng, gen);
    const bool inf = i % 7 == 0;
    const double bc = inf ? kInf : beta(rng), br = inf ? kInf : beta(rng), bo = inf ? kInf : beta(rng);
    const ClipThresholds t{bc, br, bo};
    worst = std::max({worst, std::abs(loss_total(b) - cwat::testing::oracle_total(b)),
                      std::abs(loss_task_clipped(b, t) - cwat::testing::oracle_task_clipped(b, bc, br)),
                      std::abs(loss_object_clipped(b, t) - cwat::testing::oracle_object_clipped(b, bo)),
                      std::abs(loss_class_wise(b, t) - cwat::testing::oracle_class_wise(b, bo, true))});
    ++n;
    unbounded += inf;
    single += gen.single_class;
  }
  v.require(worst <= 1e-12, "oracle mismatch");
  v.detail << n << " breakdowns (" << unbounded << " unbounded, " << single << " single-class), max abs diff "
           << fmt(worst, 3);
  return v;
}

Verdict criterion3() {
  Verdict v;
  std::mt19937_64 rng(78);
  std::uniform_real_distribution<double> beta(0.1, 12.0);
  int violations = 0, active = 0;
  for (int i = 0; i < 2000; ++i) {
    const LossBreakdown b = cwat::testing::random_breakdown(rng);
    const ClipThresholds t{beta(rng), beta(rng), beta(rng)};
    const double total = loss_total(b);
    violations += loss_task_clipped(b, t) > total;
    violations += loss_object_clipped(b, t) > total;
    active += loss_object_clipped(b, t) < total;
  }
  v.require(violations == 0, "clipped loss above total");

  // Gradients: all branches clipped gives an exactly zero gradient, and a
  // partial clip zeroes exactly the clipped anchors.
  std::size_t nonzero = 0, wrong_anchor = 0, anchors = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const LossScene s = loss_scene(300 + seed);
    for (Objective o : {Objective::task_clipped, Objective::object_wise, Objective::class_wise}) {
      ad::Graph g;
      const ad::NodeId logits = g.input("logits", s.logits.shape);
      const ad::NodeId offsets = g.input("offsets", s.offsets.shape);
      const ad::NodeId loss = add_objective(g, logits, offsets, s.selected, o, ClipThresholds::uniform(1e-9));
      const ad::Bindings bind{{logits, s.logits}, {offsets, s.offsets}};
      const auto grads = ad::backward(g, loss, ad::forward(g, bind), {logits, offsets});
      for (double d : grads.at(logits).data) nonzero += d != 0.0;
      for (double d : grads.at(offsets).data) nonzero += d != 0.0;
    }
    ad::Graph g;
    const ad::NodeId logits = g.input("logits", s.logits.shape);
    const ad::NodeId offsets = g.input("offsets", s.offsets.shape);
    const ad::NodeId loss = add_objective(g, logits, offsets, s.selected, Objective::object_wise, ClipThresholds::uniform(1.0));
    const ad::Bindings bind{{logits, s.logits}, {offsets, s.offsets}};
    const auto grads = ad::backward(g, loss, ad::forward(g, bind), {logits, offsets});
    for (const auto& p : s.selected.per_positive) {
      bool zero = true;
      for (std::size_t k = 0; k < 4; ++k) zero &= grads.at(offsets).data[p.anchor * 4 + k] == 0.0;
      wrong_anchor += zero != (p.l_reg > 1.0);
      ++anchors;
    }
  }
  v.require(nonzero == 0, "nonzero gradient through a clipped branch");
  v.require(wrong_anchor == 0, "partial clip gradient pattern");
  v.detail << "2000 breakdowns (" << active << " with active clipping), 0 violations needed, got " << violations
           << "; fully clipped nonzero grads " << nonzero << "; partial clip mismatches " << wrong_anchor << "/" << anchors;
  return v;
}

Verdict criterion4() {
  Verdict v;
  std::mt19937_64 rng(79);
  double worst = 0;
  int unchanged_total = 0, multi = 0;
  for (int i = 0; i < 1000; ++i) {
    LossBreakdown b = cwat::testing::random_breakdown(rng);
    const int c = b.per_positive[rng() % b.per_positive.size()].class_id;
    LossBreakdown dup = b;
    std::size_t next_anchor = b.per_positive.size() + b.per_negative.size();
    std::size_t next_object = b.per_positive.size();
    for (const auto& p : b.per_positive) {
      if (p.class_id != c) continue;
      PositiveTerm q = p;
      q.anchor = next_anchor++;
      q.object = next_object++;
      dup.per_positive.push_back(q);
    }
    const ClipThresholds t = i % 2 ? ClipThresholds::uniform(6.0) : ClipThresholds{};
    worst = std::max(worst, std::abs(loss_class_wise(dup, t) - loss_class_wise(b, t)));
    bool others = false;
    for (const auto& p : b.per_positive) others |= p.class_id != c;
    if (others) {
      ++multi;
      unchanged_total += loss_total(dup) == loss_total(b);
    }
  }
  v.require(worst <= 1e-12, "class-wise loss changed");
  v.require(multi > 0 && unchanged_total == 0, "total loss unchanged with other classes present");
  v.detail << "1000 duplications, max class-wise change " << fmt(worst, 3) << "; total unchanged in " << unchanged_total
           << "/" << multi << " multi-class cases";
  return v;
}

Verdict criterion5() {
  Verdict v;
  SceneSpec spec;
  spec.seed = 51;
  const auto m = cwat::testing::trained_model(spec, 80, 4);
  Dataset test = generate_dataset(spec, 10, nullptr, 1000);
  apply_mean_shift(test, m.data.mean);
  const double eps = 8.0;
  std::size_t attacks = 0, infeasible = 0, fgsm_mismatch = 0, mda_wrong = 0;
  for (const Sample& s : test.samples) {
    std::vector<AttackResult> results;
    AttackSpec a;
    a.epsilon = eps;
    a.steps = 1;
    const AttackResult f = fgsm(m.config, m.params, s.image, s.truth, a);
    a.step_size = eps;
    const AttackResult p1 = pgd(m.config, m.params, s.image, s.truth, a);
    fgsm_mismatch += f.image.pixels != p1.image.pixels;
    results.push_back(f);
    for (Objective o : {Objective::total, Objective::object_wise, Objective::class_wise}) {
      AttackSpec k;
      k.epsilon = eps;
      k.steps = 5;
      k.objective = o;
      k.random_start = o == Objective::total;
      k.seed = 3;
      results.push_back(pgd(m.config, m.params, s.image, s.truth, k));
    }
    AttackSpec md;
    md.epsilon = eps;
    md.steps = 5;
    md.kind = AttackKind::mda;
    const AttackResult r = mda(m.config, m.params, s.image, s.truth, md);
    results.push_back(r);
    // Recompute both candidates and their overall loss independently.
    AttackSpec c = md;
    c.kind = AttackKind::pgd;
    c.objective = Objective::cls_only;
    const AttackResult rc = pgd(m.config, m.params, s.image, s.truth, c);
    c.objective = Objective::reg_only;
    const AttackResult rr = pgd(m.config, m.params, s.image, s.truth, c);
    const double lc = *evaluate_objective(m.config, m.params, rc.image, s.truth, Objective::total, md.thresholds, 3.0);
    const double lr = *evaluate_objective(m.config, m.params, rr.image, s.truth, Objective::total, md.thresholds, 3.0);
    mda_wrong += r.image.pixels != (lc >= lr ? rc.image.pixels : rr.image.pixels);
    for (const AttackResult& x : results) {
      ++attacks;
      for (std::size_t i = 0; i < x.image.pixels.size(); ++i) {
        const double px = x.image.pixels[i];
        infeasible += std::abs(px - s.image.pixels[i]) > eps || px < 0.0 || px > 255.0;
      }
    }
  }
  v.require(infeasible == 0, "pixel outside the budget or range");
  v.require(fgsm_mismatch == 0, "FGSM differs from PGD-1");
  v.require(mda_wrong == 0, "MDA did not keep the argmax candidate");
  v.detail << attacks << " attacks (FGSM, PGD, OWA, CWA, MDA), infeasible pixels " << infeasible
           << ", FGSM/PGD-1 mismatches " << fgsm_mismatch << ", MDA argmax errors " << mda_wrong;
  return v;
}

Verdict criterion6() {
  Verdict v;
  SceneSpec spec;
  spec.seed = 61;
  const Dataset data = generate_dataset(spec, 16);
  const DetectorConfig cfg;
  TrainConfig tc;
  tc.epochs = 8;
  tc.batch_size = 4;
  tc.replay = 4;
  tc.attack.steps = 10;
  const TrainResult fast = train_fast_cwat(cfg, data, tc);
  std::set<int> outer;
  bool per_batch_ok = true;
  std::size_t fast_total = 0;
  for (const auto& s : fast.log.steps) {
    per_batch_ok &= s.backprops == 8 && s.delta_updates == 4 && s.theta_updates == 4;
    outer.insert(s.outer_epoch);
    fast_total += s.backprops;
  }
  const std::size_t batches = 4;
  v.require(per_batch_ok, "fast minibatch accounting");
  v.require(outer.size() == static_cast<std::size_t>(tc.epochs / tc.replay), "outer epoch count");
  v.require(fast.log.steps.size() == outer.size() * batches, "minibatch count");

  TrainConfig mt = tc;
  mt.mode = TrainMode::mtd;
  mt.epochs = 1;
  const TrainResult mtd = train_pgd_at(cfg, data, mt);
  bool mtd_ok = !mtd.log.steps.empty();
  std::size_t mtd_total = 0;
  for (const auto& s : mtd.log.steps) mtd_ok &= s.backprops == 23, mtd_total += s.backprops;
  v.require(mtd_ok, "MTD accounting");
  // Per epoch-equivalent and minibatch: 23 against 2, i.e. 21 extra.
  const double mtd_per_iter = static_cast<double>(mtd_total) / batches;
  const double fast_per_iter = static_cast<double>(fast_total) / (batches * tc.epochs);
  v.require(mtd_per_iter == 23.0 && fast_per_iter == 2.0, "per-iteration ratio");
  v.detail << "fast m=4: " << fast.log.steps.size() << " minibatches over " << outer.size() << " outer epochs (N_ep="
           << tc.epochs << "), 8 backprops/4 delta/4 theta each: " << (per_batch_ok ? "yes" : "no") << "; MTD PGD-10: "
           << mtd_per_iter << " per iteration vs fast " << fast_per_iter << " (ratio " << fmt(mtd_per_iter / fast_per_iter)
           << ", " << mtd_per_iter - fast_per_iter << " extra)";
  return v;
}

// Train/test split of a 500-scene set: 400 train, 100 test.
struct Split {
  Dataset train, test;
};

Split split_500(const SceneSpec& spec) {
  const Dataset all = generate_dataset(spec, 500);
  Split s{all, all};
  s.train.samples.assign(all.samples.begin(), all.samples.begin() + 400);
  s.test.samples.assign(all.samples.begin() + 400, all.samples.end());
  s.train.mean = s.test.mean = channel_mean(s.train.samples);
  apply_mean_shift(s.train, s.train.mean);
  apply_mean_shift(s.test, s.train.mean);
  return s;
}

Verdict criterion7() {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  const DetectorConfig cfg;
  AttackSpec cwa;
  cwa.objective = Objective::class_wise;
  cwa.steps = 10;
  cwa.epsilon = 8;
  int a_ok = 0, b_ok = 0, c_ok = 0;
  for (int rep = 0; rep < 3; ++rep) {
    SceneSpec spec;
    spec.seed = 700 + static_cast<std::uint64_t>(rep);
    const Split d = split_500(spec);
    TrainConfig tc;
    tc.epochs = 12;
    tc.seed = static_cast<std::uint64_t>(rep);
    const DetectorParams std_params = train_standard(cfg, d.train, tc).state.params;
    const EvalReport clean = evaluate(cfg, std_params, d.test);
    const EvalReport attacked = evaluate(cfg, std_params, d.test, cwa);

    TrainConfig at = tc;
    at.mode = TrainMode::cwat;
    at.epochs = 4;
    at.attack = cwa;
    TrainState start;
    start.params = std_params;
    const DetectorParams cwat_params = train_pgd_at(cfg, d.train, at, start).state.params;
    const EvalReport cwat_clean = evaluate(cfg, cwat_params, d.test);
    const EvalReport cwat_attacked = evaluate(cfg, cwat_params, d.test, cwa);

    const bool a = clean.map >= 0.6, b = clean.map - attacked.map >= 0.3, c = cwat_attacked.map - attacked.map >= 0.10;
    a_ok += a, b_ok += b, c_ok += c;
    v.detail << "rep " << rep << ": STD clean " << fmt(clean.map, 3) << ", STD CWA " << fmt(attacked.map, 3) << ", CWAT clean "
             << fmt(cwat_clean.map, 3) << ", CWAT CWA " << fmt(cwat_attacked.map, 3) << "; ";
  }
  const double secs = seconds_since(t0);
  v.require(a_ok == 3, "(a) STD clean mAP below 0.6");
  v.require(b_ok == 3, "(b) attack drop below 0.3");
  v.require(c_ok == 3, "(c) CWAT gain below 0.10");
  v.require(secs <= 1800, "runtime above 30 min");
  v.detail << "runtime " << fmt(secs / 60, 3) << " min on " << std::max(1u, std::thread::hardware_concurrency()) << " core(s)";
  return v;
}

Verdict criterion8() {
  Verdict v;
  const DetectorConfig cfg;
  int wins = 0;
  for (int rep = 0; rep < 3; ++rep) {
    SceneSpec spec;
    spec.seed = 100 + static_cast<std::uint64_t>(rep);
    spec.composition = {5, 1, 1};
    spec.min_size = 8;
    spec.max_size = 16;
    const Split d = split_500(spec);
    TrainConfig tc;
    tc.epochs = 12;
    tc.seed = static_cast<std::uint64_t>(rep);
    const DetectorParams params = train_standard(cfg, d.train, tc).state.params;
    const EvalReport clean = evaluate(cfg, params, d.test);
    std::map<Objective, std::optional<double>> cv;
    for (Objective o : {Objective::class_wise, Objective::total}) {
      AttackSpec a;
      a.objective = o;
      a.steps = 10;
      a.epsilon = 8;
      EvalReport r = evaluate(cfg, params, d.test, a);
      attach_evenness(r, clean);
      cv[o] = r.evenness;
    }
    const auto& c = cv[Objective::class_wise];
    const auto& t = cv[Objective::total];
    const bool win = c && t && *c < *t;
    wins += win;
    v.detail << "seed " << spec.seed << ": CV CWA " << (c ? fmt(*c, 3) : "undefined") << " vs total "
             << (t ? fmt(*t, 3) : "undefined") << (win ? " (lower)" : " (not lower)") << "; ";
  }
  v.require(wins >= 2, "CWA not more even in 2 of 3 runs");
  v.detail << wins << "/3 runs lower under CWA";
  return v;
}

Verdict criterion9() {
  Verdict v;
  std::mt19937_64 rng(90);
  auto grid_box = [&](double cell) {
    std::uniform_int_distribution<int> lo(0, 100), len(2, 40);
    const double x = lo(rng) * cell, y = lo(rng) * cell;
    return Box{x, y, std::min(64.0, x + len(rng) * cell), std::min(64.0, y + len(rng) * cell)};
  };
  double ap_worst = 0;
  int ap_cases = 0;
  for (int t = 0; t < 120; ++t) {
    std::vector<std::vector<Box>> truths(2);
    for (auto& im : truths)
      for (int k = 1 + static_cast<int>(rng() % 4); k-- > 0;) im.push_back(grid_box(1.0));
    std::vector<ScoredBox> dets;
    std::vector<cwat::testing::OracleDet> odets;
    for (int k = static_cast<int>(rng() % 11); k-- > 0;) {
      const std::size_t im = rng() % 2;
      Box b = rng() % 2 ? truths[im][rng() % truths[im].size()] : grid_box(1.0);
      const double score = static_cast<double>(1 + rng() % 6) / 10.0;
      dets.push_back({im, b, score});
      odets.push_back({im, b, score});
    }
    ap_worst = std::max(ap_worst, std::abs(*average_precision(dets, truths, 0.5) -
                                           cwat::testing::brute_force_ap(odets, truths, 0.5)));
    ++ap_cases;
  }
  double iou_worst = 0;
  for (int t = 0; t < 100; ++t) {
    const Box a = grid_box(0.5), b = grid_box(0.5);
    iou_worst = std::max(iou_worst, std::abs(iou(a, b) - cwat::testing::raster_iou(a, b, 0.5)));
  }
  v.require(ap_worst <= 1e-12, "AP oracle mismatch");
  v.require(iou_worst <= 1e-6, "IoU oracle mismatch");
  v.detail << ap_cases << " AP cases (max diff " << fmt(ap_worst, 3) << "), 100 IoU pairs (max diff " << fmt(iou_worst, 3)
           << ")";
  return v;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Verdict criterion10() {
  Verdict v;
  const std::string bin = CWAT_CLI_PATH;
  const fs::path root = cwat::testing::temp_dir("acceptance_repro");
  auto sh = [&](const std::string& args) {
    const int rc = std::system((bin + " " + args + " >>" + (root / "log.txt").string() + " 2>&1").c_str());
    return WEXITSTATUS(rc);
  };
  bool ran = true;
  // First run from flags; second run from the first run's config echoes.
  for (const char* r : {"r1", "r2"}) {
    const fs::path d = root / r;
    const bool first = std::string(r) == "r1";
    auto cfg = [&](const char* step, const std::string& flags) {
      return first ? flags : "--config " + (root / "r1" / step / "config.txt").string();
    };
    ran &= sh("gen --out " + (d / "data").string() + " " +
              cfg("data", "--seed 3 --set data.image_size=64 --set data.count=16")) == 0;
    ran &= sh("train --data " + (d / "data").string() + " --out " + (d / "model").string() + " " +
              cfg("model", "--seed 3 --mode fast-cwat --set train.epochs=4 --set train.batch_size=4")) == 0;
    ran &= sh("attack --data " + (d / "data").string() + " --checkpoint " + (d / "model" / "model.ckpt").string() +
              " --out " + (d / "adv").string() + " " + cfg("adv", "--seed 5 --objective class_wise --steps 3")) == 0;
    ran &= sh("eval --data " + (d / "data").string() + " --checkpoint " + (d / "model" / "model.ckpt").string() +
              " --out " + (d / "eval").string() + " " + cfg("eval", "--seed 5 --steps 3")) == 0;
  }
  v.require(ran, "a CLI command failed (see " + (root / "log.txt").string() + ")");
  std::size_t compared = 0, differ = 0;
  auto same = [&](const fs::path& rel) {
    ++compared;
    const std::string a = slurp(root / "r1" / rel), b = slurp(root / "r2" / rel);
    differ += a.empty() || a != b;
  };
  // Fast training with epochs = replay writes one per-epoch checkpoint.
  std::size_t ckpts = 0;
  for (const auto& e : fs::directory_iterator(root / "r1" / "model")) {
    if (e.path().extension() == ".ckpt") same("model" / e.path().filename()), ++ckpts;
  }
  v.require(ckpts == 2, "expected epoch_000004.ckpt and model.ckpt");
  for (std::size_t i = 0; i < 16; ++i) same("adv/images/" + cwat::detail::stem(i) + ".png");
  for (const char* f : {"eval/summary.csv", "eval/per_class.csv", "data/stats_objects.csv", "model/train_log.jsonl"}) same(f);
  v.require(differ == 0, "outputs differ between runs");
  v.detail << compared << " files compared (checkpoints, adversarial PNGs, CSVs, log), " << differ << " differ";
  return v;
}

}  // namespace

int main() {
  const std::vector<std::function<Verdict()>> criteria{criterion1, criterion2, criterion3, criterion4, criterion5,
                                                       criterion6, criterion7, criterion8, criterion9, criterion10};
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[i]();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail << "exception: " << e.what();
    }
    failed += !v.pass;
    std::cout << "criterion " << i + 1 << ": " << (v.pass ? "PASS" : "FAIL") << " - " << v.detail.str() << " ["
              << fmt(seconds_since(t0), 3) << " s]" << std::endl;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : "all criteria passed") << std::endl;
  return failed ? 1 : 0;
}
