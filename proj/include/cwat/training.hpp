#pragma once

// Momentum SGD and the training loops: standard (clean) training, PGD-based
// adversarial training for each attack objective (TOAT, OWAT, CWAT, MTD), and
// fast class-wise adversarial training with minibatch replay.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "cwat/attacks.hpp"
#include "cwat/data.hpp"
#include "cwat/detector.hpp"
#include "cwat/error.hpp"
#include "cwat/losses.hpp"
#include "cwat/parallel.hpp"
#include "cwat/text.hpp"

namespace cwat {

enum class TrainMode { standard, toat, owat, cwat, mtd, fast_cwat };

inline std::string_view mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::standard: return "std";
    case TrainMode::toat: return "toat";
    case TrainMode::owat: return "owat";
    case TrainMode::cwat: return "cwat";
    case TrainMode::mtd: return "mtd";
    case TrainMode::fast_cwat: return "fast-cwat";
  }
  return "?";
}

inline TrainMode parse_mode(std::string_view s) {
  for (TrainMode m : {TrainMode::standard, TrainMode::toat, TrainMode::owat, TrainMode::cwat, TrainMode::mtd,
                      TrainMode::fast_cwat}) {
    if (mode_name(m) == s) return m;
  }
  fail(ErrorCategory::config, "unknown training mode '" + std::string(s) + "'");
}

/// Objective the attacker maximizes while training in mode `m`.
inline Objective attack_objective(TrainMode m) {
  switch (m) {
    case TrainMode::toat: return Objective::task_clipped;
    case TrainMode::owat: return Objective::object_wise;
    case TrainMode::cwat:
    case TrainMode::fast_cwat: return Objective::class_wise;
    default: return Objective::total;
  }
}

struct TrainConfig {
  TrainMode mode = TrainMode::standard;
  int epochs = 24;
  std::size_t batch_size = 8;
  double lr = 1e-2;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  /// Empty: decay after 16/24 and 20/24 of the configured epochs.
  std::vector<int> lr_decay_epochs;
  double lr_decay_factor = 0.1;
  /// Minibatch replays m for fast training.
  int replay = 4;
  /// Epsilon, steps, step size, thresholds and random start for the attacks.
  AttackSpec attack;
  /// Fast training: one perturbation shared by the whole minibatch.
  bool shared_delta = false;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  std::vector<int> decay_epochs() const {
    if (!lr_decay_epochs.empty()) return lr_decay_epochs;
    return {static_cast<int>(std::lround(epochs * 16.0 / 24.0)), static_cast<int>(std::lround(epochs * 20.0 / 24.0))};
  }

  double lr_at(int epoch) const {
    double out = lr;
    for (int d : decay_epochs()) if (epoch >= d) out *= lr_decay_factor;
    return out;
  }

  void validate() const {
    auto bad = [](const std::string& msg) { fail(ErrorCategory::config, "train: " + msg); };
    if (epochs < 1) bad("epochs must be >= 1");
    if (batch_size == 0) bad("batch_size must be >= 1");
    if (!(lr > 0)) bad("lr must be positive");
    if (momentum < 0 || momentum >= 1) bad("momentum must be in [0, 1)");
    if (weight_decay < 0) bad("weight_decay must be >= 0");
    if (!(lr_decay_factor > 0)) bad("lr_decay_factor must be positive");
    if (mode == TrainMode::fast_cwat) {
      if (replay < 1) bad("replay must be >= 1");
      if (epochs % replay != 0) {
        bad("epochs (" + std::to_string(epochs) + ") must be divisible by replay m (" + std::to_string(replay) + ")");
      }
    }
    if (mode != TrainMode::standard) attack.validate();
  }

  text::KeyValues echo() const {
    text::KeyValues kv;
    kv["mode"] = mode_name(mode);
    kv["epochs"] = std::to_string(epochs);
    kv["batch_size"] = std::to_string(batch_size);
    kv["lr"] = text::format_double(lr);
    kv["momentum"] = text::format_double(momentum);
    kv["weight_decay"] = text::format_double(weight_decay);
    std::string decays;
    for (int d : decay_epochs()) decays += (decays.empty() ? "" : ",") + std::to_string(d);
    kv["lr_decay_epochs"] = decays;
    kv["lr_decay_factor"] = text::format_double(lr_decay_factor);
    kv["replay"] = std::to_string(replay);
    kv["shared_delta"] = shared_delta ? "true" : "false";
    kv["seed"] = std::to_string(seed);
    kv["threads"] = std::to_string(threads);
    return kv;
  }
};

using ParamMap = std::map<std::string, Tensor>;

/// v <- mu * v - (grad + wd * theta); theta <- theta + lr * v.
inline void sgd_momentum_step(DetectorParams& params, const ParamMap& grads, ParamMap& velocity, double lr,
                              double momentum, double weight_decay) {
  for (auto& [name, theta] : params.tensors) {
    auto g = grads.find(name);
    if (g == grads.end()) fail(ErrorCategory::state, "no gradient for layer '" + name + "'");
    if (g->second.shape != theta.shape) fail(ErrorCategory::shape, "gradient shape mismatch for layer '" + name + "'");
    for (double v : g->second.data) {
      if (!std::isfinite(v)) fail(ErrorCategory::numeric, "non-finite gradient in layer '" + name + "'");
    }
    Tensor& vel = velocity[name];
    if (vel.shape != theta.shape) vel = Tensor(theta.shape);
    for (std::size_t i = 0; i < theta.data.size(); ++i) {
      vel.data[i] = momentum * vel.data[i] - (g->second.data[i] + weight_decay * theta.data[i]);
      theta.data[i] += lr * vel.data[i];
    }
  }
}

/// One log record per minibatch.
struct StepRecord {
  int epoch = 0;        // epoch-equivalent at the start of the minibatch
  int outer_epoch = 0;  // fast training: replay pass index; otherwise = epoch
  std::size_t minibatch = 0;
  std::size_t step = 0;  // theta updates performed so far in the run
  double loss = 0.0;     // mean training loss over the minibatch's updates
  double grad_norm = 0.0;
  double lr = 0.0;
  std::size_t backprops = 0;
  std::size_t delta_updates = 0;
  std::size_t theta_updates = 0;
  double max_abs_delta = 0.0;  // largest |x' - x| among the trained inputs

  nlohmann::json to_json() const {
    return {{"epoch", epoch},         {"outer_epoch", outer_epoch},     {"minibatch", minibatch},
            {"step", step},           {"loss", loss},                   {"grad_norm", grad_norm},
            {"lr", lr},               {"backprops", backprops},         {"delta_updates", delta_updates},
            {"theta_updates", theta_updates}, {"max_abs_delta", max_abs_delta}};
  }
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<std::string> checkpoints;

  std::string to_jsonl() const {
    std::string out;
    for (const auto& s : steps) out += s.to_json().dump() + "\n";
    for (const auto& c : checkpoints) out += nlohmann::json{{"checkpoint", c}}.dump() + "\n";
    return out;
  }

  void write(const std::string& path) const {
    std::ofstream out(path);
    if (!out) fail(ErrorCategory::io, "cannot write " + path);
    out << to_jsonl();
  }
};

/// Everything needed to continue a run bit-identically.
struct TrainState {
  DetectorParams params;
  ParamMap velocity;
  /// Fast training: one perturbation per image, or a single shared one.
  std::vector<std::vector<double>> deltas;
  int epochs_done = 0;  // epoch-equivalents
  std::size_t updates = 0;
};

struct TrainResult {
  TrainState state;
  TrainLog log;
};

/// Called after every completed (outer) epoch.
using EpochCallback = std::function<void(const TrainState&, TrainLog&)>;

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32), static_cast<std::uint32_t>(b),
                    static_cast<std::uint32_t>(b >> 32), static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(c >> 32)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

struct ImageGrad {
  ParamMap params;
  std::vector<double> pixels;  // gradient of the perturbation objective, if requested
  double loss = 0.0;
};

struct TrainContext {
  const DetectorConfig& config;
  const AnchorGrid grid;
  std::vector<MatchResult> matches;
};

// Training loss (total over OHEM-selected anchors of the trained input) and
// its parameter gradient; optionally also d(perturbation objective)/d(pixels)
// from the same forward pass.
inline ImageGrad image_gradients(const TrainContext& ctx, const DetectorParams& params, const MatchResult& match,
                                 const Annotation& truth, const ImageTensor& input, const TrainConfig& tc,
                                 std::optional<Objective> pixel_objective) {
  ScoredPass s = score_image(ctx.config, params, ctx.grid, match, truth, input, tc.attack.ohem_ratio);
  ad::Graph& g = s.pass.net.graph;
  const bool has_pos = !match.positive.empty();
  const ad::NodeId loss = has_pos ? add_objective(g, s.pass.net.logits, s.pass.net.offsets, s.selected, Objective::total,
                                                  tc.attack.thresholds, tc.attack.loss_options)
                                  : add_negatives_only(g, s.pass.net.logits, s.pass.net.offsets, s.selected);
  std::optional<ad::NodeId> pix;
  if (pixel_objective && has_pos) {
    pix = add_objective(g, s.pass.net.logits, s.pass.net.offsets, s.selected, *pixel_objective, tc.attack.thresholds,
                        tc.attack.loss_options);
  }
  s.pass.extend();
  ImageGrad out;
  out.loss = s.pass.values[loss].item();
  const ad::GradientMap grads = ad::backward(g, loss, s.pass.values, s.pass.net.param_nodes());
  for (const auto& [name, id] : s.pass.net.params) out.params[name] = grads.at(id);
  if (pixel_objective) {
    if (pix) {
      const ad::GradientMap pg = ad::backward(g, *pix, s.pass.values, {s.pass.net.image});
      out.pixels = input_gradient_to_pixels(pg.at(s.pass.net.image), input);
    } else {
      out.pixels.assign(input.pixels.size(), 0.0);
    }
  }
  return out;
}

// Mean of per-image gradients, summed in index order.
inline ParamMap average(const std::vector<ImageGrad>& per_image) {
  ParamMap out = per_image.front().params;
  for (std::size_t i = 1; i < per_image.size(); ++i) {
    for (auto& [name, t] : out) {
      const Tensor& o = per_image[i].params.at(name);
      for (std::size_t k = 0; k < t.data.size(); ++k) t.data[k] += o.data[k];
    }
  }
  const double inv = 1.0 / static_cast<double>(per_image.size());
  for (auto& [name, t] : out) for (double& v : t.data) v *= inv;
  return out;
}

inline double grad_norm(const ParamMap& g) {
  double s = 0.0;
  for (const auto& [name, t] : g) for (double v : t.data) s += v * v;
  return std::sqrt(s);
}

inline double max_abs_diff(const ImageTensor& a, const ImageTensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) m = std::max(m, std::abs(a.pixels[i] - b.pixels[i]));
  return m;
}

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(epoch), 0x5eed));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

inline std::vector<std::vector<std::size_t>> minibatches(const std::vector<std::size_t>& order, std::size_t size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < order.size(); b += size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + size)));
  }
  return out;
}

}  // namespace detail

/// Trains according to `tc.mode`. `start` resumes a run (epochs_done > 0) or
/// fine-tunes from given weights (epochs_done = 0); otherwise weights are
/// initialized from `tc.seed`.
inline TrainResult train(const DetectorConfig& config, const Dataset& data, const TrainConfig& tc,
                         std::optional<TrainState> start = std::nullopt, const EpochCallback& on_epoch = {}) {
  config.validate();
  tc.validate();
  if (data.empty()) fail(ErrorCategory::data, "training set is empty");
  for (const Sample& s : data.samples) {
    if (s.image.mean_shift.empty()) fail(ErrorCategory::state, "training images carry no mean shift");
  }
  const bool fast = tc.mode == TrainMode::fast_cwat;
  const int per_pass = fast ? tc.replay : 1;

  TrainResult result;
  TrainState& st = result.state;
  if (start) {
    st = std::move(*start);
    check_params(config, st.params);
    if (st.epochs_done % per_pass != 0) fail(ErrorCategory::state, "resume point is not at a replay-pass boundary");
    if (st.epochs_done > tc.epochs) fail(ErrorCategory::state, "checkpoint is past the configured epochs");
  } else {
    st.params = init_params(config, tc.seed);
  }
  if (fast) {
    const std::size_t want = tc.shared_delta ? 1 : data.size();
    const std::size_t len = data.samples.front().image.pixels.size();
    if (st.deltas.empty()) st.deltas.assign(want, std::vector<double>(len, 0.0));
    if (st.deltas.size() != want) fail(ErrorCategory::state, "stored perturbations do not match the training set");
  }

  detail::TrainContext ctx{config, generate_anchors(config), {}};
  for (const Sample& s : data.samples) ctx.matches.push_back(match_anchors(ctx.grid, s.truth, config.match_iou));

  const std::size_t batches = (data.size() + tc.batch_size - 1) / tc.batch_size;
  const std::size_t threads = resolve_threads(tc.threads);

  AttackSpec attack = tc.attack;
  attack.objective = attack_objective(tc.mode);
  attack.kind = tc.mode == TrainMode::mtd ? AttackKind::mda : AttackKind::pgd;

  while (st.epochs_done < tc.epochs) {
    const int outer = st.epochs_done / per_pass;
    const auto order = detail::epoch_order(data.size(), tc.seed, outer);
    const auto mbs = detail::minibatches(order, tc.batch_size);
    for (std::size_t b = 0; b < mbs.size(); ++b) {
      const auto& idx = mbs[b];
      StepRecord rec;
      rec.epoch = static_cast<int>(st.updates / batches);
      rec.outer_epoch = outer;
      rec.minibatch = b;
      rec.lr = tc.lr_at(rec.epoch);

      if (!fast) {
        std::vector<ImageTensor> inputs(idx.size());
        std::vector<std::size_t> passes(idx.size(), 0);
        parallel_for(idx.size(), threads, [&](std::size_t i) {
          const Sample& s = data.samples[idx[i]];
          if (tc.mode == TrainMode::standard) {
            inputs[i] = s.image;
            return;
          }
          AttackSpec a = attack;
          a.seed = detail::mix_seed(tc.seed, static_cast<std::uint64_t>(st.updates), idx[i]);
          AttackResult r = run_attack(config, st.params, s.image, s.truth, a);
          passes[i] = r.gradient_passes;
          inputs[i] = std::move(r.image);
        });
        std::vector<detail::ImageGrad> grads(idx.size());
        parallel_for(idx.size(), threads, [&](std::size_t i) {
          grads[i] = detail::image_gradients(ctx, st.params, ctx.matches[idx[i]], data.samples[idx[i]].truth, inputs[i],
                                             tc, std::nullopt);
        });
        const ParamMap g = detail::average(grads);
        sgd_momentum_step(st.params, g, st.velocity, rec.lr, tc.momentum, tc.weight_decay);
        ++st.updates;
        for (std::size_t i = 0; i < idx.size(); ++i) {
          rec.loss += grads[i].loss / static_cast<double>(idx.size());
          rec.max_abs_delta = std::max(rec.max_abs_delta, detail::max_abs_diff(inputs[i], data.samples[idx[i]].image));
        }
        rec.grad_norm = detail::grad_norm(g);
        // A batched pass counts once: attack passes, then the update.
        rec.backprops = *std::max_element(passes.begin(), passes.end()) + 1;
        rec.theta_updates = 1;
      } else {
        for (int j = 0; j < tc.replay; ++j) {
          const double lr = tc.lr_at(static_cast<int>(st.updates / batches));
          std::vector<ImageTensor> inputs(idx.size());
          for (std::size_t i = 0; i < idx.size(); ++i) {
            const ImageTensor& x = data.samples[idx[i]].image;
            if (tc.shared_delta) {
              inputs[i] = x;
              const auto& d = st.deltas.front();
              for (std::size_t p = 0; p < x.pixels.size(); ++p) {
                inputs[i].pixels[p] = std::clamp(x.pixels[p] + d[p], 0.0, kPixelMax);
              }
            } else {
              inputs[i] = apply_perturbation(x, st.deltas[idx[i]]);
            }
            rec.max_abs_delta = std::max(rec.max_abs_delta, detail::max_abs_diff(inputs[i], x));
          }
          std::vector<detail::ImageGrad> grads(idx.size());
          parallel_for(idx.size(), threads, [&](std::size_t i) {
            grads[i] = detail::image_gradients(ctx, st.params, ctx.matches[idx[i]], data.samples[idx[i]].truth,
                                               inputs[i], tc, Objective::class_wise);
          });
          // Theta: momentum step on the total loss at x + delta.
          const ParamMap g = detail::average(grads);
          sgd_momentum_step(st.params, g, st.velocity, lr, tc.momentum, tc.weight_decay);
          ++st.updates;
          // Delta: signed step of size epsilon on the class-wise gradient, then projection.
          const double eps = tc.attack.epsilon;
          if (tc.shared_delta) {
            auto& d = st.deltas.front();
            for (std::size_t p = 0; p < d.size(); ++p) {
              double s = 0.0;
              for (const auto& gi : grads) s += gi.pixels[p];
              d[p] = std::clamp(d[p] + eps * sign(s / static_cast<double>(grads.size())), -eps, eps);
            }
          } else {
            for (std::size_t i = 0; i < idx.size(); ++i) {
              auto& d = st.deltas[idx[i]];
              for (std::size_t p = 0; p < d.size(); ++p) d[p] += eps * sign(grads[i].pixels[p]);
              d = project_linf(std::move(d), eps, data.samples[idx[i]].image);
            }
          }
          for (const auto& gi : grads) rec.loss += gi.loss / static_cast<double>(grads.size() * tc.replay);
          rec.grad_norm = detail::grad_norm(g);
          rec.backprops += 2;
          ++rec.delta_updates;
          ++rec.theta_updates;
        }
      }
      rec.step = st.updates;
      result.log.steps.push_back(rec);
    }
    st.epochs_done += per_pass;
    if (on_epoch) on_epoch(st, result.log);
  }
  return result;
}

inline TrainResult train_standard(const DetectorConfig& config, const Dataset& data, TrainConfig tc,
                                  std::optional<TrainState> start = std::nullopt, const EpochCallback& cb = {}) {
  tc.mode = TrainMode::standard;
  return train(config, data, tc, std::move(start), cb);
}

inline TrainResult train_pgd_at(const DetectorConfig& config, const Dataset& data, TrainConfig tc,
                                std::optional<TrainState> start = std::nullopt, const EpochCallback& cb = {}) {
  if (tc.mode == TrainMode::standard || tc.mode == TrainMode::fast_cwat) {
    fail(ErrorCategory::config, "PGD adversarial training needs mode toat, owat, cwat or mtd");
  }
  return train(config, data, tc, std::move(start), cb);
}

inline TrainResult train_fast_cwat(const DetectorConfig& config, const Dataset& data, TrainConfig tc,
                                   std::optional<TrainState> start = std::nullopt, const EpochCallback& cb = {}) {
  tc.mode = TrainMode::fast_cwat;
  return train(config, data, tc, std::move(start), cb);
}

}  // namespace cwat
