#pragma once

// Compact anchor-based one-stage detector: strided conv backbone, 3x3
// class/offset heads on selected feature maps, SSD-style matching.

#include <algorithm>
#include <bit>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cwat/autodiff.hpp"
#include "cwat/box.hpp"
#include "cwat/data.hpp"
#include "cwat/error.hpp"
#include "cwat/text.hpp"

namespace cwat {

struct DetectorConfig {
  std::size_t input_size = 64;
  int num_classes = 3;  // foreground classes; index 0 is background
  std::size_t channels = 3;
  std::vector<int> feature_strides{8, 16};
  std::vector<std::vector<double>> anchor_scales{{12, 20}, {32}};
  /// One stride-2 3x3 conv per entry; layer l has cumulative stride 2^(l+1).
  std::vector<int> backbone_channels{16, 32, 32, 32};
  double nms_iou = 0.45;
  double score_threshold = 0.05;
  double match_iou = 0.5;
  double input_scale = 1.0 / 64.0;

  std::size_t num_outputs() const { return static_cast<std::size_t>(num_classes) + 1; }

  /// Backbone layer feeding the head for feature stride `stride`.
  std::size_t layer_for_stride(int stride) const {
    const int layer = std::countr_zero(static_cast<unsigned>(stride)) - 1;
    return static_cast<std::size_t>(layer);
  }

  void validate() const {
    auto bad = [](const std::string& msg) { fail(ErrorCategory::config, "detector: " + msg); };
    if (input_size == 0) bad("input_size must be positive");
    if (num_classes < 1) bad("num_classes must be >= 1");
    if (channels == 0) bad("channels must be positive");
    if (feature_strides.empty()) bad("at least one feature stride is required");
    if (anchor_scales.size() != feature_strides.size()) bad("anchor_scales needs one list per stride");
    if (backbone_channels.empty()) bad("backbone_channels is empty");
    for (int c : backbone_channels) if (c <= 0) bad("backbone channel counts must be positive");
    for (std::size_t i = 0; i < feature_strides.size(); ++i) {
      const int s = feature_strides[i];
      if (s < 2 || !std::has_single_bit(static_cast<unsigned>(s))) bad("feature strides must be powers of two >= 2");
      if (input_size % static_cast<std::size_t>(s)) bad("input_size must be divisible by every feature stride");
      if (layer_for_stride(s) >= backbone_channels.size()) bad("stride " + std::to_string(s) + " is deeper than the backbone");
      if (anchor_scales[i].empty()) bad("every stride needs at least one anchor scale");
      for (double a : anchor_scales[i]) if (!(a > 0)) bad("anchor scales must be positive");
    }
    if (!(nms_iou > 0 && nms_iou < 1)) bad("nms_iou must be in (0,1)");
    if (!(score_threshold > 0 && score_threshold < 1)) bad("score_threshold must be in (0,1)");
    if (!(match_iou > 0 && match_iou < 1)) bad("match_iou must be in (0,1)");
    if (!(input_scale > 0)) bad("input_scale must be positive");
  }

  text::KeyValues echo() const {
    auto ints = [](const std::vector<int>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
      return s;
    };
    std::string scales;
    for (std::size_t i = 0; i < anchor_scales.size(); ++i) {
      if (i) scales += ";";
      scales += text::join_doubles(anchor_scales[i]);
    }
    return {
        {"input_size", std::to_string(input_size)},
        {"num_classes", std::to_string(num_classes)},
        {"channels", std::to_string(channels)},
        {"feature_strides", ints(feature_strides)},
        {"anchor_scales", scales},
        {"backbone_channels", ints(backbone_channels)},
        {"nms_iou", text::format_double(nms_iou)},
        {"score_threshold", text::format_double(score_threshold)},
        {"match_iou", text::format_double(match_iou)},
        {"input_scale", text::format_double(input_scale)},
    };
  }

  friend bool operator==(const DetectorConfig&, const DetectorConfig&) = default;
};

namespace detail {

inline std::vector<int> parse_int_list(const std::string& key, const std::string& s) {
  std::vector<int> out;
  for (const std::string& t : text::split(s, ',')) {
    const auto v = text::try_parse_int(t);
    if (!v) fail(ErrorCategory::config, key + ": expected integer list, got '" + s + "'");
    out.push_back(static_cast<int>(*v));
  }
  return out;
}

inline std::vector<double> parse_double_list(const std::string& key, const std::string& s) {
  std::vector<double> out;
  if (text::trim(s).empty()) return out;
  for (const std::string& t : text::split(s, ',')) {
    const auto v = text::try_parse_double(t);
    if (!v) fail(ErrorCategory::config, key + ": expected number list, got '" + s + "'");
    out.push_back(*v);
  }
  return out;
}

}  // namespace detail

/// Applies "key = value" entries on top of `base`; unknown keys are errors.
inline DetectorConfig detector_config_from(const text::KeyValues& kv, DetectorConfig base = {}) {
  for (const auto& [key, value] : kv) {
    auto num = [&] {
      const auto v = text::try_parse_double(value);
      if (!v) fail(ErrorCategory::config, "detector." + key + ": expected a number, got '" + value + "'");
      return *v;
    };
    auto integer = [&] {
      const auto v = text::try_parse_int(value);
      if (!v || *v < 0) fail(ErrorCategory::config, "detector." + key + ": expected a nonnegative integer");
      return *v;
    };
    if (key == "input_size") base.input_size = static_cast<std::size_t>(integer());
    else if (key == "num_classes") base.num_classes = static_cast<int>(integer());
    else if (key == "channels") base.channels = static_cast<std::size_t>(integer());
    else if (key == "feature_strides") base.feature_strides = detail::parse_int_list(key, value);
    else if (key == "anchor_scales") {
      base.anchor_scales.clear();
      for (const std::string& group : text::split(value, ';'))
        base.anchor_scales.push_back(detail::parse_double_list(key, group));
    } else if (key == "backbone_channels") base.backbone_channels = detail::parse_int_list(key, value);
    else if (key == "nms_iou") base.nms_iou = num();
    else if (key == "score_threshold") base.score_threshold = num();
    else if (key == "match_iou") base.match_iou = num();
    else if (key == "input_scale") base.input_scale = num();
    else fail(ErrorCategory::config, "unknown detector key '" + key + "'");
  }
  base.validate();
  return base;
}

struct AnchorGrid {
  std::vector<CenterBox> anchors;
  std::size_t size() const { return anchors.size(); }
};

/// Row-major over (stride, cell y, cell x, scale).
inline AnchorGrid generate_anchors(const DetectorConfig& config) {
  config.validate();
  AnchorGrid grid;
  for (std::size_t i = 0; i < config.feature_strides.size(); ++i) {
    const double stride = config.feature_strides[i];
    const std::size_t cells = config.input_size / static_cast<std::size_t>(config.feature_strides[i]);
    for (std::size_t y = 0; y < cells; ++y)
      for (std::size_t x = 0; x < cells; ++x)
        for (double scale : config.anchor_scales[i])
          grid.anchors.push_back({(x + 0.5) * stride, (y + 0.5) * stride, scale, scale});
  }
  return grid;
}

struct MatchResult {
  std::map<std::size_t, std::size_t> positive;  // anchor -> ground-truth index
  std::vector<std::size_t> negatives;
  std::vector<double> per_anchor_iou;  // best IoU over ground truths

  std::size_t num_positive() const { return positive.size(); }
};

/// Each ground truth first claims its best free anchor (greedy bipartite,
/// ties to the lowest anchor index); then every other anchor whose best IoU
/// exceeds the threshold becomes positive for that ground truth.
inline MatchResult match_anchors(const AnchorGrid& grid, const Annotation& truth, double iou_threshold) {
  if (!(iou_threshold > 0 && iou_threshold < 1)) fail(ErrorCategory::config, "match threshold must be in (0,1)");
  const std::size_t n = grid.size();
  const std::size_t g = truth.size();
  MatchResult result;
  result.per_anchor_iou.assign(n, 0.0);
  std::vector<double> overlap(g * n);
  for (std::size_t j = 0; j < g; ++j) {
    if (!truth.boxes[j].valid()) fail(ErrorCategory::data, "ground truth " + std::to_string(j) + " has zero area");
    for (std::size_t a = 0; a < n; ++a) {
      overlap[j * n + a] = iou(to_corners(grid.anchors[a]), truth.boxes[j]);
      result.per_anchor_iou[a] = std::max(result.per_anchor_iou[a], overlap[j * n + a]);
    }
  }

  std::vector<char> gt_done(g, 0);
  for (std::size_t round = 0; round < std::min(g, n); ++round) {
    double best = -1.0;
    std::size_t best_a = 0, best_g = 0;
    for (std::size_t a = 0; a < n; ++a) {
      if (result.positive.count(a)) continue;
      for (std::size_t j = 0; j < g; ++j) {
        if (gt_done[j]) continue;
        if (overlap[j * n + a] > best) {
          best = overlap[j * n + a];
          best_a = a;
          best_g = j;
        }
      }
    }
    result.positive[best_a] = best_g;
    gt_done[best_g] = 1;
  }

  for (std::size_t a = 0; a < n; ++a) {
    if (result.positive.count(a)) continue;
    double best = iou_threshold;
    std::optional<std::size_t> owner;
    for (std::size_t j = 0; j < g; ++j) {
      if (overlap[j * n + a] > best) {
        best = overlap[j * n + a];
        owner = j;
      }
    }
    if (owner) result.positive[a] = *owner;
    else result.negatives.push_back(a);
  }
  return result;
}

/// Weight arrays keyed by layer name.
struct DetectorParams {
  std::map<std::string, Tensor> tensors;

  const Tensor& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) fail(ErrorCategory::state, "missing parameter '" + name + "'");
    return it->second;
  }

  friend bool operator==(const DetectorParams&, const DetectorParams&) = default;
};

namespace detail {

struct LayerSpec {
  std::string name;
  Shape weight_shape;
};

inline std::vector<LayerSpec> layer_specs(const DetectorConfig& config) {
  std::vector<LayerSpec> out;
  std::size_t in = config.channels;
  for (std::size_t l = 0; l < config.backbone_channels.size(); ++l) {
    const auto c = static_cast<std::size_t>(config.backbone_channels[l]);
    out.push_back({"backbone." + std::to_string(l), {c, in, 3, 3}});
    in = c;
  }
  for (std::size_t i = 0; i < config.feature_strides.size(); ++i) {
    const std::size_t l = config.layer_for_stride(config.feature_strides[i]);
    const auto feat = static_cast<std::size_t>(config.backbone_channels[l]);
    const std::size_t a = config.anchor_scales[i].size();
    out.push_back({"head." + std::to_string(i) + ".cls", {a * config.num_outputs(), feat, 3, 3}});
    out.push_back({"head." + std::to_string(i) + ".reg", {a * 4, feat, 3, 3}});
  }
  return out;
}

}  // namespace detail

/// He-normal weights, zero biases.
inline DetectorParams init_params(const DetectorConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  DetectorParams params;
  for (const auto& layer : detail::layer_specs(config)) {
    const auto fan_in = static_cast<double>(layer.weight_shape[1] * 9);
    const bool head = layer.name.rfind("head.", 0) == 0;
    // Heads start small so initial outputs sit near the uniform prediction.
    const double sd = head ? 0.5 / std::sqrt(fan_in) : std::sqrt(2.0 / fan_in);
    std::normal_distribution<double> normal(0.0, sd);
    Tensor w(layer.weight_shape);
    for (double& v : w.data) v = normal(rng);
    params.tensors[layer.name + ".weight"] = std::move(w);
    params.tensors[layer.name + ".bias"] = Tensor({layer.weight_shape[0]});
  }
  return params;
}

/// All weights and biases zero.
inline DetectorParams zero_params(const DetectorConfig& config) {
  DetectorParams params = init_params(config, 0);
  for (auto& [name, t] : params.tensors) std::fill(t.data.begin(), t.data.end(), 0.0);
  return params;
}

inline void check_params(const DetectorConfig& config, const DetectorParams& params) {
  for (const auto& layer : detail::layer_specs(config)) {
    const Tensor& w = params.at(layer.name + ".weight");
    const Tensor& b = params.at(layer.name + ".bias");
    if (w.shape != layer.weight_shape || b.shape != Shape{layer.weight_shape[0]}) {
      fail(ErrorCategory::shape, "parameter '" + layer.name + "' has shape " + to_string(w.shape) +
                                     ", expected " + to_string(layer.weight_shape));
    }
  }
}

struct DetectorGraph {
  ad::Graph graph;
  ad::NodeId image = 0;  // (C, H, W), mean-shifted pixels
  std::map<std::string, ad::NodeId> params;
  ad::NodeId logits = 0;   // (N, C+1)
  ad::NodeId offsets = 0;  // (N, 4)
  std::size_t num_anchors = 0;

  std::vector<ad::NodeId> param_nodes() const {
    std::vector<ad::NodeId> out;
    for (const auto& [name, id] : params) out.push_back(id);
    return out;
  }
};

namespace detail {

// Stacks row blocks into one (rows, cols) node with constant placement
// matrices, since the primitive set has no concatenation.
inline ad::NodeId stack_rows(ad::Graph& g, const std::vector<ad::NodeId>& blocks) {
  if (blocks.size() == 1) return blocks.front();
  std::size_t rows = 0;
  for (ad::NodeId b : blocks) rows += g.shape(b)[0];
  std::optional<ad::NodeId> acc;
  std::size_t offset = 0;
  for (ad::NodeId b : blocks) {
    const std::size_t n = g.shape(b)[0];
    Tensor place({rows, n});
    for (std::size_t i = 0; i < n; ++i) place[(offset + i) * n + i] = 1.0;
    const ad::NodeId part = g.matmul(g.constant(std::move(place)), b);
    acc = acc ? g.add(*acc, part) : part;
    offset += n;
  }
  return *acc;
}

}  // namespace detail

inline DetectorGraph build_detector_graph(const DetectorConfig& config) {
  config.validate();
  DetectorGraph net;
  ad::Graph& g = net.graph;
  net.image = g.input("image", {config.channels, config.input_size, config.input_size});
  for (const auto& layer : detail::layer_specs(config)) {
    net.params[layer.name + ".weight"] = g.parameter(layer.name + ".weight", layer.weight_shape);
    net.params[layer.name + ".bias"] = g.parameter(layer.name + ".bias", {layer.weight_shape[0]});
  }
  std::vector<ad::NodeId> features;
  ad::NodeId x = g.scale(net.image, config.input_scale);
  for (std::size_t l = 0; l < config.backbone_channels.size(); ++l) {
    const std::string name = "backbone." + std::to_string(l);
    x = g.relu(g.conv2d(x, net.params[name + ".weight"], net.params[name + ".bias"], 2, 1));
    features.push_back(x);
  }
  std::vector<ad::NodeId> cls_blocks, reg_blocks;
  const std::size_t k = config.num_outputs();
  for (std::size_t i = 0; i < config.feature_strides.size(); ++i) {
    const ad::NodeId feat = features[config.layer_for_stride(config.feature_strides[i])];
    const std::size_t cells = config.input_size / static_cast<std::size_t>(config.feature_strides[i]);
    const std::size_t n = cells * cells * config.anchor_scales[i].size();
    const std::string head = "head." + std::to_string(i);
    // Channels-last output makes the (cell, scale) x outputs layout a plain reshape.
    const ad::NodeId cls = g.conv2d(feat, net.params[head + ".cls.weight"], net.params[head + ".cls.bias"], 1, 1, true);
    const ad::NodeId reg = g.conv2d(feat, net.params[head + ".reg.weight"], net.params[head + ".reg.bias"], 1, 1, true);
    cls_blocks.push_back(g.reshape(cls, {n, k}));
    reg_blocks.push_back(g.reshape(reg, {n, 4}));
    net.num_anchors += n;
  }
  net.logits = detail::stack_rows(g, cls_blocks);
  net.offsets = detail::stack_rows(g, reg_blocks);
  return net;
}

/// Mean-shifted pixels in (C, H, W) layout.
inline Tensor network_input(const ImageTensor& image) {
  if (image.mean_shift.size() != image.channels) {
    fail(ErrorCategory::state, "image has no per-channel mean shift");
  }
  Tensor out({image.channels, image.height, image.width});
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x)
      for (std::size_t c = 0; c < image.channels; ++c)
        out[(c * image.height + y) * image.width + x] = image.at(y, x, c) - image.mean_shift[c];
  return out;
}

/// Maps a (C, H, W) input gradient back to the image's H x W x C layout.
inline std::vector<double> input_gradient_to_pixels(const Tensor& grad, const ImageTensor& like) {
  std::vector<double> out(like.pixels.size());
  for (std::size_t y = 0; y < like.height; ++y)
    for (std::size_t x = 0; x < like.width; ++x)
      for (std::size_t c = 0; c < like.channels; ++c)
        out[like.index(y, x, c)] = grad[(c * like.height + y) * like.width + x];
  return out;
}

inline ad::Bindings bind(const DetectorGraph& net, const DetectorParams& params, const ImageTensor& image) {
  const Shape& expected = net.graph.shape(net.image);
  if (image.height != expected[1] || image.width != expected[2] || image.channels != expected[0]) {
    fail(ErrorCategory::shape, "image " + std::to_string(image.height) + "x" + std::to_string(image.width) + "x" +
                                   std::to_string(image.channels) + " does not match detector input " +
                                   to_string(net.graph.shape(net.image)));
  }
  ad::Bindings b;
  b.emplace(net.image, network_input(image));
  for (const auto& [name, id] : net.params) b.emplace(id, params.at(name));
  return b;
}

/// A detector graph evaluated on one image; loss nodes can be appended and
/// evaluated incrementally with ad::forward_extend.
struct ForwardPass {
  DetectorGraph net;
  ad::Bindings bindings;
  ad::Values values;

  const Tensor& logits() const { return values[net.logits]; }
  const Tensor& offsets() const { return values[net.offsets]; }
  void extend() { ad::forward_extend(net.graph, bindings, values); }
};

inline ForwardPass run_forward(const DetectorConfig& config, const DetectorParams& params, const ImageTensor& image) {
  ForwardPass pass{build_detector_graph(config), {}, {}};
  pass.bindings = bind(pass.net, params, image);
  pass.values = ad::forward(pass.net.graph, pass.bindings);
  return pass;
}

struct RawOutputs {
  Tensor logits;   // (num_anchors, C+1)
  Tensor offsets;  // (num_anchors, 4)
};

inline RawOutputs forward_raw(const DetectorConfig& config, const DetectorParams& params, const ImageTensor& image) {
  ForwardPass pass = run_forward(config, params, image);
  return {pass.logits(), pass.offsets()};
}

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0.0;
};

inline std::vector<double> softmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t k = logits.shape[1];
  const double* z = logits.data.data() + row * k;
  const double zmax = *std::max_element(z, z + k);
  std::vector<double> p(k);
  double s = 0.0;
  for (std::size_t j = 0; j < k; ++j) s += (p[j] = std::exp(z[j] - zmax));
  for (double& v : p) v /= s;
  return p;
}

/// Greedy NMS over indices sorted by score (ties to the lower index).
/// Returns survivors in descending score order.
inline std::vector<std::size_t> nms(const std::vector<Box>& boxes, const std::vector<double>& scores, double iou_threshold) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> keep;
  for (std::size_t i : order) {
    const bool suppressed = std::any_of(keep.begin(), keep.end(), [&](std::size_t k) {
      return iou(boxes[i], boxes[k]) > iou_threshold;
    });
    if (!suppressed) keep.push_back(i);
  }
  return keep;
}

/// Per class: threshold softmax scores, decode, NMS; merged by descending score.
inline std::vector<Detection> decode_detections(const DetectorConfig& config, const AnchorGrid& grid,
                                                const Tensor& logits, const Tensor& offsets) {
  if (logits.shape != Shape{grid.size(), config.num_outputs()} || offsets.shape != Shape{grid.size(), 4}) {
    fail(ErrorCategory::shape, "detector outputs do not match the anchor grid");
  }
  const auto image_size = static_cast<double>(config.input_size);
  std::vector<std::vector<double>> probs(grid.size());
  for (std::size_t a = 0; a < grid.size(); ++a) probs[a] = softmax_row(logits, a);

  std::vector<Detection> out;
  for (int c = 1; c <= config.num_classes; ++c) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (std::size_t a = 0; a < grid.size(); ++a) {
      const double score = probs[a][static_cast<std::size_t>(c)];
      if (!(score > config.score_threshold)) continue;
      const BoxOffsets t{offsets[a * 4], offsets[a * 4 + 1], offsets[a * 4 + 2], offsets[a * 4 + 3]};
      const Box box = to_corners(decode_box(grid.anchors[a], t, image_size));
      if (!box.valid()) continue;
      boxes.push_back(box);
      scores.push_back(score);
    }
    for (std::size_t i : nms(boxes, scores, config.nms_iou)) out.push_back({boxes[i], c, scores[i]});
  }
  std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return out;
}

inline std::vector<Detection> predict(const DetectorConfig& config, const DetectorParams& params, const ImageTensor& image) {
  const RawOutputs raw = forward_raw(config, params, image);
  return decode_detections(config, generate_anchors(config), raw.logits, raw.offsets);
}

}  // namespace cwat
