#pragma once

// Minimal reverse-mode differentiation over a closed set of primitives.
//
// A Graph is an append-only list of nodes in topological order. forward()
// evaluates every node given bindings for the parameter and input leaves;
// backward() returns d(loss)/d(leaf) for the requested leaves.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cwat/error.hpp"
#include "cwat/tensor.hpp"

namespace cwat::ad {

using NodeId = std::size_t;

enum class Op {
  constant,
  parameter,
  input,
  add,
  mul,
  matmul,
  conv2d,
  relu,
  maxpool2x2,
  reshape,
  softmax_ce,
  smooth_l1,
  clip_min_const,
  sum,
  scale,
};

inline std::string_view op_name(Op op) {
  switch (op) {
    case Op::constant: return "constant";
    case Op::parameter: return "parameter";
    case Op::input: return "input";
    case Op::add: return "add";
    case Op::mul: return "mul";
    case Op::matmul: return "matmul";
    case Op::conv2d: return "conv2d";
    case Op::relu: return "relu";
    case Op::maxpool2x2: return "maxpool2x2";
    case Op::reshape: return "reshape";
    case Op::softmax_ce: return "softmax_ce";
    case Op::smooth_l1: return "smooth_l1";
    case Op::clip_min_const: return "clip_min_const";
    case Op::sum: return "sum";
    case Op::scale: return "scale";
  }
  return "?";
}

struct Node {
  NodeId id = 0;
  Op op = Op::constant;
  std::vector<NodeId> parents;
  Shape shape;
  std::string name;          // parameter / input leaves
  double scalar = 0.0;       // scale factor or clip threshold
  int stride = 1;            // conv2d
  int pad = 0;               // conv2d
  bool channels_last = false;  // conv2d output layout (H, W, C)
  std::vector<int> labels;   // softmax_ce targets, one per row
  Tensor value;              // constants
};

inline std::string describe(const Node& n) {
  std::string s = "node " + std::to_string(n.id) + " (" +
                  std::string(op_name(n.op));
  if (!n.name.empty()) s += " '" + n.name + "'";
  return s + ")";
}

class Graph {
 public:
  NodeId constant(Tensor value) {
    Node n;
    n.op = Op::constant;
    n.shape = value.shape;
    n.value = std::move(value);
    return push(std::move(n));
  }

  NodeId parameter(std::string name, Shape shape) {
    return leaf(Op::parameter, std::move(name), std::move(shape));
  }

  NodeId input(std::string name, Shape shape) {
    return leaf(Op::input, std::move(name), std::move(shape));
  }

  NodeId add(NodeId a, NodeId b) { return binary(Op::add, a, b); }
  NodeId mul(NodeId a, NodeId b) { return binary(Op::mul, a, b); }

  NodeId matmul(NodeId a, NodeId b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
      shape_error("matmul", to_string(sa) + " x " + to_string(sb));
    }
    Node n;
    n.op = Op::matmul;
    n.parents = {a, b};
    n.shape = {sa[0], sb[1]};
    return push(std::move(n));
  }

  /// x: (C, H, W), weight: (O, C, k, k), optional bias: (O). Output is
  /// (O, Ho, Wo), or (Ho, Wo, O) when channels_last is set.
  NodeId conv2d(NodeId x, NodeId weight, std::optional<NodeId> bias,
                int stride, int pad, bool channels_last = false) {
    const Shape& sx = shape(x);
    const Shape& sw = shape(weight);
    if (sx.size() != 3 || sw.size() != 4 || sw[1] != sx[0] || sw[2] != sw[3]) {
      shape_error("conv2d", to_string(sx) + " * " + to_string(sw));
    }
    if (stride != 1 && stride != 2) shape_error("conv2d", "stride must be 1 or 2");
    if (pad < 0) shape_error("conv2d", "negative padding");
    const long k = static_cast<long>(sw[2]);
    const long ho = (static_cast<long>(sx[1]) + 2 * pad - k) / stride + 1;
    const long wo = (static_cast<long>(sx[2]) + 2 * pad - k) / stride + 1;
    if (ho <= 0 || wo <= 0) shape_error("conv2d", "kernel larger than padded input");
    Node n;
    n.op = Op::conv2d;
    n.parents = {x, weight};
    if (bias) {
      if (shape(*bias) != Shape{sw[0]}) shape_error("conv2d", "bias shape " + to_string(shape(*bias)));
      n.parents.push_back(*bias);
    }
    n.stride = stride;
    n.pad = pad;
    n.channels_last = channels_last;
    const auto uho = static_cast<std::size_t>(ho);
    const auto uwo = static_cast<std::size_t>(wo);
    n.shape = channels_last ? Shape{uho, uwo, sw[0]} : Shape{sw[0], uho, uwo};
    return push(std::move(n));
  }

  NodeId relu(NodeId x) { return unary(Op::relu, x); }
  NodeId smooth_l1(NodeId x) { return unary(Op::smooth_l1, x); }

  NodeId maxpool2x2(NodeId x) {
    const Shape& sx = shape(x);
    if (sx.size() != 3 || sx[1] % 2 || sx[2] % 2) {
      shape_error("maxpool2x2", to_string(sx));
    }
    Node n;
    n.op = Op::maxpool2x2;
    n.parents = {x};
    n.shape = {sx[0], sx[1] / 2, sx[2] / 2};
    return push(std::move(n));
  }

  NodeId reshape(NodeId x, Shape to) {
    if (numel(to) != numel(shape(x))) {
      shape_error("reshape", to_string(shape(x)) + " -> " + to_string(to));
    }
    Node n;
    n.op = Op::reshape;
    n.parents = {x};
    n.shape = std::move(to);
    return push(std::move(n));
  }

  /// Row-wise softmax cross-entropy: logits (N, K), one label per row.
  NodeId softmax_ce(NodeId logits, std::vector<int> labels) {
    const Shape& s = shape(logits);
    if (s.size() != 2 || labels.size() != s[0]) {
      shape_error("softmax_ce", to_string(s) + " with " +
                                    std::to_string(labels.size()) + " labels");
    }
    for (int l : labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= s[1]) {
        shape_error("softmax_ce", "label " + std::to_string(l) + " out of range");
      }
    }
    Node n;
    n.op = Op::softmax_ce;
    n.parents = {logits};
    n.shape = {s[0]};
    n.labels = std::move(labels);
    return push(std::move(n));
  }

  NodeId clip_min_const(NodeId x, double beta) {
    NodeId id = unary(Op::clip_min_const, x);
    nodes_[id].scalar = beta;
    return id;
  }

  NodeId sum(NodeId x) {
    require(x);
    Node n;
    n.op = Op::sum;
    n.parents = {x};
    n.shape = {};
    return push(std::move(n));
  }

  NodeId scale(NodeId x, double factor) {
    NodeId id = unary(Op::scale, x);
    nodes_[id].scalar = factor;
    return id;
  }

  const Node& node(NodeId id) const {
    require(id);
    return nodes_[id];
  }
  const Shape& shape(NodeId id) const { return node(id).shape; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<NodeId>& parameter_nodes() const { return parameters_; }
  const std::vector<NodeId>& input_nodes() const { return inputs_; }

  std::optional<NodeId> find(std::string_view name) const {
    for (NodeId id : parameters_)
      if (nodes_[id].name == name) return id;
    for (NodeId id : inputs_)
      if (nodes_[id].name == name) return id;
    return std::nullopt;
  }

 private:
  NodeId push(Node n) {
    n.id = nodes_.size();
    nodes_.push_back(std::move(n));
    return nodes_.back().id;
  }

  NodeId leaf(Op op, std::string name, Shape shape) {
    if (find(name)) {
      fail(ErrorCategory::state, "duplicate leaf name '" + name + "'");
    }
    Node n;
    n.op = op;
    n.name = std::move(name);
    n.shape = std::move(shape);
    NodeId id = push(std::move(n));
    (op == Op::parameter ? parameters_ : inputs_).push_back(id);
    return id;
  }

  NodeId unary(Op op, NodeId x) {
    Node n;
    n.op = op;
    n.parents = {x};
    n.shape = shape(x);
    return push(std::move(n));
  }

  // Elementwise with scalar broadcast: either operand may hold one value.
  NodeId binary(Op op, NodeId a, NodeId b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    Node n;
    n.op = op;
    n.parents = {a, b};
    if (sa == sb || numel(sb) == 1) {
      n.shape = sa;
    } else if (numel(sa) == 1) {
      n.shape = sb;
    } else {
      shape_error(std::string(op_name(op)), to_string(sa) + " vs " + to_string(sb));
    }
    return push(std::move(n));
  }

  void require(NodeId id) const {
    if (id >= nodes_.size()) {
      fail(ErrorCategory::state, "unknown node id " + std::to_string(id));
    }
  }

  [[noreturn]] void shape_error(const std::string& op, const std::string& detail) const {
    fail(ErrorCategory::shape, op + " at node " + std::to_string(nodes_.size()) +
                                   ": incompatible shapes " + detail);
  }

  std::vector<Node> nodes_;
  std::vector<NodeId> parameters_;
  std::vector<NodeId> inputs_;
};

using Bindings = std::unordered_map<NodeId, Tensor>;
using Values = std::vector<Tensor>;
using GradientMap = std::unordered_map<NodeId, Tensor>;

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

struct ConvGeometry {
  std::size_t channels, height, width, kernel, out_channels, out_h, out_w;
  int stride, pad;
  std::size_t patch() const { return channels * kernel * kernel; }
  std::size_t pixels() const { return out_h * out_w; }
};

inline ConvGeometry conv_geometry(const Graph& g, const Node& n) {
  const Shape& sx = g.shape(n.parents[0]);
  const Shape& sw = g.shape(n.parents[1]);
  ConvGeometry geo{sx[0], sx[1], sx[2], sw[2], sw[0], 0, 0, n.stride, n.pad};
  geo.out_h = n.channels_last ? n.shape[0] : n.shape[1];
  geo.out_w = n.channels_last ? n.shape[1] : n.shape[2];
  return geo;
}

// Patch matrix (C*k*k, Ho*Wo), zero outside the image.
inline void im2col(const ConvGeometry& g, const double* x, std::vector<double>& col) {
  col.assign(g.patch() * g.pixels(), 0.0);
  const long h = static_cast<long>(g.height);
  const long w = static_cast<long>(g.width);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx, ++row) {
        double* dst = col.data() + row * g.pixels();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(ky);
          if (iy < 0 || iy >= h) continue;
          const double* src = x + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox) * g.stride - g.pad + static_cast<long>(kx);
            if (ix >= 0 && ix < w) dst[oy * g.out_w + ox] = src[ix];
          }
        }
      }
    }
  }
}

inline void col2im_add(const ConvGeometry& g, const double* col, double* dx) {
  const long h = static_cast<long>(g.height);
  const long w = static_cast<long>(g.width);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx, ++row) {
        const double* src = col + row * g.pixels();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(ky);
          if (iy < 0 || iy >= h) continue;
          double* dst = dx + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox) * g.stride - g.pad + static_cast<long>(kx);
            if (ix >= 0 && ix < w) dst[ix] += src[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

inline double elem(const Tensor& t, std::size_t i) {
  return t.size() == 1 ? t.data[0] : t.data[i];
}

inline double smooth_l1(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

inline double smooth_l1_grad(double x) {
  if (std::abs(x) < 1.0) return x;
  return x > 0 ? 1.0 : -1.0;
}

// Index of the window maximum, first occurrence in row-major window order.
inline std::size_t pool_argmax(const double* x, std::size_t w, std::size_t oy, std::size_t ox) {
  std::size_t best = (2 * oy) * w + 2 * ox;
  for (std::size_t dy = 0; dy < 2; ++dy) {
    for (std::size_t dx = 0; dx < 2; ++dx) {
      const std::size_t idx = (2 * oy + dy) * w + 2 * ox + dx;
      if (x[idx] > x[best]) best = idx;
    }
  }
  return best;
}

inline void evaluate(const Graph& graph, const Node& n, Values& values) {
  auto in = [&](std::size_t i) -> const Tensor& { return values[n.parents[i]]; };
  Tensor out(n.shape);
  switch (n.op) {
    case Op::constant:
      out = n.value;
      break;
    case Op::parameter:
    case Op::input:
      return;  // bound by caller
    case Op::add:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = elem(in(0), i) + elem(in(1), i);
      break;
    case Op::mul:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = elem(in(0), i) * elem(in(1), i);
      break;
    case Op::matmul: {
      const Shape& sa = in(0).shape;
      const Shape& sb = in(1).shape;
      MapConstMat a(in(0).data.data(), sa[0], sa[1]);
      MapConstMat b(in(1).data.data(), sb[0], sb[1]);
      MapMat(out.data.data(), sa[0], sb[1]).noalias() = a * b;
      break;
    }
    case Op::conv2d: {
      const ConvGeometry g = conv_geometry(graph, n);
      std::vector<double> col;
      im2col(g, in(0).data.data(), col);
      MapConstMat w(in(1).data.data(), g.out_channels, g.patch());
      MapConstMat c(col.data(), g.patch(), g.pixels());
      if (n.channels_last) {
        MapMat o(out.data.data(), g.pixels(), g.out_channels);
        o.noalias() = c.transpose() * w.transpose();
        if (n.parents.size() == 3) {
          Eigen::Map<const Eigen::RowVectorXd> b(in(2).data.data(), g.out_channels);
          o.rowwise() += b;
        }
      } else {
        MapMat o(out.data.data(), g.out_channels, g.pixels());
        o.noalias() = w * c;
        if (n.parents.size() == 3) {
          Eigen::Map<const Eigen::VectorXd> b(in(2).data.data(), g.out_channels);
          o.colwise() += b;
        }
      }
      break;
    }
    case Op::relu:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, in(0)[i]);
      break;
    case Op::maxpool2x2: {
      const Shape& sx = in(0).shape;
      const std::size_t plane = sx[1] * sx[2];
      for (std::size_t c = 0; c < sx[0]; ++c) {
        const double* x = in(0).data.data() + c * plane;
        for (std::size_t oy = 0; oy < n.shape[1]; ++oy)
          for (std::size_t ox = 0; ox < n.shape[2]; ++ox)
            out[(c * n.shape[1] + oy) * n.shape[2] + ox] = x[pool_argmax(x, sx[2], oy, ox)];
      }
      break;
    }
    case Op::reshape:
      out.data = in(0).data;
      break;
    case Op::softmax_ce: {
      const std::size_t k = in(0).shape[1];
      for (std::size_t r = 0; r < n.shape[0]; ++r) {
        const double* z = in(0).data.data() + r * k;
        const double zmax = *std::max_element(z, z + k);
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += std::exp(z[j] - zmax);
        out[r] = zmax + std::log(s) - z[n.labels[r]];
      }
      break;
    }
    case Op::smooth_l1:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = smooth_l1(in(0)[i]);
      break;
    case Op::clip_min_const:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(in(0)[i], n.scalar);
      break;
    case Op::sum: {
      double s = 0.0;
      for (double v : in(0).data) s += v;
      out[0] = s;
      break;
    }
    case Op::scale:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = n.scalar * in(0)[i];
      break;
  }
  values[n.id] = std::move(out);
}

}  // namespace detail

/// Evaluates nodes [values.size(), graph.size()) in order. Lets callers append
/// loss nodes that depend on already-computed activations without recomputing.
inline void forward_extend(const Graph& graph, const Bindings& bindings, Values& values) {
  for (NodeId id = values.size(); id < graph.size(); ++id) {
    const Node& n = graph.node(id);
    values.emplace_back();
    if (n.op == Op::parameter || n.op == Op::input) {
      auto it = bindings.find(id);
      if (it == bindings.end()) {
        fail(ErrorCategory::state, describe(n) + " is unbound");
      }
      if (it->second.shape != n.shape) {
        fail(ErrorCategory::shape, describe(n) + " expects shape " + to_string(n.shape) +
                                       " but was bound to " + to_string(it->second.shape));
      }
      values[id] = it->second;
      continue;
    }
    detail::evaluate(graph, n, values);
  }
}

inline Values forward(const Graph& graph, const Bindings& bindings) {
  Values values;
  values.reserve(graph.size());
  forward_extend(graph, bindings, values);
  return values;
}

/// Gradients of a scalar node with respect to the leaves in `wrt` (all
/// parameter and input leaves when empty). Fan-out accumulates additively.
inline GradientMap backward(const Graph& graph, NodeId loss, const Values& values,
                            const std::vector<NodeId>& wrt = {}) {
  if (loss >= values.size()) {
    fail(ErrorCategory::state, "loss node " + std::to_string(loss) + " has no forward value");
  }
  if (numel(graph.shape(loss)) != 1) {
    fail(ErrorCategory::shape, "loss " + describe(graph.node(loss)) + " is not scalar: shape " +
                                   to_string(graph.shape(loss)));
  }

  std::vector<char> needs(loss + 1, 0);
  if (wrt.empty()) {
    for (NodeId id : graph.parameter_nodes()) if (id <= loss) needs[id] = 1;
    for (NodeId id : graph.input_nodes()) if (id <= loss) needs[id] = 1;
  } else {
    for (NodeId id : wrt) if (id <= loss) needs[id] = 1;
  }
  for (NodeId id = 0; id <= loss; ++id) {
    for (NodeId p : graph.node(id).parents) needs[id] = needs[id] || needs[p];
  }

  std::vector<Tensor> grads(loss + 1);
  grads[loss] = Tensor(graph.shape(loss), 1.0);

  auto acc = [&](NodeId p) -> Tensor& {
    if (grads[p].data.empty()) grads[p] = Tensor(graph.shape(p));
    return grads[p];
  };
  auto add_broadcast = [&](NodeId p, const Tensor& g, auto&& scale_at) {
    Tensor& dst = acc(p);
    if (dst.size() == 1 && g.size() != 1) {
      double s = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * scale_at(i);
      dst[0] += s;
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * scale_at(i);
    }
  };

  using detail::MapConstMat;
  using detail::MapMat;

  for (NodeId id = loss + 1; id-- > 0;) {
    if (!needs[id] || grads[id].data.empty()) continue;
    const Node& n = graph.node(id);
    const Tensor& g = grads[id];
    auto val = [&](std::size_t i) -> const Tensor& { return values[n.parents[i]]; };
    auto want = [&](std::size_t i) { return static_cast<bool>(needs[n.parents[i]]); };

    switch (n.op) {
      case Op::constant:
      case Op::parameter:
      case Op::input:
        break;
      case Op::add:
        if (want(0)) add_broadcast(n.parents[0], g, [](std::size_t) { return 1.0; });
        if (want(1)) add_broadcast(n.parents[1], g, [](std::size_t) { return 1.0; });
        break;
      case Op::mul:
        if (want(0)) add_broadcast(n.parents[0], g, [&](std::size_t i) { return detail::elem(val(1), i); });
        if (want(1)) add_broadcast(n.parents[1], g, [&](std::size_t i) { return detail::elem(val(0), i); });
        break;
      case Op::matmul: {
        const Shape& sa = val(0).shape;
        const Shape& sb = val(1).shape;
        MapConstMat a(val(0).data.data(), sa[0], sa[1]);
        MapConstMat b(val(1).data.data(), sb[0], sb[1]);
        MapConstMat gm(g.data.data(), sa[0], sb[1]);
        if (want(0)) MapMat(acc(n.parents[0]).data.data(), sa[0], sa[1]).noalias() += gm * b.transpose();
        if (want(1)) MapMat(acc(n.parents[1]).data.data(), sb[0], sb[1]).noalias() += a.transpose() * gm;
        break;
      }
      case Op::conv2d: {
        const detail::ConvGeometry geo = detail::conv_geometry(graph, n);
        MapConstMat w(val(1).data.data(), geo.out_channels, geo.patch());
        // Gradient laid out as (O, Ho*Wo) regardless of output layout.
        detail::RowMat gout;
        if (n.channels_last) {
          gout = MapConstMat(g.data.data(), geo.pixels(), geo.out_channels).transpose();
        } else {
          gout = MapConstMat(g.data.data(), geo.out_channels, geo.pixels());
        }
        if (want(1)) {
          std::vector<double> col;
          detail::im2col(geo, val(0).data.data(), col);
          MapConstMat c(col.data(), geo.patch(), geo.pixels());
          MapMat(acc(n.parents[1]).data.data(), geo.out_channels, geo.patch()).noalias() +=
              gout * c.transpose();
        }
        if (n.parents.size() == 3 && want(2)) {
          Eigen::Map<Eigen::VectorXd>(acc(n.parents[2]).data.data(), geo.out_channels) +=
              gout.rowwise().sum();
        }
        if (want(0)) {
          detail::RowMat dcol = w.transpose() * gout;
          detail::col2im_add(geo, dcol.data(), acc(n.parents[0]).data.data());
        }
        break;
      }
      case Op::relu:
        if (want(0)) {
          Tensor& d = acc(n.parents[0]);
          for (std::size_t i = 0; i < g.size(); ++i) if (val(0)[i] > 0.0) d[i] += g[i];
        }
        break;
      case Op::maxpool2x2:
        if (want(0)) {
          const Shape& sx = val(0).shape;
          const std::size_t plane = sx[1] * sx[2];
          Tensor& d = acc(n.parents[0]);
          for (std::size_t c = 0; c < sx[0]; ++c) {
            const double* x = val(0).data.data() + c * plane;
            for (std::size_t oy = 0; oy < n.shape[1]; ++oy)
              for (std::size_t ox = 0; ox < n.shape[2]; ++ox)
                d[c * plane + detail::pool_argmax(x, sx[2], oy, ox)] +=
                    g[(c * n.shape[1] + oy) * n.shape[2] + ox];
          }
        }
        break;
      case Op::reshape:
        if (want(0)) {
          Tensor& d = acc(n.parents[0]);
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
        break;
      case Op::softmax_ce:
        if (want(0)) {
          const std::size_t k = val(0).shape[1];
          Tensor& d = acc(n.parents[0]);
          for (std::size_t r = 0; r < n.shape[0]; ++r) {
            if (g[r] == 0.0) continue;
            const double* z = val(0).data.data() + r * k;
            const double zmax = *std::max_element(z, z + k);
            double s = 0.0;
            for (std::size_t j = 0; j < k; ++j) s += std::exp(z[j] - zmax);
            for (std::size_t j = 0; j < k; ++j) {
              const double p = std::exp(z[j] - zmax) / s;
              d[r * k + j] += g[r] * (p - (static_cast<int>(j) == n.labels[r] ? 1.0 : 0.0));
            }
          }
        }
        break;
      case Op::smooth_l1:
        if (want(0)) {
          Tensor& d = acc(n.parents[0]);
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * detail::smooth_l1_grad(val(0)[i]);
        }
        break;
      case Op::clip_min_const:
        // Pass-through at exactly beta (left derivative of min).
        if (want(0)) {
          Tensor& d = acc(n.parents[0]);
          for (std::size_t i = 0; i < g.size(); ++i) if (val(0)[i] <= n.scalar) d[i] += g[i];
        }
        break;
      case Op::sum:
        if (want(0)) {
          Tensor& d = acc(n.parents[0]);
          for (double& v : d.data) v += g[0];
        }
        break;
      case Op::scale:
        if (want(0)) {
          Tensor& d = acc(n.parents[0]);
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += n.scalar * g[i];
        }
        break;
    }
  }

  GradientMap out;
  auto emit = [&](NodeId id) {
    if (id > loss || !needs[id]) return;
    out.emplace(id, grads[id].data.empty() ? Tensor(graph.shape(id)) : std::move(grads[id]));
  };
  if (wrt.empty()) {
    for (NodeId id : graph.parameter_nodes()) emit(id);
    for (NodeId id : graph.input_nodes()) emit(id);
  } else {
    for (NodeId id : wrt) emit(id);
  }
  return out;
}

/// Throws a numeric error naming the first node holding a non-finite value.
inline void check_finite(const Graph& graph, const Values& values) {
  for (NodeId id = 0; id < values.size(); ++id) {
    for (double v : values[id].data) {
      if (!std::isfinite(v)) {
        fail(ErrorCategory::numeric, "non-finite value at " + describe(graph.node(id)));
      }
    }
  }
}

struct FdOptions {
  /// Cap on coordinates checked per leaf; 0 checks all of them.
  std::size_t max_coords_per_leaf = 0;
  std::uint64_t seed = 0;
};

struct FdReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;  // coordinates whose +/- step crosses a kink
};

namespace detail {

// Branch pattern of every non-smooth node up to `loss`; a coordinate whose
// perturbation changes it straddles a kink.
inline std::vector<std::uint32_t> kink_pattern(const Graph& graph, const Values& values, NodeId loss) {
  std::vector<std::uint32_t> out;
  for (NodeId id = 0; id <= loss; ++id) {
    const Node& n = graph.node(id);
    const Tensor& x = values[n.parents.empty() ? id : n.parents[0]];
    switch (n.op) {
      case Op::relu:
        for (double v : x.data) out.push_back(v > 0.0);
        break;
      case Op::clip_min_const:
        for (double v : x.data) out.push_back(v <= n.scalar);
        break;
      case Op::maxpool2x2:
        for (std::size_t c = 0; c < x.shape[0]; ++c)
          for (std::size_t oy = 0; oy < n.shape[1]; ++oy)
            for (std::size_t ox = 0; ox < n.shape[2]; ++ox)
              out.push_back(static_cast<std::uint32_t>(
                  pool_argmax(x.data.data() + c * x.shape[1] * x.shape[2], x.shape[2], oy, ox)));
        break;
      default:
        break;
    }
  }
  return out;
}

}  // namespace detail

/// Compares analytic gradients against central differences for every
/// parameter and input scalar: max |analytic - fd| / max(1, |fd|).
inline FdReport finite_difference_check(const Graph& graph, NodeId loss, const Bindings& bindings,
                                        double step, const FdOptions& options = {}) {
  if (!(step > 0.0)) fail(ErrorCategory::config, "finite-difference step must be positive");
  const Values base = forward(graph, bindings);
  check_finite(graph, base);
  const GradientMap grads = backward(graph, loss, base);
  const auto pattern = detail::kink_pattern(graph, base, loss);

  std::mt19937_64 rng(options.seed);
  FdReport report;
  Bindings probe = bindings;
  std::vector<NodeId> leaves = graph.parameter_nodes();
  leaves.insert(leaves.end(), graph.input_nodes().begin(), graph.input_nodes().end());
  for (NodeId leaf : leaves) {
    if (leaf > loss) continue;
    const std::size_t count = numel(graph.shape(leaf));
    std::vector<std::size_t> coords(count);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_leaf && count > options.max_coords_per_leaf) {
      std::vector<std::size_t> picked;
      std::sample(coords.begin(), coords.end(), std::back_inserter(picked),
                  options.max_coords_per_leaf, rng);
      coords = std::move(picked);
    }
    Tensor& x = probe.at(leaf);
    for (std::size_t i : coords) {
      const double saved = x[i];
      x[i] = saved + step;
      const Values plus = forward(graph, probe);
      x[i] = saved - step;
      const Values minus = forward(graph, probe);
      x[i] = saved;
      if (detail::kink_pattern(graph, plus, loss) != pattern ||
          detail::kink_pattern(graph, minus, loss) != pattern) {
        ++report.excluded;
        continue;
      }
      const double fd = (plus[loss].item() - minus[loss].item()) / (2.0 * step);
      if (!std::isfinite(fd)) {
        fail(ErrorCategory::numeric, "non-finite difference quotient at " + describe(graph.node(leaf)));
      }
      const double analytic = grads.at(leaf)[i];
      report.max_relative_error =
          std::max(report.max_relative_error, std::abs(analytic - fd) / std::max(1.0, std::abs(fd)));
      ++report.checked;
    }
  }
  return report;
}

}  // namespace cwat::ad
