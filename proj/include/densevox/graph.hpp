#pragma once

#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "densevox/ops.hpp"

namespace dv {

enum class OpKind { input, conv3d, batchnorm, prelu, dropout, concat, crop };

struct Node {
  OpKind kind;
  std::string name;               // diagnostic / layer name
  std::vector<int> inputs;        // node ids, all preceding this node
  // op attributes
  std::string w, b;               // conv3d parameter slot names
  std::string gamma, beta;        // batchnorm parameter slot names
  std::string stats;              // batchnorm running-stats key
  std::string slope;              // prelu parameter slot name
  double rate = 0.0;              // dropout
  std::int64_t margin = 0;        // crop
  std::string input_name;         // input placeholder
};

struct ParamSlot {
  std::string name;
  Shape shape;
};

// A static, topologically ordered computation graph. Parameters live in named
// slots; the tensors themselves are held by the caller (ParamSet).
struct Graph {
  std::vector<Node> nodes;
  std::vector<ParamSlot> params;
  std::vector<std::string> input_names;
  int output = -1;

  int add(Node n) {
    for (int i : n.inputs)
      if (i < 0 || i >= static_cast<int>(nodes.size()))
        fail(ErrorCategory::data_invalid, "GraphOrder", "node input must precede it");
    nodes.push_back(std::move(n));
    return static_cast<int>(nodes.size()) - 1;
  }

  void add_param(std::string name, Shape shape) {
    for (const auto& p : params)
      if (p.name == name) fail(ErrorCategory::data_invalid, "DuplicateParam", name);
    params.push_back({std::move(name), std::move(shape)});
  }

  int param_index(const std::string& name) const {
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].name == name) return static_cast<int>(i);
    fail(ErrorCategory::data_invalid, "UnknownParam", name);
  }
};

template <typename T>
struct ParamSet {
  std::vector<Tensor<T>> values;  // aligned with Graph::params

  static ParamSet zeros_like(const Graph& g) {
    ParamSet ps;
    ps.values.reserve(g.params.size());
    for (const auto& p : g.params) ps.values.emplace_back(p.shape);
    return ps;
  }
};

template <typename T>
struct BnStat {
  std::vector<T> mean, var;  // var starts at 1 so untrained inference is usable
};

template <typename T>
using BnStats = std::map<std::string, BnStat<T>>;

template <typename T>
BnStats<T> init_bn_stats(const Graph& g) {
  BnStats<T> stats;
  for (const auto& n : g.nodes)
    if (n.kind == OpKind::batchnorm) {
      const std::int64_t c = g.params[g.param_index(n.gamma)].shape[0];
      stats[n.stats] = BnStat<T>{std::vector<T>(c, T{0}), std::vector<T>(c, T{1})};
    }
  return stats;
}

// Cached forward activations plus per-node auxiliary state needed by backward.
template <typename T>
struct TapeState {
  std::vector<Tensor<T>> acts;
  std::unordered_map<int, BatchNormCache<T>> bn_caches;
  std::unordered_map<int, std::vector<std::uint8_t>> dropout_masks;
  Mode mode = Mode::train;
  bool has_forward = false;
};

// Run the graph. In train mode batchnorm updates `stats` in place and dropout
// draws masks from a per-node stream derived from `dropout_seed`, so a forward
// pass is fully determined by (params, inputs, mode, dropout_seed).
template <typename T>
Tensor<T> forward(const Graph& g, const ParamSet<T>& params, BnStats<T>& stats,
                  const std::map<std::string, const Tensor<T>*>& inputs, Mode mode,
                  std::uint64_t dropout_seed, TapeState<T>& tape) {
  tape.acts.assign(g.nodes.size(), Tensor<T>{});
  tape.bn_caches.clear();
  tape.dropout_masks.clear();
  tape.mode = mode;

  // In infer mode no backward pass follows, so activations are released as
  // soon as their last consumer has run; dense nets keep many maps alive.
  std::vector<int> remaining;
  if (mode == Mode::infer) {
    remaining.assign(g.nodes.size(), 0);
    for (const auto& n : g.nodes)
      for (int in : n.inputs) ++remaining[in];
    ++remaining[g.output];
  }

  auto pv = [&](const std::string& name) -> const Tensor<T>& {
    return params.values[static_cast<std::size_t>(g.param_index(name))];
  };

  for (int i = 0; i < static_cast<int>(g.nodes.size()); ++i) {
    const Node& n = g.nodes[i];
    switch (n.kind) {
      case OpKind::input: {
        auto it = inputs.find(n.input_name);
        if (it == inputs.end() || it->second == nullptr)
          fail(ErrorCategory::data_invalid, "UnboundInput", n.input_name);
        tape.acts[i] = *it->second;
        break;
      }
      case OpKind::conv3d:
        tape.acts[i] = conv3d_forward(tape.acts[n.inputs[0]], pv(n.w), pv(n.b));
        break;
      case OpKind::batchnorm: {
        auto& st = stats.at(n.stats);
        BatchNormCache<T> cache;
        tape.acts[i] = batchnorm_forward(tape.acts[n.inputs[0]], pv(n.gamma), pv(n.beta), mode,
                                         st.mean, st.var, mode == Mode::train ? &cache : nullptr);
        if (mode == Mode::train) tape.bn_caches[i] = std::move(cache);
        break;
      }
      case OpKind::prelu:
        tape.acts[i] = prelu_forward(tape.acts[n.inputs[0]], pv(n.slope));
        break;
      case OpKind::dropout: {
        Rng rng = Rng::derive(dropout_seed, static_cast<std::uint64_t>(i) + 0x1000);
        std::vector<std::uint8_t> mask;
        tape.acts[i] = dropout_forward(tape.acts[n.inputs[0]], n.rate, mode, rng, &mask);
        if (mode == Mode::train) tape.dropout_masks[i] = std::move(mask);
        break;
      }
      case OpKind::concat: {
        std::vector<Tensor<T>> parts;
        parts.reserve(n.inputs.size());
        for (int in : n.inputs) parts.push_back(tape.acts[in]);
        tape.acts[i] = concat_channels(parts);
        break;
      }
      case OpKind::crop:
        tape.acts[i] = center_crop(tape.acts[n.inputs[0]], n.margin);
        break;
    }
    if (mode == Mode::infer)
      for (int in : n.inputs)
        if (--remaining[in] == 0) tape.acts[in] = Tensor<T>{};
  }
  tape.has_forward = true;
  return tape.acts[g.output];
}

// Reverse pass from a gradient at the output node. Returns parameter gradients
// aligned with Graph::params. Node gradients accumulate, which is what carries
// the dense skip connections' contributions back to their sources.
template <typename T>
ParamSet<T> backward(const Graph& g, const ParamSet<T>& params, const TapeState<T>& tape,
                     const Tensor<T>& grad_output) {
  if (!tape.has_forward)
    fail(ErrorCategory::data_invalid, "BackwardBeforeForward", "run forward first");
  if (tape.mode != Mode::train)
    fail(ErrorCategory::data_invalid, "BackwardBeforeForward", "backward requires a train-mode tape");

  auto pv = [&](const std::string& name) -> const Tensor<T>& {
    return params.values[static_cast<std::size_t>(g.param_index(name))];
  };

  ParamSet<T> grads = ParamSet<T>::zeros_like(g);
  auto pg = [&](const std::string& name) -> Tensor<T>& {
    return grads.values[static_cast<std::size_t>(g.param_index(name))];
  };

  std::vector<Tensor<T>> node_grads(g.nodes.size());
  auto accum = [&](int id, Tensor<T>&& t) {
    if (node_grads[id].numel() == 0)
      node_grads[id] = std::move(t);
    else
      for (std::int64_t k = 0; k < t.numel(); ++k) node_grads[id][k] += t[k];
  };

  node_grads[g.output] = grad_output;

  for (int i = static_cast<int>(g.nodes.size()); i-- > 0;) {
    Tensor<T>& go = node_grads[i];
    if (go.numel() == 0) continue;
    const Node& n = g.nodes[i];
    switch (n.kind) {
      case OpKind::input:
        break;
      case OpKind::conv3d: {
        const bool need_gx = g.nodes[n.inputs[0]].kind != OpKind::input;
        Tensor<T> gx, gw, gb;
        conv3d_backward(go, tape.acts[n.inputs[0]], pv(n.w), need_gx ? &gx : nullptr, gw, gb);
        auto& agw = pg(n.w);
        for (std::int64_t k = 0; k < gw.numel(); ++k) agw[k] += gw[k];
        auto& agb = pg(n.b);
        for (std::int64_t k = 0; k < gb.numel(); ++k) agb[k] += gb[k];
        if (need_gx) accum(n.inputs[0], std::move(gx));
        break;
      }
      case OpKind::batchnorm: {
        Tensor<T> gx, gg, gb;
        batchnorm_backward(go, tape.acts[n.inputs[0]], tape.bn_caches.at(i), pv(n.gamma), gx, gg, gb);
        auto& agg = pg(n.gamma);
        for (std::int64_t k = 0; k < gg.numel(); ++k) agg[k] += gg[k];
        auto& agb = pg(n.beta);
        for (std::int64_t k = 0; k < gb.numel(); ++k) agb[k] += gb[k];
        accum(n.inputs[0], std::move(gx));
        break;
      }
      case OpKind::prelu: {
        Tensor<T> gx, ga;
        prelu_backward(go, tape.acts[n.inputs[0]], pv(n.slope), gx, ga);
        auto& aga = pg(n.slope);
        for (std::int64_t k = 0; k < ga.numel(); ++k) aga[k] += ga[k];
        accum(n.inputs[0], std::move(gx));
        break;
      }
      case OpKind::dropout:
        accum(n.inputs[0], dropout_backward(go, n.rate, tape.dropout_masks.at(i)));
        break;
      case OpKind::concat: {
        std::int64_t c0 = 0;
        for (int in : n.inputs) {
          const std::int64_t pc = tape.acts[in].shape.channels();
          accum(in, slice_channels(go, c0, pc));
          c0 += pc;
        }
        break;
      }
      case OpKind::crop: {
        // Adjoint of center_crop: embed the gradient back into the larger map.
        const Shape& in_s = tape.acts[n.inputs[0]].shape;
        Tensor<T> gx{in_s};
        const std::int64_t m = n.margin;
        const std::int64_t D = in_s.spatial(0), H = in_s.spatial(1), W = in_s.spatial(2);
        const std::int64_t oD = D - 2 * m, oH = H - 2 * m, oW = W - 2 * m;
        const std::int64_t maps = gx.numel() / (D * H * W);
        for (std::int64_t mm = 0; mm < maps; ++mm) {
          const T* src = go.ptr() + mm * oD * oH * oW;
          T* dst = gx.ptr() + mm * D * H * W;
          for (std::int64_t z = 0; z < oD; ++z)
            for (std::int64_t y = 0; y < oH; ++y)
              std::copy_n(src + (z * oH + y) * oW, oW, dst + ((z + m) * H + (y + m)) * W + m);
        }
        accum(n.inputs[0], std::move(gx));
        break;
      }
    }
    go = Tensor<T>{};  // release, this node is done
  }
  return grads;
}

}  // namespace dv
