#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "densevox/graph.hpp"

namespace dv {

enum class Connectivity { plain, dense, hyperdense };

inline const char* to_string(Connectivity c) {
  switch (c) {
    case Connectivity::plain: return "plain";
    case Connectivity::dense: return "dense";
    case Connectivity::hyperdense: return "hyperdense";
  }
  return "?";
}

inline Connectivity connectivity_from_string(const std::string& s) {
  if (s == "plain") return Connectivity::plain;
  if (s == "dense") return Connectivity::dense;
  if (s == "hyperdense") return Connectivity::hyperdense;
  fail(ErrorCategory::data_invalid, "InvalidSpec", "unknown connectivity '" + s + "'");
}

struct LayerSpec {
  std::string name;
  std::int64_t kernel;   // cubic kernel edge
  std::int64_t count;    // number of kernels
  bool dropout;
};

// Declarative architecture description. The standard() stacks are the fixed
// 9-conv / 3-fully-conv / 4-class configuration; everything needed to
// materialize parameters is contained here and serialized into checkpoints.
struct NetworkSpec {
  Connectivity connectivity = Connectivity::dense;
  int streams = 1;
  std::int64_t input_channels_per_stream = 2;
  std::vector<LayerSpec> conv_layers;
  std::vector<LayerSpec> fully_conv;
  LayerSpec classification{"classification", 1, 4, false};
  double dropout_rate = 0.5;
  bool literal_eq3_first_layer = false;

  static NetworkSpec standard(Connectivity c) {
    NetworkSpec s;
    s.connectivity = c;
    s.streams = (c == Connectivity::hyperdense) ? 2 : 1;
    s.input_channels_per_stream = (c == Connectivity::hyperdense) ? 1 : 2;
    const std::int64_t counts[9] = {25, 25, 25, 50, 50, 50, 75, 75, 75};
    for (int i = 0; i < 9; ++i)
      s.conv_layers.push_back({"conv_" + std::to_string(i + 1), 3, counts[i], false});
    s.fully_conv.push_back({"fully_conv_1", 1, 400, true});
    s.fully_conv.push_back({"fully_conv_2", 1, 200, true});
    s.fully_conv.push_back({"fully_conv_3", 1, 150, true});
    return s;
  }

  std::int64_t num_classes() const { return classification.count; }
  // Spatial shrinkage from input window to output core, per side.
  std::int64_t receptive_margin() const {
    std::int64_t m = 0;
    for (const auto& l : conv_layers) m += (l.kernel - 1) / 2;
    for (const auto& l : fully_conv) m += (l.kernel - 1) / 2;
    return m + (classification.kernel - 1) / 2;
  }

  std::string serialize() const;
  static NetworkSpec parse(const std::string& text);
};

inline void validate(const NetworkSpec& s) {
  if (s.connectivity == Connectivity::hyperdense ? s.streams != 2 : s.streams != 1)
    fail(ErrorCategory::data_invalid, "InvalidSpec", "stream count does not match connectivity");
  if (s.conv_layers.empty() || s.input_channels_per_stream < 1)
    fail(ErrorCategory::data_invalid, "InvalidSpec", "empty conv stack or bad input channels");
  for (const auto& l : s.conv_layers)
    if (l.count < 1 || l.kernel < 1 || l.kernel % 2 == 0)
      fail(ErrorCategory::data_invalid, "InvalidSpec", "layer " + l.name);
  for (const auto& l : s.fully_conv)
    if (l.count < 1) fail(ErrorCategory::data_invalid, "InvalidSpec", "layer " + l.name);
}

// One incoming source of a layer: output of conv layer `layer` (0 = raw
// input) in `stream`, center-cropped by `margin` for spatial alignment.
struct SourceRef {
  int layer;
  int stream;  // 0-based
  std::int64_t margin;
  bool operator==(const SourceRef&) const = default;
};

struct LayerPlan {
  std::vector<SourceRef> sources;  // concatenation order
  std::int64_t in_channels = 0;
};

struct ChannelPlan {
  std::vector<std::vector<LayerPlan>> conv;  // [layer][stream]
  LayerPlan fully_conv_1;                    // conv outputs only
};

// Resolve the connectivity rule into explicit per-layer source lists with
// exact channel and crop accounting. Sources are ordered newest-to-oldest,
// stream 1 before stream 2 at equal depth. `restrict_to_previous` prunes the
// dense rules down to the plain chain (used to verify the rule reduction).
inline ChannelPlan plan_channels(const NetworkSpec& spec, bool restrict_to_previous = false) {
  validate(spec);
  const int L = static_cast<int>(spec.conv_layers.size());
  const int S = spec.streams;
  auto out_channels = [&](int layer, int /*stream*/) -> std::int64_t {
    return layer == 0 ? spec.input_channels_per_stream : spec.conv_layers[layer - 1].count;
  };

  ChannelPlan plan;
  plan.conv.assign(L, std::vector<LayerPlan>(S));
  for (int l = 1; l <= L; ++l)
    for (int s = 0; s < S; ++s) {
      LayerPlan& lp = plan.conv[l - 1][s];
      const bool first = (l == 1);
      if (spec.connectivity == Connectivity::plain || (first && !spec.literal_eq3_first_layer)) {
        // Plain chain, and the first layer of each stream sees only its own
        // modality so the streams keep distinct views of the data.
        lp.sources.push_back({l - 1, s, 0});
      } else {
        for (int k = l - 1; k >= 0; --k) {
          if (restrict_to_previous && k != l - 1) continue;
          if (spec.connectivity == Connectivity::hyperdense) {
            for (int s2 = 0; s2 < S; ++s2) lp.sources.push_back({k, s2, l - 1 - k});
          } else {
            lp.sources.push_back({k, s, l - 1 - k});
          }
        }
      }
      for (const auto& src : lp.sources) lp.in_channels += out_channels(src.layer, src.stream);
    }

  // fully_conv_1 concatenates all conv outputs (newest first), aligned to the
  // last conv layer's spatial size.
  if (spec.connectivity == Connectivity::plain) {
    plan.fully_conv_1.sources.push_back({L, 0, 0});
  } else {
    for (int k = L; k >= 1; --k) {
      if (restrict_to_previous && k != L) continue;
      for (int s = 0; s < S; ++s) plan.fully_conv_1.sources.push_back({k, s, static_cast<std::int64_t>(L - k)});
    }
  }
  for (const auto& src : plan.fully_conv_1.sources)
    plan.fully_conv_1.in_channels += out_channels(src.layer, src.stream);
  return plan;
}

// ---------------------------------------------------------------------------
// Graph materialization.

inline std::string stream_tag(const NetworkSpec& spec, int s) {
  return spec.streams > 1 ? ".s" + std::to_string(s + 1) : "";
}

inline Graph build_graph(const NetworkSpec& spec, bool restrict_to_previous = false) {
  const ChannelPlan plan = plan_channels(spec, restrict_to_previous);
  const int L = static_cast<int>(spec.conv_layers.size());
  const int S = spec.streams;

  Graph g;
  // layer/stream output node ids; layer 0 = raw inputs
  std::vector<std::vector<int>> out_node(L + 1, std::vector<int>(S, -1));
  for (int s = 0; s < S; ++s) {
    const std::string name = (S > 1) ? "mod" + std::to_string(s + 1) : "in";
    g.input_names.push_back(name);
    Node in;
    in.kind = OpKind::input;
    in.name = name;
    in.input_name = name;
    out_node[0][s] = g.add(std::move(in));
  }

  std::map<std::pair<int, std::int64_t>, int> crop_cache;
  auto cropped = [&](int node, std::int64_t margin) -> int {
    if (margin == 0) return node;
    auto key = std::make_pair(node, margin);
    auto it = crop_cache.find(key);
    if (it != crop_cache.end()) return it->second;
    Node c;
    c.kind = OpKind::crop;
    c.name = g.nodes[node].name + ".crop" + std::to_string(margin);
    c.inputs = {node};
    c.margin = margin;
    const int id = g.add(std::move(c));
    crop_cache[key] = id;
    return id;
  };

  auto gather = [&](const LayerPlan& lp, const std::string& name) -> int {
    std::vector<int> parts;
    for (const auto& src : lp.sources) parts.push_back(cropped(out_node[src.layer][src.stream], src.margin));
    if (parts.size() == 1) return parts[0];
    Node cc;
    cc.kind = OpKind::concat;
    cc.name = name + ".in";
    cc.inputs = std::move(parts);
    return g.add(std::move(cc));
  };

  // A block is BN -> PReLU -> (Dropout) -> Conv; the first conv of each
  // stream convolves the raw input directly.
  auto block = [&](int in_node, std::int64_t in_ch, const LayerSpec& layer, const std::string& tag,
                   bool skip_norm) -> int {
    const std::string base = layer.name + tag;
    int cur = in_node;
    if (!skip_norm) {
      g.add_param(base + ".bn_gamma", Shape{in_ch});
      g.add_param(base + ".bn_beta", Shape{in_ch});
      Node bn;
      bn.kind = OpKind::batchnorm;
      bn.name = base + ".bn";
      bn.inputs = {cur};
      bn.gamma = base + ".bn_gamma";
      bn.beta = base + ".bn_beta";
      bn.stats = base + ".bn";
      cur = g.add(std::move(bn));

      g.add_param(base + ".prelu", Shape{in_ch});
      Node pr;
      pr.kind = OpKind::prelu;
      pr.name = base + ".prelu";
      pr.inputs = {cur};
      pr.slope = base + ".prelu";
      cur = g.add(std::move(pr));
    }
    if (layer.dropout && spec.dropout_rate > 0) {
      Node dr;
      dr.kind = OpKind::dropout;
      dr.name = base + ".dropout";
      dr.inputs = {cur};
      dr.rate = spec.dropout_rate;
      cur = g.add(std::move(dr));
    }
    const std::int64_t k = layer.kernel;
    g.add_param(base + ".w", Shape{layer.count, in_ch, k, k, k});
    g.add_param(base + ".b", Shape{layer.count});
    Node cv;
    cv.kind = OpKind::conv3d;
    cv.name = base;
    cv.inputs = {cur};
    cv.w = base + ".w";
    cv.b = base + ".b";
    return g.add(std::move(cv));
  };

  for (int l = 1; l <= L; ++l)
    for (int s = 0; s < S; ++s) {
      const LayerPlan& lp = plan.conv[l - 1][s];
      const int in_node = gather(lp, spec.conv_layers[l - 1].name + stream_tag(spec, s));
      out_node[l][s] =
          block(in_node, lp.in_channels, spec.conv_layers[l - 1], stream_tag(spec, s), l == 1);
    }

  int cur = gather(plan.fully_conv_1, spec.fully_conv.empty() ? "classification" : spec.fully_conv[0].name);
  std::int64_t cur_ch = plan.fully_conv_1.in_channels;
  for (const auto& fc : spec.fully_conv) {
    cur = block(cur, cur_ch, fc, "", false);
    cur_ch = fc.count;
  }
  g.output = block(cur, cur_ch, spec.classification, "", false);
  return g;
}

// ---------------------------------------------------------------------------
// He initialization: w ~ N(0, 2/n_l) with n_l = fan-in (input channels x
// kernel volume); biases zero, BN gamma 1 / beta 0, PReLU slopes 0.25.

inline double he_std(std::int64_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); }

template <typename T>
void fill_he(Tensor<T>& w, std::int64_t fan_in, Rng& rng) {
  const double sd = he_std(fan_in);
  for (auto& v : w.data) v = static_cast<T>(rng.gaussian() * sd);
}

template <typename T>
ParamSet<T> init_params(const Graph& g, std::uint64_t seed) {
  ParamSet<T> ps = ParamSet<T>::zeros_like(g);
  for (std::size_t i = 0; i < g.params.size(); ++i) {
    const ParamSlot& slot = g.params[i];
    Tensor<T>& t = ps.values[i];
    const auto ends_with = [&](const char* suf) {
      const std::string s(suf);
      return slot.name.size() >= s.size() && slot.name.compare(slot.name.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with(".w")) {
      const auto& d = slot.shape.dims;
      Rng rng = Rng::derive(seed, i);
      fill_he(t, d[1] * d[2] * d[3] * d[4], rng);
    } else if (ends_with(".bn_gamma")) {
      std::fill(t.data.begin(), t.data.end(), T{1});
    } else if (ends_with(".prelu")) {
      std::fill(t.data.begin(), t.data.end(), static_cast<T>(0.25));
    }
    // biases and bn_beta stay zero
  }
  return ps;
}

inline std::int64_t total_param_count(const Graph& g) {
  std::int64_t n = 0;
  for (const auto& p : g.params) n += p.shape.numel();
  return n;
}

// Structural graph equality up to node naming (builders emit nodes in a
// canonical order, so ids line up directly).
inline bool graphs_isomorphic(const Graph& a, const Graph& b) {
  if (a.nodes.size() != b.nodes.size()) return false;
  for (std::size_t i = 0; i < a.nodes.size(); ++i) {
    const Node& x = a.nodes[i];
    const Node& y = b.nodes[i];
    if (x.kind != y.kind || x.inputs != y.inputs || x.margin != y.margin || x.rate != y.rate)
      return false;
  }
  return a.output == b.output;
}

// ---------------------------------------------------------------------------
// NetworkSpec text round trip (stable key order, embedded in checkpoints).

inline std::string NetworkSpec::serialize() const {
  std::ostringstream os;
  auto csv = [](const std::vector<LayerSpec>& ls, auto field) {
    std::string s;
    for (std::size_t i = 0; i < ls.size(); ++i) s += (i ? "," : "") + std::to_string(field(ls[i]));
    return s;
  };
  os << "densevox-netspec 1\n";
  os << "connectivity = " << to_string(connectivity) << "\n";
  os << "streams = " << streams << "\n";
  os << "input_channels_per_stream = " << input_channels_per_stream << "\n";
  os << "conv_kernels = " << csv(conv_layers, [](const LayerSpec& l) { return l.kernel; }) << "\n";
  os << "conv_counts = " << csv(conv_layers, [](const LayerSpec& l) { return l.count; }) << "\n";
  os << "fully_conv_counts = " << csv(fully_conv, [](const LayerSpec& l) { return l.count; }) << "\n";
  os << "classification_count = " << classification.count << "\n";
  os << "dropout_rate = " << dropout_rate << "\n";
  os << "literal_eq3_first_layer = " << (literal_eq3_first_layer ? 1 : 0) << "\n";
  os << "concat_order = newest_first_stream1_first\n";
  return os.str();
}

inline NetworkSpec NetworkSpec::parse(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "densevox-netspec 1")
    fail(ErrorCategory::data_invalid, "InvalidSpec", "bad netspec header");
  std::map<std::string, std::string> kv;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) fail(ErrorCategory::data_invalid, "InvalidSpec", "bad line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 3);
  }
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) fail(ErrorCategory::data_invalid, "InvalidSpec", std::string("missing key ") + key);
    return it->second;
  };
  auto ints = [](const std::string& s) {
    std::vector<std::int64_t> v;
    std::istringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) v.push_back(std::stoll(tok));
    return v;
  };

  NetworkSpec spec;
  spec.connectivity = connectivity_from_string(get("connectivity"));
  spec.streams = std::stoi(get("streams"));
  spec.input_channels_per_stream = std::stoll(get("input_channels_per_stream"));
  const auto kernels = ints(get("conv_kernels"));
  const auto counts = ints(get("conv_counts"));
  if (kernels.size() != counts.size())
    fail(ErrorCategory::data_invalid, "InvalidSpec", "conv_kernels/conv_counts length mismatch");
  spec.conv_layers.clear();
  for (std::size_t i = 0; i < counts.size(); ++i)
    spec.conv_layers.push_back({"conv_" + std::to_string(i + 1), kernels[i], counts[i], false});
  spec.fully_conv.clear();
  const auto fc = ints(get("fully_conv_counts"));
  for (std::size_t i = 0; i < fc.size(); ++i)
    spec.fully_conv.push_back({"fully_conv_" + std::to_string(i + 1), 1, fc[i], true});
  spec.classification = {"classification", 1, std::stoll(get("classification_count")), false};
  spec.dropout_rate = std::stod(get("dropout_rate"));
  spec.literal_eq3_first_layer = get("literal_eq3_first_layer") == "1";
  validate(spec);
  return spec;
}

}  // namespace dv
