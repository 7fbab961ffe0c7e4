#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "densevox/checkpoint.hpp"
#include "densevox/graph.hpp"
#include "densevox/net.hpp"
#include "densevox/volume.hpp"

namespace dv {

// One inference window: the network sees [input_origin, input_origin+core+2m)
// per axis (virtually zero-padded) and its output core is written back only
// on [out_origin, out_origin+out_extent), trimmed so cores tile the volume
// with no gaps and no overlaps.
struct Tile {
  std::array<std::int64_t, 3> input_origin;
  std::array<std::int64_t, 3> out_origin;
  std::array<std::int64_t, 3> out_extent;
};

struct TilePlan {
  std::vector<Tile> tiles;
  std::int64_t core_edge;
  std::int64_t margin;
};

inline constexpr std::int64_t kInferCoreEdge = 17;   // 35^3 window -> 17^3 core

// Lay cores on a stride-`core` grid; final tiles per axis are shifted inward
// so windows stay aligned with the volume, and their written regions trimmed
// to the still-uncovered remainder.
inline TilePlan plan_tiles(const std::array<std::int64_t, 3>& dims,
                           std::int64_t core = kInferCoreEdge, std::int64_t margin = 9) {
  for (auto d : dims)
    if (d < 1) fail(ErrorCategory::data_invalid, "BadDims", "tile planning needs positive dims");

  std::array<std::vector<std::array<std::int64_t, 3>>, 3> axis;  // (core origin, write start, write end)
  for (int a = 0; a < 3; ++a) {
    const std::int64_t dim = dims[static_cast<std::size_t>(a)];
    const std::int64_t n = (dim + core - 1) / core;
    std::int64_t covered = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int64_t origin = dim >= core ? std::min(i * core, dim - core) : 0;
      const std::int64_t end = std::min((i + 1) * core, dim);
      axis[static_cast<std::size_t>(a)].push_back({origin, covered, end});
      covered = end;
    }
  }

  TilePlan plan;
  plan.core_edge = core;
  plan.margin = margin;
  for (const auto& tz : axis[0])
    for (const auto& ty : axis[1])
      for (const auto& tx : axis[2]) {
        Tile t;
        t.input_origin = {tz[0] - margin, ty[0] - margin, tx[0] - margin};
        t.out_origin = {tz[1], ty[1], tx[1]};
        t.out_extent = {tz[2] - tz[1], ty[2] - ty[1], tx[2] - tx[1]};
        plan.tiles.push_back(t);
      }
  return plan;
}

// Standardize an intensity volume to zero mean / unit variance within the
// mask (the same rule training uses). Returns float voxel data.
inline std::vector<float> standardize(const Volume& v, const Volume* mask) {
  double sum = 0, sum2 = 0;
  std::int64_t n = 0;
  for (std::int64_t i = 0; i < v.numel(); ++i) {
    if (mask && mask->data[static_cast<std::size_t>(i)] == 0.f) continue;
    sum += v.data[static_cast<std::size_t>(i)];
    sum2 += static_cast<double>(v.data[static_cast<std::size_t>(i)]) * v.data[static_cast<std::size_t>(i)];
    ++n;
  }
  if (n == 0) fail(ErrorCategory::data_invalid, "EmptyMask", "no voxels to standardize over");
  const double mean = sum / n;
  const double var = std::max(sum2 / n - mean * mean, 1e-12);
  const double inv = 1.0 / std::sqrt(var);
  std::vector<float> out(static_cast<std::size_t>(v.numel()));
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<float>((v.data[i] - mean) * inv);
  return out;
}

// Copy a cubic window (zero outside the volume) into channel `ch` of a
// [1,C,e,e,e] tensor.
inline void extract_window(const std::vector<float>& vol, const std::array<std::int64_t, 3>& dims,
                           const std::array<std::int64_t, 3>& origin, std::int64_t edge,
                           Tensor<float>& dst, std::int64_t ch) {
  const auto [D, H, W] = dims;
  float* base = dst.ptr() + ch * edge * edge * edge;
  for (std::int64_t z = 0; z < edge; ++z) {
    const std::int64_t vz = origin[0] + z;
    for (std::int64_t y = 0; y < edge; ++y) {
      const std::int64_t vy = origin[1] + y;
      float* row = base + (z * edge + y) * edge;
      if (vz < 0 || vz >= D || vy < 0 || vy >= H) {
        std::fill_n(row, edge, 0.f);
        continue;
      }
      for (std::int64_t x = 0; x < edge; ++x) {
        const std::int64_t vx = origin[2] + x;
        row[x] = (vx < 0 || vx >= W) ? 0.f : vol[static_cast<std::size_t>((vz * H + vy) * W + vx)];
      }
    }
  }
}

struct Segmentation {
  Volume labels;
  std::vector<Volume> class_probs;  // one per class, softmax outputs
};

// Full-volume segmentation: tiled inference with disjoint output cores,
// deterministic. Voxels outside the brain mask are forced to background.
inline Segmentation segment(const NetworkSpec& spec, const Graph& graph,
                            const ParamSet<float>& params, BnStats<float>& bn_stats,
                            const Subject& subject, std::int64_t core_edge = kInferCoreEdge) {
  subject.validate();
  if (subject.modalities.size() != 2)
    fail(ErrorCategory::data_invalid, "SpecMismatch", "subject must provide two modalities");

  const auto dims = subject.modalities[0].dims;
  const Volume* mask = subject.mask ? &*subject.mask : nullptr;
  std::vector<std::vector<float>> std_mods;
  for (const auto& m : subject.modalities) std_mods.push_back(standardize(m, mask));

  const std::int64_t margin = spec.receptive_margin();
  const std::int64_t edge = core_edge + 2 * margin;
  const std::int64_t classes = spec.num_classes();
  const TilePlan plan = plan_tiles(dims, core_edge, margin);

  Segmentation seg;
  seg.class_probs.assign(static_cast<std::size_t>(classes), Volume{});
  for (auto& p : seg.class_probs) {
    p.dims = dims;
    p.spacing = subject.modalities[0].spacing;
    p.role = VoxelRole::intensity;
    p.data.assign(static_cast<std::size_t>(p.numel()), 0.f);
  }

  TapeState<float> tape;
  for (const Tile& tile : plan.tiles) {
    std::map<std::string, const Tensor<float>*> inputs;
    std::vector<Tensor<float>> input_tensors;
    input_tensors.reserve(2);
    if (spec.streams == 2) {
      for (int s = 0; s < 2; ++s) {
        Tensor<float> t{Shape{1, 1, edge, edge, edge}};
        extract_window(std_mods[static_cast<std::size_t>(s)], dims, tile.input_origin, edge, t, 0);
        input_tensors.push_back(std::move(t));
      }
      inputs["mod1"] = &input_tensors[0];
      inputs["mod2"] = &input_tensors[1];
    } else {
      Tensor<float> t{Shape{1, 2, edge, edge, edge}};
      extract_window(std_mods[0], dims, tile.input_origin, edge, t, 0);
      extract_window(std_mods[1], dims, tile.input_origin, edge, t, 1);
      input_tensors.push_back(std::move(t));
      inputs["in"] = &input_tensors[0];
    }

    const Tensor<float> logits = forward(graph, params, bn_stats, inputs, Mode::infer, 0, tape);
    const Tensor<float> probs = softmax_channels(logits);

    // Network output core starts at input_origin + margin in volume coords.
    const std::int64_t oedge = probs.shape.spatial(0);
    for (int c = 0; c < classes; ++c) {
      const float* src = probs.ptr() + c * oedge * oedge * oedge;
      float* dst = seg.class_probs[static_cast<std::size_t>(c)].data.data();
      for (std::int64_t z = 0; z < tile.out_extent[0]; ++z)
        for (std::int64_t y = 0; y < tile.out_extent[1]; ++y) {
          const std::int64_t sz = tile.out_origin[0] + z - (tile.input_origin[0] + margin);
          const std::int64_t sy = tile.out_origin[1] + y - (tile.input_origin[1] + margin);
          const std::int64_t sx = tile.out_origin[2] - (tile.input_origin[2] + margin);
          std::copy_n(src + (sz * oedge + sy) * oedge + sx, tile.out_extent[2],
                      dst + ((tile.out_origin[0] + z) * dims[1] + tile.out_origin[1] + y) * dims[2] +
                          tile.out_origin[2]);
        }
    }
  }

  seg.labels.dims = dims;
  seg.labels.spacing = subject.modalities[0].spacing;
  seg.labels.role = VoxelRole::label;
  seg.labels.data.assign(static_cast<std::size_t>(seg.labels.numel()), 0.f);
  for (std::int64_t i = 0; i < seg.labels.numel(); ++i) {
    if (mask && mask->data[static_cast<std::size_t>(i)] == 0.f) continue;  // background
    float best = seg.class_probs[0].data[static_cast<std::size_t>(i)];
    int arg = 0;
    for (int c = 1; c < classes; ++c) {
      const float v = seg.class_probs[static_cast<std::size_t>(c)].data[static_cast<std::size_t>(i)];
      if (v > best) { best = v; arg = c; }
    }
    seg.labels.data[static_cast<std::size_t>(i)] = static_cast<float>(arg);
  }
  return seg;
}

inline Segmentation segment(const Checkpoint& ck, const Subject& subject,
                            std::int64_t core_edge = kInferCoreEdge) {
  const Graph graph = build_graph(ck.spec);
  BnStats<float> stats = ck.bn_stats;
  return segment(ck.spec, graph, ck.params, stats, subject, core_edge);
}

}  // namespace dv
