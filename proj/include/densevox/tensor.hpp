#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "densevox/common.hpp"

namespace dv {

// Dense shapes follow the convention [C,D,H,W] for feature maps and
// [B,C,D,H,W] for batched maps, row-major, W innermost.
struct Shape {
  std::vector<std::int64_t> dims;

  Shape() = default;
  Shape(std::initializer_list<std::int64_t> d) : dims(d) { validate(); }
  explicit Shape(std::vector<std::int64_t> d) : dims(std::move(d)) { validate(); }

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (auto d : dims) {
      if (d > 0 && n > std::numeric_limits<std::int64_t>::max() / d)
        fail(ErrorCategory::data_invalid, "ShapeOverflow", "element count overflows index type");
      n *= d;
    }
    return n;
  }

  std::size_t rank() const { return dims.size(); }
  std::int64_t operator[](std::size_t i) const { return dims[i]; }

  bool operator==(const Shape& o) const { return dims == o.dims; }
  bool operator!=(const Shape& o) const { return dims != o.dims; }

  // Channel axis: axis 0 for [C,D,H,W], axis 1 for [B,C,D,H,W].
  std::size_t channel_axis() const {
    if (rank() < 4) fail(ErrorCategory::data_invalid, "ShapeRank", "feature map needs rank >= 4, got " + str());
    return rank() - 4;
  }
  std::int64_t channels() const { return dims[channel_axis()]; }
  std::int64_t batch() const { return rank() >= 5 ? dims[rank() - 5] : 1; }
  // Spatial dims are always the last three axes.
  std::int64_t spatial(std::size_t i) const { return dims[rank() - 3 + i]; }

  std::string str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < dims.size(); ++i) s += (i ? "," : "") + std::to_string(dims[i]);
    return s + "]";
  }

 private:
  void validate() const {
    for (auto d : dims)
      if (d < 1) fail(ErrorCategory::data_invalid, "ShapeDim", "every dim must be >= 1, got " + str());
    (void)numel();
  }
};

template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(shape.numel()), T{}) {}
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<std::int64_t>(data.size()) != shape.numel())
      fail(ErrorCategory::data_invalid, "SizeMismatch", "data length does not match shape " + shape.str());
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

  // 5-D accessor for [B,C,D,H,W] tensors.
  T& at5(std::int64_t b, std::int64_t c, std::int64_t z, std::int64_t y, std::int64_t x) {
    const auto& d = shape.dims;
    return data[static_cast<std::size_t>((((b * d[1] + c) * d[2] + z) * d[3] + y) * d[4] + x)];
  }
  const T& at5(std::int64_t b, std::int64_t c, std::int64_t z, std::int64_t y, std::int64_t x) const {
    const auto& d = shape.dims;
    return data[static_cast<std::size_t>((((b * d[1] + c) * d[2] + z) * d[3] + y) * d[4] + x)];
  }

  void check_finite(const char* where) const {
#ifndef NDEBUG
    for (const T& v : data)
      if (!std::isfinite(static_cast<double>(v)))
        fail(ErrorCategory::numeric, "NonFinite", std::string("non-finite value after ") + where);
#else
    (void)where;
#endif
  }
};

// Labels are stored as one byte per voxel, [D,H,W] or [B,D,H,W].
using LabelArray = Tensor<std::uint8_t>;

// ---------------------------------------------------------------------------
// concat / crop

// Concatenate along the channel axis. Part order is preserved: the first part
// occupies the lowest channel indices.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) fail(ErrorCategory::data_invalid, "EmptyInput", "concat_channels of zero parts");
  const Shape& s0 = parts[0].shape;
  std::int64_t ctotal = 0;
  for (const auto& p : parts) {
    if (p.shape.rank() != s0.rank())
      fail(ErrorCategory::data_invalid, "SpatialMismatch", "rank mismatch in concat");
    for (std::size_t i = 0; i < s0.rank(); ++i) {
      if (i == s0.channel_axis()) continue;
      if (p.shape[i] != s0[i])
        fail(ErrorCategory::data_invalid, "SpatialMismatch",
             "concat parts disagree: " + p.shape.str() + " vs " + s0.str());
    }
    ctotal += p.shape.channels();
  }

  std::vector<std::int64_t> od = s0.dims;
  od[s0.channel_axis()] = ctotal;
  Tensor<T> out{Shape(od)};

  const std::int64_t vox = s0.spatial(0) * s0.spatial(1) * s0.spatial(2);
  const std::int64_t batch = s0.batch();
  for (std::int64_t b = 0; b < batch; ++b) {
    std::int64_t coff = 0;
    for (const auto& p : parts) {
      const std::int64_t pc = p.shape.channels();
      std::copy_n(p.ptr() + b * pc * vox, pc * vox, out.ptr() + (b * ctotal + coff) * vox);
      coff += pc;
    }
  }
  return out;
}

// Slice channels [c0, c0+n) back out of a feature map (inverse of concat).
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& t, std::int64_t c0, std::int64_t n) {
  const Shape& s = t.shape;
  if (c0 < 0 || n < 1 || c0 + n > s.channels())
    fail(ErrorCategory::data_invalid, "ChannelRange", "slice outside channel extent");
  std::vector<std::int64_t> od = s.dims;
  od[s.channel_axis()] = n;
  Tensor<T> out{Shape(od)};
  const std::int64_t vox = s.spatial(0) * s.spatial(1) * s.spatial(2);
  for (std::int64_t b = 0; b < s.batch(); ++b)
    std::copy_n(t.ptr() + (b * s.channels() + c0) * vox, n * vox, out.ptr() + b * n * vox);
  return out;
}

// Crop `margin` voxels off every face of the last three axes.
template <typename T>
Tensor<T> center_crop(const Tensor<T>& t, std::int64_t margin) {
  if (margin == 0) return t;
  const Shape& s = t.shape;
  if (margin < 0) fail(ErrorCategory::data_invalid, "CropTooLarge", "negative margin");
  for (int i = 0; i < 3; ++i)
    if (s.spatial(i) <= 2 * margin)
      fail(ErrorCategory::data_invalid, "CropTooLarge",
           "margin " + std::to_string(margin) + " too large for " + s.str());

  std::vector<std::int64_t> od = s.dims;
  const std::size_t r = s.rank();
  for (std::size_t i = r - 3; i < r; ++i) od[i] -= 2 * margin;
  Tensor<T> out{Shape(od)};

  const std::int64_t D = s.spatial(0), H = s.spatial(1), W = s.spatial(2);
  const std::int64_t oD = D - 2 * margin, oH = H - 2 * margin, oW = W - 2 * margin;
  const std::int64_t maps = t.numel() / (D * H * W);
  for (std::int64_t m = 0; m < maps; ++m) {
    const T* src = t.ptr() + m * D * H * W;
    T* dst = out.ptr() + m * oD * oH * oW;
    for (std::int64_t z = 0; z < oD; ++z)
      for (std::int64_t y = 0; y < oH; ++y)
        std::copy_n(src + ((z + margin) * H + (y + margin)) * W + margin, oW, dst + (z * oH + y) * oW);
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise / reductions

enum class EwOp { add, sub, mul };

template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, EwOp op) {
  if (a.shape != b.shape)
    fail(ErrorCategory::data_invalid, "ShapeMismatch", a.shape.str() + " vs " + b.shape.str());
  Tensor<T> out{a.shape};
  const std::int64_t n = a.numel();
  switch (op) {
    case EwOp::add: for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] + b[i]; break;
    case EwOp::sub: for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] - b[i]; break;
    case EwOp::mul: for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] * b[i]; break;
  }
  out.check_finite("elementwise");
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& t, T s) {
  Tensor<T> out = t;
  for (auto& v : out.data) v *= s;
  out.check_finite("scale");
  return out;
}

enum class ReduceOp { sum, mean, max };

// Reduce over the given axes (removed from the output shape; reducing all
// axes yields a rank-1 tensor of one element). Sums run in a fixed sequential
// order so results do not depend on threading.
template <typename T>
Tensor<T> reduce(const Tensor<T>& t, const std::vector<std::size_t>& axes, ReduceOp op) {
  const Shape& s = t.shape;
  std::vector<bool> red(s.rank(), false);
  for (auto a : axes) {
    if (a >= s.rank()) fail(ErrorCategory::data_invalid, "ShapeMismatch", "reduce axis out of range");
    red[a] = true;
  }
  std::vector<std::int64_t> od;
  for (std::size_t i = 0; i < s.rank(); ++i)
    if (!red[i]) od.push_back(s[i]);
  if (od.empty()) od.push_back(1);
  Tensor<T> out{Shape(od)};

  const T init = (op == ReduceOp::max) ? std::numeric_limits<T>::lowest() : T{0};
  std::fill(out.data.begin(), out.data.end(), init);
  std::vector<std::int64_t> cnt(out.data.size(), 0);

  std::vector<std::int64_t> idx(s.rank(), 0);
  for (std::int64_t flat = 0; flat < t.numel(); ++flat) {
    std::int64_t oflat = 0;
    for (std::size_t i = 0; i < s.rank(); ++i)
      if (!red[i]) oflat = oflat * s[i] + idx[i];
    if (op == ReduceOp::max)
      out[oflat] = std::max(out[oflat], t[flat]);
    else
      out[oflat] += t[flat];
    ++cnt[static_cast<std::size_t>(oflat)];
    for (std::size_t i = s.rank(); i-- > 0;) {
      if (++idx[i] < s[i]) break;
      idx[i] = 0;
    }
  }
  if (op == ReduceOp::mean)
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] /= static_cast<T>(cnt[i]);
  return out;
}

// Per-voxel argmax over the channel axis; ties break toward the lowest
// channel index. Input [C,D,H,W] or [B,C,D,H,W]; output drops the channel axis.
template <typename T>
LabelArray argmax_channels(const Tensor<T>& t) {
  const Shape& s = t.shape;
  const std::int64_t C = s.channels();
  const std::int64_t vox = s.spatial(0) * s.spatial(1) * s.spatial(2);
  const std::int64_t B = s.batch();

  std::vector<std::int64_t> od = s.dims;
  od.erase(od.begin() + static_cast<std::ptrdiff_t>(s.channel_axis()));
  LabelArray out{Shape(od)};

  for (std::int64_t b = 0; b < B; ++b) {
    const T* base = t.ptr() + b * C * vox;
    std::uint8_t* dst = out.ptr() + b * vox;
    for (std::int64_t v = 0; v < vox; ++v) {
      T best = base[v];
      std::uint8_t arg = 0;
      for (std::int64_t c = 1; c < C; ++c) {
        const T val = base[c * vox + v];
        if (val > best) { best = val; arg = static_cast<std::uint8_t>(c); }
      }
      dst[v] = arg;
    }
  }
  return out;
}

}  // namespace dv
