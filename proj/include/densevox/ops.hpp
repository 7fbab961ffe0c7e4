#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <vector>

#include "densevox/rng.hpp"
#include "densevox/tensor.hpp"

namespace dv {

enum class ConvAlgo { direct, lowered };
enum class Mode { train, infer };

namespace detail {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Gather valid-convolution patches for output voxels [v0, v0+n) of one batch
// item into a [Cin*k^3 x n] matrix chunk, one column per output voxel. The
// GEMM is streamed through fixed-size chunks so the patch matrix never has to
// exist in full (for the deep wide layers it would be hundreds of MB).
template <typename T>
void im2col_range(const T* x, std::int64_t C, std::int64_t D, std::int64_t H, std::int64_t W,
                  std::int64_t kd, std::int64_t kh, std::int64_t kw, std::int64_t v0,
                  std::int64_t n, T* col) {
  const std::int64_t oH = H - kh + 1, oW = W - kw + 1;
  // One pass per (c,i,j) source row serves all kw shifted destination rows;
  // plain index loops so short rows stay inlined instead of becoming memcpy
  // calls.
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t i = 0; i < kd; ++i)
      for (std::int64_t j = 0; j < kh; ++j) {
        T* dst0 = col + ((c * kd + i) * kh + j) * kw * n;
        std::int64_t v = v0;
        std::int64_t written = 0;
        while (written < n) {
          const std::int64_t z = v / (oH * oW);
          const std::int64_t y = (v / oW) % oH;
          const std::int64_t xx = v % oW;
          const std::int64_t run = std::min(oW - xx, n - written);
          const T* src = x + ((c * D + z + i) * H + y + j) * W + xx;
          for (std::int64_t k = 0; k < kw; ++k) {
            T* d = dst0 + k * n + written;
            const T* s = src + k;
            for (std::int64_t t = 0; t < run; ++t) d[t] = s[t];
          }
          v += run;
          written += run;
        }
      }
}

template <typename T>
void col2im_add_range(const T* col, std::int64_t C, std::int64_t D, std::int64_t H, std::int64_t W,
                      std::int64_t kd, std::int64_t kh, std::int64_t kw, std::int64_t v0,
                      std::int64_t n, T* x) {
  const std::int64_t oH = H - kh + 1, oW = W - kw + 1;
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t i = 0; i < kd; ++i)
      for (std::int64_t j = 0; j < kh; ++j) {
        const T* src0 = col + ((c * kd + i) * kh + j) * kw * n;
        std::int64_t v = v0;
        std::int64_t consumed = 0;
        while (consumed < n) {
          const std::int64_t z = v / (oH * oW);
          const std::int64_t y = (v / oW) % oH;
          const std::int64_t xx = v % oW;
          const std::int64_t run = std::min(oW - xx, n - consumed);
          T* d0 = x + ((c * D + z + i) * H + y + j) * W + xx;
          for (std::int64_t k = 0; k < kw; ++k) {
            T* d = d0 + k;
            const T* s = src0 + k * n + consumed;
            for (std::int64_t t = 0; t < run; ++t) d[t] += s[t];
          }
          v += run;
          consumed += run;
        }
      }
}

// Reused scratch so the streamed GEMM never re-faults fresh pages.
template <typename T>
std::vector<T>& conv_workspace(int which) {
  thread_local std::vector<T> ws[2];
  return ws[which];
}

// Column-chunk width for the streamed GEMM. Narrow chunks keep the packed
// patch panel cache-resident; wider ones degrade sharply once the row-major
// panel's stride defeats the packing (measured: 512 is within ~10% of a
// contiguous column-major operand across this net's layer shapes).
inline constexpr std::int64_t kConvChunkCols = 512;

template <typename T>
std::int64_t conv_chunk_cols(std::int64_t nout, std::int64_t oW) {
  return std::max(oW, std::min(nout, kConvChunkCols));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv3d: valid (no padding), stride 1.
// x [B,Cin,D,H,W], w [Cout,Cin,kd,kh,kw], b [Cout] -> [B,Cout,D',H',W']

template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                         ConvAlgo algo = ConvAlgo::lowered) {
  const auto& xd = x.shape.dims;
  const auto& wd = w.shape.dims;
  if (xd.size() != 5 || wd.size() != 5 || xd[1] != wd[1])
    fail(ErrorCategory::data_invalid, "ShapeMismatch",
         "conv3d x " + x.shape.str() + " vs w " + w.shape.str());
  const std::int64_t B = xd[0], Cin = xd[1], D = xd[2], H = xd[3], W = xd[4];
  const std::int64_t Cout = wd[0], kd = wd[2], kh = wd[3], kw = wd[4];
  if (b.numel() != Cout) fail(ErrorCategory::data_invalid, "ShapeMismatch", "bias length");
  if (kd > D || kh > H || kw > W)
    fail(ErrorCategory::data_invalid, "KernelLargerThanInput",
         w.shape.str() + " on " + x.shape.str());
  const std::int64_t oD = D - kd + 1, oH = H - kh + 1, oW = W - kw + 1;
  Tensor<T> out{Shape{B, Cout, oD, oH, oW}};
  const std::int64_t nout = oD * oH * oW;

  if (algo == ConvAlgo::direct) {
    for (std::int64_t bb = 0; bb < B; ++bb)
      for (std::int64_t o = 0; o < Cout; ++o)
        for (std::int64_t z = 0; z < oD; ++z)
          for (std::int64_t y = 0; y < oH; ++y)
            for (std::int64_t xx = 0; xx < oW; ++xx) {
              T acc = b[o];
              for (std::int64_t c = 0; c < Cin; ++c)
                for (std::int64_t i = 0; i < kd; ++i)
                  for (std::int64_t j = 0; j < kh; ++j)
                    for (std::int64_t k = 0; k < kw; ++k)
                      acc += x.at5(bb, c, z + i, y + j, xx + k) * w.at5(o, c, i, j, k);
              out.at5(bb, o, z, y, xx) = acc;
            }
    return out;
  }

  const std::int64_t K = Cin * kd * kh * kw;
  detail::ConstMatMap<T> wm(w.ptr(), Cout, K);
  const bool unit_kernel = (kd == 1 && kh == 1 && kw == 1);
  if (unit_kernel) {
    for (std::int64_t bb = 0; bb < B; ++bb) {
      detail::ConstMatMap<T> pm(x.ptr() + bb * Cin * D * H * W, K, nout);
      detail::MatMap<T> om(out.ptr() + bb * Cout * nout, Cout, nout);
      om.noalias() = wm * pm;
      for (std::int64_t o = 0; o < Cout; ++o) om.row(o).array() += b[o];
    }
    return out;
  }

  const std::int64_t chunk = detail::conv_chunk_cols<T>(nout, oW);
  std::vector<T>& col = detail::conv_workspace<T>(0);
  if (col.size() < static_cast<std::size_t>(K * chunk)) col.resize(static_cast<std::size_t>(K * chunk));
  for (std::int64_t bb = 0; bb < B; ++bb) {
    const T* xptr = x.ptr() + bb * Cin * D * H * W;
    for (std::int64_t v0 = 0; v0 < nout; v0 += chunk) {
      const std::int64_t n = std::min(chunk, nout - v0);
      detail::im2col_range(xptr, Cin, D, H, W, kd, kh, kw, v0, n, col.data());
      detail::ConstMatMap<T> pm(col.data(), K, n);
      Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>, 0,
                 Eigen::OuterStride<>>
          om(out.ptr() + bb * Cout * nout + v0, Cout, n, Eigen::OuterStride<>(nout));
      om.noalias() = wm * pm;
      for (std::int64_t o = 0; o < Cout; ++o) om.row(o).array() += b[o];
    }
  }
  return out;
}

template <typename T>
void conv3d_backward(const Tensor<T>& grad_out, const Tensor<T>& x, const Tensor<T>& w,
                     Tensor<T>* grad_x, Tensor<T>& grad_w, Tensor<T>& grad_b,
                     ConvAlgo algo = ConvAlgo::lowered) {
  const auto& xd = x.shape.dims;
  const auto& wd = w.shape.dims;
  const std::int64_t B = xd[0], Cin = xd[1], D = xd[2], H = xd[3], W = xd[4];
  const std::int64_t Cout = wd[0], kd = wd[2], kh = wd[3], kw = wd[4];
  const std::int64_t oD = D - kd + 1, oH = H - kh + 1, oW = W - kw + 1;
  if (grad_out.shape != Shape{B, Cout, oD, oH, oW})
    fail(ErrorCategory::data_invalid, "ShapeMismatch", "conv3d_backward grad_out " + grad_out.shape.str());
  const std::int64_t nout = oD * oH * oW;

  grad_w = Tensor<T>{w.shape};
  grad_b = Tensor<T>{Shape{Cout}};
  if (grad_x) *grad_x = Tensor<T>{x.shape};

  if (algo == ConvAlgo::direct) {
    for (std::int64_t bb = 0; bb < B; ++bb)
      for (std::int64_t o = 0; o < Cout; ++o)
        for (std::int64_t z = 0; z < oD; ++z)
          for (std::int64_t y = 0; y < oH; ++y)
            for (std::int64_t xx = 0; xx < oW; ++xx) {
              const T g = grad_out.at5(bb, o, z, y, xx);
              grad_b[o] += g;
              for (std::int64_t c = 0; c < Cin; ++c)
                for (std::int64_t i = 0; i < kd; ++i)
                  for (std::int64_t j = 0; j < kh; ++j)
                    for (std::int64_t k = 0; k < kw; ++k) {
                      grad_w.at5(o, c, i, j, k) += g * x.at5(bb, c, z + i, y + j, xx + k);
                      if (grad_x) grad_x->at5(bb, c, z + i, y + j, xx + k) += g * w.at5(o, c, i, j, k);
                    }
            }
    return;
  }

  const std::int64_t K = Cin * kd * kh * kw;
  detail::ConstMatMap<T> wm(w.ptr(), Cout, K);
  detail::MatMap<T> gwm(grad_w.ptr(), Cout, K);
  const bool unit_kernel = (kd == 1 && kh == 1 && kw == 1);
  const std::int64_t chunk = unit_kernel ? nout : detail::conv_chunk_cols<T>(nout, oW);
  std::vector<T>& col = detail::conv_workspace<T>(0);
  std::vector<T>& gcol = detail::conv_workspace<T>(1);
  if (!unit_kernel) {
    if (col.size() < static_cast<std::size_t>(K * chunk)) col.resize(static_cast<std::size_t>(K * chunk));
    if (grad_x && gcol.size() < static_cast<std::size_t>(K * chunk))
      gcol.resize(static_cast<std::size_t>(K * chunk));
  }
  using StridedMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>,
                                0, Eigen::OuterStride<>>;
  for (std::int64_t bb = 0; bb < B; ++bb) {
    const T* xptr = x.ptr() + bb * Cin * D * H * W;
    detail::ConstMatMap<T> gm(grad_out.ptr() + bb * Cout * nout, Cout, nout);
    // Fixed-order accumulation: Eigen's vectorized reduction groups lanes by
    // the operand's runtime alignment, which would make repeated backward
    // passes differ in the last ulp.
    for (std::int64_t o = 0; o < Cout; ++o) {
      const T* r = grad_out.ptr() + (bb * Cout + o) * nout;
      T s{};
      for (std::int64_t q = 0; q < nout; ++q) s += r[q];
      grad_b[o] += s;
    }
    if (unit_kernel) {
      detail::ConstMatMap<T> pm(xptr, K, nout);
      gwm.noalias() += gm * pm.transpose();
      if (grad_x) {
        detail::MatMap<T> gxm(grad_x->ptr() + bb * Cin * D * H * W, Cin, nout);
        gxm.noalias() += wm.transpose() * gm;
      }
      continue;
    }
    for (std::int64_t v0 = 0; v0 < nout; v0 += chunk) {
      const std::int64_t n = std::min(chunk, nout - v0);
      detail::im2col_range(xptr, Cin, D, H, W, kd, kh, kw, v0, n, col.data());
      detail::ConstMatMap<T> pm(col.data(), K, n);
      StridedMap gmc(grad_out.ptr() + bb * Cout * nout + v0, Cout, n, Eigen::OuterStride<>(nout));
      gwm.noalias() += gmc * pm.transpose();
      if (grad_x) {
        detail::MatMap<T> gcm(gcol.data(), K, n);
        gcm.noalias() = wm.transpose() * gmc;
        detail::col2im_add_range(gcol.data(), Cin, D, H, W, kd, kh, kw, v0, n,
                                 grad_x->ptr() + bb * Cin * D * H * W);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// batch normalization, per channel over batch and spatial dims.

// Backward also needs the pre-normalization input, which the caller already
// holds (the tape), so only the batch statistics are cached here.
template <typename T>
struct BatchNormCache {
  std::vector<T> mean, invstd;
};

inline constexpr double kBnEpsilon = 1e-5;
inline constexpr double kBnMomentum = 0.9;

// Train mode normalizes with batch statistics and updates the running
// exponential moving averages in place; infer mode uses the running stats.
template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                            Mode mode, std::vector<T>& running_mean, std::vector<T>& running_var,
                            BatchNormCache<T>* cache) {
  const Shape& s = x.shape;
  const std::int64_t C = s.channels();
  if (gamma.numel() != C || beta.numel() != C)
    fail(ErrorCategory::data_invalid, "ShapeMismatch", "batchnorm gamma/beta length");
  const std::int64_t vox = s.spatial(0) * s.spatial(1) * s.spatial(2);
  const std::int64_t B = s.batch();
  const std::int64_t n = B * vox;

  std::vector<T> mean(static_cast<std::size_t>(C)), var(static_cast<std::size_t>(C));
  if (mode == Mode::train) {
    for (std::int64_t c = 0; c < C; ++c) {
      double m = 0;
      for (std::int64_t b = 0; b < B; ++b) {
        const T* p = x.ptr() + (b * C + c) * vox;
        for (std::int64_t v = 0; v < vox; ++v) m += p[v];
      }
      m /= n;
      double v2 = 0;
      for (std::int64_t b = 0; b < B; ++b) {
        const T* p = x.ptr() + (b * C + c) * vox;
        for (std::int64_t v = 0; v < vox; ++v) {
          const double d = p[v] - m;
          v2 += d * d;
        }
      }
      v2 /= n;
      mean[c] = static_cast<T>(m);
      var[c] = static_cast<T>(v2);
      running_mean[c] = static_cast<T>(kBnMomentum * running_mean[c] + (1 - kBnMomentum) * m);
      running_var[c] = static_cast<T>(kBnMomentum * running_var[c] + (1 - kBnMomentum) * v2);
    }
  } else {
    if (running_mean.size() != static_cast<std::size_t>(C) || running_var.size() != static_cast<std::size_t>(C))
      fail(ErrorCategory::data_invalid, "MissingRunningStats", "batchnorm infer without running stats");
    for (std::int64_t c = 0; c < C; ++c) {
      mean[c] = running_mean[c];
      var[c] = running_var[c];
    }
  }

  Tensor<T> out{s};
  std::vector<T> invstd(static_cast<std::size_t>(C));
  for (std::int64_t c = 0; c < C; ++c)
    invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var[c]) + kBnEpsilon));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c) {
      const T* p = x.ptr() + (b * C + c) * vox;
      T* o = out.ptr() + (b * C + c) * vox;
      const T m = mean[c], is = invstd[c], g = gamma[c], bt = beta[c];
      for (std::int64_t v = 0; v < vox; ++v) o[v] = (p[v] - m) * is * g + bt;
    }
  if (cache) {
    cache->mean = std::move(mean);
    cache->invstd = std::move(invstd);
  }
  return out;
}

// Full batch-statistics adjoint (train mode). `x` is the forward input.
template <typename T>
void batchnorm_backward(const Tensor<T>& grad_out, const Tensor<T>& x, const BatchNormCache<T>& cache,
                        const Tensor<T>& gamma, Tensor<T>& grad_x, Tensor<T>& grad_gamma,
                        Tensor<T>& grad_beta) {
  const Shape& s = x.shape;
  const std::int64_t C = s.channels();
  const std::int64_t vox = s.spatial(0) * s.spatial(1) * s.spatial(2);
  const std::int64_t B = s.batch();
  const std::int64_t n = B * vox;

  grad_x = Tensor<T>{s};
  grad_gamma = Tensor<T>{Shape{C}};
  grad_beta = Tensor<T>{Shape{C}};

  for (std::int64_t c = 0; c < C; ++c) {
    const T m = cache.mean[c], is = cache.invstd[c], g = gamma[c];
    double sum_dy = 0, sum_dy_xhat = 0;
    for (std::int64_t b = 0; b < B; ++b) {
      const T* gp = grad_out.ptr() + (b * C + c) * vox;
      const T* xp = x.ptr() + (b * C + c) * vox;
      for (std::int64_t v = 0; v < vox; ++v) {
        sum_dy += gp[v];
        sum_dy_xhat += gp[v] * static_cast<double>((xp[v] - m) * is);
      }
    }
    grad_beta[c] = static_cast<T>(sum_dy);
    grad_gamma[c] = static_cast<T>(sum_dy_xhat);
    const double k1 = sum_dy / n, k2 = sum_dy_xhat / n;
    for (std::int64_t b = 0; b < B; ++b) {
      const T* gp = grad_out.ptr() + (b * C + c) * vox;
      const T* xp = x.ptr() + (b * C + c) * vox;
      T* o = grad_x.ptr() + (b * C + c) * vox;
      for (std::int64_t v = 0; v < vox; ++v) {
        const double xhat = (xp[v] - m) * is;
        o[v] = static_cast<T>(g * is * (gp[v] - k1 - xhat * k2));
      }
    }
  }
}

// ---------------------------------------------------------------------------
// PReLU with one learnable slope per channel.

template <typename T>
Tensor<T> prelu_forward(const Tensor<T>& x, const Tensor<T>& slope) {
  const std::int64_t C = x.shape.channels();
  if (slope.numel() != C) fail(ErrorCategory::data_invalid, "ShapeMismatch", "prelu slope length");
  const std::int64_t vox = x.shape.spatial(0) * x.shape.spatial(1) * x.shape.spatial(2);
  Tensor<T> out{x.shape};
  for (std::int64_t b = 0; b < x.shape.batch(); ++b)
    for (std::int64_t c = 0; c < C; ++c) {
      const T* p = x.ptr() + (b * C + c) * vox;
      T* o = out.ptr() + (b * C + c) * vox;
      const T a = slope[c];
      for (std::int64_t v = 0; v < vox; ++v) o[v] = p[v] > 0 ? p[v] : a * p[v];
    }
  return out;
}

template <typename T>
void prelu_backward(const Tensor<T>& grad_out, const Tensor<T>& x, const Tensor<T>& slope,
                    Tensor<T>& grad_x, Tensor<T>& grad_slope) {
  const std::int64_t C = x.shape.channels();
  const std::int64_t vox = x.shape.spatial(0) * x.shape.spatial(1) * x.shape.spatial(2);
  grad_x = Tensor<T>{x.shape};
  grad_slope = Tensor<T>{Shape{C}};
  for (std::int64_t b = 0; b < x.shape.batch(); ++b)
    for (std::int64_t c = 0; c < C; ++c) {
      const T* p = x.ptr() + (b * C + c) * vox;
      const T* g = grad_out.ptr() + (b * C + c) * vox;
      T* gx = grad_x.ptr() + (b * C + c) * vox;
      const T a = slope[c];
      double ga = 0;
      for (std::int64_t v = 0; v < vox; ++v) {
        if (p[v] > 0) {
          gx[v] = g[v];
        } else {
          gx[v] = a * g[v];
          ga += static_cast<double>(g[v]) * p[v];
        }
      }
      grad_slope[c] += static_cast<T>(ga);
    }
}

// ---------------------------------------------------------------------------
// Inverted dropout. The mask is drawn from the provided RNG and returned so
// backward (and frozen-mask gradient checks) can reuse it.

template <typename T>
Tensor<T> dropout_forward(const Tensor<T>& x, double rate, Mode mode, Rng& rng,
                          std::vector<std::uint8_t>* mask_out) {
  if (rate < 0 || rate >= 1) fail(ErrorCategory::data_invalid, "InvalidRate", std::to_string(rate));
  if (mode == Mode::infer || rate == 0) {
    if (mask_out) mask_out->assign(static_cast<std::size_t>(x.numel()), 1);
    return x;
  }
  Tensor<T> out{x.shape};
  const T inv_keep = static_cast<T>(1.0 / (1.0 - rate));
  if (mask_out) mask_out->resize(static_cast<std::size_t>(x.numel()));
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const bool keep = rng.uniform() >= rate;
    out[i] = keep ? x[i] * inv_keep : T{0};
    if (mask_out) (*mask_out)[static_cast<std::size_t>(i)] = keep ? 1 : 0;
  }
  return out;
}

template <typename T>
Tensor<T> dropout_apply_mask(const Tensor<T>& x, double rate, const std::vector<std::uint8_t>& mask) {
  Tensor<T> out{x.shape};
  const T inv_keep = static_cast<T>(1.0 / (1.0 - rate));
  for (std::int64_t i = 0; i < x.numel(); ++i)
    out[i] = mask[static_cast<std::size_t>(i)] ? x[i] * inv_keep : T{0};
  return out;
}

template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& grad_out, double rate,
                           const std::vector<std::uint8_t>& mask) {
  return dropout_apply_mask(grad_out, rate, mask);
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy over the channel axis, mean over all voxels.
// logits [B,C,D,H,W], targets [B,D,H,W] with values < C.

template <typename T>
struct XentResult {
  double loss;
  Tensor<T> grad_logits;
  Tensor<T> probs;  // softmax, same shape as logits
};

template <typename T>
XentResult<T> softmax_xent(const Tensor<T>& logits, const LabelArray& targets) {
  const Shape& s = logits.shape;
  const std::int64_t B = s.dims[0], C = s.dims[1];
  const std::int64_t vox = s.spatial(0) * s.spatial(1) * s.spatial(2);
  if (targets.numel() != B * vox)
    fail(ErrorCategory::data_invalid, "ShapeMismatch", "targets vs logits");

  XentResult<T> r;
  r.probs = Tensor<T>{s};
  r.grad_logits = Tensor<T>{s};
  const std::int64_t total = B * vox;
  double loss = 0;
  for (std::int64_t b = 0; b < B; ++b) {
    const T* base = logits.ptr() + b * C * vox;
    T* pbase = r.probs.ptr() + b * C * vox;
    T* gbase = r.grad_logits.ptr() + b * C * vox;
    const std::uint8_t* t = targets.ptr() + b * vox;
    for (std::int64_t v = 0; v < vox; ++v) {
      if (t[v] >= C)
        fail(ErrorCategory::data_invalid, "LabelOutOfRange", std::to_string(int(t[v])));
      T mx = base[v];
      for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, base[c * vox + v]);
      double z = 0;
      for (std::int64_t c = 0; c < C; ++c) z += std::exp(static_cast<double>(base[c * vox + v] - mx));
      const double logz = std::log(z);
      for (std::int64_t c = 0; c < C; ++c) {
        const double p = std::exp(static_cast<double>(base[c * vox + v] - mx)) / z;
        pbase[c * vox + v] = static_cast<T>(p);
        gbase[c * vox + v] = static_cast<T>((p - (t[v] == c ? 1.0 : 0.0)) / total);
      }
      loss -= static_cast<double>(base[t[v] * vox + v] - mx) - logz;
    }
  }
  r.loss = loss / total;
  return r;
}

// Softmax only (inference probability maps).
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  const Shape& s = logits.shape;
  const std::int64_t C = s.channels();
  const std::int64_t vox = s.spatial(0) * s.spatial(1) * s.spatial(2);
  Tensor<T> out{s};
  for (std::int64_t b = 0; b < s.batch(); ++b) {
    const T* base = logits.ptr() + b * C * vox;
    T* o = out.ptr() + b * C * vox;
    for (std::int64_t v = 0; v < vox; ++v) {
      T mx = base[v];
      for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, base[c * vox + v]);
      double z = 0;
      for (std::int64_t c = 0; c < C; ++c) z += std::exp(static_cast<double>(base[c * vox + v] - mx));
      for (std::int64_t c = 0; c < C; ++c)
        o[c * vox + v] = static_cast<T>(std::exp(static_cast<double>(base[c * vox + v] - mx)) / z);
    }
  }
  return out;
}

}  // namespace dv
