#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "densevox/volume.hpp"

namespace dv {

struct BinaryMask {
  std::array<std::int64_t, 3> dims{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<std::uint8_t> voxels;

  std::int64_t numel() const { return dims[0] * dims[1] * dims[2]; }
  std::uint8_t at(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return voxels[static_cast<std::size_t>((z * dims[1] + y) * dims[2] + x)];
  }

  static BinaryMask from_labels(const Volume& labels, int cls) {
    BinaryMask m;
    m.dims = labels.dims;
    m.spacing = labels.spacing;
    m.voxels.resize(static_cast<std::size_t>(labels.numel()));
    for (std::size_t i = 0; i < m.voxels.size(); ++i)
      m.voxels[i] = (static_cast<int>(labels.data[i]) == cls) ? 1 : 0;
    return m;
  }
};

inline void check_same_dims(const BinaryMask& a, const BinaryMask& b) {
  if (a.dims != b.dims) fail(ErrorCategory::data_invalid, "DimMismatch", "mask dims differ");
}

// Dice overlap 2|A∩B| / (|A|+|B|); defined as 1 when both masks are empty.
inline double dice(const BinaryMask& a, const BinaryMask& b) {
  check_same_dims(a, b);
  std::int64_t na = 0, nb = 0, ni = 0;
  for (std::size_t i = 0; i < a.voxels.size(); ++i) {
    na += a.voxels[i];
    nb += b.voxels[i];
    ni += (a.voxels[i] & b.voxels[i]);
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(ni) / static_cast<double>(na + nb);
}

// Boundary voxels: foreground with at least one background 6-neighbor; the
// volume border counts as background.
using SurfacePointSet = std::vector<std::array<std::int64_t, 3>>;

inline SurfacePointSet extract_surface(const BinaryMask& m) {
  SurfacePointSet pts;
  const auto [D, H, W] = m.dims;
  for (std::int64_t z = 0; z < D; ++z)
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x) {
        if (!m.at(z, y, x)) continue;
        const bool border = z == 0 || z == D - 1 || y == 0 || y == H - 1 || x == 0 || x == W - 1;
        if (border || !m.at(z - 1, y, x) || !m.at(z + 1, y, x) || !m.at(z, y - 1, x) ||
            !m.at(z, y + 1, x) || !m.at(z, y, x - 1) || !m.at(z, y, x + 1))
          pts.push_back({z, y, x});
      }
  return pts;
}

namespace detail {

inline constexpr double kDtInf = 1e30;

// 1-D lower envelope of parabolas (Felzenszwalb & Huttenlocher) with sample
// positions i*s, exact squared Euclidean distances.
inline void dt1d(double* f, std::int64_t n, double s, double* out, int* v, double* zb) {
  int k = 0;
  v[0] = 0;
  zb[0] = -kDtInf;
  zb[1] = kDtInf;
  for (std::int64_t q = 1; q < n; ++q) {
    double inter;
    while (true) {
      const double qq = q * s, vv = v[k] * s;
      inter = ((f[q] + qq * qq) - (f[v[k]] + vv * vv)) / (2 * qq - 2 * vv);
      if (k > 0 && inter <= zb[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = static_cast<int>(q);
    zb[k] = inter;
    zb[k + 1] = kDtInf;
  }
  k = 0;
  for (std::int64_t q = 0; q < n; ++q) {
    const double qs = q * s;
    while (zb[k + 1] < qs) ++k;
    const double d = qs - v[k] * s;
    out[q] = d * d + f[v[k]];
  }
}

}  // namespace detail

// Exact squared mm distance from every voxel center to the nearest point of
// `pts`, on the grid of `dims` with the given spacing.
inline std::vector<double> squared_distance_field(const SurfacePointSet& pts,
                                                  const std::array<std::int64_t, 3>& dims,
                                                  const std::array<double, 3>& spacing) {
  const auto [D, H, W] = dims;
  std::vector<double> g(static_cast<std::size_t>(D * H * W), detail::kDtInf);
  for (const auto& p : pts) g[static_cast<std::size_t>((p[0] * H + p[1]) * W + p[2])] = 0.0;

  const std::int64_t nmax = std::max({D, H, W});
  std::vector<double> f(nmax), out(nmax), zb(nmax + 1);
  std::vector<int> v(nmax);

  // pass over x (innermost), then y, then z
  for (std::int64_t z = 0; z < D; ++z)
    for (std::int64_t y = 0; y < H; ++y) {
      double* row = g.data() + (z * H + y) * W;
      detail::dt1d(row, W, spacing[2], out.data(), v.data(), zb.data());
      std::copy_n(out.data(), W, row);
    }
  for (std::int64_t z = 0; z < D; ++z)
    for (std::int64_t x = 0; x < W; ++x) {
      for (std::int64_t y = 0; y < H; ++y) f[y] = g[(z * H + y) * W + x];
      detail::dt1d(f.data(), H, spacing[1], out.data(), v.data(), zb.data());
      for (std::int64_t y = 0; y < H; ++y) g[(z * H + y) * W + x] = out[y];
    }
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = 0; x < W; ++x) {
      for (std::int64_t z = 0; z < D; ++z) f[z] = g[(z * H + y) * W + x];
      detail::dt1d(f.data(), D, spacing[0], out.data(), v.data(), zb.data());
      for (std::int64_t z = 0; z < D; ++z) g[(z * H + y) * W + x] = out[z];
    }
  return g;
}

// Distances (mm) from each point of `from` to the nearest point of `to`.
inline std::vector<double> directed_surface_distances(const SurfacePointSet& from,
                                                      const SurfacePointSet& to,
                                                      const std::array<std::int64_t, 3>& dims,
                                                      const std::array<double, 3>& spacing) {
  const auto field = squared_distance_field(to, dims, spacing);
  std::vector<double> d;
  d.reserve(from.size());
  for (const auto& p : from)
    d.push_back(std::sqrt(field[static_cast<std::size_t>((p[0] * dims[1] + p[1]) * dims[2] + p[2])]));
  return d;
}

enum class MhdMode { percentile95, dubuisson_jain };

// Nearest-rank percentile: the ceil(p*n)-th smallest value (1-based).
inline double nearest_rank_percentile(std::vector<double> d, double p) {
  std::sort(d.begin(), d.end());
  const auto n = static_cast<std::int64_t>(d.size());
  const auto rank = static_cast<std::int64_t>(std::ceil(p * static_cast<double>(n)));
  return d[static_cast<std::size_t>(std::clamp<std::int64_t>(rank, 1, n) - 1)];
}

inline double mean_of(const std::vector<double>& d) {
  double s = 0;
  for (double v : d) s += v;
  return s / static_cast<double>(d.size());
}

// Modified Hausdorff distance between the surfaces of two masks.
// percentile95: max of the two directed 95th-percentile distances (nearest
// rank); dubuisson_jain: max of the two directed means.
inline double mhd(const BinaryMask& a, const BinaryMask& b, MhdMode mode = MhdMode::percentile95) {
  check_same_dims(a, b);
  const auto sa = extract_surface(a);
  const auto sb = extract_surface(b);
  if (sa.empty() || sb.empty())
    fail(ErrorCategory::data_invalid, "EmptySurface", "mhd undefined for empty surface");
  const auto dab = directed_surface_distances(sa, sb, a.dims, a.spacing);
  const auto dba = directed_surface_distances(sb, sa, a.dims, a.spacing);
  if (mode == MhdMode::percentile95)
    return std::max(nearest_rank_percentile(dab, 0.95), nearest_rank_percentile(dba, 0.95));
  return std::max(mean_of(dab), mean_of(dba));
}

// Average symmetric surface distance: nearest-surface distances pooled over
// both surfaces.
inline double asd(const BinaryMask& a, const BinaryMask& b) {
  check_same_dims(a, b);
  const auto sa = extract_surface(a);
  const auto sb = extract_surface(b);
  if (sa.empty() || sb.empty())
    fail(ErrorCategory::data_invalid, "EmptySurface", "asd undefined for empty surface");
  const auto dab = directed_surface_distances(sa, sb, a.dims, a.spacing);
  const auto dba = directed_surface_distances(sb, sa, a.dims, a.spacing);
  double s = 0;
  for (double v : dab) s += v;
  for (double v : dba) s += v;
  return s / static_cast<double>(dab.size() + dba.size());
}

// ---------------------------------------------------------------------------

struct ClassMetrics {
  double dc = 0;
  std::optional<double> mhd;  // unset when a surface is empty
  std::optional<double> asd;
};

struct MetricsReport {
  std::array<ClassMetrics, 3> per_class;  // CSF, GM, WM
  std::string subject_id;
  std::string config_hash;
};

inline const char* tissue_name(int cls) {
  switch (cls) {
    case 1: return "CSF";
    case 2: return "GM";
    case 3: return "WM";
  }
  return "?";
}

// Per-class (class vs rest) DC / MHD / ASD for the three tissue classes;
// background is excluded from the report.
inline MetricsReport evaluate_labels(const Volume& pred, const Volume& ref,
                                     MhdMode mode = MhdMode::percentile95,
                                     const std::string& subject_id = "") {
  if (pred.dims != ref.dims) fail(ErrorCategory::data_invalid, "DimMismatch", "pred vs ref dims");
  MetricsReport rep;
  rep.subject_id = subject_id;
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](std::uint64_t v) { h = (h ^ v) * 1099511628211ULL; };
  for (auto d : ref.dims) mix(static_cast<std::uint64_t>(d));
  for (auto s : ref.spacing) {
    std::uint64_t bits;
    std::memcpy(&bits, &s, 8);
    mix(bits);
  }
  mix(static_cast<std::uint64_t>(mode));
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  rep.config_hash = buf;

  for (int cls = 1; cls <= 3; ++cls) {
    BinaryMask a = BinaryMask::from_labels(pred, cls);
    BinaryMask b = BinaryMask::from_labels(ref, cls);
    a.spacing = b.spacing = ref.spacing;
    ClassMetrics& cm = rep.per_class[static_cast<std::size_t>(cls - 1)];
    cm.dc = dice(a, b);
    try {
      cm.mhd = mhd(a, b, mode);
      cm.asd = asd(a, b);
    } catch (const Error& e) {
      if (e.code() != "EmptySurface") throw;
    }
  }
  return rep;
}

}  // namespace dv
