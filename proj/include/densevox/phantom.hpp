#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>

#include "densevox/rng.hpp"
#include "densevox/volume.hpp"

namespace dv {

// Synthetic multi-modal labeled brain phantom: concentric perturbed shells
// (background / CSF / GM / WM) with low GM-WM contrast of opposite sign in
// the two modalities, so joint use of both is informative.
struct PhantomConfig {
  std::array<std::int64_t, 3> dims{64, 64, 64};
  std::uint64_t seed = 1;
  std::array<double, 2> noise_sigma{0.03, 0.03};  // of the unit dynamic range
  double perturb_amplitude = 0.08;                // relative interface wobble
  int perturb_frequency = 3;
  double bias_amplitude = 0.0;                    // multiplicative field, <= 0.2
  // Class mean intensities [background, CSF, GM, WM] per modality.
  std::array<std::array<double, 4>, 2> class_means{{
      {0.05, 0.25, 0.58, 0.62},   // T1-like: WM > GM > CSF
      {0.05, 0.85, 0.44, 0.40},   // T2-like: CSF > GM > WM
  }};
  // Interface radii as fractions of half the smallest dim: WM core, GM
  // ribbon, outer CSF shell.
  std::array<double, 3> radii{0.45, 0.62, 0.78};

  void validate() const {
    for (auto d : dims)
      if (d < 8) fail(ErrorCategory::data_invalid, "InvalidSpec", "phantom dims too small");
    for (auto s : noise_sigma)
      if (s < 0) fail(ErrorCategory::data_invalid, "InvalidSpec", "negative noise sigma");
    if (bias_amplitude < 0 || bias_amplitude > 0.2)
      fail(ErrorCategory::data_invalid, "InvalidSpec", "bias amplitude outside [0, 0.2]");
    for (int m = 0; m < 2; ++m)
      for (int a = 0; a < 4; ++a)
        for (int b = a + 1; b < 4; ++b)
          if (class_means[m][a] == class_means[m][b])
            fail(ErrorCategory::data_invalid, "InvalidSpec", "class means must be distinct per modality");
    // Shells must stay nested under the worst-case perturbation.
    for (int k = 0; k + 1 < 3; ++k)
      if (radii[k] * (1 + perturb_amplitude) >= radii[k + 1] * (1 - perturb_amplitude))
        fail(ErrorCategory::data_invalid, "DegenerateGeometry", "shells would invert");
    if (radii[2] * (1 + perturb_amplitude) >= 1.0)
      fail(ErrorCategory::data_invalid, "DegenerateGeometry", "outer shell exceeds the volume");
  }
};

inline Subject generate_phantom(const PhantomConfig& cfg, const std::string& id) {
  cfg.validate();
  const auto [D, H, W] = cfg.dims;
  const double cz = (D - 1) / 2.0, cy = (H - 1) / 2.0, cx = (W - 1) / 2.0;
  const double rbase = 0.5 * static_cast<double>(std::min({D, H, W}));

  // Seeded phases, one pair per interface.
  Rng prng = Rng::derive(cfg.seed, 0xfa5e);
  std::array<std::array<double, 2>, 3> phase;
  for (auto& p : phase)
    for (auto& v : p) v = prng.uniform() * 2.0 * M_PI;

  auto radius = [&](int k, double theta, double phi) {
    const double f = cfg.perturb_frequency;
    const double wobble = std::sin(f * theta + phase[k][0]) * std::sin(f * phi + phase[k][1]);
    return cfg.radii[k] * rbase * (1.0 + cfg.perturb_amplitude * wobble);
  };

  Volume labels;
  labels.dims = cfg.dims;
  labels.role = VoxelRole::label;
  labels.data.resize(static_cast<std::size_t>(labels.numel()));
  for (std::int64_t z = 0; z < D; ++z)
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x) {
        const double dz = z - cz, dy = y - cy, dx = x - cx;
        const double r = std::sqrt(dz * dz + dy * dy + dx * dx);
        float lbl = 0;
        if (r > 0) {
          const double theta = std::acos(dz / r);
          const double phi = std::atan2(dy, dx);
          if (r < radius(0, theta, phi)) lbl = 3;       // WM core
          else if (r < radius(1, theta, phi)) lbl = 2;  // GM ribbon
          else if (r < radius(2, theta, phi)) lbl = 1;  // CSF shell
        } else {
          lbl = 3;
        }
        labels.at(z, y, x) = lbl;
      }

  Volume mask = labels;
  mask.role = VoxelRole::label;
  for (auto& v : mask.data) v = v > 0 ? 1.f : 0.f;

  // Optional smooth multiplicative bias field, trilinear over a 3x3x3 grid.
  std::array<double, 27> bias_grid;
  bias_grid.fill(1.0);
  if (cfg.bias_amplitude > 0) {
    Rng brng = Rng::derive(cfg.seed, 0xb1a5);
    for (auto& v : bias_grid) v = 1.0 + cfg.bias_amplitude * (2.0 * brng.uniform() - 1.0);
  }
  auto bias_at = [&](std::int64_t z, std::int64_t y, std::int64_t x) {
    if (cfg.bias_amplitude == 0) return 1.0;
    const double fz = 2.0 * z / std::max<std::int64_t>(D - 1, 1);
    const double fy = 2.0 * y / std::max<std::int64_t>(H - 1, 1);
    const double fx = 2.0 * x / std::max<std::int64_t>(W - 1, 1);
    const int iz = std::min(1, static_cast<int>(fz)), iy = std::min(1, static_cast<int>(fy)),
              ix = std::min(1, static_cast<int>(fx));
    const double tz = fz - iz, ty = fy - iy, tx = fx - ix;
    auto g = [&](int a, int b, int c) { return bias_grid[static_cast<std::size_t>((a * 3 + b) * 3 + c)]; };
    double v = 0;
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b)
        for (int c = 0; c < 2; ++c)
          v += g(iz + a, iy + b, ix + c) * (a ? tz : 1 - tz) * (b ? ty : 1 - ty) * (c ? tx : 1 - tx);
    return v;
  };

  Subject s;
  s.id = id;
  for (int m = 0; m < 2; ++m) {
    Volume vol;
    vol.dims = cfg.dims;
    vol.role = VoxelRole::intensity;
    vol.data.resize(static_cast<std::size_t>(vol.numel()));
    Rng nrng = Rng::derive(cfg.seed, 0x401 + static_cast<std::uint64_t>(m));
    std::size_t i = 0;
    for (std::int64_t z = 0; z < D; ++z)
      for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x, ++i) {
          const int lbl = static_cast<int>(labels.data[i]);
          double v = cfg.class_means[m][lbl] * bias_at(z, y, x);
          if (cfg.noise_sigma[m] > 0) v += cfg.noise_sigma[m] * nrng.gaussian();
          vol.data[i] = static_cast<float>(v);
        }
    s.modalities.push_back(std::move(vol));
  }
  s.labels = std::move(labels);
  s.mask = std::move(mask);
  s.validate();
  return s;
}

}  // namespace dv
