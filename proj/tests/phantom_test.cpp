#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <set>

#include "densevox/metrics.hpp"
#include "densevox/phantom.hpp"

using namespace dv;

namespace {

TEST(Phantom, DeterministicForFixedSeed) {
  PhantomConfig cfg;
  cfg.dims = {32, 32, 32};
  cfg.seed = 42;
  const Subject a = generate_phantom(cfg, "a");
  const Subject b = generate_phantom(cfg, "b");
  EXPECT_EQ(a.modalities[0].data, b.modalities[0].data);
  EXPECT_EQ(a.modalities[1].data, b.modalities[1].data);
  EXPECT_EQ(a.labels->data, b.labels->data);

  cfg.seed = 43;
  const Subject c = generate_phantom(cfg, "c");
  EXPECT_NE(a.modalities[0].data, c.modalities[0].data);
}

TEST(Phantom, AllFourClassesPresent) {
  PhantomConfig cfg;
  const Subject s = generate_phantom(cfg, "s");
  std::array<std::int64_t, 4> counts{};
  for (float v : s.labels->data) ++counts[static_cast<std::size_t>(v)];
  const auto n = s.labels->numel();
  for (int c = 0; c < 4; ++c)
    EXPECT_GT(counts[static_cast<std::size_t>(c)], n / 100) << "class " << c;
}

TEST(Phantom, MaskMatchesNonBackground) {
  PhantomConfig cfg;
  cfg.dims = {32, 32, 32};
  const Subject s = generate_phantom(cfg, "s");
  for (std::size_t i = 0; i < s.mask->data.size(); ++i)
    ASSERT_EQ(s.mask->data[i] != 0.f, s.labels->data[i] != 0.f);
}

TEST(Phantom, NoiselessVolumesHaveFourIntensities) {
  PhantomConfig cfg;
  cfg.dims = {32, 32, 32};
  cfg.noise_sigma = {0.0, 0.0};
  const Subject s = generate_phantom(cfg, "s");
  for (const auto& m : s.modalities) {
    std::set<float> values(m.data.begin(), m.data.end());
    EXPECT_EQ(values.size(), 4u);
  }
}

TEST(Phantom, ClassMeansNearConfiguredValues) {
  PhantomConfig cfg;
  const Subject s = generate_phantom(cfg, "s");
  for (int m = 0; m < 2; ++m) {
    std::array<double, 4> sum{};
    std::array<std::int64_t, 4> cnt{};
    for (std::size_t i = 0; i < s.labels->data.size(); ++i) {
      const auto c = static_cast<std::size_t>(s.labels->data[i]);
      sum[c] += s.modalities[static_cast<std::size_t>(m)].data[i];
      ++cnt[c];
    }
    for (int c = 0; c < 4; ++c) {
      const auto cc = static_cast<std::size_t>(c);
      const double mean = sum[cc] / static_cast<double>(cnt[cc]);
      const double se = cfg.noise_sigma[static_cast<std::size_t>(m)] / std::sqrt(double(cnt[cc]));
      EXPECT_NEAR(mean, cfg.class_means[static_cast<std::size_t>(m)][cc], 3 * se + 1e-9)
          << "modality " << m << " class " << c;
    }
  }
}

TEST(Phantom, SingleModalityThresholdCannotSeparateGmWm) {
  // GM/WM contrast is deliberately small: the best single threshold on the
  // first modality must not reach 0.95 Dice for either tissue.
  PhantomConfig cfg;
  const Subject s = generate_phantom(cfg, "s");
  const auto& t1 = s.modalities[0].data;
  const auto& lbl = s.labels->data;

  double best_gm = 0, best_wm = 0;
  for (int ti = 0; ti <= 200; ++ti) {
    const double thr = cfg.class_means[0][2] - 0.1 + 0.2 * ti / 200.0;  // sweep around GM/WM means
    std::int64_t gm_i = 0, gm_p = 0, gm_r = 0, wm_i = 0, wm_p = 0, wm_r = 0;
    for (std::size_t i = 0; i < lbl.size(); ++i) {
      const int l = static_cast<int>(lbl[i]);
      if (l != 2 && l != 3) continue;  // classify only within the GM/WM region
      const bool pred_wm = t1[i] > thr;
      if (pred_wm) ++wm_p; else ++gm_p;
      if (l == 3) ++wm_r; else ++gm_r;
      if (pred_wm && l == 3) ++wm_i;
      if (!pred_wm && l == 2) ++gm_i;
    }
    best_gm = std::max(best_gm, 2.0 * gm_i / std::max<std::int64_t>(gm_p + gm_r, 1));
    best_wm = std::max(best_wm, 2.0 * wm_i / std::max<std::int64_t>(wm_p + wm_r, 1));
  }
  EXPECT_LE(best_gm, 0.95);
  EXPECT_LE(best_wm, 0.95);
  EXPECT_GT(best_wm, 0.5);  // but the modality is not pure noise either
}

TEST(Phantom, BiasFieldKeepsClassesUsable) {
  PhantomConfig cfg;
  cfg.dims = {32, 32, 32};
  cfg.bias_amplitude = 0.2;
  const Subject s = generate_phantom(cfg, "s");
  std::array<std::int64_t, 4> counts{};
  for (float v : s.labels->data) ++counts[static_cast<std::size_t>(v)];
  for (auto c : counts) EXPECT_GT(c, 0);
}

TEST(Phantom, ConfigValidationErrors) {
  PhantomConfig small;
  small.dims = {4, 64, 64};
  EXPECT_THROW(generate_phantom(small, "x"), Error);

  PhantomConfig inverted;
  inverted.radii = {0.7, 0.6, 0.8};  // shells out of order
  try {
    generate_phantom(inverted, "x");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "DegenerateGeometry");
  }

  PhantomConfig bias;
  bias.bias_amplitude = 0.5;
  EXPECT_THROW(generate_phantom(bias, "x"), Error);

  PhantomConfig wobble;
  wobble.perturb_amplitude = 0.5;  // outer shell would leave the volume
  EXPECT_THROW(generate_phantom(wobble, "x"), Error);
}

}  // namespace
