#include <gtest/gtest.h>

#include <cmath>

#include "densevox/rng.hpp"
#include "densevox/tensor.hpp"

using namespace dv;

namespace {

Tensor<float> random_tensor(Shape s, std::uint64_t seed) {
  Tensor<float> t{std::move(s)};
  Rng rng(seed);
  for (auto& v : t.data) v = static_cast<float>(rng.gaussian());
  return t;
}

TEST(Shape, RejectsNonPositiveDims) {
  EXPECT_THROW(Shape({3, 0, 2}), Error);
  EXPECT_THROW(Shape({-1}), Error);
}

TEST(Shape, RejectsOverflowingElementCount) {
  EXPECT_THROW(Shape({1'000'000'000, 1'000'000'000, 1'000'000'000}), Error);
}

TEST(Shape, AxisAccessors) {
  const Shape s{2, 25, 23, 23, 23};
  EXPECT_EQ(s.batch(), 2);
  EXPECT_EQ(s.channels(), 25);
  EXPECT_EQ(s.spatial(0), 23);
  EXPECT_EQ(s.numel(), 2 * 25 * 23 * 23 * 23);
}

TEST(Concat, AddsChannelCounts) {
  const auto a = random_tensor(Shape{25, 23, 23, 23}, 1);
  const auto b = random_tensor(Shape{25, 23, 23, 23}, 2);
  const auto c = concat_channels<float>({a, b});
  EXPECT_EQ(c.shape, (Shape{50, 23, 23, 23}));
}

TEST(Concat, SinglePartIsIdentity) {
  const auto a = random_tensor(Shape{4, 5, 5, 5}, 3);
  const auto c = concat_channels<float>({a});
  EXPECT_EQ(c.shape, a.shape);
  EXPECT_EQ(c.data, a.data);
}

TEST(Concat, MixedChannelCounts) {
  // 2 + 25 + 25 at spatial 23^3, the widest early fusion in the nets
  const auto a = random_tensor(Shape{2, 23, 23, 23}, 4);
  const auto b = random_tensor(Shape{25, 23, 23, 23}, 5);
  const auto c = random_tensor(Shape{25, 23, 23, 23}, 6);
  const auto out = concat_channels<float>({a, b, c});
  EXPECT_EQ(out.shape, (Shape{52, 23, 23, 23}));
}

TEST(Concat, ErrorsOnSpatialMismatchAndEmpty) {
  const auto a = random_tensor(Shape{2, 4, 4, 4}, 7);
  const auto b = random_tensor(Shape{2, 4, 4, 5}, 8);
  try {
    concat_channels<float>({a, b});
    FAIL() << "expected error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "SpatialMismatch");
  }
  try {
    concat_channels<float>({});
    FAIL() << "expected error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "EmptyInput");
  }
}

TEST(Concat, SliceRecoversPartsBitExactly) {
  const auto a = random_tensor(Shape{2, 3, 6, 5, 4}, 9);
  const auto b = random_tensor(Shape{2, 7, 6, 5, 4}, 10);
  const auto c = random_tensor(Shape{2, 1, 6, 5, 4}, 11);
  const auto cat = concat_channels<float>({a, b, c});
  EXPECT_EQ(slice_channels(cat, 0, 3).data, a.data);
  EXPECT_EQ(slice_channels(cat, 3, 7).data, b.data);
  EXPECT_EQ(slice_channels(cat, 10, 1).data, c.data);
  EXPECT_THROW(slice_channels(cat, 10, 2), Error);
}

TEST(CenterCrop, ShrinksSpatialDims) {
  const auto t = random_tensor(Shape{1, 27, 27, 27}, 12);
  EXPECT_EQ(center_crop(t, 1).shape, (Shape{1, 25, 25, 25}));
}

TEST(CenterCrop, MarginZeroIsIdentity) {
  const auto t = random_tensor(Shape{3, 5, 5, 5}, 13);
  const auto c = center_crop(t, 0);
  EXPECT_EQ(c.data, t.data);
}

TEST(CenterCrop, ContentMatchesIndexOracle) {
  const auto t = random_tensor(Shape{25, 25, 25, 25}, 14);
  const auto c = center_crop(t, 8);
  ASSERT_EQ(c.shape, (Shape{25, 9, 9, 9}));
  for (std::int64_t ch = 0; ch < 25; ++ch)
    for (std::int64_t z = 0; z < 9; ++z)
      for (std::int64_t y = 0; y < 9; ++y)
        for (std::int64_t x = 0; x < 9; ++x) {
          const float want =
              t.data[static_cast<std::size_t>(((ch * 25 + z + 8) * 25 + y + 8) * 25 + x + 8)];
          const float got = c.data[static_cast<std::size_t>(((ch * 9 + z) * 9 + y) * 9 + x)];
          ASSERT_EQ(got, want);
        }
}

TEST(CenterCrop, ComposesAdditively) {
  const auto t = random_tensor(Shape{2, 3, 13, 13, 13}, 15);
  const auto once = center_crop(t, 5);
  const auto twice = center_crop(center_crop(t, 2), 3);
  EXPECT_EQ(once.shape, twice.shape);
  EXPECT_EQ(once.data, twice.data);
}

TEST(CenterCrop, ErrorsWhenMarginTooLarge) {
  const auto t = random_tensor(Shape{1, 5, 5, 5}, 16);
  try {
    center_crop(t, 3);
    FAIL() << "expected error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "CropTooLarge");
  }
}

TEST(Elementwise, AddOfNegationIsZero) {
  const auto a = random_tensor(Shape{2, 3, 4, 4, 4}, 17);
  const auto na = scale(a, -1.f);
  const auto z = elementwise(a, na, EwOp::add);
  for (float v : z.data) EXPECT_EQ(v, 0.f);
}

TEST(Elementwise, SubMulSemantics) {
  Tensor<float> a{Shape{1, 1, 1, 1, 2}, {3.f, -2.f}};
  Tensor<float> b{Shape{1, 1, 1, 1, 2}, {1.f, 4.f}};
  EXPECT_EQ(elementwise(a, b, EwOp::sub).data, (std::vector<float>{2.f, -6.f}));
  EXPECT_EQ(elementwise(a, b, EwOp::mul).data, (std::vector<float>{3.f, -8.f}));
}

TEST(Elementwise, ShapeMismatchError) {
  const auto a = random_tensor(Shape{1, 2, 2, 2, 2}, 18);
  const auto b = random_tensor(Shape{1, 2, 2, 2, 3}, 19);
  try {
    elementwise(a, b, EwOp::add);
    FAIL() << "expected error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "ShapeMismatch");
  }
}

TEST(Reduce, SumOverAllAxesMatchesFlatSumFloat) {
  const auto t = random_tensor(Shape{3, 7, 6, 5}, 20);
  double flat = 0;
  for (float v : t.data) flat += v;
  const auto r = reduce(t, {0, 1, 2, 3}, ReduceOp::sum);
  ASSERT_EQ(r.numel(), 1);
  EXPECT_NEAR(r[0], flat, std::abs(flat) * 1e-6 + 1e-6);
}

TEST(Reduce, SumOverAllAxesMatchesFlatSumDouble) {
  Tensor<double> t{Shape{4, 5, 6, 7}};
  Rng rng(21);
  for (auto& v : t.data) v = rng.gaussian();
  long double flat = 0;
  for (double v : t.data) flat += v;
  const auto r = reduce(t, {0, 1, 2, 3}, ReduceOp::sum);
  EXPECT_NEAR(r[0], static_cast<double>(flat), std::abs(static_cast<double>(flat)) * 1e-12 + 1e-12);
}

TEST(Reduce, MeanAndMaxOnFixture) {
  Tensor<float> t{Shape{2, 1, 1, 3}, {1, 2, 3, 4, 5, 6}};
  const auto mean = reduce(t, {3}, ReduceOp::mean);
  EXPECT_EQ(mean.shape, (Shape{2, 1, 1}));
  EXPECT_FLOAT_EQ(mean[0], 2.f);
  EXPECT_FLOAT_EQ(mean[1], 5.f);
  const auto mx = reduce(t, {0}, ReduceOp::max);
  EXPECT_EQ(mx.data, (std::vector<float>{4, 5, 6}));
}

TEST(Reduce, AxisOutOfRangeError) {
  const auto t = random_tensor(Shape{2, 2, 2, 2}, 22);
  EXPECT_THROW(reduce(t, {4}, ReduceOp::sum), Error);
}

TEST(Argmax, PicksLargestChannel) {
  Tensor<float> t{Shape{4, 1, 1, 1}, {0.1f, 0.7f, 0.1f, 0.1f}};
  const auto lbl = argmax_channels(t);
  EXPECT_EQ(lbl.shape, (Shape{1, 1, 1}));
  EXPECT_EQ(lbl[0], 1);
}

TEST(Argmax, TieBreaksTowardLowestChannel) {
  Tensor<float> t{Shape{4, 1, 1, 1}, {0.4f, 0.4f, 0.1f, 0.1f}};
  EXPECT_EQ(argmax_channels(t)[0], 0);
}

TEST(Argmax, BatchedShape) {
  const auto t = random_tensor(Shape{2, 4, 3, 3, 3}, 23);
  const auto lbl = argmax_channels(t);
  EXPECT_EQ(lbl.shape, (Shape{2, 3, 3, 3}));
  // spot check one voxel against manual scan
  float best = t.at5(1, 0, 2, 1, 0);
  std::uint8_t arg = 0;
  for (std::int64_t c = 1; c < 4; ++c)
    if (t.at5(1, c, 2, 1, 0) > best) {
      best = t.at5(1, c, 2, 1, 0);
      arg = static_cast<std::uint8_t>(c);
    }
  EXPECT_EQ(lbl.data[static_cast<std::size_t>((1 * 27) + (2 * 3 + 1) * 3 + 0)], arg);
}

}  // namespace
