#include <gtest/gtest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "densevox/phantom.hpp"
#include "densevox/train.hpp"

using namespace dv;
namespace fs = std::filesystem;

namespace {

TEST(LrSchedule, HoldThenHalveEveryFiveEpochs) {
  EXPECT_DOUBLE_EQ(lr_schedule(1), 0.001);
  EXPECT_DOUBLE_EQ(lr_schedule(9), 0.001);
  EXPECT_DOUBLE_EQ(lr_schedule(10), 0.0005);
  EXPECT_DOUBLE_EQ(lr_schedule(14), 0.0005);
  EXPECT_DOUBLE_EQ(lr_schedule(15), 0.00025);
  EXPECT_DOUBLE_EQ(lr_schedule(19), 0.00025);
  EXPECT_DOUBLE_EQ(lr_schedule(20), 0.000125);
  EXPECT_DOUBLE_EQ(lr_schedule(30), 0.00003125);
  EXPECT_DOUBLE_EQ(lr_schedule(5, 0.01), 0.01);
  EXPECT_THROW(lr_schedule(0), Error);
}

// Single-parameter graph so the optimizer recurrence can be tracked by hand.
Graph scalar_graph() {
  Graph g;
  g.add_param("p", Shape{1});
  return g;
}

TEST(Rmsprop, HandIteratedRecurrence) {
  const Graph g = scalar_graph();
  ParamSet<float> params = ParamSet<float>::zeros_like(g);
  ParamSet<float> grads = ParamSet<float>::zeros_like(g);
  grads.values[0][0] = 1.f;
  OptimizerState st = OptimizerState::zeros_like(g);

  double cache = 0, vel = 0, p = 0;
  for (int step = 0; step < 5; ++step) {
    rmsprop_step(params, grads, st, 0.001);
    cache = 0.9 * cache + 0.1 * 1.0;
    const double s = 0.001 / std::sqrt(cache + 1e-4);
    vel = 0.6 * vel - s;
    p += vel;
    ASSERT_NEAR(st.cache[0][0], cache, 1e-7);
    ASSERT_NEAR(st.velocity[0][0], vel, 1e-7);
    ASSERT_NEAR(params.values[0][0], p, 1e-7);
  }
}

TEST(Rmsprop, ZeroGradientWithZeroVelocityIsAFixedPoint) {
  const Graph g = scalar_graph();
  ParamSet<float> params = ParamSet<float>::zeros_like(g);
  params.values[0][0] = 3.f;
  ParamSet<float> grads = ParamSet<float>::zeros_like(g);
  OptimizerState st = OptimizerState::zeros_like(g);
  rmsprop_step(params, grads, st, 0.001);
  EXPECT_EQ(params.values[0][0], 3.f);
}

TEST(Rmsprop, MomentumCarriesPreviousStep) {
  const Graph g = scalar_graph();
  ParamSet<float> params = ParamSet<float>::zeros_like(g);
  ParamSet<float> grads = ParamSet<float>::zeros_like(g);
  grads.values[0][0] = 1.f;
  OptimizerState st = OptimizerState::zeros_like(g);
  rmsprop_step(params, grads, st, 0.001);
  const float v1 = st.velocity[0][0];
  grads.values[0][0] = 0.f;  // momentum alone drives the second step
  rmsprop_step(params, grads, st, 0.001);
  EXPECT_NEAR(st.velocity[0][0], 0.6f * v1, 1e-9);
}

NetworkSpec tiny_spec() {
  NetworkSpec s;
  s.connectivity = Connectivity::hyperdense;
  s.streams = 2;
  s.input_channels_per_stream = 1;
  s.conv_layers = {{"conv_1", 3, 4, false}, {"conv_2", 3, 5, false}};
  s.fully_conv = {{"fully_conv_1", 1, 8, true}};
  return s;
}

TEST(TrainConfig, ValidationErrors) {
  const NetworkSpec spec = tiny_spec();  // margin 2, min edge 5
  TrainConfig ok;
  ok.train_edge = 9;
  ok.samples_per_subepoch = 10;
  ok.batch_size = 5;
  ok.validate(spec);

  TrainConfig bad = ok;
  bad.samples_per_subepoch = 7;  // not divisible by batch
  EXPECT_THROW(bad.validate(spec), Error);
  bad = ok;
  bad.train_edge = 8;  // even
  EXPECT_THROW(bad.validate(spec), Error);
  bad = ok;
  bad.train_edge = 3;  // below the receptive field
  EXPECT_THROW(bad.validate(spec), Error);
  bad = ok;
  bad.epochs = 0;
  EXPECT_THROW(bad.validate(spec), Error);
}

TEST(Sampler, BalancedDrawsNearQuarterPerClass) {
  PhantomConfig cfg;
  cfg.dims = {32, 32, 32};
  const auto prep = prepare_subject(generate_phantom(cfg, "s"));
  std::vector<PreparedSubject> subjects;
  subjects.push_back(prep);
  Rng rng(7);
  std::int64_t fallbacks = 0;
  const auto draws = draw_samples(subjects, 10000, rng, true, &fallbacks);
  EXPECT_EQ(fallbacks, 0);  // every class exists in the phantom
  std::array<std::int64_t, 4> counts{};
  for (const auto& d : draws) {
    const auto& s = subjects[static_cast<std::size_t>(d.subject)];
    const auto flat = (d.center[0] * s.dims[1] + d.center[1]) * s.dims[2] + d.center[2];
    ++counts[s.labels[static_cast<std::size_t>(flat)]];
  }
  for (int c = 0; c < 4; ++c)
    EXPECT_NEAR(double(counts[static_cast<std::size_t>(c)]) / 10000.0, 0.25, 0.03) << "class " << c;
}

TEST(Sampler, UnbalancedDrawsStayInsideMask) {
  PhantomConfig cfg;
  cfg.dims = {32, 32, 32};
  const Subject subj = generate_phantom(cfg, "s");
  std::vector<PreparedSubject> subjects{prepare_subject(subj)};
  Rng rng(8);
  for (const auto& d : draw_samples(subjects, 2000, rng, false)) {
    const auto& s = subjects[0];
    const auto flat = (d.center[0] * s.dims[1] + d.center[1]) * s.dims[2] + d.center[2];
    ASSERT_NE(subj.mask->data[static_cast<std::size_t>(flat)], 0.f);
  }
}

TEST(Sampler, FixedSeedGivesIdenticalSequence) {
  PhantomConfig cfg;
  cfg.dims = {16, 16, 16};
  std::vector<PreparedSubject> subjects{prepare_subject(generate_phantom(cfg, "s"))};
  Rng r1(9), r2(9);
  const auto a = draw_samples(subjects, 500, r1, true);
  const auto b = draw_samples(subjects, 500, r2, true);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a[i].subject, b[i].subject);
    ASSERT_EQ(a[i].center, b[i].center);
  }
}

TEST(MakeBatch, WindowAndCoreMatchDirectIndexing) {
  PhantomConfig cfg;
  cfg.dims = {16, 16, 16};
  cfg.seed = 11;
  const Subject subj = generate_phantom(cfg, "s");
  std::vector<PreparedSubject> subjects{prepare_subject(subj)};
  const NetworkSpec spec = tiny_spec();  // margin 2
  const std::int64_t edge = 9, margin = 2, core = edge - 2 * margin;

  // center near a corner so part of the window falls outside the volume
  const std::vector<SampleDraw> draws{{0, {2, 3, 14}}};
  const Batch batch = make_batch(subjects, draws, 0, 1, spec, edge);
  ASSERT_EQ(batch.stream_inputs.size(), 2u);
  ASSERT_EQ(batch.stream_inputs[0].shape, (Shape{1, 1, edge, edge, edge}));
  ASSERT_EQ(batch.targets.shape, (Shape{1, core, core, core}));

  const std::array<std::int64_t, 3> origin{2 - 4, 3 - 4, 14 - 4};
  const auto& s = subjects[0];
  for (int st = 0; st < 2; ++st)
    for (std::int64_t z = 0; z < edge; ++z)
      for (std::int64_t y = 0; y < edge; ++y)
        for (std::int64_t x = 0; x < edge; ++x) {
          const std::int64_t vz = origin[0] + z, vy = origin[1] + y, vx = origin[2] + x;
          const bool inside = vz >= 0 && vz < 16 && vy >= 0 && vy < 16 && vx >= 0 && vx < 16;
          const float want =
              inside ? s.mods[static_cast<std::size_t>(st)][static_cast<std::size_t>((vz * 16 + vy) * 16 + vx)] : 0.f;
          ASSERT_EQ(batch.stream_inputs[static_cast<std::size_t>(st)]
                        .data[static_cast<std::size_t>((z * edge + y) * edge + x)],
                    want);
        }
  for (std::int64_t z = 0; z < core; ++z)
    for (std::int64_t y = 0; y < core; ++y)
      for (std::int64_t x = 0; x < core; ++x) {
        const std::int64_t vz = origin[0] + margin + z, vy = origin[1] + margin + y,
                           vx = origin[2] + margin + x;
        const bool inside = vz >= 0 && vz < 16 && vy >= 0 && vy < 16 && vx >= 0 && vx < 16;
        const std::uint8_t want =
            inside ? s.labels[static_cast<std::size_t>((vz * 16 + vy) * 16 + vx)] : 0;
        ASSERT_EQ(batch.targets.data[static_cast<std::size_t>((z * core + y) * core + x)], want);
      }
}

TEST(DiceAccum, HandCase) {
  detail::DiceAccum acc;
  LabelArray p{Shape{1, 1, 4}, {1, 1, 2, 0}};
  LabelArray r{Shape{1, 1, 4}, {1, 2, 2, 0}};
  acc.add(p, r);
  EXPECT_DOUBLE_EQ(acc.dc(1), 2.0 * 1 / (2 + 1));
  EXPECT_DOUBLE_EQ(acc.dc(2), 2.0 * 1 / (1 + 2));
  EXPECT_DOUBLE_EQ(acc.dc(0), 1.0);
  EXPECT_DOUBLE_EQ(acc.dc(3), 1.0);  // absent everywhere counts as perfect
}

TEST(MeanTissueDc, IdenticalLabelsGiveOne) {
  Volume l;
  l.dims = {4, 4, 4};
  l.role = VoxelRole::label;
  l.data.assign(64, 0.f);
  l.at(1, 1, 1) = 1.f;
  l.at(1, 1, 2) = 2.f;
  l.at(1, 2, 1) = 3.f;
  EXPECT_DOUBLE_EQ(mean_tissue_dc(l, l), 1.0);
}

TEST(TrainLoop, BookkeepingOnTinyRun) {
  PhantomConfig cfg;
  cfg.dims = {16, 16, 16};
  cfg.seed = 21;
  const Subject t1 = generate_phantom(cfg, "t1");
  cfg.seed = 22;
  const Subject t2 = generate_phantom(cfg, "t2");
  cfg.seed = 23;
  const Subject val = generate_phantom(cfg, "val");

  TrainConfig tc;
  tc.epochs = 2;
  tc.subepochs = 2;
  tc.samples_per_subepoch = 10;
  tc.batch_size = 5;
  tc.train_edge = 9;
  tc.seed = 31;

  const fs::path out =
      fs::temp_directory_path() / ("traintest_" + std::to_string(::getpid()));
  fs::remove_all(out);
  const TrainResult res = train(tiny_spec(), {t1, t2}, val, tc, out);

  // 2 train entries + 1 validation entry per epoch
  ASSERT_EQ(res.log.size(), 6u);
  int idx = 0;
  for (int epoch = 1; epoch <= 2; ++epoch) {
    for (int sub = 1; sub <= 2; ++sub, ++idx) {
      EXPECT_EQ(res.log[idx].epoch, epoch);
      EXPECT_EQ(res.log[idx].subepoch, sub);
      EXPECT_EQ(res.log[idx].phase, "train");
      EXPECT_DOUBLE_EQ(res.log[idx].lr, lr_schedule(epoch));
      EXPECT_TRUE(std::isfinite(res.log[idx].loss));
      EXPECT_GE(res.log[idx].dc_mean, 0.0);
      EXPECT_LE(res.log[idx].dc_mean, 1.0);
    }
    EXPECT_EQ(res.log[idx].phase, "val");
    EXPECT_EQ(res.log[idx].subepoch, 0);
    EXPECT_TRUE(std::isnan(res.log[idx].loss));
    EXPECT_GE(res.log[idx].dc_mean, 0.0);
    EXPECT_LE(res.log[idx].dc_mean, 1.0);
    ++idx;
  }

  EXPECT_TRUE(fs::exists(out / "last.ckpt"));
  EXPECT_TRUE(fs::exists(out / "best.ckpt"));
  EXPECT_TRUE(fs::exists(out / "train_log.csv"));
  EXPECT_EQ(res.last.epochs_completed, 2);
  EXPECT_EQ(res.last.seed, 31u);
  EXPECT_GE(res.best.best_val_dc, 0.0);

  std::ifstream f(out / "train_log.csv");
  std::string line;
  std::getline(f, line);
  EXPECT_EQ(line, "epoch,subepoch,lr,loss,dc_csf,dc_gm,dc_wm,dc_mean,phase");
  int rows = 0;
  while (std::getline(f, line)) {
    ++rows;
    if (line.find("val") != std::string::npos)
      EXPECT_NE(line.find(",,"), std::string::npos);  // empty loss field
  }
  EXPECT_EQ(rows, 6);
  fs::remove_all(out);
}

}  // namespace
