#include <gtest/gtest.h>

#include <unistd.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "densevox/checkpoint.hpp"
#include "densevox/graph.hpp"
#include "densevox/net.hpp"
#include "densevox/rng.hpp"
#include "densevox/volume.hpp"

using namespace dv;
namespace fs = std::filesystem;

namespace {

class IoTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("iotest_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

Volume random_volume(std::array<std::int64_t, 3> dims, std::uint64_t seed) {
  Volume v;
  v.dims = dims;
  v.spacing = {1.0, 1.25, 0.5};
  v.data.resize(static_cast<std::size_t>(v.numel()));
  Rng rng(seed);
  for (auto& x : v.data) x = static_cast<float>(rng.gaussian());
  return v;
}

void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

TEST_F(IoTest, RawvolF32RoundTripBitExact) {
  const Volume v = random_volume({4, 3, 5}, 1);
  write_rawvol(dir_ / "a.rawvol", v);
  const Volume back = read_rawvol(dir_ / "a.rawvol");
  EXPECT_EQ(back.dims, v.dims);
  EXPECT_EQ(back.spacing, v.spacing);
  EXPECT_EQ(back.role, v.role);
  EXPECT_EQ(back.data, v.data);
}

TEST_F(IoTest, RawvolU8AndI16RoundTrip) {
  Volume lbl;
  lbl.dims = {2, 2, 2};
  lbl.role = VoxelRole::label;
  lbl.data = {0, 1, 2, 3, 3, 2, 1, 0};
  write_rawvol(dir_ / "l.rawvol", lbl, VoxelDtype::u8);
  EXPECT_EQ(read_rawvol(dir_ / "l.rawvol").data, lbl.data);

  Volume iv;
  iv.dims = {2, 2, 2};
  iv.data = {0, 1, 2, 3, 4, 5, 6, 7};
  write_rawvol(dir_ / "i.rawvol", iv, VoxelDtype::i16);
  const Volume back = read_rawvol(dir_ / "i.rawvol");
  EXPECT_EQ(back.data, iv.data);
  EXPECT_EQ(back.at(1, 1, 1), 7.f);
}

TEST_F(IoTest, RawvolHandWrittenHeader) {
  std::string bytes = "rawvol 1\ndims: 1 2 2\nspacing: 1 1 1\ndtype: u8\nrole: intensity\n\n";
  bytes += std::string("\x05\x06\x07\x08", 4);
  write_file(dir_ / "h.rawvol", bytes);
  const Volume v = read_rawvol(dir_ / "h.rawvol");
  EXPECT_EQ(v.dims, (std::array<std::int64_t, 3>{1, 2, 2}));
  EXPECT_EQ(v.data, (std::vector<float>{5, 6, 7, 8}));
}

TEST_F(IoTest, RawvolErrors) {
  auto expect_code = [&](const std::string& bytes, const char* code) {
    write_file(dir_ / "e.rawvol", bytes);
    try {
      read_rawvol(dir_ / "e.rawvol");
      FAIL() << "expected " << code;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), code);
    }
  };
  const std::string hdr = "rawvol 1\ndims: 1 2 2\ndtype: u8\n\n";
  expect_code("rawvol 2\ndims: 1 1 1\n\n\0", "MalformedHeader");
  expect_code(hdr + "abc", "SizeMismatch");                       // truncated payload
  expect_code(hdr + "abcde", "SizeMismatch");                     // trailing bytes
  expect_code("rawvol 1\ndims: 1 1 1\ndtype: f64\n\n", "UnsupportedDtype");
  expect_code("rawvol 1\nspacing: 1 1 1\n\n", "MalformedHeader");  // dims missing
}

TEST_F(IoTest, VolumeValidationErrors) {
  Volume v = random_volume({2, 2, 2}, 2);
  v.spacing[1] = 0.0;
  try {
    v.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "BadSpacing");
  }
  Volume l;
  l.dims = {1, 1, 2};
  l.role = VoxelRole::label;
  l.data = {1.f, 5.f};
  try {
    l.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "LabelOutOfRange");
  }
}

// -- NIfTI-1 fixtures -------------------------------------------------------

std::string nifti_fixture(bool swapped, std::int16_t datatype, float scl_slope, float scl_inter,
                          const std::string& payload, std::array<std::int16_t, 3> whd = {2, 2, 2}) {
  std::string h(348, '\0');
  auto put = [&](auto v, std::size_t off) {
    if (swapped) detail::swap_bytes(v);
    std::memcpy(h.data() + off, &v, sizeof v);
  };
  put(std::int32_t{348}, 0);
  put(std::int16_t{3}, 40);                       // dim[0]
  put(whd[0], 42);                                // dim[1] (fastest)
  put(whd[1], 44);
  put(whd[2], 46);
  for (int i = 4; i < 8; ++i) put(std::int16_t{1}, 40 + 2 * static_cast<std::size_t>(i));
  put(datatype, 70);
  put(1.0f, 76);                                  // pixdim[0]
  put(2.0f, 80);                                  // pixdim[1] -> W spacing
  put(3.0f, 84);                                  // pixdim[2] -> H spacing
  put(4.0f, 88);                                  // pixdim[3] -> D spacing
  put(348.0f, 108);                               // vox_offset
  put(scl_slope, 112);
  put(scl_inter, 116);
  std::memcpy(h.data() + 344, "n+1\0", 4);
  return h + payload;
}

TEST_F(IoTest, NiftiUint8ReadsVoxelsAndSpacing) {
  std::string payload;
  for (int i = 0; i < 8; ++i) payload.push_back(static_cast<char>(i));
  write_file(dir_ / "a.nii", nifti_fixture(false, 2, 0.f, 0.f, payload));
  const Volume v = read_nifti1(dir_ / "a.nii");
  EXPECT_EQ(v.dims, (std::array<std::int64_t, 3>{2, 2, 2}));
  EXPECT_EQ(v.spacing, (std::array<double, 3>{4.0, 3.0, 2.0}));
  EXPECT_EQ(v.data, (std::vector<float>{0, 1, 2, 3, 4, 5, 6, 7}));
  EXPECT_EQ(v.at(1, 1, 1), 7.f);
}

TEST_F(IoTest, NiftiScaleSlopeApplied) {
  std::string payload;
  for (int i = 0; i < 8; ++i) payload.push_back(static_cast<char>(i));
  write_file(dir_ / "s.nii", nifti_fixture(false, 2, 2.f, 1.f, payload));
  const Volume v = read_nifti1(dir_ / "s.nii");
  EXPECT_EQ(v.data[3], 2.f * 3 + 1.f);
}

TEST_F(IoTest, NiftiByteSwappedHeader) {
  std::string payload;
  for (std::int16_t i = 0; i < 8; ++i) {
    std::int16_t s = static_cast<std::int16_t>(i * 100);
    detail::swap_bytes(s);  // payload in the header's (big-endian) order
    payload.append(reinterpret_cast<char*>(&s), 2);
  }
  write_file(dir_ / "b.nii", nifti_fixture(true, 4, 0.f, 0.f, payload));
  const Volume v = read_nifti1(dir_ / "b.nii");
  EXPECT_EQ(v.data[7], 700.f);
  EXPECT_EQ(v.spacing[0], 4.0);
}

TEST_F(IoTest, NiftiErrors) {
  write_file(dir_ / "gz.nii", std::string("\x1f\x8b", 2) + std::string(400, 'x'));
  try {
    read_nifti1(dir_ / "gz.nii");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "CompressedInput");
  }

  auto bad = nifti_fixture(false, 2, 0.f, 0.f, std::string(8, '\0'));
  std::memcpy(bad.data() + 344, "abc\0", 4);
  write_file(dir_ / "m.nii", bad);
  try {
    read_nifti1(dir_ / "m.nii");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "BadMagic");
  }

  write_file(dir_ / "t.nii", nifti_fixture(false, 2, 0.f, 0.f, std::string(3, '\0')));
  try {
    read_nifti1(dir_ / "t.nii");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "SizeMismatch");
  }

  write_file(dir_ / "d.nii", nifti_fixture(false, 64, 0.f, 0.f, std::string(64, '\0')));
  try {
    read_nifti1(dir_ / "d.nii");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "UnsupportedDtype");
  }
}

TEST_F(IoTest, ReadersNeverCrashOnRandomBytes) {
  Rng rng(99);
  for (int t = 0; t < 100; ++t) {
    const auto len = rng.uniform_index(600);
    std::string bytes(len, '\0');
    for (auto& b : bytes) b = static_cast<char>(rng.next_u64() & 0xff);
    // a plausible prefix some of the time so header parsing goes deeper
    if (t % 3 == 0) bytes = "rawvol 1\n" + bytes;
    if (t % 3 == 1 && bytes.size() >= 4) std::memcpy(bytes.data(), "DVCK", 4);
    write_file(dir_ / "fuzz.bin", bytes);
    for (int reader = 0; reader < 3; ++reader) {
      try {
        if (reader == 0) read_rawvol(dir_ / "fuzz.bin");
        else if (reader == 1) read_nifti1(dir_ / "fuzz.bin");
        else load_checkpoint(dir_ / "fuzz.bin");
      } catch (const Error&) {
        // structured rejection is the expected outcome
      }
    }
  }
  SUCCEED();
}

// -- checkpoints ------------------------------------------------------------

NetworkSpec small_spec() {
  NetworkSpec s;
  s.connectivity = Connectivity::hyperdense;
  s.streams = 2;
  s.input_channels_per_stream = 1;
  s.conv_layers = {{"conv_1", 3, 3, false}, {"conv_2", 3, 4, false}};
  s.fully_conv = {{"fully_conv_1", 1, 5, true}};
  return s;
}

Checkpoint make_checkpoint(const NetworkSpec& spec, std::uint64_t seed) {
  const Graph g = build_graph(spec);
  Checkpoint ck;
  ck.spec = spec;
  ck.params = init_params<float>(g, seed);
  ck.bn_stats = init_bn_stats<float>(g);
  OptimizerState opt = OptimizerState::zeros_like(g);
  Rng rng(seed + 1);
  for (auto& t : opt.cache)
    for (auto& v : t.data) v = static_cast<float>(rng.uniform());
  ck.optimizer = std::move(opt);
  ck.epochs_completed = 7;
  ck.seed = seed;
  ck.best_val_dc = 0.25;
  return ck;
}

TEST_F(IoTest, CheckpointRoundTripBitIdentical) {
  const Checkpoint ck = make_checkpoint(small_spec(), 5);
  save_checkpoint(dir_ / "a.ckpt", ck);
  const Checkpoint back = load_checkpoint(dir_ / "a.ckpt");
  EXPECT_EQ(back.spec.serialize(), ck.spec.serialize());
  ASSERT_EQ(back.params.values.size(), ck.params.values.size());
  for (std::size_t i = 0; i < ck.params.values.size(); ++i)
    ASSERT_EQ(back.params.values[i].data, ck.params.values[i].data);
  ASSERT_TRUE(back.optimizer.has_value());
  for (std::size_t i = 0; i < ck.optimizer->cache.size(); ++i)
    ASSERT_EQ(back.optimizer->cache[i].data, ck.optimizer->cache[i].data);
  EXPECT_EQ(back.epochs_completed, 7);
  EXPECT_EQ(back.seed, 5u);
  EXPECT_EQ(back.best_val_dc, 0.25);

  // identical content writes byte-identical files
  save_checkpoint(dir_ / "b.ckpt", back);
  EXPECT_EQ(read_file(dir_ / "a.ckpt"), read_file(dir_ / "b.ckpt"));
}

TEST_F(IoTest, CheckpointRoundTripPreservesForwardPass) {
  const NetworkSpec spec = small_spec();
  const Checkpoint ck = make_checkpoint(spec, 6);
  save_checkpoint(dir_ / "f.ckpt", ck);
  const Checkpoint back = load_checkpoint(dir_ / "f.ckpt", spec);

  const Graph g = build_graph(spec);
  Tensor<float> m1{Shape{1, 1, 9, 9, 9}}, m2{Shape{1, 1, 9, 9, 9}};
  Rng rng(7);
  for (auto& v : m1.data) v = static_cast<float>(rng.gaussian());
  for (auto& v : m2.data) v = static_cast<float>(rng.gaussian());
  std::map<std::string, const Tensor<float>*> inputs{{"mod1", &m1}, {"mod2", &m2}};
  auto run = [&](const Checkpoint& c) {
    BnStats<float> stats = c.bn_stats;
    TapeState<float> tape;
    return forward(g, c.params, stats, inputs, Mode::infer, 0, tape);
  };
  EXPECT_EQ(run(ck).data, run(back).data);
}

TEST_F(IoTest, CheckpointTruncationAndTrailingBytes) {
  save_checkpoint(dir_ / "c.ckpt", make_checkpoint(small_spec(), 8));
  std::string bytes = read_file(dir_ / "c.ckpt");
  write_file(dir_ / "trunc.ckpt", bytes.substr(0, bytes.size() - 4));
  try {
    load_checkpoint(dir_ / "trunc.ckpt");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "CorruptBlob");
  }
  write_file(dir_ / "trail.ckpt", bytes + "x");
  try {
    load_checkpoint(dir_ / "trail.ckpt");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "CorruptBlob");
  }
}

TEST_F(IoTest, CheckpointSpecMismatch) {
  save_checkpoint(dir_ / "s.ckpt", make_checkpoint(small_spec(), 9));
  NetworkSpec other = small_spec();
  other.fully_conv[0].count = 6;
  try {
    load_checkpoint(dir_ / "s.ckpt", other);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "SpecMismatch");
  }
}

// -- subjects and manifests -------------------------------------------------

TEST_F(IoTest, SubjectAndManifestRoundTrip) {
  Subject s;
  s.id = "subj_a";
  Volume m = random_volume({8, 8, 8}, 10);
  s.modalities = {m, random_volume({8, 8, 8}, 11)};
  Volume lbl = m;
  for (auto& v : lbl.data) v = std::abs(v) < 1 ? 1.f : 0.f;
  lbl.role = VoxelRole::label;
  s.labels = lbl;
  s.mask = lbl;
  save_subject(dir_ / "subj_a", s);
  write_manifest(dir_ / "manifest.tsv", {{"subj_a", "subj_a"}});  // relative dir

  const auto subjects = load_manifest_subjects(dir_ / "manifest.tsv");
  ASSERT_EQ(subjects.size(), 1u);
  EXPECT_EQ(subjects[0].id, "subj_a");
  EXPECT_EQ(subjects[0].modalities[0].data, s.modalities[0].data);
  ASSERT_TRUE(subjects[0].labels.has_value());
  EXPECT_EQ(subjects[0].labels->data, lbl.data);

  write_file(dir_ / "bad.tsv", "no_tab_here\n");
  EXPECT_THROW(read_manifest(dir_ / "bad.tsv"), Error);
}

TEST_F(IoTest, SubjectValidateRejectsDimMismatch) {
  Subject s;
  s.id = "x";
  s.modalities = {random_volume({4, 4, 4}, 12), random_volume({4, 4, 5}, 13)};
  EXPECT_THROW(s.validate(), Error);
}

}  // namespace
