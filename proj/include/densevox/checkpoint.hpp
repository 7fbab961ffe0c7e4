#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "densevox/net.hpp"
#include "densevox/volume.hpp"

namespace dv {

// RMSprop-with-momentum accumulators, aligned with Graph::params.
struct OptimizerState {
  std::vector<Tensor<float>> cache;     // mean-square gradient
  std::vector<Tensor<float>> velocity;

  static OptimizerState zeros_like(const Graph& g) {
    OptimizerState st;
    for (const auto& p : g.params) {
      st.cache.emplace_back(p.shape);
      st.velocity.emplace_back(p.shape);
    }
    return st;
  }
};

// Everything needed to resume training or run inference: the NetworkSpec that
// produced the parameters, the parameters, BN running statistics, optional
// optimizer state, and progress counters.
struct Checkpoint {
  NetworkSpec spec;
  ParamSet<float> params;
  BnStats<float> bn_stats;
  std::optional<OptimizerState> optimizer;
  std::int64_t epochs_completed = 0;
  std::uint64_t seed = 0;
  double best_val_dc = 0.0;
};

namespace detail {

inline constexpr char kCkptMagic[4] = {'D', 'V', 'C', 'K'};
inline constexpr std::uint32_t kCkptVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  to_le(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) fail(ErrorCategory::data_invalid, "CorruptBlob", "unexpected end of checkpoint");
  from_le(v);
  return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
  const auto n = get<std::uint64_t>(is);
  if (n > (1ull << 30)) fail(ErrorCategory::data_invalid, "CorruptBlob", "absurd string length");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) fail(ErrorCategory::data_invalid, "CorruptBlob", "truncated string");
  return s;
}

inline void put_floats(std::ostream& os, const float* p, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) put(os, p[i]);
}

inline void get_floats(std::istream& is, float* p, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) p[i] = get<float>(is);
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  // Written to a temp name and renamed so a crash never leaves a partial file.
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) fail(ErrorCategory::io, "WriteFailed", tmp);
    f.write(detail::kCkptMagic, 4);
    detail::put<std::uint32_t>(f, detail::kCkptVersion);
    detail::put_string(f, ck.spec.serialize());

    detail::put<std::uint64_t>(f, ck.params.values.size());
    const Graph g = build_graph(ck.spec);
    if (g.params.size() != ck.params.values.size())
      fail(ErrorCategory::data_invalid, "SpecMismatch", "param count vs spec");
    for (std::size_t i = 0; i < ck.params.values.size(); ++i) {
      detail::put_string(f, g.params[i].name);
      const Tensor<float>& t = ck.params.values[i];
      detail::put<std::uint32_t>(f, static_cast<std::uint32_t>(t.shape.rank()));
      for (auto d : t.shape.dims) detail::put<std::int64_t>(f, d);
      detail::put_floats(f, t.ptr(), t.numel());
    }

    detail::put<std::uint64_t>(f, ck.bn_stats.size());
    for (const auto& [key, st] : ck.bn_stats) {
      detail::put_string(f, key);
      detail::put<std::uint64_t>(f, st.mean.size());
      detail::put_floats(f, st.mean.data(), static_cast<std::int64_t>(st.mean.size()));
      detail::put_floats(f, st.var.data(), static_cast<std::int64_t>(st.var.size()));
    }

    detail::put<std::uint8_t>(f, ck.optimizer ? 1 : 0);
    if (ck.optimizer)
      for (std::size_t i = 0; i < ck.params.values.size(); ++i) {
        detail::put_floats(f, ck.optimizer->cache[i].ptr(), ck.optimizer->cache[i].numel());
        detail::put_floats(f, ck.optimizer->velocity[i].ptr(), ck.optimizer->velocity[i].numel());
      }

    detail::put<std::int64_t>(f, ck.epochs_completed);
    detail::put<std::uint64_t>(f, ck.seed);
    detail::put<double>(f, ck.best_val_dc);
    if (!f) fail(ErrorCategory::io, "WriteFailed", tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorCategory::io, "OpenFailed", path.string());
  char magic[4];
  f.read(magic, 4);
  if (f.gcount() != 4 || std::memcmp(magic, detail::kCkptMagic, 4) != 0)
    fail(ErrorCategory::data_invalid, "CorruptBlob", "bad checkpoint magic");
  if (detail::get<std::uint32_t>(f) != detail::kCkptVersion)
    fail(ErrorCategory::data_invalid, "CorruptBlob", "unsupported checkpoint version");

  Checkpoint ck;
  ck.spec = NetworkSpec::parse(detail::get_string(f));
  const Graph g = build_graph(ck.spec);

  const auto nparams = detail::get<std::uint64_t>(f);
  if (nparams != g.params.size())
    fail(ErrorCategory::data_invalid, "SpecMismatch", "parameter count vs embedded spec");
  ck.params.values.resize(nparams);
  for (std::size_t i = 0; i < nparams; ++i) {
    const std::string name = detail::get_string(f);
    if (name != g.params[i].name)
      fail(ErrorCategory::data_invalid, "SpecMismatch", "parameter slot " + name);
    const auto rank = detail::get<std::uint32_t>(f);
    std::vector<std::int64_t> dims(rank);
    for (auto& d : dims) d = detail::get<std::int64_t>(f);
    if (Shape(dims) != g.params[i].shape)
      fail(ErrorCategory::data_invalid, "SpecMismatch", "shape of " + name);
    ck.params.values[i] = Tensor<float>{Shape(dims)};
    detail::get_floats(f, ck.params.values[i].ptr(), ck.params.values[i].numel());
  }

  const auto nstats = detail::get<std::uint64_t>(f);
  for (std::uint64_t i = 0; i < nstats; ++i) {
    const std::string key = detail::get_string(f);
    const auto c = detail::get<std::uint64_t>(f);
    BnStat<float> st;
    st.mean.resize(c);
    st.var.resize(c);
    detail::get_floats(f, st.mean.data(), static_cast<std::int64_t>(c));
    detail::get_floats(f, st.var.data(), static_cast<std::int64_t>(c));
    ck.bn_stats[key] = std::move(st);
  }

  if (detail::get<std::uint8_t>(f)) {
    OptimizerState st = OptimizerState::zeros_like(g);
    for (std::size_t i = 0; i < nparams; ++i) {
      detail::get_floats(f, st.cache[i].ptr(), st.cache[i].numel());
      detail::get_floats(f, st.velocity[i].ptr(), st.velocity[i].numel());
    }
    ck.optimizer = std::move(st);
  }

  ck.epochs_completed = detail::get<std::int64_t>(f);
  ck.seed = detail::get<std::uint64_t>(f);
  ck.best_val_dc = detail::get<double>(f);

  char extra;
  if (f.read(&extra, 1))
    fail(ErrorCategory::data_invalid, "CorruptBlob", "trailing bytes in checkpoint");
  return ck;
}

// Load and verify against an expected architecture.
inline Checkpoint load_checkpoint(const std::filesystem::path& path, const NetworkSpec& expected) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.spec.serialize() != expected.serialize())
    fail(ErrorCategory::data_invalid, "SpecMismatch", "checkpoint architecture differs from expected");
  return ck;
}

}  // namespace dv
