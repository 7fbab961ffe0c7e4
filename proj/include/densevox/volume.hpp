#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "densevox/common.hpp"

namespace dv {

enum class VoxelRole { intensity, label };
enum class VoxelDtype { u8, i16, f32 };

inline const char* to_string(VoxelRole r) { return r == VoxelRole::intensity ? "intensity" : "label"; }
inline const char* to_string(VoxelDtype d) {
  switch (d) {
    case VoxelDtype::u8: return "u8";
    case VoxelDtype::i16: return "i16";
    case VoxelDtype::f32: return "f32";
  }
  return "?";
}

// A single-channel 3D image, [D,H,W] row-major, voxel spacing in mm.
struct Volume {
  std::array<std::int64_t, 3> dims{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  VoxelRole role = VoxelRole::intensity;
  std::vector<float> data;

  std::int64_t numel() const { return dims[0] * dims[1] * dims[2]; }
  float& at(std::int64_t z, std::int64_t y, std::int64_t x) {
    return data[static_cast<std::size_t>((z * dims[1] + y) * dims[2] + x)];
  }
  float at(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return data[static_cast<std::size_t>((z * dims[1] + y) * dims[2] + x)];
  }

  void validate() const {
    for (auto d : dims)
      if (d < 1) fail(ErrorCategory::data_invalid, "BadDims", "volume dims must be positive");
    for (auto s : spacing)
      if (!(s > 0)) fail(ErrorCategory::data_invalid, "BadSpacing", "spacing must be > 0");
    if (static_cast<std::int64_t>(data.size()) != numel())
      fail(ErrorCategory::data_invalid, "SizeMismatch", "data length vs dims");
    if (role == VoxelRole::label)
      for (float v : data)
        if (v != 0.f && v != 1.f && v != 2.f && v != 3.f)
          fail(ErrorCategory::data_invalid, "LabelOutOfRange", std::to_string(v));
  }
};

// A labeled multi-modal subject; all volumes share dims and spacing.
struct Subject {
  std::string id;
  std::vector<Volume> modalities;  // T1-like, T2-like
  std::optional<Volume> labels;
  std::optional<Volume> mask;

  void validate() const {
    if (modalities.empty()) fail(ErrorCategory::data_invalid, "EmptySubject", id);
    const auto& d0 = modalities[0].dims;
    auto check = [&](const Volume& v) {
      v.validate();
      if (v.dims != d0) fail(ErrorCategory::data_invalid, "SizeMismatch", "subject volumes disagree: " + id);
    };
    for (const auto& m : modalities) check(m);
    if (labels) check(*labels);
    if (mask) check(*mask);
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void swap_bytes(T& v) {
  auto* p = reinterpret_cast<unsigned char*>(&v);
  for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(p[i], p[sizeof(T) - 1 - i]);
}

// On-disk formats are little-endian always.
template <typename T>
void to_le(T& v) {
  if constexpr (std::endian::native == std::endian::big) swap_bytes(v);
}
template <typename T>
void from_le(T& v) {
  if constexpr (std::endian::native == std::endian::big) swap_bytes(v);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// rawvol: UTF-8 header lines terminated by a blank line, then raw
// little-endian voxel data in [D,H,W] row-major order.

inline void write_rawvol(const std::filesystem::path& path, const Volume& v,
                         VoxelDtype dtype = VoxelDtype::f32) {
  v.validate();
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorCategory::io, "WriteFailed", path.string());
  std::ostringstream hdr;
  hdr << "rawvol 1\n";
  hdr << "dims: " << v.dims[0] << " " << v.dims[1] << " " << v.dims[2] << "\n";
  hdr << "spacing: " << v.spacing[0] << " " << v.spacing[1] << " " << v.spacing[2] << "\n";
  hdr << "dtype: " << to_string(dtype) << "\n";
  hdr << "role: " << to_string(v.role) << "\n";
  hdr << "\n";
  f << hdr.str();
  for (float x : v.data) {
    switch (dtype) {
      case VoxelDtype::u8: {
        auto b = static_cast<std::uint8_t>(x);
        f.write(reinterpret_cast<const char*>(&b), 1);
        break;
      }
      case VoxelDtype::i16: {
        auto s = static_cast<std::int16_t>(x);
        detail::to_le(s);
        f.write(reinterpret_cast<const char*>(&s), 2);
        break;
      }
      case VoxelDtype::f32: {
        float g = x;
        detail::to_le(g);
        f.write(reinterpret_cast<const char*>(&g), 4);
        break;
      }
    }
  }
  if (!f) fail(ErrorCategory::io, "WriteFailed", path.string());
}

inline Volume read_rawvol(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorCategory::io, "OpenFailed", path.string());

  Volume v;
  VoxelDtype dtype = VoxelDtype::f32;
  std::string line;
  if (!std::getline(f, line) || line != "rawvol 1")
    fail(ErrorCategory::data_invalid, "MalformedHeader", "missing 'rawvol 1' line in " + path.string());
  bool saw_dims = false;
  while (std::getline(f, line) && !line.empty()) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "dims:") {
      ls >> v.dims[0] >> v.dims[1] >> v.dims[2];
      saw_dims = !ls.fail();
    } else if (key == "spacing:") {
      ls >> v.spacing[0] >> v.spacing[1] >> v.spacing[2];
    } else if (key == "dtype:") {
      std::string d;
      ls >> d;
      if (d == "u8") dtype = VoxelDtype::u8;
      else if (d == "i16") dtype = VoxelDtype::i16;
      else if (d == "f32") dtype = VoxelDtype::f32;
      else fail(ErrorCategory::data_invalid, "UnsupportedDtype", d);
    } else if (key == "role:") {
      std::string r;
      ls >> r;
      if (r == "intensity") v.role = VoxelRole::intensity;
      else if (r == "label") v.role = VoxelRole::label;
      else fail(ErrorCategory::data_invalid, "MalformedHeader", "unknown role " + r);
    } else {
      fail(ErrorCategory::data_invalid, "MalformedHeader", "unknown header key '" + key + "'");
    }
    if (ls.fail()) fail(ErrorCategory::data_invalid, "MalformedHeader", line);
  }
  if (!saw_dims || line != "" || v.dims[0] < 1 || v.dims[1] < 1 || v.dims[2] < 1)
    fail(ErrorCategory::data_invalid, "MalformedHeader", "incomplete header in " + path.string());
  for (auto s : v.spacing)
    if (!(s > 0)) fail(ErrorCategory::data_invalid, "MalformedHeader", "non-positive spacing");

  const std::int64_t n = v.numel();
  const std::size_t esize = dtype == VoxelDtype::u8 ? 1 : dtype == VoxelDtype::i16 ? 2 : 4;
  std::vector<char> raw(static_cast<std::size_t>(n) * esize);
  f.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(f.gcount()) != raw.size())
    fail(ErrorCategory::data_invalid, "SizeMismatch", "truncated data in " + path.string());
  char extra;
  if (f.read(&extra, 1))
    fail(ErrorCategory::data_invalid, "SizeMismatch", "trailing bytes in " + path.string());

  v.data.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    switch (dtype) {
      case VoxelDtype::u8:
        v.data[i] = static_cast<float>(static_cast<std::uint8_t>(raw[i]));
        break;
      case VoxelDtype::i16: {
        std::int16_t s;
        std::memcpy(&s, raw.data() + i * 2, 2);
        detail::from_le(s);
        v.data[i] = static_cast<float>(s);
        break;
      }
      case VoxelDtype::f32: {
        float g;
        std::memcpy(&g, raw.data() + i * 4, 4);
        detail::from_le(g);
        v.data[i] = g;
        break;
      }
    }
  }
  v.validate();
  return v;
}

// ---------------------------------------------------------------------------
// Minimal NIfTI-1 reader: uncompressed, 3D, dtype in {uint8, int16, float32}.
// Orientation (qform/sform) is ignored; only dim and pixdim are honored.

inline Volume read_nifti1(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorCategory::io, "OpenFailed", path.string());

  unsigned char head2[2];
  f.read(reinterpret_cast<char*>(head2), 2);
  if (f.gcount() == 2 && head2[0] == 0x1f && head2[1] == 0x8b)
    fail(ErrorCategory::data_invalid, "CompressedInput",
         path.string() + " is gzip-compressed; decompress it first");
  f.clear();
  f.seekg(0);

  std::array<char, 348> hdr{};
  f.read(hdr.data(), 348);
  if (f.gcount() != 348) fail(ErrorCategory::data_invalid, "BadMagic", "file shorter than NIfTI-1 header");

  auto rd = [&](auto& out, std::size_t offset) { std::memcpy(&out, hdr.data() + offset, sizeof(out)); };
  std::int32_t sizeof_hdr;
  rd(sizeof_hdr, 0);
  bool swapped = false;
  if (sizeof_hdr != 348) {
    detail::swap_bytes(sizeof_hdr);
    if (sizeof_hdr != 348) fail(ErrorCategory::data_invalid, "BadMagic", "sizeof_hdr != 348");
    swapped = true;
  }
  auto rds = [&](auto& out, std::size_t offset) {
    rd(out, offset);
    if (swapped) detail::swap_bytes(out);
  };

  if (std::memcmp(hdr.data() + 344, "n+1\0", 4) != 0)
    fail(ErrorCategory::data_invalid, "BadMagic", "magic is not n+1");

  std::int16_t dim[8];
  for (int i = 0; i < 8; ++i) rds(dim[i], 40 + 2 * i);
  if (dim[0] < 3) fail(ErrorCategory::data_invalid, "BadMagic", "not a 3D image");
  for (int i = 4; i <= dim[0] && i < 8; ++i)
    if (dim[i] > 1) fail(ErrorCategory::data_invalid, "UnsupportedDtype", "4D+ images not supported");

  std::int16_t datatype;
  rds(datatype, 70);
  float pixdim[4];
  for (int i = 0; i < 4; ++i) rds(pixdim[i], 76 + 4 * i);
  float vox_offset, scl_slope, scl_inter;
  rds(vox_offset, 108);
  rds(scl_slope, 112);
  rds(scl_inter, 116);

  Volume v;
  // NIfTI dim[1..3] are fastest-to-slowest; map to [D,H,W] with W fastest.
  v.dims = {dim[3], dim[2], dim[1]};
  v.spacing = {pixdim[3] > 0 ? pixdim[3] : 1.0, pixdim[2] > 0 ? pixdim[2] : 1.0,
               pixdim[1] > 0 ? pixdim[1] : 1.0};

  std::size_t esize;
  switch (datatype) {
    case 2: esize = 1; break;   // uint8
    case 4: esize = 2; break;   // int16
    case 16: esize = 4; break;  // float32
    default:
      fail(ErrorCategory::data_invalid, "UnsupportedDtype", "NIfTI datatype " + std::to_string(datatype));
  }

  const std::int64_t n = v.numel();
  if (n < 1) fail(ErrorCategory::data_invalid, "BadMagic", "non-positive dims");
  f.seekg(static_cast<std::streamoff>(vox_offset));
  std::vector<char> raw(static_cast<std::size_t>(n) * esize);
  f.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(f.gcount()) != raw.size())
    fail(ErrorCategory::data_invalid, "SizeMismatch", "truncated NIfTI data");

  v.data.resize(static_cast<std::size_t>(n));
  const double slope = (scl_slope != 0.f) ? scl_slope : 1.0;
  const double inter = (scl_slope != 0.f) ? scl_inter : 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double x;
    switch (datatype) {
      case 2: x = static_cast<std::uint8_t>(raw[i]); break;
      case 4: {
        std::int16_t s;
        std::memcpy(&s, raw.data() + i * 2, 2);
        if (swapped) detail::swap_bytes(s);
        x = s;
        break;
      }
      default: {
        float g;
        std::memcpy(&g, raw.data() + i * 4, 4);
        if (swapped) detail::swap_bytes(g);
        x = g;
        break;
      }
    }
    v.data[i] = static_cast<float>(slope * x + inter);
  }
  return v;
}

// ---------------------------------------------------------------------------
// Subject directory layout + manifest.

inline Subject load_subject(const std::filesystem::path& dir, const std::string& id) {
  Subject s;
  s.id = id;
  s.modalities.push_back(read_rawvol(dir / "t1.rawvol"));
  s.modalities.push_back(read_rawvol(dir / "t2.rawvol"));
  if (std::filesystem::exists(dir / "labels.rawvol")) s.labels = read_rawvol(dir / "labels.rawvol");
  if (std::filesystem::exists(dir / "mask.rawvol")) s.mask = read_rawvol(dir / "mask.rawvol");
  s.validate();
  return s;
}

inline void save_subject(const std::filesystem::path& dir, const Subject& s) {
  s.validate();
  std::filesystem::create_directories(dir);
  write_rawvol(dir / "t1.rawvol", s.modalities.at(0));
  write_rawvol(dir / "t2.rawvol", s.modalities.at(1));
  if (s.labels) write_rawvol(dir / "labels.rawvol", *s.labels, VoxelDtype::u8);
  if (s.mask) write_rawvol(dir / "mask.rawvol", *s.mask, VoxelDtype::u8);
}

// Manifest: one "id<TAB>directory" line per subject.
inline void write_manifest(const std::filesystem::path& path,
                           const std::vector<std::pair<std::string, std::string>>& entries) {
  std::ofstream f(path);
  if (!f) fail(ErrorCategory::io, "WriteFailed", path.string());
  for (const auto& [id, dir] : entries) f << id << "\t" << dir << "\n";
}

inline std::vector<std::pair<std::string, std::string>> read_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorCategory::io, "OpenFailed", path.string());
  std::vector<std::pair<std::string, std::string>> entries;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      fail(ErrorCategory::data_invalid, "MalformedHeader", "bad manifest line: " + line);
    entries.emplace_back(line.substr(0, tab), line.substr(tab + 1));
  }
  return entries;
}

inline std::vector<Subject> load_manifest_subjects(const std::filesystem::path& manifest) {
  std::vector<Subject> subjects;
  const auto base = manifest.parent_path();
  for (const auto& [id, dir] : read_manifest(manifest)) {
    std::filesystem::path p(dir);
    if (p.is_relative()) p = base / p;
    subjects.push_back(load_subject(p, id));
  }
  return subjects;
}

}  // namespace dv
