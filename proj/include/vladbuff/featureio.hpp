#pragma once

#include "errors.hpp"
#include "manifest.hpp"
#include "rng.hpp"
#include "types.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace vladbuff {

static_assert(std::endian::native == std::endian::little, "VBFF I/O assumes a little-endian host");

/// VBFF container: "VBFF" | u32 version=1 | u64 rows | u32 cols | u32 dtype | payload (row-major).
namespace vbff {

inline constexpr std::array<char, 4> kMagic{'V', 'B', 'F', 'F'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 24;

enum class DType : std::uint32_t { f32 = 1, f64 = 2 };

inline std::size_t dtype_size(DType t) { return t == DType::f32 ? 4 : 8; }

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
bool get(std::istream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return static_cast<bool>(is);
}

/// Writes a matrix. With DType::f32 values are rounded to float.
inline void write(const std::filesystem::path& path, const RowMatrix& m, DType dtype = DType::f32) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os.write(kMagic.data(), 4);
  put(os, kVersion);
  put(os, static_cast<std::uint64_t>(m.rows()));
  put(os, static_cast<std::uint32_t>(m.cols()));
  put(os, static_cast<std::uint32_t>(dtype));
  if (dtype == DType::f32) {
    std::vector<float> buf(static_cast<std::size_t>(m.size()));
    for (Index i = 0; i < m.size(); ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
  } else {
    os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * 8));
  }
  os.flush();
  if (!os) throw IoError("write failed: " + path.string());
}

struct Loaded {
  RowMatrix matrix;
  DType dtype;
};

/// Reads any VBFF matrix, widening f32 to double.
inline Loaded read(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  std::array<char, 4> magic{};
  std::uint32_t version = 0, cols = 0, dtype = 0;
  std::uint64_t rows = 0;
  if (!is.read(magic.data(), 4) || magic != kMagic) throw FormatError("bad magic in " + path.string());
  if (!get(is, version)) throw TruncatedError("header truncated in " + path.string());
  if (version != kVersion) throw FormatError("unsupported version " + std::to_string(version));
  if (!get(is, rows) || !get(is, cols) || !get(is, dtype))
    throw TruncatedError("header truncated in " + path.string());
  if (dtype != 1 && dtype != 2) throw FormatError("unsupported dtype tag " + std::to_string(dtype));
  const auto dt = static_cast<DType>(dtype);

  is.seekg(0, std::ios::end);
  const auto payload = static_cast<std::uint64_t>(is.tellg()) - kHeaderBytes;
  is.seekg(static_cast<std::streamoff>(kHeaderBytes));
  const std::uint64_t expected = rows * cols * dtype_size(dt);
  if (cols != 0 && rows > payload / cols) throw TruncatedError("payload shorter than header claims");
  if (payload < expected)
    throw TruncatedError(path.string() + ": header claims " + std::to_string(rows) + "x" +
                         std::to_string(cols) + " but payload holds " + std::to_string(payload) + " bytes");
  if (payload > expected) throw FormatError(path.string() + ": trailing bytes after payload");

  Loaded out{RowMatrix(static_cast<Index>(rows), static_cast<Index>(cols)), dt};
  if (dt == DType::f32) {
    std::vector<float> buf(rows * cols);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(expected));
    for (std::size_t i = 0; i < buf.size(); ++i) out.matrix.data()[i] = buf[i];
  } else {
    is.read(reinterpret_cast<char*>(out.matrix.data()), static_cast<std::streamsize>(expected));
  }
  if (!is) throw TruncatedError("short read: " + path.string());
  return out;
}

}  // namespace vbff

/// One image's N local descriptors of dimension D.
struct LocalFeatureSet {
  std::string image_id;
  RowMatrix features;
  bool normalized = false;

  Index count() const { return features.rows(); }
  Index dim() const { return features.cols(); }
};

/// Aggregated per-image vector, unit L2 norm.
struct GlobalDescriptor {
  std::string image_id;
  Vector vector;
  std::string config_hash;
};

inline void check_finite_nonzero(const RowMatrix& m, const std::string& what) {
  if (m.rows() < 1 || m.cols() < 1) throw DataError(what + ": empty matrix");
  if (!m.allFinite()) throw DataError(what + ": non-finite value");
  for (Index r = 0; r < m.rows(); ++r)
    if ((m.row(r).array() == 0.0).all()) throw DataError(what + ": all-zero row " + std::to_string(r));
}

/// Loads an f32 VBFF feature file. The image id is the file stem.
inline LocalFeatureSet load_features(const std::filesystem::path& path) {
  auto loaded = vbff::read(path);
  if (loaded.dtype != vbff::DType::f32) throw FormatError("feature files must be f32: " + path.string());
  check_finite_nonzero(loaded.matrix, path.string());
  return {path.stem().string(), std::move(loaded.matrix), false};
}

inline void save_features(const LocalFeatureSet& set, const std::filesystem::path& path) {
  vbff::write(path, set.features, vbff::DType::f32);
}

inline void save_descriptor(const GlobalDescriptor& d, const std::filesystem::path& path) {
  vbff::write(path, d.vector.transpose(), vbff::DType::f32);
}

inline GlobalDescriptor load_descriptor(const std::filesystem::path& path) {
  auto loaded = vbff::read(path);
  if (loaded.matrix.rows() != 1) throw FormatError("descriptor file must hold one row: " + path.string());
  return {path.stem().string(), loaded.matrix.row(0).transpose(), {}};
}

inline constexpr double kMinRowNorm = 1e-12;

inline void normalize_rows_in_place(RowMatrix& m) {
  for (Index r = 0; r < m.rows(); ++r) {
    const double n = m.row(r).norm();
    if (!(n >= kMinRowNorm)) throw DataError("row " + std::to_string(r) + " has norm below 1e-12");
    m.row(r) /= n;
  }
}

inline RowMatrix l2_normalize_rows(RowMatrix m) {
  normalize_rows_in_place(m);
  return m;
}

inline LocalFeatureSet l2_normalize_rows(const LocalFeatureSet& set) {
  return {set.image_id, l2_normalize_rows(set.features), true};
}

/// Per-image quotas for drawing `count` rows from images holding `sizes` rows:
/// floor(count * n_i / total), remainder handed out one each to images picked
/// in seeded-shuffle order among those with spare rows.
inline std::vector<std::size_t> sample_quotas(const std::vector<std::size_t>& sizes, std::size_t count,
                                              CounterRng& rng) {
  std::size_t total = 0;
  for (auto s : sizes) total += s;
  if (count > total)
    throw DataError("requested " + std::to_string(count) + " samples but only " + std::to_string(total) +
                    " features available");
  std::vector<std::size_t> quota(sizes.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    quota[i] = static_cast<std::size_t>((static_cast<unsigned __int128>(count) * sizes[i]) / total);
    assigned += quota[i];
  }
  auto order = rng.permutation(sizes.size());
  std::size_t remainder = count - assigned;
  while (remainder > 0) {
    for (auto i : order) {
      if (remainder == 0) break;
      if (quota[i] < sizes[i]) {
        ++quota[i];
        --remainder;
      }
    }
  }
  return quota;
}

/// Stratified uniform sample without replacement over all images in the
/// manifest. Rows are stacked in manifest order, each image's rows in seeded
/// shuffle order.
inline RowMatrix sample_features(const DatasetManifest& manifest, std::size_t count, std::uint64_t seed) {
  if (count == 0) throw ConfigError("sample count must be positive");
  std::vector<LocalFeatureSet> sets;
  std::vector<std::size_t> sizes;
  for (const auto& e : manifest.entries) {
    sets.push_back(load_features(e.feature_path));
    sizes.push_back(static_cast<std::size_t>(sets.back().count()));
  }
  if (sets.empty()) throw DataError("manifest has no images");
  const Index dim = sets.front().dim();
  for (const auto& s : sets)
    if (s.dim() != dim) throw ShapeError("feature dimension differs across images in manifest");

  CounterRng rng(seed);
  const auto quota = sample_quotas(sizes, count, rng);
  RowMatrix out(static_cast<Index>(count), dim);
  Index row = 0;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    if (quota[i] == 0) continue;
    auto perm = rng.permutation(sizes[i]);
    for (std::size_t q = 0; q < quota[i]; ++q) out.row(row++) = sets[i].features.row(static_cast<Index>(perm[q]));
  }
  return out;
}

}  // namespace vladbuff
