#pragma once

#include "errors.hpp"
#include "featureio.hpp"
#include "manifest.hpp"
#include "rng.hpp"
#include "types.hpp"

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

namespace vladbuff {

/// Knobs of the synthetic repetitive-structure benchmark.
///
/// Every place owns `distinctive_per_image` unit features shared by its query
/// and reference (each copy perturbed by `distinct_noise`). Every image also
/// carries `burst_size` near-copies of one "texture" vector: a pool direction
/// picked independently per image from `pool_size` shared directions, bent by
/// `burst_spread` towards an image-specific random direction, with per-copy
/// jitter `burst_jitter`. Queries and their reference therefore rarely share
/// a burst, while unrelated images often do.
struct BurstBenchmarkParams {
  int n_places = 64;
  int n_distractors = 16;
  int burst_size = 16;
  int d = 32;
  int pool_size = 4;
  int distinctive_per_image = 2;
  double distinct_noise = 1.0;
  double burst_spread = 1.0;
  double burst_jitter = 0.02;
  double holdout_fraction = 0.5;
  double place_spacing_m = 100.0;
  double query_offset_m = 5.0;
};

struct SyntheticImage {
  ManifestEntry entry;      // feature_path left empty until written
  LocalFeatureSet features;
  bool held_out = false;
};

namespace detail {

inline Vector random_unit(CounterRng& rng, Index d) {
  Vector v(d);
  for (Index i = 0; i < d; ++i) v[i] = rng.normal();
  return v.normalized();
}

inline Vector perturb(const Vector& base, double scale, CounterRng& rng) {
  Vector v = base;
  for (Index i = 0; i < v.size(); ++i) v[i] += scale * rng.normal() / std::sqrt(static_cast<double>(v.size()));
  return v.normalized();
}

inline std::string padded(const char* prefix, int i, const char* suffix) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%04d%s", prefix, i, suffix);
  return buf;
}

}  // namespace detail

inline void validate(const BurstBenchmarkParams& p) {
  if (p.n_places < 2 || p.d < 2 || p.burst_size < 0 || p.n_distractors < 0 || p.pool_size < 1 ||
      p.distinctive_per_image < 1 || !(p.holdout_fraction > 0.0 && p.holdout_fraction < 1.0) ||
      !(p.distinct_noise >= 0.0) || !(p.burst_spread >= 0.0) || !(p.burst_jitter >= 0.0) ||
      !(p.place_spacing_m > 2.0 * p.query_offset_m) || !(p.query_offset_m >= 0.0))
    throw ConfigError("degenerate synthetic benchmark parameters");
  const int held = static_cast<int>(p.n_places * p.holdout_fraction);
  if (held < 1 || held >= p.n_places) throw ConfigError("holdout_fraction leaves an empty split");
}

/// Builds all images in memory. Places [0, n_train) form the training split,
/// the rest are held out; distractors alternate between splits.
inline std::vector<SyntheticImage> make_burst_benchmark(std::uint64_t seed, const BurstBenchmarkParams& p) {
  validate(p);
  CounterRng rng(seed);
  const Index d = p.d;
  std::vector<Vector> pool;
  for (int t = 0; t < p.pool_size; ++t) pool.push_back(detail::random_unit(rng, d));

  const int n_held = static_cast<int>(p.n_places * p.holdout_fraction);
  const int n_train = p.n_places - n_held;
  const Index rows = p.distinctive_per_image + p.burst_size;

  auto image = [&](const std::vector<Vector>& signature) {
    RowMatrix f(rows, d);
    Index r = 0;
    for (const auto& s : signature) f.row(r++) = detail::perturb(s, p.distinct_noise, rng).transpose();
    if (p.burst_size > 0) {
      const Vector& base = pool[rng.below(static_cast<std::uint64_t>(p.pool_size))];
      const Vector texture = (base + p.burst_spread * detail::random_unit(rng, d)).normalized();
      for (int k = 0; k < p.burst_size; ++k) f.row(r++) = detail::perturb(texture, p.burst_jitter, rng).transpose();
    }
    return f;
  };
  auto signature = [&]() {
    std::vector<Vector> s;
    for (int k = 0; k < p.distinctive_per_image; ++k) s.push_back(detail::random_unit(rng, d));
    return s;
  };

  std::vector<SyntheticImage> out;
  for (int pl = 0; pl < p.n_places; ++pl) {
    const auto sig = signature();
    const double x = pl * p.place_spacing_m;
    const bool held = pl >= n_train;
    for (Split split : {Split::query, Split::reference}) {
      SyntheticImage img;
      img.entry.image_id = detail::padded("p", pl, split == Split::query ? "_q" : "_r");
      img.entry.x_m = x;
      img.entry.y_m = split == Split::query ? p.query_offset_m : 0.0;
      img.entry.split = split;
      img.features = {img.entry.image_id, image(sig), false};
      img.held_out = held;
      out.push_back(std::move(img));
    }
  }
  for (int i = 0; i < p.n_distractors; ++i) {
    SyntheticImage img;
    img.entry.image_id = detail::padded("d", i, "_r");
    img.entry.x_m = (p.n_places + i) * p.place_spacing_m;
    img.entry.y_m = 0.0;
    img.entry.split = Split::reference;
    img.features = {img.entry.image_id, image(signature()), false};
    img.held_out = (i % 2) == 1;
    out.push_back(std::move(img));
  }
  return out;
}

struct BurstBenchmark {
  DatasetManifest train;
  DatasetManifest test;
};

/// Writes features under `dir/features/` and manifests `dir/train.jsonl`,
/// `dir/test.jsonl`.
inline BurstBenchmark generate_burst_benchmark(std::uint64_t seed, const BurstBenchmarkParams& p,
                                               const std::filesystem::path& dir, double radius_m = 25.0) {
  auto images = make_burst_benchmark(seed, p);
  std::error_code ec;
  std::filesystem::create_directories(dir / "features", ec);
  if (ec) throw IoError("cannot create " + (dir / "features").string() + ": " + ec.message());
  BurstBenchmark out;
  out.train.radius_m = out.test.radius_m = radius_m;
  for (auto& img : images) {
    img.entry.feature_path = dir / "features" / (img.entry.image_id + ".vbff");
    save_features(img.features, img.entry.feature_path);
    (img.held_out ? out.test : out.train).entries.push_back(img.entry);
  }
  save_manifest(out.train, dir / "train.jsonl");
  save_manifest(out.test, dir / "test.jsonl");
  return out;
}

}  // namespace vladbuff
