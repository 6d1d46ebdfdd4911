#pragma once

#include "errors.hpp"
#include "featureio.hpp"
#include "rng.hpp"
#include "types.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <limits>
#include <vector>

namespace vladbuff {

/// C cluster centroids in the (possibly projected) feature space.
struct Vocabulary {
  RowMatrix centroids;  // C x D
  bool fitted_on_normalized = true;
  std::uint64_t seed = 0;
  double inertia = 0.0;

  Index clusters() const { return centroids.rows(); }
  Index dim() const { return centroids.cols(); }
};

struct KMeansOptions {
  int max_iters = 100;
  double tol = 1e-6;
};

namespace detail {

/// Squared distances N x C via the expanded form; clamped at zero.
inline RowMatrix squared_distances(const RowMatrix& x, const RowMatrix& c) {
  RowMatrix d = -2.0 * (x * c.transpose());
  d.colwise() += x.rowwise().squaredNorm();
  d.rowwise() += c.rowwise().squaredNorm().transpose();
  return d.cwiseMax(0.0);
}

inline RowMatrix kmeanspp_seed(const RowMatrix& samples, Index c, CounterRng& rng) {
  const Index m = samples.rows();
  RowMatrix centers(c, samples.cols());
  centers.row(0) = samples.row(static_cast<Index>(rng.below(static_cast<std::uint64_t>(m))));
  Vector nearest = (samples.rowwise() - centers.row(0)).rowwise().squaredNorm();
  for (Index k = 1; k < c; ++k) {
    const double total = nearest.sum();
    if (!(total > 0.0)) throw DataError("fewer distinct samples than clusters");
    const double target = rng.uniform() * total;
    double acc = 0.0;
    Index pick = -1;
    for (Index i = 0; i < m; ++i) {
      if (nearest[i] <= 0.0) continue;
      acc += nearest[i];
      pick = i;
      if (acc > target) break;
    }
    centers.row(k) = samples.row(pick);
    nearest = nearest.cwiseMin((samples.rowwise() - centers.row(k)).rowwise().squaredNorm());
  }
  return centers;
}

}  // namespace detail

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops once the largest centroid displacement falls below `tol` or after
/// `max_iters` iterations. A cluster that empties is re-seeded with the sample
/// farthest from its current centroid. When `inertia_trace` is given, the
/// objective after every assignment step is appended to it.
inline Vocabulary kmeans_fit(const RowMatrix& samples, Index c, std::uint64_t seed,
                             const KMeansOptions& opt = {}, std::vector<double>* inertia_trace = nullptr) {
  if (c < 1) throw ConfigError("cluster count must be >= 1");
  if (samples.rows() < c)
    throw DataError("k-means needs at least " + std::to_string(c) + " samples, got " +
                    std::to_string(samples.rows()));
  if (!samples.allFinite()) throw DataError("non-finite sample");
  if (opt.max_iters < 1 || !(opt.tol >= 0.0)) throw ConfigError("invalid k-means options");

  CounterRng rng(seed);
  RowMatrix centers = detail::kmeanspp_seed(samples, c, rng);
  const Index m = samples.rows();
  std::vector<Index> label(static_cast<std::size_t>(m));
  Vector best(m);

  auto assign = [&]() {
    const RowMatrix d = detail::squared_distances(samples, centers);
    double inertia = 0.0;
    for (Index i = 0; i < m; ++i) {
      Index arg = 0;
      best[i] = d.row(i).minCoeff(&arg);
      label[static_cast<std::size_t>(i)] = arg;
      inertia += best[i];
    }
    return inertia;
  };

  double inertia = assign();
  for (int it = 0; it < opt.max_iters; ++it) {
    if (inertia_trace) inertia_trace->push_back(inertia);
    RowMatrix next = RowMatrix::Zero(c, samples.cols());
    std::vector<Index> count(static_cast<std::size_t>(c), 0);
    for (Index i = 0; i < m; ++i) {
      next.row(label[static_cast<std::size_t>(i)]) += samples.row(i);
      ++count[static_cast<std::size_t>(label[static_cast<std::size_t>(i)])];
    }
    std::vector<bool> taken(static_cast<std::size_t>(m), false);
    for (Index k = 0; k < c; ++k) {
      if (count[static_cast<std::size_t>(k)] > 0) {
        next.row(k) /= static_cast<double>(count[static_cast<std::size_t>(k)]);
        continue;
      }
      Index far = -1;
      for (Index i = 0; i < m; ++i)
        if (!taken[static_cast<std::size_t>(i)] && (far < 0 || best[i] > best[far])) far = i;
      taken[static_cast<std::size_t>(far)] = true;
      next.row(k) = samples.row(far);
    }
    const double shift = (next - centers).rowwise().norm().maxCoeff();
    centers = std::move(next);
    inertia = assign();
    if (shift < opt.tol) break;
  }
  if (inertia_trace) inertia_trace->push_back(inertia);
  return {std::move(centers), true, seed, inertia};
}

/// Nearest centroid per row by direct Euclidean distance; ties go to the lowest index.
inline std::vector<Index> assign_hard(const RowMatrix& features, const Vocabulary& vocab) {
  if (features.cols() != vocab.dim())
    throw ShapeError("feature dim " + std::to_string(features.cols()) + " != vocabulary dim " +
                     std::to_string(vocab.dim()));
  std::vector<Index> out(static_cast<std::size_t>(features.rows()));
  for (Index i = 0; i < features.rows(); ++i) {
    Index arg = 0;
    double best = std::numeric_limits<double>::infinity();
    for (Index k = 0; k < vocab.clusters(); ++k) {
      const double d = (features.row(i) - vocab.centroids.row(k)).squaredNorm();
      if (d < best) {
        best = d;
        arg = k;
      }
    }
    out[static_cast<std::size_t>(i)] = arg;
  }
  return out;
}

inline std::vector<Index> assign_hard(const LocalFeatureSet& set, const Vocabulary& vocab) {
  return assign_hard(set.features, vocab);
}

/// Checks C >= 2 and pairwise-distinct centroids.
inline void validate_vocabulary(const Vocabulary& v) {
  if (v.clusters() < 2) throw ConfigError("vocabulary needs at least 2 clusters");
  if (!v.centroids.allFinite()) throw DataError("non-finite centroid");
  for (Index i = 0; i < v.clusters(); ++i)
    for (Index j = i + 1; j < v.clusters(); ++j)
      if ((v.centroids.row(i) - v.centroids.row(j)).norm() < 1e-9)
        throw DataError("centroids " + std::to_string(i) + " and " + std::to_string(j) + " coincide");
}

inline nlohmann::json vocabulary_sidecar(const Vocabulary& v) {
  return {{"c", v.clusters()},
          {"dim", v.dim()},
          {"seed", v.seed},
          {"inertia", v.inertia},
          {"fitted_on_normalized", v.fitted_on_normalized}};
}

/// Writes `<stem>.vbff` (f64 centroids) and `<stem>.json`.
inline void save_vocabulary(const Vocabulary& v, const std::filesystem::path& stem) {
  vbff::write(std::filesystem::path(stem).replace_extension(".vbff"), v.centroids, vbff::DType::f64);
  std::ofstream js(std::filesystem::path(stem).replace_extension(".json"));
  if (!js) throw IoError("cannot write vocabulary sidecar for " + stem.string());
  js << vocabulary_sidecar(v).dump(2) << '\n';
}

inline Vocabulary load_vocabulary(const std::filesystem::path& stem) {
  Vocabulary v;
  v.centroids = vbff::read(std::filesystem::path(stem).replace_extension(".vbff")).matrix;
  std::ifstream js(std::filesystem::path(stem).replace_extension(".json"));
  if (!js) throw IoError("missing vocabulary sidecar for " + stem.string());
  const auto j = nlohmann::json::parse(js);
  if (j.at("c").get<Index>() != v.clusters() || j.at("dim").get<Index>() != v.dim())
    throw FormatError("vocabulary sidecar disagrees with matrix shape");
  v.seed = j.at("seed").get<std::uint64_t>();
  v.inertia = j.at("inertia").get<double>();
  v.fitted_on_normalized = j.at("fitted_on_normalized").get<bool>();
  return v;
}

}  // namespace vladbuff
