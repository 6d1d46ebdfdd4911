#pragma once

// Shared helpers for the test suites. The reference_* functions are straight
// loop implementations over std::vector with no library code, used as oracles.

#include <vladbuff/vladbuff.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <unistd.h>

namespace testing_support {

using vladbuff::Index;
using vladbuff::RowMatrix;
using vladbuff::Vector;
using Rows = std::vector<std::vector<double>>;

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("vladbuff_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline RowMatrix gaussian(vladbuff::CounterRng& rng, Index r, Index c, double scale = 1.0) {
  RowMatrix m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  return m;
}

inline Rows to_rows(const RowMatrix& m) {
  Rows out(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
  return out;
}

inline double ref_sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline double dot(const std::vector<double>& x, const std::vector<double>& y) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

inline std::vector<double> unit(std::vector<double> v) {
  const double n = std::sqrt(dot(v, v));
  for (double& x : v) x /= n;
  return v;
}

/// w_i = sum_j sigmoid(a <u_i, u_j> + b), u already unit rows.
inline std::vector<double> reference_soft_count(const Rows& u, double a, double b) {
  std::vector<double> w(u.size(), 0.0);
  for (std::size_t i = 0; i < u.size(); ++i)
    for (std::size_t j = 0; j < u.size(); ++j) w[i] += ref_sigmoid(a * dot(u[i], u[j]) + b);
  return w;
}

struct ReferenceModel {
  Rows centroids;
  Rows weights;
  std::vector<double> biases;
  double a = 10, b = -5, p = 1;
  bool burst = true;
  // optional affine projection (x - m) R
  Rows rotation;
  std::vector<double> mean;
};

inline ReferenceModel reference_model(const vladbuff::AggregationModel& m) {
  ReferenceModel r;
  r.centroids = to_rows(m.vocabulary.centroids);
  r.weights = to_rows(m.assignment.weights);
  r.biases.assign(m.assignment.biases.data(), m.assignment.biases.data() + m.assignment.biases.size());
  r.a = m.burst.a;
  r.b = m.burst.b;
  r.p = m.burst.p;
  r.burst = m.burst.enabled;
  if (m.prepool) {
    r.rotation = to_rows(m.prepool->rotation);
    r.mean.assign(m.prepool->mean.data(), m.prepool->mean.data() + m.prepool->mean.size());
  }
  return r;
}

/// Raw per-cluster sums sum_i alpha_ik / w_i^p (u_i - c_k), before any
/// normalization. `u` are the unit rows fed to assignment.
inline Rows reference_cluster_sums(const Rows& u, const ReferenceModel& m) {
  const std::size_t n = u.size(), c = m.centroids.size(), d = m.centroids[0].size();
  std::vector<double> w(n, 1.0);
  if (m.burst) w = reference_soft_count(u, m.a, m.b);
  Rows v(c, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> logit(c);
    double mx = -INFINITY;
    for (std::size_t k = 0; k < c; ++k) {
      logit[k] = dot(m.weights[k], u[i]) + m.biases[k];
      mx = std::max(mx, logit[k]);
    }
    double z = 0.0;
    for (std::size_t k = 0; k < c; ++k) z += std::exp(logit[k] - mx);
    const double discount = m.burst ? std::pow(w[i], -m.p) : 1.0;
    for (std::size_t k = 0; k < c; ++k) {
      const double alpha = std::exp(logit[k] - mx) / z;
      for (std::size_t j = 0; j < d; ++j) v[k][j] += alpha * discount * (u[i][j] - m.centroids[k][j]);
    }
  }
  return v;
}

/// Unit rows as the aggregation sees them: normalize, then optionally
/// project and normalize again.
inline Rows reference_inputs(const Rows& x, const ReferenceModel& m) {
  Rows u;
  for (const auto& row : x) {
    auto r = unit(row);
    if (!m.rotation.empty()) {
      std::vector<double> y(m.rotation[0].size(), 0.0);
      for (std::size_t j = 0; j < y.size(); ++j)
        for (std::size_t i = 0; i < r.size(); ++i) y[j] += (r[i] - m.mean[i]) * m.rotation[i][j];
      r = unit(y);
    }
    u.push_back(r);
  }
  return u;
}

/// Full descriptor: cluster sums, per-cluster L2 (zero guard 1e-12), flatten,
/// global L2.
inline std::vector<double> reference_aggregate(const Rows& x, const ReferenceModel& m) {
  const auto v = reference_cluster_sums(reference_inputs(x, m), m);
  std::vector<double> flat;
  for (const auto& block : v) {
    const double n = std::sqrt(dot(block, block));
    for (double e : block) flat.push_back(n >= 1e-12 ? e / n : 0.0);
  }
  const double g = std::sqrt(dot(flat, flat));
  for (double& e : flat) e /= g;
  return flat;
}

/// A small random model whose parameters are all generic.
inline vladbuff::AggregationModel random_model(vladbuff::CounterRng& rng, Index d, Index c, bool burst,
                                               Index d_prime = 0) {
  vladbuff::AggregationModel m;
  const Index agg = d_prime > 0 ? d_prime : d;
  m.vocabulary.centroids = gaussian(rng, c, agg, 0.5);
  m.assignment.weights = gaussian(rng, c, agg, 2.0);
  m.assignment.biases = gaussian(rng, c, 1).col(0);
  m.burst = {2.0 + 6.0 * rng.uniform(), -1.0 - 3.0 * rng.uniform(), 0.5 + rng.uniform(), burst};
  if (d_prime > 0)
    m.prepool = vladbuff::PcaModel{0.1 * gaussian(rng, d, 1).col(0), gaussian(rng, d, agg), Vector::Zero(agg),
                                   vladbuff::ProjectionInit::random_linear};
  vladbuff::refresh_fingerprint(m);
  return m;
}

}  // namespace testing_support
