#pragma once

#include "errors.hpp"
#include "featureio.hpp"
#include "rng.hpp"
#include "types.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include <cmath>
#include <string>

namespace vladbuff {

enum class ProjectionInit { pca, random_linear, random_mlp_stub };

inline const char* to_string(ProjectionInit k) {
  switch (k) {
    case ProjectionInit::pca: return "pca";
    case ProjectionInit::random_linear: return "random_linear";
    case ProjectionInit::random_mlp_stub: return "random_mlp_stub";
  }
  return "?";
}

inline ProjectionInit parse_projection_init(const std::string& s) {
  if (s == "pca") return ProjectionInit::pca;
  if (s == "random_linear") return ProjectionInit::random_linear;
  if (s == "random_mlp_stub") throw ConfigError("random_mlp_stub projection is not implemented");
  throw ConfigError("unknown projection init '" + s + "'");
}

/// Pre-pool linear projection x' = (x - mean) * rotation.
struct PcaModel {
  Vector mean;          // D
  RowMatrix rotation;   // D x D'
  Vector eigenvalues;   // D', non-increasing
  ProjectionInit init_kind = ProjectionInit::pca;

  Index in_dim() const { return rotation.rows(); }
  Index out_dim() const { return rotation.cols(); }
};

/// Post-pool PCA whitening of global descriptors.
struct WhiteningModel {
  Vector mean;          // C*D'
  RowMatrix rotation;   // C*D' x K
  Vector eigenvalues;   // K
  double epsilon = 1e-8;

  Index in_dim() const { return rotation.rows(); }
  Index out_dim() const { return rotation.cols(); }
};

namespace detail {

struct PcaCore {
  Vector mean;
  RowMatrix directions;  // D x k
  Vector eigenvalues;    // k
};

inline constexpr double kRankTolerance = 1e-10;

/// Top-k principal directions of the population covariance (1/M). Uses the
/// D x D covariance when D <= M, otherwise the M x M Gram matrix of centered
/// samples (same nonzero spectrum). Each direction's largest-magnitude entry
/// is made positive.
inline PcaCore pca_core(const RowMatrix& samples, Index k) {
  const Index m = samples.rows(), d = samples.cols();
  if (k < 1 || k > d) throw ConfigError("output dimension must be in [1, " + std::to_string(d) + "]");
  if (m <= k) throw DataError("PCA needs more samples (" + std::to_string(m) + ") than output dims (" +
                              std::to_string(k) + ")");
  if (!samples.allFinite()) throw DataError("non-finite sample");

  PcaCore out;
  out.mean = samples.colwise().mean().transpose();
  const RowMatrix centered = samples.rowwise() - out.mean.transpose();
  const double inv_m = 1.0 / static_cast<double>(m);

  Vector evals;
  RowMatrix evecs;
  if (d <= m) {
    const Eigen::MatrixXd cov = (centered.transpose() * centered) * inv_m;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
    evals = es.eigenvalues().reverse();
    evecs = es.eigenvectors().rowwise().reverse();
  } else {
    const Eigen::MatrixXd gram = (centered * centered.transpose()) * inv_m;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
    if (es.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
    evals = es.eigenvalues().reverse();
    const Eigen::MatrixXd v = es.eigenvectors().rowwise().reverse();
    evecs.resize(d, std::min(m, d));
    for (Index j = 0; j < evecs.cols(); ++j) {
      const double lam = std::max(evals[j], 0.0);
      if (lam > 0.0) evecs.col(j) = centered.transpose() * v.col(j) / std::sqrt(static_cast<double>(m) * lam);
      else evecs.col(j).setZero();
    }
  }
  evals = evals.cwiseMax(0.0);
  const double top = evals.size() > 0 ? evals[0] : 0.0;
  Index rank = 0;
  while (rank < evals.size() && evals[rank] > kRankTolerance * top && top > 0.0) ++rank;
  if (rank < k)
    throw DegenerateError("samples span rank " + std::to_string(rank) + ", fewer than requested " +
                          std::to_string(k));

  out.directions = evecs.leftCols(k);
  out.eigenvalues = evals.head(k);
  for (Index j = 0; j < k; ++j) {
    Index arg = 0;
    out.directions.col(j).cwiseAbs().maxCoeff(&arg);
    if (out.directions(arg, j) < 0.0) out.directions.col(j) *= -1.0;
  }
  return out;
}

}  // namespace detail

inline PcaModel fit_pca(const RowMatrix& samples, Index out_dim) {
  auto core = detail::pca_core(samples, out_dim);
  return {std::move(core.mean), std::move(core.directions), std::move(core.eigenvalues), ProjectionInit::pca};
}

/// Random linear map (no centering) with N(0,1)/sqrt(D) entries drawn row-major.
inline PcaModel make_random_projection(Index in_dim, Index out_dim, std::uint64_t seed) {
  if (in_dim < 1 || out_dim < 1 || out_dim > in_dim) throw ShapeError("random projection needs 1 <= D' <= D");
  CounterRng rng(seed);
  RowMatrix r(in_dim, out_dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(in_dim));
  for (Index i = 0; i < in_dim; ++i)
    for (Index j = 0; j < out_dim; ++j) r(i, j) = rng.normal() * scale;
  return {Vector::Zero(in_dim), std::move(r), Vector::Zero(out_dim), ProjectionInit::random_linear};
}

/// Affine map then row L2 normalization. Throws DataError on a row that
/// projects to (numerically) zero.
inline RowMatrix project_rows(const RowMatrix& x, const PcaModel& model) {
  if (x.cols() != model.in_dim())
    throw ShapeError("feature dim " + std::to_string(x.cols()) + " != projection input dim " +
                     std::to_string(model.in_dim()));
  RowMatrix y = x * model.rotation;
  y.rowwise() -= model.mean.transpose() * model.rotation;
  normalize_rows_in_place(y);
  return y;
}

inline LocalFeatureSet project_prepool(const LocalFeatureSet& features, const PcaModel& model) {
  return {features.image_id, project_rows(features.features, model), true};
}

/// Total variance of `samples` inside the column span of `basis`.
inline double captured_variance(const RowMatrix& samples, const RowMatrix& basis) {
  const RowMatrix centered = samples.rowwise() - samples.colwise().mean();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(basis);
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(basis.rows(), basis.cols());
  return (centered * q).squaredNorm() / static_cast<double>(samples.rows());
}

inline WhiteningModel fit_whitening(const RowMatrix& descriptors, Index out_dim, double epsilon = 1e-8) {
  if (!(epsilon >= 0.0)) throw ConfigError("whitening epsilon must be non-negative");
  auto core = detail::pca_core(descriptors, out_dim);
  return {std::move(core.mean), std::move(core.directions), std::move(core.eigenvalues), epsilon};
}

/// Center, rotate and scale by 1/sqrt(lambda + epsilon), without renormalizing.
inline Vector whiten_raw(const Vector& v, const WhiteningModel& model) {
  if (v.size() != model.in_dim())
    throw ShapeError("descriptor dim " + std::to_string(v.size()) + " != whitening input dim " +
                     std::to_string(model.in_dim()));
  const Vector scale = (model.eigenvalues.array() + model.epsilon).rsqrt();
  return (model.rotation.transpose() * (v - model.mean)).cwiseProduct(scale);
}

/// Inverse of whiten_raw; exact only when the model keeps every dimension.
inline Vector unwhiten_raw(const Vector& w, const WhiteningModel& model) {
  if (w.size() != model.out_dim()) throw ShapeError("whitened dim mismatch");
  const Vector scale = (model.eigenvalues.array() + model.epsilon).sqrt();
  return model.rotation * w.cwiseProduct(scale) + model.mean;
}

inline GlobalDescriptor apply_whitening(const GlobalDescriptor& d, const WhiteningModel& model) {
  Vector w = whiten_raw(d.vector, model);
  const double n = w.norm();
  if (!(n >= 1e-12)) throw DegenerateError("whitened descriptor is zero");
  return {d.image_id, w / n, d.config_hash};
}

}  // namespace vladbuff
