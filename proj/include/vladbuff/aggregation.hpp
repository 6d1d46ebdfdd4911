#pragma once

#include "errors.hpp"
#include "featureio.hpp"
#include "projection.hpp"
#include "types.hpp"
#include "vocabulary.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace vladbuff {

/// Per-cluster linear filter and bias feeding the assignment softmax.
struct AssignmentParams {
  RowMatrix weights;  // C x D'
  Vector biases;      // C
  double sharpness_init = 100.0;
};

/// Soft-count parameters: w_i = sum_j sigmoid(a * d_ij + b), weight 1 / w_i^p.
struct BurstParams {
  double a = 10.0;
  double b = -5.0;
  double p = 1.0;
  bool enabled = true;
};

struct AggregationModel {
  Vocabulary vocabulary;
  AssignmentParams assignment;
  BurstParams burst;
  std::optional<PcaModel> prepool;
  std::optional<WhiteningModel> whitening;
  std::string config_hash;

  Index clusters() const { return vocabulary.clusters(); }
  /// Dimension of the space residuals are formed in (D').
  Index agg_dim() const { return vocabulary.dim(); }
  /// Dimension of raw input features (D).
  Index input_dim() const { return prepool ? prepool->in_dim() : vocabulary.dim(); }
  Index descriptor_dim() const { return whitening ? whitening->out_dim() : clusters() * agg_dim(); }
};

inline constexpr double kBlockZeroGuard = 1e-12;
inline constexpr double kSelfTermFloor = 1e-12;
inline constexpr double kUnitNormTolerance = 1e-6;

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

/// Deterministic fingerprint of every parameter and flag in the model.
inline std::string model_fingerprint(const AggregationModel& m) {
  Fnv1a h;
  h.str("vladbuff-model-v1");
  h.matrix(m.vocabulary.centroids);
  h.matrix(m.assignment.weights);
  h.matrix(m.assignment.biases);
  h.f64(m.assignment.sharpness_init);
  h.f64(m.burst.a);
  h.f64(m.burst.b);
  h.f64(m.burst.p);
  h.u64(m.burst.enabled ? 1 : 0);
  h.u64(m.prepool ? 1 : 0);
  if (m.prepool) {
    h.str(to_string(m.prepool->init_kind));
    h.matrix(m.prepool->mean);
    h.matrix(m.prepool->rotation);
    h.matrix(m.prepool->eigenvalues);
  }
  h.u64(m.whitening ? 1 : 0);
  if (m.whitening) {
    h.matrix(m.whitening->mean);
    h.matrix(m.whitening->rotation);
    h.matrix(m.whitening->eigenvalues);
    h.f64(m.whitening->epsilon);
  }
  return h.hex();
}

inline void refresh_fingerprint(AggregationModel& m) { m.config_hash = model_fingerprint(m); }

/// Throws ShapeError/ConfigError when sub-models disagree on dimensions.
inline void validate_model(const AggregationModel& m) {
  validate_vocabulary(m.vocabulary);
  const Index c = m.clusters(), d = m.agg_dim();
  if (m.assignment.weights.rows() != c || m.assignment.weights.cols() != d)
    throw ShapeError("assignment weights must be " + std::to_string(c) + "x" + std::to_string(d));
  if (m.assignment.biases.size() != c) throw ShapeError("assignment biases must have length C");
  if (!m.assignment.weights.allFinite() || !m.assignment.biases.allFinite())
    throw DataError("non-finite assignment parameter");
  if (m.prepool && m.prepool->out_dim() != d)
    throw ShapeError("projection output dim " + std::to_string(m.prepool->out_dim()) + " != vocabulary dim " +
                     std::to_string(d));
  if (m.prepool && m.prepool->mean.size() != m.prepool->in_dim()) throw ShapeError("projection mean size");
  if (m.whitening && m.whitening->in_dim() != c * d)
    throw ShapeError("whitening input dim must equal C*D'");
  if (m.burst.enabled && !(sigmoid(m.burst.a + m.burst.b) >= kSelfTermFloor))
    throw ConfigError("sigmoid(a + b) below floor; soft counts would vanish");
}

/// weights_k = 2 s c_k, bias_k = -s |c_k|^2: a softmax over -s |x - c_k|^2
/// once the x-only term cancels.
inline AssignmentParams init_assignment_from_vocab(const Vocabulary& vocab, double s) {
  if (!(s > 0.0)) throw ConfigError("assignment sharpness must be positive");
  AssignmentParams p;
  p.weights = 2.0 * s * vocab.centroids;
  p.biases = -s * vocab.centroids.rowwise().squaredNorm();
  p.sharpness_init = s;
  return p;
}

/// Builds a model from a vocabulary with default-initialized assignment.
inline AggregationModel make_model(Vocabulary vocab, double sharpness, BurstParams burst,
                                   std::optional<PcaModel> prepool = std::nullopt) {
  AggregationModel m;
  m.assignment = init_assignment_from_vocab(vocab, sharpness);
  m.vocabulary = std::move(vocab);
  m.burst = burst;
  m.prepool = std::move(prepool);
  validate_model(m);
  refresh_fingerprint(m);
  return m;
}

/// Row-wise softmax, max-subtracted, in place.
inline void softmax_rows_in_place(RowMatrix& logits) {
  const Vector row_max = logits.rowwise().maxCoeff();
  logits.colwise() -= row_max;
  logits = logits.array().exp().matrix();
  const Vector row_sum = logits.rowwise().sum();
  logits.array().colwise() /= row_sum.array();
}

inline RowMatrix softmax_rows(RowMatrix logits) {
  softmax_rows_in_place(logits);
  return logits;
}

inline RowMatrix soft_assign(const RowMatrix& u, const AssignmentParams& params) {
  if (u.cols() != params.weights.cols())
    throw ShapeError("feature dim " + std::to_string(u.cols()) + " != assignment dim " +
                     std::to_string(params.weights.cols()));
  RowMatrix logits = u * params.weights.transpose();
  logits.rowwise() += params.biases.transpose();
  softmax_rows_in_place(logits);
  return logits;
}

inline RowMatrix soft_assign(const LocalFeatureSet& features, const AssignmentParams& params) {
  return soft_assign(features.features, params);
}

inline void require_unit_rows(const RowMatrix& u, const char* what) {
  for (Index r = 0; r < u.rows(); ++r)
    if (std::abs(u.row(r).norm() - 1.0) > kUnitNormTolerance)
      throw ContractError(std::string(what) + " requires L2-normalized rows (row " + std::to_string(r) + ")");
}

/// Sigmoid of the affine-mapped Gram matrix, sigma(a * U U^T + b).
inline RowMatrix similarity_sigmoid(const RowMatrix& gram, double a, double b) {
  return (1.0 + (-(a * gram.array() + b)).exp()).inverse().matrix();
}

/// Soft count per feature: row sums of sigma(a d_ij + b) over all j, self included.
inline Vector soft_count(const RowMatrix& u, const BurstParams& burst) {
  require_unit_rows(u, "soft_count");
  const RowMatrix gram = u * u.transpose();
  return similarity_sigmoid(gram, burst.a, burst.b).rowwise().sum();
}

inline Vector soft_count(const LocalFeatureSet& features, const BurstParams& burst) {
  return soft_count(features.features, burst);
}

/// Every intermediate of one forward pass (whitening excluded); the backward
/// pass in training.hpp consumes it.
struct ForwardCache {
  const RowMatrix* input = nullptr;  // raw N x D features, not owned; must outlive backward (projection only)
  Vector x_inv_norm;     // N, 1/||x_i|| (projection only)
  RowMatrix y;           // N x D', projected, pre-normalization (projection only)
  Vector y_norm;         // N
  RowMatrix u;           // N x D', unit rows fed to assignment and soft count
  RowMatrix alpha;       // N x C
  RowMatrix gram;        // N x N (burst only)
  RowMatrix sig;         // N x N (burst only)
  Vector w;              // N soft counts (ones when burst disabled)
  Vector s;              // N, w^-p
  RowMatrix weight;      // N x C, alpha_ik / w_i^p
  RowMatrix blocks;      // C x D' raw V_k
  Vector block_norm;     // C
  RowMatrix intra;       // C x D' intra-normalized
  double global_norm = 0.0;
  Vector descriptor;     // C*D', unit
};

inline void require_finite(const RowMatrix& m, const char* stage) {
  if (!m.allFinite()) throw NumericalError(std::string("non-finite values at stage '") + stage + "'");
}
inline void require_finite(const Vector& v, const char* stage) {
  if (!v.allFinite()) throw NumericalError(std::string("non-finite values at stage '") + stage + "'");
}

/// Forward pass up to the globally normalized descriptor.
///
/// rows -> L2 normalize -> [project + L2 normalize] -> softmax assignment ->
/// soft count (burst only) -> V_k = sum_i alpha_ik / w_i^p (u_i - c_k) ->
/// per-cluster L2 -> flatten -> global L2.
inline void forward(const RowMatrix& features, const AggregationModel& model, ForwardCache& fc) {
  if (features.cols() != model.input_dim())
    throw ShapeError("feature dim " + std::to_string(features.cols()) + " != model input dim " +
                     std::to_string(model.input_dim()));
  if (features.rows() < 1) throw DataError("no features");
  if (model.prepool) {
    // Project first, then scale rows: same map as normalizing the input
    // but without an N x D copy.
    fc.input = &features;
    fc.x_inv_norm = features.rowwise().norm();
    for (Index r = 0; r < features.rows(); ++r) {
      if (!(fc.x_inv_norm[r] >= kMinRowNorm)) throw DataError("row " + std::to_string(r) + " has norm below 1e-12");
      fc.x_inv_norm[r] = 1.0 / fc.x_inv_norm[r];
    }
    const auto& pm = *model.prepool;
    fc.y.noalias() = features * pm.rotation;
    fc.y.array().colwise() *= fc.x_inv_norm.array();
    fc.y.rowwise() -= pm.mean.transpose() * pm.rotation;
    fc.y_norm = fc.y.rowwise().norm();
    for (Index r = 0; r < fc.y.rows(); ++r)
      if (!(fc.y_norm[r] >= kMinRowNorm)) throw DataError("row " + std::to_string(r) + " projects to zero");
    fc.u = fc.y.array().colwise() / fc.y_norm.array();
  } else {
    fc.u = features;
    normalize_rows_in_place(fc.u);
  }

  if (fc.u.cols() != model.assignment.weights.cols()) throw ShapeError("assignment dim mismatch");
  fc.alpha.noalias() = fc.u * model.assignment.weights.transpose();
  fc.alpha.rowwise() += model.assignment.biases.transpose();
  softmax_rows_in_place(fc.alpha);
  require_finite(fc.alpha, "soft_assign");

  const Index n = fc.u.rows();
  if (model.burst.enabled) {
    fc.gram.noalias() = fc.u * fc.u.transpose();
    fc.sig = (1.0 + (-(model.burst.a * fc.gram.array() + model.burst.b)).exp()).inverse().matrix();
    fc.w = fc.sig.rowwise().sum();
    if (!(fc.w.minCoeff() > 0.0)) throw NumericalError("soft count reached zero");
    fc.s = (-model.burst.p * fc.w.array().log()).exp().matrix();
    require_finite(fc.s, "soft_count");
    fc.weight = fc.alpha.array().colwise() * fc.s.array();
  } else {
    fc.w = Vector::Ones(n);
    fc.s = Vector::Ones(n);
    fc.weight = fc.alpha;
  }

  const auto& cent = model.vocabulary.centroids;
  fc.blocks.noalias() = fc.weight.transpose() * fc.u;
  // Evaluate the column sums once; inside the diagonal product they are lazy.
  const Vector mass = fc.weight.colwise().sum().transpose();
  fc.blocks -= mass.asDiagonal() * cent;
  require_finite(fc.blocks, "residual_aggregation");

  const Index c = cent.rows(), d = cent.cols();
  fc.block_norm = fc.blocks.rowwise().norm();
  fc.intra.setZero(c, d);
  for (Index k = 0; k < c; ++k)
    if (fc.block_norm[k] >= kBlockZeroGuard) fc.intra.row(k) = fc.blocks.row(k) / fc.block_norm[k];

  fc.global_norm = fc.intra.norm();
  if (!(fc.global_norm > 0.0)) throw DegenerateError("every cluster block is below the zero guard");
  fc.descriptor = Eigen::Map<const Vector>(fc.intra.data(), c * d) / fc.global_norm;
}

inline GlobalDescriptor aggregate(const RowMatrix& features, const AggregationModel& model,
                                  const std::string& image_id = {}) {
  ForwardCache fc;
  forward(features, model, fc);
  GlobalDescriptor out{image_id, std::move(fc.descriptor), model.config_hash};
  if (model.whitening) out = apply_whitening(out, *model.whitening);
  return out;
}

inline GlobalDescriptor aggregate(const LocalFeatureSet& features, const AggregationModel& model) {
  return aggregate(features.features, model, features.image_id);
}

/// Intra-normalized C x D' blocks before flattening and global normalization.
inline RowMatrix aggregate_blocks(const LocalFeatureSet& features, const AggregationModel& model) {
  ForwardCache fc;
  forward(features.features, model, fc);
  return fc.intra;
}

/// Per-feature aggregation weights alpha_ik / w_i^p (N x C).
inline RowMatrix feature_weights(const LocalFeatureSet& features, const AggregationModel& model) {
  ForwardCache fc;
  forward(features.features, model, fc);
  return fc.weight;
}

struct MarginAnalysis {
  Vector margins;              // m_k = |q_k - n_k| - |q_k - p_k|
  std::vector<Index> rank;     // rank[k]: position of cluster k by descending margin (0 = largest)
};

/// Per-cluster triplet margins over intra-normalized blocks.
inline MarginAnalysis cluster_margin_analysis(const RowMatrix& query, const RowMatrix& positive,
                                              const RowMatrix& negative) {
  if (query.rows() != positive.rows() || query.rows() != negative.rows() || query.cols() != positive.cols() ||
      query.cols() != negative.cols())
    throw ShapeError("cluster block shapes differ");
  MarginAnalysis out;
  const Index c = query.rows();
  out.margins = (query - negative).rowwise().norm() - (query - positive).rowwise().norm();
  std::vector<Index> order(static_cast<std::size_t>(c));
  for (Index k = 0; k < c; ++k) order[static_cast<std::size_t>(k)] = k;
  std::stable_sort(order.begin(), order.end(),
                   [&](Index l, Index r) { return out.margins[l] > out.margins[r]; });
  out.rank.assign(static_cast<std::size_t>(c), 0);
  for (Index pos = 0; pos < c; ++pos) out.rank[static_cast<std::size_t>(order[static_cast<std::size_t>(pos)])] = pos;
  return out;
}

/// Cluster whose rank improved most from `baseline` to `candidate`
/// (argmax of rank_baseline - rank_candidate, lowest index on ties).
inline Index most_changed_cluster(const MarginAnalysis& baseline, const MarginAnalysis& candidate) {
  if (baseline.rank.size() != candidate.rank.size()) throw ShapeError("cluster counts differ");
  Index best = 0;
  long best_diff = 0;
  for (std::size_t k = 0; k < baseline.rank.size(); ++k) {
    const long diff = static_cast<long>(baseline.rank[k]) - static_cast<long>(candidate.rank[k]);
    if (k == 0 || diff > best_diff) {
      best_diff = diff;
      best = static_cast<Index>(k);
    }
  }
  return best;
}

}  // namespace vladbuff
