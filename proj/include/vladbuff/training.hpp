#pragma once

#include "aggregation.hpp"
#include "errors.hpp"
#include "rng.hpp"
#include "types.hpp"

#include <cmath>
#include <functional>
#include <iomanip>
#include <ostream>
#include <set>
#include <string>
#include <vector>

namespace vladbuff {

/// Trainable parameter groups, in flattening order.
enum class ParamGroup { a, b, p, centroids, assignment, projection };

inline const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::a: return "a";
    case ParamGroup::b: return "b";
    case ParamGroup::p: return "p";
    case ParamGroup::centroids: return "centroids";
    case ParamGroup::assignment: return "assignment";
    case ParamGroup::projection: return "projection";
  }
  return "?";
}

inline ParamGroup parse_param_group(const std::string& s) {
  for (auto g : {ParamGroup::a, ParamGroup::b, ParamGroup::p, ParamGroup::centroids, ParamGroup::assignment,
                 ParamGroup::projection})
    if (s == to_string(g)) return g;
  throw ConfigError("unknown parameter group '" + s + "'");
}

inline const std::vector<ParamGroup>& all_param_groups() {
  static const std::vector<ParamGroup> groups{ParamGroup::a,         ParamGroup::b,          ParamGroup::p,
                                              ParamGroup::centroids, ParamGroup::assignment, ParamGroup::projection};
  return groups;
}

/// Aggregation model plus the set of groups gradient descent may change.
/// Whitening is never trained.
struct TrainableModel {
  AggregationModel model;
  std::set<ParamGroup> trainable;

  bool is_trainable(ParamGroup g) const {
    if (g == ParamGroup::projection && !model.prepool) return false;
    return trainable.count(g) > 0;
  }
};

/// One anchor with its positive and any number of negatives.
struct TripletBatch {
  LocalFeatureSet anchor;
  LocalFeatureSet positive;
  std::vector<LocalFeatureSet> negatives;
  double margin = 0.1;
};

/// Gradient buffers shaped like the model parameters.
struct ParamGrad {
  double a = 0.0, b = 0.0, p = 0.0;
  RowMatrix centroids;
  RowMatrix weights;
  Vector biases;
  RowMatrix rotation;
  Vector mean;

  explicit ParamGrad(const AggregationModel& m)
      : centroids(RowMatrix::Zero(m.clusters(), m.agg_dim())),
        weights(RowMatrix::Zero(m.clusters(), m.agg_dim())),
        biases(Vector::Zero(m.clusters())) {
    if (m.prepool) {
      rotation = RowMatrix::Zero(m.prepool->in_dim(), m.prepool->out_dim());
      mean = Vector::Zero(m.prepool->in_dim());
    }
  }
};

/// Number of scalars in the flattened trainable vector.
inline Index parameter_count(const TrainableModel& tm) {
  const auto& m = tm.model;
  Index n = 0;
  if (tm.is_trainable(ParamGroup::a)) n += 1;
  if (tm.is_trainable(ParamGroup::b)) n += 1;
  if (tm.is_trainable(ParamGroup::p)) n += 1;
  if (tm.is_trainable(ParamGroup::centroids)) n += m.vocabulary.centroids.size();
  if (tm.is_trainable(ParamGroup::assignment)) n += m.assignment.weights.size() + m.assignment.biases.size();
  if (tm.is_trainable(ParamGroup::projection)) n += m.prepool->rotation.size() + m.prepool->mean.size();
  return n;
}

namespace detail {

/// Visits trainable scalars in flattening order; `fn(model_ref, grad_ref)`.
template <typename Fn>
void for_each_param(TrainableModel& tm, ParamGrad* g, Fn&& fn) {
  auto& m = tm.model;
  double dummy = 0.0;
  auto gref = [&](double& slot) -> double& { return g ? slot : dummy; };
  auto each = [&](auto& mat, auto* gmat) {
    for (Index i = 0; i < mat.size(); ++i) fn(mat.data()[i], g ? gmat->data()[i] : dummy);
  };
  if (tm.is_trainable(ParamGroup::a)) fn(m.burst.a, gref(g ? g->a : dummy));
  if (tm.is_trainable(ParamGroup::b)) fn(m.burst.b, gref(g ? g->b : dummy));
  if (tm.is_trainable(ParamGroup::p)) fn(m.burst.p, gref(g ? g->p : dummy));
  if (tm.is_trainable(ParamGroup::centroids)) each(m.vocabulary.centroids, g ? &g->centroids : nullptr);
  if (tm.is_trainable(ParamGroup::assignment)) {
    each(m.assignment.weights, g ? &g->weights : nullptr);
    each(m.assignment.biases, g ? &g->biases : nullptr);
  }
  if (tm.is_trainable(ParamGroup::projection)) {
    each(m.prepool->rotation, g ? &g->rotation : nullptr);
    each(m.prepool->mean, g ? &g->mean : nullptr);
  }
}

}  // namespace detail

inline Vector flatten_parameters(const TrainableModel& tm) {
  Vector out(parameter_count(tm));
  Index i = 0;
  auto& mut = const_cast<TrainableModel&>(tm);
  detail::for_each_param(mut, nullptr, [&](double& v, double&) { out[i++] = v; });
  return out;
}

inline void unflatten_parameters(TrainableModel& tm, const Vector& theta) {
  if (theta.size() != parameter_count(tm)) throw ShapeError("parameter vector length mismatch");
  Index i = 0;
  detail::for_each_param(tm, nullptr, [&](double& v, double&) { v = theta[i++]; });
  refresh_fingerprint(tm.model);
}

inline Vector flatten_gradient(TrainableModel& tm, ParamGrad& g) {
  Vector out(parameter_count(tm));
  Index i = 0;
  detail::for_each_param(tm, &g, [&](double&, double& gv) { out[i++] = gv; });
  return out;
}

/// Sum over negatives of max(0, |a - p| - |a - n| + margin).
inline double triplet_loss(const Vector& anchor, const Vector& positive, const std::vector<Vector>& negatives,
                           double margin) {
  if (anchor.size() != positive.size()) throw ShapeError("anchor/positive dims differ");
  const double dp = (anchor - positive).norm();
  double loss = 0.0;
  for (const auto& n : negatives) {
    if (n.size() != anchor.size()) throw ShapeError("negative dim differs");
    loss += std::max(0.0, dp - (anchor - n).norm() + margin);
  }
  return loss;
}

/// Loss of one batch under a model (whitening bypassed).
inline double batch_loss(const AggregationModel& model, const TripletBatch& batch) {
  ForwardCache fc;
  auto desc = [&](const LocalFeatureSet& s) {
    forward(s.features, model, fc);
    return fc.descriptor;
  };
  const Vector a = desc(batch.anchor);
  const Vector p = desc(batch.positive);
  std::vector<Vector> negs;
  for (const auto& n : batch.negatives) negs.push_back(desc(n));
  return triplet_loss(a, p, negs, batch.margin);
}

inline double mean_loss(const AggregationModel& model, const std::vector<TripletBatch>& batches) {
  if (batches.empty()) throw ConfigError("need at least one batch");
  double total = 0.0;
  for (const auto& b : batches) total += batch_loss(model, b);
  return total / static_cast<double>(batches.size());
}

/// Reverse pass for one image: accumulates d(loss)/d(params) given
/// d(loss)/d(descriptor). Normalization Jacobians are (I - v v^T)/|v|; blocks
/// under the zero guard pass no gradient.
inline void descriptor_backward(const ForwardCache& fc, const AggregationModel& model, const Vector& d_desc,
                                ParamGrad& g) {
  const Index c = model.clusters(), d = model.agg_dim();
  const auto& cent = model.vocabulary.centroids;

  const Vector d_intra_flat = (d_desc - fc.descriptor * fc.descriptor.dot(d_desc)) / fc.global_norm;
  const Eigen::Map<const RowMatrix> d_intra(d_intra_flat.data(), c, d);

  RowMatrix d_blocks = RowMatrix::Zero(c, d);
  for (Index k = 0; k < c; ++k) {
    if (fc.block_norm[k] < kBlockZeroGuard) continue;
    const auto vk = fc.intra.row(k);
    d_blocks.row(k) = (d_intra.row(k) - vk * vk.dot(d_intra.row(k))) / fc.block_norm[k];
  }

  // V_k = sum_i weight_ik (u_i - c_k)
  const Vector cent_dot = (cent.array() * d_blocks.array()).rowwise().sum();
  RowMatrix d_weight = fc.u * d_blocks.transpose();
  d_weight.rowwise() -= cent_dot.transpose();
  RowMatrix d_u = fc.weight * d_blocks;
  const Vector mass = fc.weight.colwise().sum().transpose();
  g.centroids -= mass.asDiagonal() * d_blocks;

  RowMatrix d_alpha;
  if (model.burst.enabled) {
    d_alpha = d_weight.array().colwise() * fc.s.array();
    const Vector d_s = (d_weight.array() * fc.alpha.array()).rowwise().sum();
    const Vector log_w = fc.w.array().log();
    g.p += -(d_s.array() * fc.s.array() * log_w.array()).sum();
    const Vector d_w = -model.burst.p * (d_s.array() * fc.s.array() / fc.w.array());
    const RowMatrix d_z = (fc.sig.array() * (1.0 - fc.sig.array())).colwise() * d_w.array();
    g.a += (d_z.array() * fc.gram.array()).sum();
    g.b += d_z.sum();
    const RowMatrix d_gram = model.burst.a * d_z;
    d_u.noalias() += (d_gram + d_gram.transpose()) * fc.u;
  } else {
    d_alpha = d_weight;
  }
  require_finite(d_u, "soft_count_backward");

  RowMatrix d_logits = fc.alpha.array() * (d_alpha.array().colwise() -
                                           (fc.alpha.array() * d_alpha.array()).rowwise().sum());
  g.weights.noalias() += d_logits.transpose() * fc.u;
  g.biases += d_logits.colwise().sum().transpose();
  d_u.noalias() += d_logits * model.assignment.weights;
  require_finite(d_u, "assignment_backward");

  if (model.prepool) {
    const auto& pm = *model.prepool;
    const Vector dots = (fc.u.array() * d_u.array()).rowwise().sum();
    RowMatrix d_y = d_u - (fc.u.array().colwise() * dots.array()).matrix();
    d_y.array().colwise() /= fc.y_norm.array();
    const Vector d_y_sum = d_y.colwise().sum().transpose();
    // (x0 - 1 m^T)^T d_y with x0 = diag(1/||x||) x, without forming x0
    const RowMatrix scaled = d_y.array().colwise() * fc.x_inv_norm.array();
    g.rotation.noalias() += fc.input->transpose() * scaled;
    g.rotation.noalias() -= pm.mean * d_y_sum.transpose();
    g.mean.noalias() -= pm.rotation * d_y_sum;
    require_finite(g.rotation, "projection_backward");
  }
}

/// Analytic gradient of one batch's triplet loss. Returns the loss; the
/// gradient is accumulated (scaled by `scale`) into `g`.
inline double batch_backward(const AggregationModel& model, const TripletBatch& batch, ParamGrad& g,
                             double scale = 1.0) {
  ForwardCache fa, fp;
  forward(batch.anchor.features, model, fa);
  forward(batch.positive.features, model, fp);
  const Vector diff_p = fa.descriptor - fp.descriptor;
  const double dist_p = diff_p.norm();
  const Vector unit_p = dist_p > 0.0 ? Vector(diff_p / dist_p) : Vector::Zero(diff_p.size());

  Vector d_anchor = Vector::Zero(fa.descriptor.size());
  Vector d_pos = Vector::Zero(fa.descriptor.size());
  double loss = 0.0;
  ForwardCache fn;
  for (const auto& neg : batch.negatives) {
    forward(neg.features, model, fn);
    const Vector diff_n = fa.descriptor - fn.descriptor;
    const double dist_n = diff_n.norm();
    const double term = dist_p - dist_n + batch.margin;
    if (term <= 0.0) continue;
    loss += term;
    const Vector unit_n = dist_n > 0.0 ? Vector(diff_n / dist_n) : Vector::Zero(diff_n.size());
    d_anchor += scale * (unit_p - unit_n);
    d_pos -= scale * unit_p;
    descriptor_backward(fn, model, scale * unit_n, g);
  }
  if (loss > 0.0) {
    descriptor_backward(fa, model, d_anchor, g);
    descriptor_backward(fp, model, d_pos, g);
  }
  return loss;
}

/// Mean loss over the selected batches and its flattened gradient.
inline std::pair<double, Vector> backward(TrainableModel& tm, const std::vector<TripletBatch>& batches,
                                          const std::vector<std::size_t>& selection) {
  if (selection.empty()) throw ConfigError("need at least one batch");
  ParamGrad g(tm.model);
  const double scale = 1.0 / static_cast<double>(selection.size());
  double loss = 0.0;
  for (auto i : selection) loss += batch_backward(tm.model, batches.at(i), g, scale);
  loss *= scale;
  if (!std::isfinite(loss)) throw NumericalError("non-finite loss");
  return {loss, flatten_gradient(tm, g)};
}

inline std::pair<double, Vector> backward(TrainableModel& tm, const std::vector<TripletBatch>& batches) {
  std::vector<std::size_t> all(batches.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return backward(tm, batches, all);
}

inline std::pair<double, Vector> backward(TrainableModel& tm, const TripletBatch& batch) {
  return backward(tm, std::vector<TripletBatch>{batch});
}

/// Central differences of `f` at `theta`.
inline Vector central_difference(const std::function<double(const Vector&)>& f, const Vector& theta, double h) {
  if (!(h > 0.0)) throw ConfigError("finite-difference step must be positive");
  Vector grad(theta.size());
  Vector probe = theta;
  for (Index i = 0; i < theta.size(); ++i) {
    probe[i] = theta[i] + h;
    const double up = f(probe);
    probe[i] = theta[i] - h;
    const double down = f(probe);
    probe[i] = theta[i];
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

inline Vector finite_diff_grad(const TrainableModel& tm, const std::vector<TripletBatch>& batches, double h) {
  if (!(h > 0.0)) throw ConfigError("finite-difference step must be positive");
  TrainableModel work = tm;
  return central_difference(
      [&](const Vector& theta) {
        unflatten_parameters(work, theta);
        return mean_loss(work.model, batches);
      },
      flatten_parameters(tm), h);
}

struct TrainOptions {
  double lr = 1e-5;
  int steps = 100;
  std::uint64_t seed = 0;
  /// Batches per gradient step; 0 uses every batch (full-batch descent).
  std::size_t batches_per_step = 0;
};

struct TraceRow {
  int step;
  double loss;
  double a, b, p;
};

struct TrainResult {
  TrainableModel model;
  std::vector<TraceRow> trace;
};

/// Plain fixed-rate gradient descent. Trace row k holds the loss evaluated
/// before update k and the burst scalars after it.
inline TrainResult train(TrainableModel tm, const std::vector<TripletBatch>& batches, const TrainOptions& opt) {
  if (batches.empty()) throw ConfigError("training needs at least one batch");
  if (opt.steps < 0 || !(opt.lr >= 0.0)) throw ConfigError("invalid training options");
  CounterRng rng(opt.seed);
  const std::size_t per_step =
      opt.batches_per_step == 0 ? batches.size() : std::min(opt.batches_per_step, batches.size());
  std::vector<std::size_t> order;
  std::size_t cursor = 0;

  TrainResult out{std::move(tm), {}};
  auto& model = out.model;
  for (int step = 0; step < opt.steps; ++step) {
    std::vector<std::size_t> chosen;
    if (per_step == batches.size()) {
      for (std::size_t k = 0; k < batches.size(); ++k) chosen.push_back(k);
    } else {
      for (std::size_t k = 0; k < per_step; ++k) {
        if (cursor == order.size()) {
          order = rng.permutation(batches.size());
          cursor = 0;
        }
        chosen.push_back(order[cursor++]);
      }
    }
    auto [loss, grad] = backward(model, batches, chosen);
    if (!grad.allFinite())
      throw NumericalError("non-finite gradient at step " + std::to_string(step));
    if (grad.size() > 0) unflatten_parameters(model, flatten_parameters(model) - opt.lr * grad);
    const auto& bp = model.model.burst;
    out.trace.push_back({step, loss, bp.a, bp.b, bp.p});
  }
  return out;
}

inline void write_trace_csv(const std::vector<TraceRow>& trace, std::ostream& os) {
  os << "step,loss,a,b,p\n" << std::setprecision(17);
  for (const auto& r : trace) os << r.step << ',' << r.loss << ',' << r.a << ',' << r.b << ',' << r.p << '\n';
}

}  // namespace vladbuff
