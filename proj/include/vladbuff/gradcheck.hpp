#pragma once

#include "aggregation.hpp"
#include "rng.hpp"
#include "training.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace vladbuff {

struct GradCheckOptions {
  int configs = 50;
  double h = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor for the relative error, so entries that are zero
  /// analytically are judged on absolute agreement at this scale.
  double scale_floor = 1e-6;
  std::uint64_t seed = 0;
};

struct GradCheckCase {
  Index n = 0, d = 0, d_prime = 0, c = 0;
  bool projection = false;
  bool burst = true;
  double max_rel_error = 0.0;
  std::map<std::string, double> group_error;  // max relative error per group
};

struct GradCheckReport {
  std::vector<GradCheckCase> cases;
  double max_rel_error = 0.0;
  std::map<std::string, int> group_coverage;  // configs exercising each group
  bool passed = false;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace detail {

inline RowMatrix gaussian(CounterRng& rng, Index r, Index c, double scale = 1.0) {
  RowMatrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

inline LocalFeatureSet random_set(CounterRng& rng, Index n, Index d, const char* id) {
  return {id, gaussian(rng, n, d), false};
}

}  // namespace detail

/// A random small model and triplet batch with every parameter group live.
/// Margins are large enough that every hinge term is active. N starts at 3:
/// with two features the soft counts are equal, intra-normalization cancels
/// them, and the a, b, p gradients are identically zero.
inline std::pair<TrainableModel, std::vector<TripletBatch>> random_gradcheck_problem(CounterRng& rng, bool projection,
                                                                                     bool burst) {
  const Index n = 3 + static_cast<Index>(rng.below(4));       // 3..6
  const Index d = 2 + static_cast<Index>(rng.below(4));       // 2..5
  const Index c = 2 + static_cast<Index>(rng.below(2));       // 2..3
  const Index dp = projection ? 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(d))) : d;
  const Index agg = projection ? std::max<Index>(dp, 2) : d;

  AggregationModel m;
  m.vocabulary.centroids = detail::gaussian(rng, c, agg, 0.5);
  m.assignment.weights = detail::gaussian(rng, c, agg);
  m.assignment.biases = detail::gaussian(rng, c, 1).col(0);
  m.assignment.sharpness_init = 1.0;
  m.burst = {2.0 + 3.0 * rng.uniform(), -1.0 - 2.0 * rng.uniform(), 0.3 + 1.2 * rng.uniform(), burst};
  if (projection) {
    m.prepool = PcaModel{0.2 * detail::gaussian(rng, d, 1).col(0), detail::gaussian(rng, d, agg),
                         Vector::Zero(agg), ProjectionInit::random_linear};
  }
  refresh_fingerprint(m);

  TrainableModel tm{m, {all_param_groups().begin(), all_param_groups().end()}};
  std::vector<TripletBatch> batches;
  const int n_batches = 1 + static_cast<int>(rng.below(2));
  for (int b = 0; b < n_batches; ++b) {
    TripletBatch tb{detail::random_set(rng, n, d, "anchor"), detail::random_set(rng, n, d, "positive"), {}, 3.0};
    const int negs = 1 + static_cast<int>(rng.below(3));
    for (int k = 0; k < negs; ++k) tb.negatives.push_back(detail::random_set(rng, n, d, "negative"));
    batches.push_back(std::move(tb));
  }
  return {std::move(tm), std::move(batches)};
}

/// Analytic gradients against central differences on randomized instances;
/// alternates projection on/off and covers the burst-disabled path too.
inline GradCheckReport run_gradient_check(const GradCheckOptions& opt) {
  CounterRng rng(opt.seed);
  GradCheckReport rep;
  for (int i = 0; i < opt.configs; ++i) {
    const bool projection = (i % 2) == 0;
    const bool burst = (i % 5) != 4;
    auto [tm, batches] = random_gradcheck_problem(rng, projection, burst);
    const auto analytic = backward(tm, batches).second;
    const auto numeric = finite_diff_grad(tm, batches, opt.h);

    GradCheckCase cc;
    cc.n = batches.front().anchor.count();
    cc.d = tm.model.input_dim();
    cc.d_prime = tm.model.agg_dim();
    cc.c = tm.model.clusters();
    cc.projection = projection;
    cc.burst = burst;

    Index offset = 0;
    auto group = [&](ParamGroup g, Index size) {
      if (!tm.is_trainable(g)) return;
      double worst = 0.0;
      for (Index k = offset; k < offset + size; ++k)
        worst = std::max(worst, relative_error(analytic[k], numeric[k], opt.scale_floor));
      cc.group_error[to_string(g)] = worst;
      cc.max_rel_error = std::max(cc.max_rel_error, worst);
      ++rep.group_coverage[to_string(g)];
      offset += size;
    };
    const auto& m = tm.model;
    group(ParamGroup::a, 1);
    group(ParamGroup::b, 1);
    group(ParamGroup::p, 1);
    group(ParamGroup::centroids, m.vocabulary.centroids.size());
    group(ParamGroup::assignment, m.assignment.weights.size() + m.assignment.biases.size());
    if (m.prepool) group(ParamGroup::projection, m.prepool->rotation.size() + m.prepool->mean.size());
    rep.max_rel_error = std::max(rep.max_rel_error, cc.max_rel_error);
    rep.cases.push_back(std::move(cc));
  }
  rep.passed = rep.max_rel_error <= opt.tolerance;
  return rep;
}

}  // namespace vladbuff
