#pragma once

#include "aggregation.hpp"
#include "projection.hpp"
#include "retrieval.hpp"
#include "rng.hpp"
#include "synthetic.hpp"
#include "training.hpp"
#include "vocabulary.hpp"

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace vladbuff {

/// Everything needed to turn training features into an initial model.
struct ModelRecipe {
  Index clusters = 64;
  Index prepool_dim = 0;  // 0 disables the pre-pool projection
  ProjectionInit prepool_init = ProjectionInit::pca;
  double sharpness = 100.0;
  BurstParams burst{};
  std::uint64_t seed = 0;
  KMeansOptions kmeans{};
};

/// Fits projection (if any) then the vocabulary in the projected space, then
/// initializes the assignment from the centroids. Samples are raw features;
/// rows are L2-normalized here.
inline AggregationModel fit_model(const RowMatrix& raw_samples, const ModelRecipe& r) {
  const RowMatrix samples = l2_normalize_rows(raw_samples);
  std::optional<PcaModel> prepool;
  RowMatrix space = samples;
  if (r.prepool_dim > 0) {
    prepool = r.prepool_init == ProjectionInit::pca
                  ? fit_pca(samples, r.prepool_dim)
                  : make_random_projection(samples.cols(), r.prepool_dim, r.seed);
    space = project_rows(samples, *prepool);
  }
  auto vocab = kmeans_fit(space, r.clusters, r.seed, r.kmeans);
  vocab.fitted_on_normalized = true;
  return make_model(std::move(vocab), r.sharpness, r.burst, std::move(prepool));
}

/// Labeled image for in-memory pipelines.
struct LabeledImage {
  ManifestEntry entry;
  const LocalFeatureSet* features;
};

/// One triplet batch per query that has a positive: the nearest in-radius
/// reference is the positive; `negatives` out-of-radius references are drawn
/// by seeded shuffle.
inline std::vector<TripletBatch> make_triplets(const std::vector<LabeledImage>& images, double radius_m,
                                               int negatives, double margin, std::uint64_t seed) {
  if (negatives < 1) throw ConfigError("need at least one negative per triplet");
  CounterRng rng(seed);
  std::vector<const LabeledImage*> refs;
  for (const auto& im : images)
    if (im.entry.split == Split::reference) refs.push_back(&im);
  std::vector<TripletBatch> out;
  for (const auto& q : images) {
    if (q.entry.split != Split::query) continue;
    const LabeledImage* pos = nullptr;
    double best = 0.0;
    std::vector<const LabeledImage*> negs;
    for (const auto* r : refs) {
      const double dist = std::hypot(q.entry.x_m - r->entry.x_m, q.entry.y_m - r->entry.y_m);
      if (dist <= radius_m) {
        if (!pos || dist < best) {
          pos = r;
          best = dist;
        }
      } else {
        negs.push_back(r);
      }
    }
    if (!pos || negs.empty()) continue;
    rng.shuffle(negs);
    TripletBatch b{*q.features, *pos->features, {}, margin};
    for (std::size_t i = 0; i < negs.size() && static_cast<int>(i) < negatives; ++i)
      b.negatives.push_back(*negs[i]->features);
    out.push_back(std::move(b));
  }
  return out;
}

inline RecallReport evaluate_recall(const AggregationModel& model, const std::vector<LabeledImage>& images,
                                    double radius_m, const std::vector<int>& ks) {
  DatasetManifest m;
  m.radius_m = radius_m;
  std::vector<GlobalDescriptor> queries, refs;
  for (const auto& im : images) {
    m.entries.push_back(im.entry);
    auto desc = aggregate(im.features->features, model, im.entry.image_id);
    (im.entry.split == Split::query ? queries : refs).push_back(std::move(desc));
  }
  auto rep = recall_at_k(retrieve(queries, refs), ground_truth_within_radius(m), ks);
  rep.config_hash = model.config_hash;
  rep.radius_m = radius_m;
  return rep;
}

struct ComparisonSettings {
  ModelRecipe recipe{};
  std::set<ParamGroup> trainable{ParamGroup::a, ParamGroup::b, ParamGroup::p, ParamGroup::centroids,
                                 ParamGroup::assignment};
  TrainOptions train{};
  int negatives = 10;
  double margin = 0.1;
  double radius_m = 25.0;
  std::vector<int> ks{1, 5};
};

struct ComparisonOutcome {
  RecallReport vanilla;
  RecallReport buff;
  std::vector<TraceRow> vanilla_trace;
  std::vector<TraceRow> buff_trace;
};

/// Fits one initial model on the training split, trains a burst-disabled and
/// a burst-enabled copy identically, and scores both on the held-out split.
inline ComparisonOutcome compare_on_burst_benchmark(std::uint64_t data_seed, const BurstBenchmarkParams& params,
                                                    const ComparisonSettings& s) {
  const auto images = make_burst_benchmark(data_seed, params);
  std::vector<LabeledImage> train_set, test_set;
  Index total_rows = 0;
  for (const auto& im : images) {
    (im.held_out ? test_set : train_set).push_back({im.entry, &im.features});
    if (!im.held_out) total_rows += im.features.count();
  }
  RowMatrix samples(total_rows, params.d);
  Index r = 0;
  for (const auto& t : train_set) {
    samples.middleRows(r, t.features->count()) = t.features->features;
    r += t.features->count();
  }

  ModelRecipe recipe = s.recipe;
  recipe.burst.enabled = true;
  const auto base = fit_model(samples, recipe);
  const auto batches = make_triplets(train_set, s.radius_m, s.negatives, s.margin, s.recipe.seed);

  ComparisonOutcome out;
  for (bool burst : {false, true}) {
    TrainableModel tm{base, s.trainable};
    tm.model.burst.enabled = burst;
    refresh_fingerprint(tm.model);
    auto trained = s.train.steps > 0 ? train(tm, batches, s.train) : TrainResult{tm, {}};
    auto rep = evaluate_recall(trained.model.model, test_set, s.radius_m, s.ks);
    (burst ? out.buff : out.vanilla) = rep;
    (burst ? out.buff_trace : out.vanilla_trace) = std::move(trained.trace);
  }
  return out;
}

}  // namespace vladbuff
