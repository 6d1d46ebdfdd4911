#pragma once

#include "errors.hpp"
#include "featureio.hpp"
#include "manifest.hpp"
#include "types.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace vladbuff {

/// Positive reference ids per query id. Queries with no positive are listed
/// in `excluded` and carry an empty set.
struct GroundTruth {
  std::map<std::string, std::set<std::string>> positives;
  std::vector<std::string> excluded;
};

inline GroundTruth ground_truth_within_radius(const DatasetManifest& manifest) {
  GroundTruth gt;
  const auto queries = manifest.indices(Split::query);
  const auto refs = manifest.indices(Split::reference);
  for (auto qi : queries) {
    const auto& q = manifest.entries[qi];
    auto& pos = gt.positives[q.image_id];
    for (auto ri : refs) {
      const auto& r = manifest.entries[ri];
      if (std::hypot(q.x_m - r.x_m, q.y_m - r.y_m) <= manifest.radius_m) pos.insert(r.image_id);
    }
    if (pos.empty()) gt.excluded.push_back(q.image_id);
  }
  return gt;
}

struct RankedReference {
  std::string id;
  double distance;
};

using Ranking = std::vector<RankedReference>;

/// Exhaustive Euclidean ranking; ties broken by reference id.
inline Ranking rank_references(const Vector& query, const std::vector<GlobalDescriptor>& references) {
  Ranking out;
  out.reserve(references.size());
  for (const auto& r : references) {
    if (r.vector.size() != query.size())
      throw ShapeError("reference '" + r.image_id + "' has dim " + std::to_string(r.vector.size()) +
                       ", query has " + std::to_string(query.size()));
    out.push_back({r.image_id, (query - r.vector).norm()});
  }
  std::sort(out.begin(), out.end(), [](const RankedReference& l, const RankedReference& r) {
    if (l.distance != r.distance) return l.distance < r.distance;
    return l.id < r.id;
  });
  return out;
}

/// Ranking per query id.
using RetrievalResult = std::map<std::string, Ranking>;

struct RecallReport {
  std::string config_hash;
  double radius_m = 25.0;
  std::map<int, double> recalls;
  std::size_t scored_queries = 0;
  std::size_t excluded_queries = 0;
};

/// Fraction of scored queries with at least one positive among the top K.
/// Queries whose ground truth is empty are skipped and counted as excluded.
inline RecallReport recall_at_k(const RetrievalResult& results, const GroundTruth& gt, const std::vector<int>& ks) {
  if (ks.empty()) throw ConfigError("no K values given");
  for (int k : ks)
    if (k < 1) throw ConfigError("K must be >= 1, got " + std::to_string(k));
  RecallReport rep;
  std::map<int, std::size_t> hits;
  for (const auto& [qid, ranking] : results) {
    const auto it = gt.positives.find(qid);
    if (it == gt.positives.end()) throw ConfigError("query '" + qid + "' has no ground-truth entry");
    if (it->second.empty()) {
      ++rep.excluded_queries;
      continue;
    }
    ++rep.scored_queries;
    std::size_t first_hit = ranking.size();
    for (std::size_t r = 0; r < ranking.size(); ++r)
      if (it->second.count(ranking[r].id)) {
        first_hit = r;
        break;
      }
    for (int k : ks)
      if (first_hit < static_cast<std::size_t>(k)) ++hits[k];
  }
  for (int k : ks)
    rep.recalls[k] = rep.scored_queries == 0 ? 0.0
                                             : static_cast<double>(hits[k]) / static_cast<double>(rep.scored_queries);
  return rep;
}

/// Ranks every query descriptor against every reference descriptor.
inline RetrievalResult retrieve(const std::vector<GlobalDescriptor>& queries,
                                const std::vector<GlobalDescriptor>& references) {
  RetrievalResult out;
  for (const auto& q : queries) out[q.image_id] = rank_references(q.vector, references);
  return out;
}

inline nlohmann::json to_json(const RecallReport& r) {
  nlohmann::json recalls = nlohmann::json::object();
  for (const auto& [k, v] : r.recalls) recalls[std::to_string(k)] = v;
  return {{"config_hash", r.config_hash},
          {"radius_m", r.radius_m},
          {"recalls", recalls},
          {"scored_queries", r.scored_queries},
          {"excluded_queries", r.excluded_queries}};
}

}  // namespace vladbuff
