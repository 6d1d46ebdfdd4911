#pragma once

#include "bench.hpp"
#include "errors.hpp"
#include "experiment.hpp"
#include "synthetic.hpp"
#include "training.hpp"
#include "types.hpp"

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace vladbuff {

struct TrainSection {
  double lr = 1e-5;
  int steps = 100;
  int negatives = 10;
  std::size_t batches_per_step = 0;
  std::vector<std::string> trainable{"a", "b", "p", "centroids", "assignment", "projection"};
  int check_grads_configs = 50;
  double check_grads_h = 1e-5;
  double check_grads_tol = 1e-4;
};

struct BenchSection {
  Index input_dim = 768;
  Index n = 1024;
  Index c = 64;
  std::vector<Index> dims{768, 384, 192, 64};
  int runs = 30;
  int warmup = 10;
  int threads = 1;
  bool csv = true;
  bool svg = false;
};

/// The resolved pipeline configuration: one JSON file, every key optional,
/// unknown keys rejected.
struct PipelineConfig {
  std::string manifest;
  std::string eval_manifest;
  std::string bundle = "bundle";
  std::string output_dir = "out";
  Index clusters = 64;
  Index prepool_dim = 0;
  std::string prepool_init = "pca";
  Index whitening_dim = 0;
  double whitening_epsilon = 1e-8;
  double a = 10.0;
  double b = -5.0;
  double p = 1.0;
  bool burst_enabled = true;
  double sharpness = 100.0;
  double radius_m = 25.0;
  double margin = 0.1;
  std::uint64_t seed = 0;
  std::size_t sample_count = 50000;
  int kmeans_max_iters = 100;
  double kmeans_tol = 1e-6;
  std::vector<int> recall_ks{1, 5};
  int threads = 1;
  TrainSection train;
  BenchSection bench;
  BurstBenchmarkParams synthetic;
};

namespace detail {

/// Reads `key` from `j` into `out` if present; throws ConfigError on a type mismatch.
template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out, std::set<std::string>& seen) {
  seen.insert(key);
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& seen, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!seen.count(it.key())) throw ConfigError("unknown config key '" + where + it.key() + "'");
}

}  // namespace detail

inline void validate(const PipelineConfig& c) {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (c.clusters < 2) fail("clusters must be >= 2");
  if (c.prepool_dim < 0) fail("prepool_dim must be >= 0");
  parse_projection_init(c.prepool_init);
  if (c.whitening_dim < 0) fail("whitening_dim must be >= 0");
  if (!(c.whitening_epsilon >= 0.0)) fail("whitening_epsilon must be >= 0");
  if (!(c.sharpness > 0.0)) fail("sharpness must be > 0");
  if (!(c.radius_m >= 0.0)) fail("radius_m must be >= 0");
  if (!(c.margin > 0.0)) fail("margin must be > 0");
  if (c.sample_count == 0) fail("sample_count must be > 0");
  if (c.kmeans_max_iters < 1 || !(c.kmeans_tol >= 0.0)) fail("invalid k-means settings");
  if (c.recall_ks.empty()) fail("recall_ks must not be empty");
  for (int k : c.recall_ks)
    if (k < 1) fail("recall_ks entries must be >= 1");
  if (c.threads < 1) fail("threads must be >= 1");
  if (!(c.train.lr >= 0.0) || c.train.steps < 0 || c.train.negatives < 1) fail("invalid train section");
  for (const auto& g : c.train.trainable) parse_param_group(g);
  if (c.train.check_grads_configs < 1 || !(c.train.check_grads_h > 0.0) || !(c.train.check_grads_tol > 0.0))
    fail("invalid gradient-check settings");
  if (c.bench.runs < 30) fail("bench.runs must be >= 30");
  if (c.bench.warmup < 0 || c.bench.threads < 1 || c.bench.n < 1 || c.bench.c < 2 || c.bench.dims.empty())
    fail("invalid bench section");
  for (auto d : c.bench.dims)
    if (d < 1 || d > c.bench.input_dim) fail("bench.dims entries must lie in [1, input_dim]");
  vladbuff::validate(c.synthetic);
}

inline PipelineConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  PipelineConfig c;
  std::set<std::string> seen;
  using detail::read_key;
  read_key(j, "manifest", c.manifest, seen);
  read_key(j, "eval_manifest", c.eval_manifest, seen);
  read_key(j, "bundle", c.bundle, seen);
  read_key(j, "output_dir", c.output_dir, seen);
  read_key(j, "clusters", c.clusters, seen);
  read_key(j, "prepool_dim", c.prepool_dim, seen);
  read_key(j, "prepool_init", c.prepool_init, seen);
  read_key(j, "whitening_dim", c.whitening_dim, seen);
  read_key(j, "whitening_epsilon", c.whitening_epsilon, seen);
  read_key(j, "a", c.a, seen);
  read_key(j, "b", c.b, seen);
  read_key(j, "p", c.p, seen);
  read_key(j, "burst_enabled", c.burst_enabled, seen);
  read_key(j, "sharpness", c.sharpness, seen);
  read_key(j, "radius_m", c.radius_m, seen);
  read_key(j, "margin", c.margin, seen);
  read_key(j, "seed", c.seed, seen);
  read_key(j, "sample_count", c.sample_count, seen);
  read_key(j, "kmeans_max_iters", c.kmeans_max_iters, seen);
  read_key(j, "kmeans_tol", c.kmeans_tol, seen);
  read_key(j, "recall_ks", c.recall_ks, seen);
  read_key(j, "threads", c.threads, seen);
  seen.insert({"train", "bench", "synthetic"});
  detail::reject_unknown(j, seen, "");

  if (j.contains("train")) {
    const auto& t = j.at("train");
    if (!t.is_object()) throw ConfigError("'train' must be an object");
    std::set<std::string> s;
    read_key(t, "lr", c.train.lr, s);
    read_key(t, "steps", c.train.steps, s);
    read_key(t, "negatives", c.train.negatives, s);
    read_key(t, "batches_per_step", c.train.batches_per_step, s);
    read_key(t, "trainable", c.train.trainable, s);
    read_key(t, "check_grads_configs", c.train.check_grads_configs, s);
    read_key(t, "check_grads_h", c.train.check_grads_h, s);
    read_key(t, "check_grads_tol", c.train.check_grads_tol, s);
    detail::reject_unknown(t, s, "train.");
  }
  if (j.contains("bench")) {
    const auto& b = j.at("bench");
    if (!b.is_object()) throw ConfigError("'bench' must be an object");
    std::set<std::string> s;
    read_key(b, "input_dim", c.bench.input_dim, s);
    read_key(b, "n", c.bench.n, s);
    read_key(b, "c", c.bench.c, s);
    read_key(b, "dims", c.bench.dims, s);
    read_key(b, "runs", c.bench.runs, s);
    read_key(b, "warmup", c.bench.warmup, s);
    read_key(b, "threads", c.bench.threads, s);
    read_key(b, "csv", c.bench.csv, s);
    read_key(b, "svg", c.bench.svg, s);
    detail::reject_unknown(b, s, "bench.");
  }
  if (j.contains("synthetic")) {
    const auto& y = j.at("synthetic");
    if (!y.is_object()) throw ConfigError("'synthetic' must be an object");
    std::set<std::string> s;
    auto& p = c.synthetic;
    read_key(y, "n_places", p.n_places, s);
    read_key(y, "n_distractors", p.n_distractors, s);
    read_key(y, "burst_size", p.burst_size, s);
    read_key(y, "d", p.d, s);
    read_key(y, "pool_size", p.pool_size, s);
    read_key(y, "distinctive_per_image", p.distinctive_per_image, s);
    read_key(y, "distinct_noise", p.distinct_noise, s);
    read_key(y, "burst_spread", p.burst_spread, s);
    read_key(y, "burst_jitter", p.burst_jitter, s);
    read_key(y, "holdout_fraction", p.holdout_fraction, s);
    read_key(y, "place_spacing_m", p.place_spacing_m, s);
    read_key(y, "query_offset_m", p.query_offset_m, s);
    detail::reject_unknown(y, s, "synthetic.");
  }
  validate(c);
  return c;
}

inline nlohmann::json to_json(const PipelineConfig& c) {
  const auto& p = c.synthetic;
  return {
      {"manifest", c.manifest},
      {"eval_manifest", c.eval_manifest},
      {"bundle", c.bundle},
      {"output_dir", c.output_dir},
      {"clusters", c.clusters},
      {"prepool_dim", c.prepool_dim},
      {"prepool_init", c.prepool_init},
      {"whitening_dim", c.whitening_dim},
      {"whitening_epsilon", c.whitening_epsilon},
      {"a", c.a},
      {"b", c.b},
      {"p", c.p},
      {"burst_enabled", c.burst_enabled},
      {"sharpness", c.sharpness},
      {"radius_m", c.radius_m},
      {"margin", c.margin},
      {"seed", c.seed},
      {"sample_count", c.sample_count},
      {"kmeans_max_iters", c.kmeans_max_iters},
      {"kmeans_tol", c.kmeans_tol},
      {"recall_ks", c.recall_ks},
      {"threads", c.threads},
      {"train",
       {{"lr", c.train.lr},
        {"steps", c.train.steps},
        {"negatives", c.train.negatives},
        {"batches_per_step", c.train.batches_per_step},
        {"trainable", c.train.trainable},
        {"check_grads_configs", c.train.check_grads_configs},
        {"check_grads_h", c.train.check_grads_h},
        {"check_grads_tol", c.train.check_grads_tol}}},
      {"bench",
       {{"input_dim", c.bench.input_dim},
        {"n", c.bench.n},
        {"c", c.bench.c},
        {"dims", c.bench.dims},
        {"runs", c.bench.runs},
        {"warmup", c.bench.warmup},
        {"threads", c.bench.threads},
        {"csv", c.bench.csv},
        {"svg", c.bench.svg}}},
      {"synthetic",
       {{"n_places", p.n_places},
        {"n_distractors", p.n_distractors},
        {"burst_size", p.burst_size},
        {"d", p.d},
        {"pool_size", p.pool_size},
        {"distinctive_per_image", p.distinctive_per_image},
        {"distinct_noise", p.distinct_noise},
        {"burst_spread", p.burst_spread},
        {"burst_jitter", p.burst_jitter},
        {"holdout_fraction", p.holdout_fraction},
        {"place_spacing_m", p.place_spacing_m},
        {"query_offset_m", p.query_offset_m}}},
  };
}

/// FNV-1a of the canonical (key-sorted) serialization of the resolved config.
inline std::string config_hash(const PipelineConfig& c) {
  Fnv1a h;
  h.str(to_json(c).dump());
  return h.hex();
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

/// Path-valued environment overrides (VLADBUFF_MANIFEST, VLADBUFF_EVAL_MANIFEST,
/// VLADBUFF_BUNDLE, VLADBUFF_OUTPUT_DIR), applied to the raw config object.
inline void apply_env_overrides(nlohmann::json& j, const std::function<const char*(const char*)>& getenv_fn) {
  static const std::pair<const char*, const char*> vars[] = {{"VLADBUFF_MANIFEST", "manifest"},
                                                             {"VLADBUFF_EVAL_MANIFEST", "eval_manifest"},
                                                             {"VLADBUFF_BUNDLE", "bundle"},
                                                             {"VLADBUFF_OUTPUT_DIR", "output_dir"}};
  for (const auto& [name, key] : vars)
    if (const char* v = getenv_fn(name); v && *v) j[key] = v;
}

/// Applies a `key=value` override; dotted keys address sections
/// (`train.lr=0.01`). The value is parsed as JSON, falling back to a string.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &j;
  std::size_t start = 0;
  for (std::size_t dot; (dot = key.find('.', start)) != std::string::npos; start = dot + 1) {
    node = &(*node)[key.substr(start, dot - start)];
    if (!node->is_null() && !node->is_object()) throw ConfigError("override path is not a section: " + key);
  }
  (*node)[key.substr(start)] = value;
}

inline ModelRecipe recipe_from(const PipelineConfig& c) {
  ModelRecipe r;
  r.clusters = c.clusters;
  r.prepool_dim = c.prepool_dim;
  r.prepool_init = parse_projection_init(c.prepool_init);
  r.sharpness = c.sharpness;
  r.burst = {c.a, c.b, c.p, c.burst_enabled};
  r.seed = c.seed;
  r.kmeans = {c.kmeans_max_iters, c.kmeans_tol};
  return r;
}

inline std::set<ParamGroup> trainable_from(const PipelineConfig& c) {
  std::set<ParamGroup> out;
  for (const auto& g : c.train.trainable) out.insert(parse_param_group(g));
  return out;
}

inline BenchConfig bench_from(const PipelineConfig& c) {
  BenchConfig b;
  b.input_dim = c.bench.input_dim;
  b.n = c.bench.n;
  b.c = c.bench.c;
  b.dims = c.bench.dims;
  b.runs = c.bench.runs;
  b.warmup = c.bench.warmup;
  b.threads = c.bench.threads;
  b.seed = c.seed;
  return b;
}

}  // namespace vladbuff
