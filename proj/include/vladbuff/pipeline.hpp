#pragma once

// Subcommand bodies for the command-line tool. Each takes a resolved config
// and a log stream so it can be driven from tests without a process boundary.

#include "bench.hpp"
#include "bundle.hpp"
#include "config.hpp"
#include "experiment.hpp"
#include "featureio.hpp"
#include "gradcheck.hpp"
#include "manifest.hpp"
#include "retrieval.hpp"
#include "synthetic.hpp"
#include "training.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

namespace vladbuff {

namespace fs = std::filesystem;

inline void log_config(const PipelineConfig& cfg, std::ostream& log) {
  log << "config " << to_json(cfg).dump() << "\nconfig_hash " << config_hash(cfg) << '\n';
}

namespace detail {

inline const std::string& require_path(const std::string& value, const char* key) {
  if (value.empty()) throw ConfigError(std::string("config key '") + key + "' is required for this command");
  return value;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("write failed: " + path.string());
}

struct LoadedDataset {
  DatasetManifest manifest;
  std::vector<LocalFeatureSet> sets;

  std::vector<LabeledImage> labeled() const {
    std::vector<LabeledImage> out;
    for (std::size_t i = 0; i < sets.size(); ++i) out.push_back({manifest.entries[i], &sets[i]});
    return out;
  }
};

inline LoadedDataset load_dataset(const std::string& path, double radius_m, bool require_both_splits) {
  LoadedDataset d;
  d.manifest = load_manifest(path, radius_m, require_both_splits);
  for (const auto& e : d.manifest.entries) {
    auto set = load_features(e.feature_path);
    set.image_id = e.image_id;
    d.sets.push_back(std::move(set));
  }
  return d;
}

inline std::vector<GlobalDescriptor> aggregate_all(const AggregationModel& model, const LoadedDataset& d, int threads) {
  std::vector<GlobalDescriptor> out(d.sets.size());
  std::atomic<std::size_t> next{0};
  std::mutex err_mutex;
  std::exception_ptr err;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < d.sets.size();) {
      try {
        out[i] = aggregate(d.sets[i], model);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!err) err = std::current_exception();
      }
    }
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(d.sets.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
  return out;
}

inline RecallReport score(const AggregationModel& model, const LoadedDataset& d, const PipelineConfig& cfg) {
  const auto descs = aggregate_all(model, d, cfg.threads);
  std::vector<GlobalDescriptor> queries, refs;
  for (std::size_t i = 0; i < descs.size(); ++i)
    (d.manifest.entries[i].split == Split::query ? queries : refs).push_back(descs[i]);
  auto rep = recall_at_k(retrieve(queries, refs), ground_truth_within_radius(d.manifest), cfg.recall_ks);
  rep.config_hash = model.config_hash;
  rep.radius_m = cfg.radius_m;
  return rep;
}

}  // namespace detail

/// Samples features, fits projection and vocabulary, optionally fits
/// whitening over the manifest's descriptors, and writes the bundle.
inline AggregationModel cmd_fit(const PipelineConfig& cfg, std::ostream& log) {
  const auto manifest = load_manifest(detail::require_path(cfg.manifest, "manifest"), cfg.radius_m, false);
  std::size_t total = 0;
  for (const auto& e : manifest.entries) total += static_cast<std::size_t>(vbff::read(e.feature_path).matrix.rows());
  const std::size_t count = std::min(cfg.sample_count, total);
  log << "sampling " << count << " of " << total << " features\n";
  const RowMatrix samples = sample_features(manifest, count, cfg.seed);
  auto model = fit_model(samples, recipe_from(cfg));
  log << "vocabulary inertia " << model.vocabulary.inertia << '\n';
  if (cfg.whitening_dim > 0) {
    detail::LoadedDataset d{manifest, {}};
    for (const auto& e : manifest.entries) d.sets.push_back(load_features(e.feature_path));
    const auto descs = detail::aggregate_all(model, d, cfg.threads);
    RowMatrix stacked(static_cast<Index>(descs.size()), model.descriptor_dim());
    for (std::size_t i = 0; i < descs.size(); ++i) stacked.row(static_cast<Index>(i)) = descs[i].vector.transpose();
    model.whitening = fit_whitening(stacked, cfg.whitening_dim, cfg.whitening_epsilon);
    refresh_fingerprint(model);
  }
  save_bundle(model, cfg.bundle);
  log << "wrote bundle " << cfg.bundle << " (" << model.config_hash << ")\n";
  return model;
}

struct AggregateSummary {
  std::size_t written = 0;
  std::size_t skipped = 0;
};

/// Writes one descriptor per manifest entry under `output_dir/descriptors`.
/// Outputs that are newer than both their input and the bundle, and that were
/// produced by the same model, are skipped unless `force` is set.
inline AggregateSummary cmd_aggregate(const PipelineConfig& cfg, bool force, std::ostream& log) {
  const auto manifest = load_manifest(detail::require_path(cfg.manifest, "manifest"), cfg.radius_m, false);
  const auto model = load_bundle(cfg.bundle);
  const fs::path out_dir = fs::path(cfg.output_dir) / "descriptors";
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  const fs::path index_path = out_dir / "index.json";
  nlohmann::json previous = nlohmann::json::object();
  if (std::ifstream is(index_path); is) {
    previous = nlohmann::json::parse(is, nullptr, false);
    if (!previous.is_object()) previous = nlohmann::json::object();
  }
  const auto bundle_time = fs::last_write_time(fs::path(cfg.bundle) / bundle::kManifestName);

  std::vector<const ManifestEntry*> todo;
  AggregateSummary summary;
  nlohmann::json index = nlohmann::json::object();
  for (const auto& e : manifest.entries) {
    const fs::path out = out_dir / (e.image_id + ".vbff");
    index[e.image_id] = {{"file", out.filename().string()}, {"config_hash", model.config_hash}};
    const bool fresh = !force && fs::exists(out) && previous.contains(e.image_id) &&
                       previous[e.image_id].value("config_hash", "") == model.config_hash &&
                       fs::last_write_time(out) >= fs::last_write_time(e.feature_path) &&
                       fs::last_write_time(out) >= bundle_time;
    if (fresh)
      ++summary.skipped;
    else
      todo.push_back(&e);
  }

  std::atomic<std::size_t> next{0};
  std::mutex err_mutex;
  std::exception_ptr err;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < todo.size();) {
      try {
        auto set = load_features(todo[i]->feature_path);
        set.image_id = todo[i]->image_id;
        save_descriptor(aggregate(set, model), out_dir / (todo[i]->image_id + ".vbff"));
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!err) err = std::current_exception();
      }
    }
  };
  const int n = std::max(1, std::min<int>(cfg.threads, static_cast<int>(todo.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
  summary.written = todo.size();

  detail::write_text(index_path, index.dump(2) + "\n");
  log << "aggregated " << summary.written << ", skipped " << summary.skipped << " up-to-date\n";
  return summary;
}

/// Runs the randomized finite-difference gradient suite.
inline GradCheckReport cmd_check_grads(const PipelineConfig& cfg, std::ostream& log) {
  GradCheckOptions opt;
  opt.configs = cfg.train.check_grads_configs;
  opt.h = cfg.train.check_grads_h;
  opt.tolerance = cfg.train.check_grads_tol;
  opt.seed = cfg.seed;
  auto rep = run_gradient_check(opt);
  log << "gradient check: " << rep.cases.size() << " configs, max relative error " << rep.max_rel_error << " -> "
      << (rep.passed ? "pass" : "FAIL") << '\n';
  return rep;
}

/// Trains the bundle on triplets mined from the manifest and writes
/// `output_dir/bundle` plus `output_dir/loss.csv`.
inline TrainResult cmd_train(const PipelineConfig& cfg, std::ostream& log) {
  const auto data = detail::load_dataset(detail::require_path(cfg.manifest, "manifest"), cfg.radius_m, true);
  TrainableModel tm{load_bundle(cfg.bundle), trainable_from(cfg)};
  const auto batches = make_triplets(data.labeled(), cfg.radius_m, cfg.train.negatives, cfg.margin, cfg.seed);
  if (batches.empty()) throw DataError("no query in the manifest has both a positive and a negative");
  log << "training on " << batches.size() << " triplet batches, " << parameter_count(tm) << " parameters\n";
  TrainOptions opt;
  opt.lr = cfg.train.lr;
  opt.steps = cfg.train.steps;
  opt.seed = cfg.seed;
  opt.batches_per_step = cfg.train.batches_per_step;
  auto result = train(tm, batches, opt);
  const fs::path out = fs::path(cfg.output_dir);
  save_bundle(result.model.model, out / "bundle");
  std::ostringstream csv;
  write_trace_csv(result.trace, csv);
  detail::write_text(out / "loss.csv", csv.str());
  if (!result.trace.empty()) {
    const auto& first = result.trace.front();
    const auto& last = result.trace.back();
    log << "loss " << first.loss << " -> " << last.loss << "; a=" << last.a << " b=" << last.b << " p=" << last.p
        << '\n';
  }
  return result;
}

/// Scores the bundle on the evaluation manifest (falls back to `manifest`).
/// In comparison mode the baseline is `baseline_bundle` if given, otherwise
/// the same bundle with burst discounting disabled.
inline nlohmann::json cmd_eval(const PipelineConfig& cfg, bool compare, const std::string& baseline_bundle,
                               std::ostream& log) {
  const std::string& path = cfg.eval_manifest.empty() ? cfg.manifest : cfg.eval_manifest;
  const auto data = detail::load_dataset(detail::require_path(path, "eval_manifest"), cfg.radius_m, true);
  const auto model = load_bundle(cfg.bundle);
  const auto rep = detail::score(model, data, cfg);
  nlohmann::json out;
  if (!compare) {
    out = to_json(rep);
  } else {
    AggregationModel base;
    if (!baseline_bundle.empty()) {
      base = load_bundle(baseline_bundle);
    } else {
      base = model;
      base.burst.enabled = false;
      refresh_fingerprint(base);
    }
    const auto vanilla = detail::score(base, data, cfg);
    nlohmann::json delta = nlohmann::json::object();
    for (const auto& [k, v] : rep.recalls) delta[std::to_string(k)] = v - vanilla.recalls.at(k);
    out = {{"vanilla", to_json(vanilla)}, {"buff", to_json(rep)}, {"delta", delta}};
  }
  detail::write_text(fs::path(cfg.output_dir) / (compare ? "compare.json" : "recall.json"), out.dump(2) + "\n");
  for (const auto& [k, v] : rep.recalls) log << "R@" << k << " = " << v << '\n';
  log << "scored " << rep.scored_queries << " queries, excluded " << rep.excluded_queries << '\n';
  return out;
}

inline BenchReport bench_from_json(const nlohmann::json& j) {
  BenchReport r;
  try {
    r.environment = j.at("environment").get<std::string>();
    for (const auto& e : j.at("entries")) {
      BenchEntry b;
      b.d_prime = e.at("d_prime").get<Index>();
      b.n = e.at("n").get<Index>();
      b.c = e.at("c").get<Index>();
      b.projected = e.at("projected").get<bool>();
      b.threads = e.at("threads").get<int>();
      b.mean_ms = e.at("mean_ms").get<double>();
      b.stddev_ms = e.at("stddev_ms").get<double>();
      b.runs = e.at("runs").get<int>();
      b.unstable = e.at("unstable").get<bool>();
      r.entries.push_back(b);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed bench report: ") + e.what());
  }
  return r;
}

/// Times aggregation across the configured pre-pool dimensions and writes
/// bench.json (plus bench.csv and bench.svg when enabled).
inline BenchReport cmd_bench(const PipelineConfig& cfg, std::ostream& log) {
  const auto rep = run_bench(bench_from(cfg));
  const fs::path out = fs::path(cfg.output_dir);
  detail::write_text(out / "bench.json", to_json(rep).dump(2) + "\n");
  if (cfg.bench.csv) {
    std::ostringstream csv;
    write_bench_csv(rep, csv);
    detail::write_text(out / "bench.csv", csv.str());
  }
  if (cfg.bench.svg) detail::write_text(out / "bench.svg", bench_svg(rep));
  for (const auto& e : rep.entries)
    log << "D'=" << e.d_prime << " threads=" << e.threads << " mean " << e.mean_ms << " ms (sd " << e.stddev_ms
        << ")" << (e.unstable ? " UNSTABLE" : "") << '\n';
  return rep;
}

/// Renders an existing bench.json as an SVG plot.
inline void cmd_plot(const fs::path& report, const fs::path& svg) {
  std::ifstream is(report);
  if (!is) throw ConfigError("cannot open bench report " + report.string());
  const auto j = nlohmann::json::parse(is, nullptr, false);
  if (j.is_discarded()) throw FormatError("malformed bench report " + report.string());
  detail::write_text(svg, bench_svg(bench_from_json(j)));
}

/// Writes the synthetic burst benchmark under `output_dir`.
inline BurstBenchmark cmd_gen(const PipelineConfig& cfg, std::ostream& log) {
  auto out = generate_burst_benchmark(cfg.seed, cfg.synthetic, cfg.output_dir, cfg.radius_m);
  log << "wrote " << out.train.entries.size() << " training and " << out.test.entries.size()
      << " held-out images to " << cfg.output_dir << '\n';
  return out;
}

}  // namespace vladbuff
