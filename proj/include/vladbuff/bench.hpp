#pragma once

#include "aggregation.hpp"
#include "experiment.hpp"
#include "rng.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace vladbuff {

struct BenchConfig {
  Index input_dim = 768;
  Index n = 1024;
  Index c = 64;
  std::vector<Index> dims{768, 384, 192, 64};
  int runs = 30;
  int warmup = 10;
  int threads = 1;
  std::uint64_t seed = 0;
  /// Give D' == input_dim an identity projection instead of none.
  bool identity_at_full_dim = false;
};

struct BenchEntry {
  Index d_prime = 0;
  Index n = 0;
  Index c = 0;
  bool projected = false;
  int threads = 1;
  double mean_ms = 0.0;
  double stddev_ms = 0.0;
  int runs = 0;
  bool unstable = false;
};

struct BenchReport {
  std::vector<BenchEntry> entries;
  std::string environment;
};

inline constexpr double kUnstableRatio = 0.20;

inline std::string bench_environment() {
  std::ostringstream os;
  os << "cpu-threads=" << std::thread::hardware_concurrency() << " eigen=" << EIGEN_WORLD_VERSION << '.'
     << EIGEN_MAJOR_VERSION << '.' << EIGEN_MINOR_VERSION;
#if defined(__clang__)
  os << " compiler=clang-" << __clang_major__;
#elif defined(__GNUC__)
  os << " compiler=gcc-" << __GNUC__;
#endif
#if defined(__AVX2__)
  os << " simd=avx2";
#elif defined(__SSE2__)
  os << " simd=sse2";
#endif
  return os.str();
}

inline RowMatrix random_features(Index n, Index d, std::uint64_t seed) {
  CounterRng rng(seed);
  RowMatrix x(n, d);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  return l2_normalize_rows(x);
}

/// Model for one benchmark point: PCA pre-pool projection to `d_prime`
/// (none when d_prime == input_dim unless `identity` is set) and a
/// vocabulary fitted briefly on projected random features.
inline AggregationModel bench_model(const BenchConfig& cfg, Index d_prime, bool identity) {
  if (d_prime < 1 || d_prime > cfg.input_dim) throw ConfigError("bench D' must lie in [1, input_dim]");
  const RowMatrix sample = random_features(std::max<Index>(2 * cfg.input_dim, 4 * cfg.c), cfg.input_dim,
                                           cfg.seed + 1);
  std::optional<PcaModel> prepool;
  RowMatrix space = sample;
  if (identity) {
    prepool = PcaModel{Vector::Zero(cfg.input_dim), RowMatrix::Identity(cfg.input_dim, cfg.input_dim),
                       Vector::Ones(cfg.input_dim), ProjectionInit::pca};
  } else if (d_prime < cfg.input_dim) {
    prepool = fit_pca(sample, d_prime);
    space = project_rows(sample, *prepool);
  }
  auto vocab = kmeans_fit(space, cfg.c, cfg.seed, {5, 1e-6});
  return make_model(std::move(vocab), 100.0, BurstParams{}, std::move(prepool));
}

namespace detail {

inline BenchEntry blank_entry(const AggregationModel& model, const RowMatrix& features, int runs) {
  BenchEntry e;
  e.d_prime = model.agg_dim();
  e.n = features.rows();
  e.c = model.clusters();
  e.projected = model.prepool.has_value();
  e.runs = runs;
  return e;
}

inline void summarize(BenchEntry& e, const std::vector<double>& ms) {
  using clock = std::chrono::steady_clock;
  double mean = 0.0;
  for (double v : ms) mean += v;
  mean /= static_cast<double>(ms.size());
  double var = 0.0;
  for (double v : ms) var += (v - mean) * (v - mean);
  e.mean_ms = mean;
  e.stddev_ms = std::sqrt(var / static_cast<double>(ms.size() - 1));
  const double resolution_ms = 1e3 * static_cast<double>(clock::period::num) / clock::period::den;
  if (!(mean > 0.0) || resolution_ms > 0.01 * mean)
    throw BenchError("timer resolution is coarser than 1% of the mean; increase n");
  e.unstable = e.stddev_ms / e.mean_ms >= kUnstableRatio;
}

inline double timed_forward(const RowMatrix& features, const AggregationModel& model, ForwardCache& fc) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  forward(features, model, fc);
  return std::chrono::duration<double, std::milli>(clock::now() - t0).count();
}

}  // namespace detail

/// Times projection + aggregation of one image. `last` receives the final
/// timed descriptor.
inline BenchEntry time_aggregation(const AggregationModel& model, const RowMatrix& features, int runs, int warmup,
                                   Vector* last = nullptr) {
  if (runs < 30) throw ConfigError("benchmark needs at least 30 runs");
  BenchEntry e = detail::blank_entry(model, features, runs);
  ForwardCache fc;
  for (int i = 0; i < warmup; ++i) forward(features, model, fc);
  std::vector<double> ms;
  for (int i = 0; i < runs; ++i) ms.push_back(detail::timed_forward(features, model, fc));
  if (last) *last = fc.descriptor;
  detail::summarize(e, ms);
  return e;
}

/// Times several models on the same image, round-robin: run i times every
/// model once, in the given order. Slow drift in machine load then hits all
/// configurations alike instead of whichever happened to run during it.
inline std::vector<BenchEntry> time_interleaved(const std::vector<AggregationModel>& models,
                                                const RowMatrix& features, int runs, int warmup) {
  if (runs < 30) throw ConfigError("benchmark needs at least 30 runs");
  std::vector<ForwardCache> caches(models.size());
  for (std::size_t k = 0; k < models.size(); ++k)
    for (int i = 0; i < warmup; ++i) forward(features, models[k], caches[k]);
  std::vector<std::vector<double>> ms(models.size());
  for (int i = 0; i < runs; ++i)
    for (std::size_t k = 0; k < models.size(); ++k) ms[k].push_back(detail::timed_forward(features, models[k], caches[k]));
  std::vector<BenchEntry> out;
  for (std::size_t k = 0; k < models.size(); ++k) {
    out.push_back(detail::blank_entry(models[k], features, runs));
    detail::summarize(out.back(), ms[k]);
  }
  return out;
}

/// Same as time_aggregation but with `threads` workers aggregating
/// concurrently; reports wall time per image.
inline BenchEntry time_aggregation_parallel(const AggregationModel& model, const RowMatrix& features, int runs,
                                            int warmup, int threads) {
  using clock = std::chrono::steady_clock;
  auto burst = [&](int reps) {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        ForwardCache fc;
        for (int r = 0; r < reps; ++r) forward(features, model, fc);
      });
    for (auto& th : pool) th.join();
  };
  burst(std::max(1, warmup / threads));
  std::vector<double> ms;
  for (int i = 0; i < runs; ++i) {
    const auto t0 = clock::now();
    burst(1);
    ms.push_back(std::chrono::duration<double, std::milli>(clock::now() - t0).count() / threads);
  }
  BenchEntry e;
  e.d_prime = model.agg_dim();
  e.n = features.rows();
  e.c = model.clusters();
  e.projected = model.prepool.has_value();
  e.threads = threads;
  e.runs = runs;
  for (double v : ms) e.mean_ms += v;
  e.mean_ms /= runs;
  for (double v : ms) e.stddev_ms += (v - e.mean_ms) * (v - e.mean_ms);
  e.stddev_ms = std::sqrt(e.stddev_ms / (runs - 1));
  e.unstable = e.stddev_ms / e.mean_ms >= kUnstableRatio;
  return e;
}

inline BenchReport run_bench(const BenchConfig& cfg) {
  BenchReport rep;
  rep.environment = bench_environment();
  const RowMatrix features = random_features(cfg.n, cfg.input_dim, cfg.seed);
  std::vector<AggregationModel> models;
  for (Index dp : cfg.dims) models.push_back(bench_model(cfg, dp, cfg.identity_at_full_dim && dp == cfg.input_dim));
  const auto single = time_interleaved(models, features, cfg.runs, cfg.warmup);
  for (std::size_t k = 0; k < models.size(); ++k) {
    rep.entries.push_back(single[k]);
    if (cfg.threads > 1)
      rep.entries.push_back(time_aggregation_parallel(models[k], features, cfg.runs, cfg.warmup, cfg.threads));
  }
  return rep;
}

inline nlohmann::json to_json(const BenchReport& r) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : r.entries)
    entries.push_back({{"d_prime", e.d_prime},
                       {"n", e.n},
                       {"c", e.c},
                       {"projected", e.projected},
                       {"threads", e.threads},
                       {"mean_ms", e.mean_ms},
                       {"stddev_ms", e.stddev_ms},
                       {"runs", e.runs},
                       {"unstable", e.unstable}});
  return {{"entries", entries}, {"environment", r.environment}};
}

inline void write_bench_csv(const BenchReport& r, std::ostream& os) {
  os << "d_prime,n,c,projected,threads,mean_ms,stddev_ms,runs,unstable\n";
  for (const auto& e : r.entries)
    os << e.d_prime << ',' << e.n << ',' << e.c << ',' << e.projected << ',' << e.threads << ',' << e.mean_ms
       << ',' << e.stddev_ms << ',' << e.runs << ',' << e.unstable << '\n';
}

/// Time-vs-dimension plot of single-threaded entries.
inline std::string bench_svg(const BenchReport& r) {
  std::vector<const BenchEntry*> pts;
  for (const auto& e : r.entries)
    if (e.threads == 1) pts.push_back(&e);
  const double w = 640, h = 400, pad = 60;
  double max_d = 1, max_t = 1e-9;
  for (auto* e : pts) {
    max_d = std::max(max_d, static_cast<double>(e->d_prime));
    max_t = std::max(max_t, e->mean_ms + e->stddev_ms);
  }
  auto px = [&](double d) { return pad + (w - 2 * pad) * d / max_d; };
  auto py = [&](double t) { return h - pad - (h - 2 * pad) * t / max_t; };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<line x1=\"" << pad << "\" y1=\"" << h - pad << "\" x2=\"" << w - pad << "\" y2=\"" << h - pad
     << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << pad << "\" y1=\"" << pad << "\" x2=\"" << pad << "\" y2=\"" << h - pad
     << "\" stroke=\"black\"/>\n"
     << "<text x=\"" << w / 2 << "\" y=\"" << h - 15 << "\" text-anchor=\"middle\">D' (pre-pool dim)</text>\n"
     << "<text x=\"15\" y=\"" << h / 2 << "\" transform=\"rotate(-90 15 " << h / 2
     << ")\" text-anchor=\"middle\">aggregation time (ms)</text>\n<polyline fill=\"none\" stroke=\"steelblue\" points=\"";
  for (auto* e : pts) os << px(static_cast<double>(e->d_prime)) << ',' << py(e->mean_ms) << ' ';
  os << "\"/>\n";
  for (auto* e : pts) {
    os << "<circle cx=\"" << px(static_cast<double>(e->d_prime)) << "\" cy=\"" << py(e->mean_ms)
       << "\" r=\"4\" fill=\"steelblue\"/>\n"
       << "<text x=\"" << px(static_cast<double>(e->d_prime)) + 6 << "\" y=\"" << py(e->mean_ms) - 6
       << "\" font-size=\"11\">" << e->d_prime << ": " << std::round(e->mean_ms * 100) / 100 << " ms</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace vladbuff
