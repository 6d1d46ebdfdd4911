// Acceptance checks: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include "support.hpp"

#include <vladbuff/vladbuff.hpp>

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <sstream>

using namespace vladbuff;
using testing_support::gaussian;
using testing_support::random_model;
using testing_support::read_bytes;
using testing_support::TempDir;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

int failures = 0;

void report(int id, const char* name, const std::function<Outcome()>& check) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::printf("%s criterion %d (%s): %s [%.2fs]\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

Outcome vanilla_equivalence() {
  CounterRng rng(1001);
  double worst = 0.0;
  for (int t = 0; t < 200; ++t) {
    const Index n = 1 + static_cast<Index>(rng.below(64));
    const Index d = 2 + static_cast<Index>(rng.below(31));
    const Index c = 2 + static_cast<Index>(rng.below(7));
    auto zero = random_model(rng, d, c, true);
    zero.burst.p = 0.0;
    refresh_fingerprint(zero);
    auto off = zero;
    off.burst.enabled = false;
    refresh_fingerprint(off);
    const RowMatrix x = gaussian(rng, n, d);
    const Vector a = aggregate(x, zero, "x").vector;
    const Vector b = aggregate(x, off, "x").vector;
    worst = std::max(worst, (a - b).cwiseAbs().maxCoeff());
  }
  return {worst <= 1e-9, fmt("max |p=0 - disabled| = %.3g over 200 instances (tol 1e-9)", worst)};
}

Outcome gradient_oracle() {
  GradCheckOptions opt;
  opt.configs = 50;
  opt.h = 1e-5;
  opt.tolerance = 1e-4;
  const auto rep = run_gradient_check(opt);
  std::size_t groups = 0;
  for (auto g : all_param_groups()) groups += rep.group_coverage.count(to_string(g)) ? 1 : 0;
  const bool ok = rep.passed && rep.max_rel_error <= 1e-4 && groups == all_param_groups().size();
  std::ostringstream os;
  os << rep.cases.size() << " configs, " << groups << "/" << all_param_groups().size()
     << " groups covered, max relative error " << rep.max_rel_error << " (tol 1e-4)";
  return {ok, os.str()};
}

// Direct double loop over all pairs.
Outcome soft_count_oracle() {
  CounterRng rng(1003);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const Index n = 1 + static_cast<Index>(rng.below(40));
    const Index d = 2 + static_cast<Index>(rng.below(15));
    const RowMatrix u = l2_normalize_rows(gaussian(rng, n, d));
    const double a = 20.0 * rng.uniform(), b = -10.0 * rng.uniform();
    const Vector w = soft_count(u, {a, b, 1.0, true});
    const auto ref = testing_support::reference_soft_count(testing_support::to_rows(u), a, b);
    for (Index i = 0; i < n; ++i) worst = std::max(worst, std::abs(w[i] - ref[static_cast<std::size_t>(i)]));
  }
  RowMatrix hand(3, 2);
  hand << 1, 0, 1, 0, 0, 1;
  const Vector w = soft_count(hand, {4.0, -2.0, 1.0, true});
  const bool hand_ok = std::abs(w[0] - 1.8808) < 5e-5 && std::abs(w[1] - 1.8808) < 5e-5;
  std::ostringstream os;
  os << "max |soft_count - direct| = " << worst << " over 100 instances (tol 1e-12); hand case w1 = " << w[0]
     << " (expect 1.8808)";
  return {worst <= 1e-12 && hand_ok, os.str()};
}

Outcome burst_scaling() {
  const Index d = 6;
  Vocabulary v;
  v.centroids = RowMatrix::Zero(3, d);
  v.centroids(0, 0) = v.centroids(1, 1) = v.centroids(2, 2) = 0.5;
  std::ostringstream os;
  bool ok = true;
  for (double p : {1.0, 0.0}) {
    const auto m = make_model(v, 1e3, BurstParams{50.0, -25.0, p, true});
    ForwardCache fc;
    double single = 0.0;
    os << "p=" << p << ":";
    for (int k : {1, 2, 4, 8}) {
      RowMatrix x = RowMatrix::Zero(k + 2, d);
      for (int i = 0; i < k; ++i) x(i, 0) = 1.0;
      x(k, 1) = 1.0;
      x(k + 1, 2) = 1.0;
      forward(x, m, fc);
      const double mass = fc.blocks.row(0).norm();
      if (k == 1) {
        single = mass;
        continue;
      }
      const double ratio = mass / single;
      const double expect = p == 1.0 ? 1.0 : static_cast<double>(k);
      const double tol = p == 1.0 ? 0.01 : 0.05;
      ok = ok && std::abs(ratio - expect) <= tol * expect;
      os << " k=" << k << " ratio " << ratio;
    }
    os << (p == 1.0 ? " (tol 1%); " : " (tol 5%)");
  }
  return {ok, os.str()};
}

Outcome pca_isometry() {
  CounterRng rng(1005);
  const Index d = 16;
  RowMatrix x = gaussian(rng, 500, d);
  for (Index j = 0; j < d; ++j) x.col(j) *= 1.0 / (1.0 + 0.3 * j);
  const auto p = fit_pca(x, d);
  // The affine map itself; project_rows would also renormalize each row.
  const RowMatrix y = (x.rowwise() - p.mean.transpose()) * p.rotation;
  double worst = 0.0;
  for (Index i = 0; i < x.rows(); ++i)
    for (Index j = i + 1; j < x.rows(); ++j)
      worst = std::max(worst, std::abs((x.row(i) - x.row(j)).norm() - (y.row(i) - y.row(j)).norm()));
  int violations = 0;
  for (Index k = 1; k <= d; ++k) {
    const double pca = captured_variance(x, fit_pca(x, k).rotation);
    for (std::uint64_t seed = 0; seed < 20; ++seed)
      if (captured_variance(x, make_random_projection(d, k, seed).rotation) > pca + 1e-9) ++violations;
  }
  std::ostringstream os;
  os << "max pairwise distance change " << worst << " on 500 points (tol 1e-6); " << violations
     << " ranks/seeds where random beats PCA (of " << d * 20 << ")";
  return {worst <= 1e-6 && violations == 0, os.str()};
}

Outcome synthetic_direction() {
  int strictly = 0;
  bool never_worse = true;
  std::ostringstream os;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ComparisonSettings s;
    s.recipe.clusters = 8;
    s.recipe.sharpness = 10.0;
    s.recipe.seed = seed;
    s.train.lr = 1e-2;
    s.train.steps = 200;
    s.train.seed = seed;
    const auto out = compare_on_burst_benchmark(seed, BurstBenchmarkParams{}, s);
    const double v = out.vanilla.recalls.at(1), b = out.buff.recalls.at(1);
    never_worse = never_worse && b >= v;
    strictly += b > v ? 1 : 0;
    os << "seed " << seed << " R@1 " << v << " -> " << b << "; ";
  }
  os << strictly << "/5 strictly better";
  return {never_worse && strictly >= 4, os.str()};
}

Outcome speed_ratio() {
  BenchConfig cfg;  // N=1024, C=64, D=768, D' in {768,384,192,64}, 30 runs after 10 warmup
  const auto rep = run_bench(cfg);
  std::map<Index, double> ms;
  for (const auto& e : rep.entries) ms[e.d_prime] = e.mean_ms;
  const double speedup = ms.at(768) / ms.at(192);
  const bool monotone = ms.at(768) >= ms.at(384) && ms.at(384) >= ms.at(192) && ms.at(192) >= ms.at(64);
  std::ostringstream os;
  os << "mean ms 768:" << ms.at(768) << " 384:" << ms.at(384) << " 192:" << ms.at(192) << " 64:" << ms.at(64)
     << "; speedup 768/192 = " << speedup << " (need >= 2.0), monotone " << (monotone ? "yes" : "no");
  return {speedup >= 2.0 && monotone, os.str()};
}

Outcome retrieval_sanity() {
  CounterRng rng(1008);
  DatasetManifest m;
  std::vector<GlobalDescriptor> qs, rs;
  for (int i = 0; i < 20; ++i) {
    const Vector v = gaussian(rng, 32, 1).col(0).normalized();
    for (Split s : {Split::query, Split::reference}) {
      ManifestEntry e;
      e.image_id = (s == Split::query ? "q" : "r") + std::to_string(i);
      e.x_m = 100.0 * i;
      e.split = s;
      m.entries.push_back(e);
      (s == Split::query ? qs : rs).push_back({e.image_id, v, ""});
    }
  }
  const double r1 = recall_at_k(retrieve(qs, rs), ground_truth_within_radius(m), {1}).recalls.at(1);

  DatasetManifest b;
  b.radius_m = 25.0;
  auto add = [&](const char* id, double y, Split s) {
    ManifestEntry e;
    e.image_id = id;
    e.y_m = y;
    e.split = s;
    b.entries.push_back(e);
  };
  add("q", 0, Split::query);
  add("in24", 24, Split::reference);
  add("out26", 26, Split::reference);
  const auto pos = ground_truth_within_radius(b).positives.at("q");
  const bool boundary = pos == std::set<std::string>{"in24"};
  std::ostringstream os;
  os << "twin database R@1 = " << r1 << " (need 1.0); 24 m in / 26 m out " << (boundary ? "correct" : "WRONG");
  return {r1 == 1.0 && boundary, os.str()};
}

Outcome format_round_trips() {
  TempDir dir("accept");
  CounterRng rng(1009);
  bool ok = true;
  std::ostringstream os;

  const LocalFeatureSet f{"img", gaussian(rng, 37, 11), false};
  save_features(f, dir / "a.vbff");
  const auto back = load_features(dir / "a.vbff");
  save_features(back, dir / "b.vbff");
  const bool vbff = read_bytes(dir / "a.vbff") == read_bytes(dir / "b.vbff") &&
                    back.features == f.features.cast<float>().cast<double>();
  os << "VBFF " << (vbff ? "bit-exact" : "MISMATCH");
  ok = ok && vbff;

  auto model = random_model(rng, 12, 4, true, 6);
  model.whitening = fit_whitening(gaussian(rng, 40, 24), 8);
  refresh_fingerprint(model);
  save_bundle(model, dir / "bundle1");
  const auto loaded = load_bundle(dir / "bundle1");
  save_bundle(loaded, dir / "bundle2");
  bool bundle = loaded.config_hash == model.config_hash;
  for (const auto& e : fs::directory_iterator(dir / "bundle1"))
    bundle = bundle && read_bytes(e.path()) == read_bytes(dir / "bundle2" / e.path().filename());
  const RowMatrix x = gaussian(rng, 9, 12);
  bundle = bundle && aggregate(x, model, "x").vector == aggregate(x, loaded, "x").vector;
  os << "; bundle " << (bundle ? "bit-exact" : "MISMATCH");
  ok = ok && bundle;

  DatasetManifest m;
  ManifestEntry q, r;
  q.image_id = "q";
  q.split = Split::query;
  q.feature_path = dir / "a.vbff";
  r.image_id = "r";
  r.split = Split::reference;
  r.feature_path = dir / "does_not_exist.vbff";
  m.entries = {q, r};
  save_manifest(m, dir / "broken.jsonl");
  const std::string cmd = std::string(VLADBUFF_CLI_PATH) + " fit --manifest " + (dir / "broken.jsonl").string() +
                          " --bundle " + (dir / "bundle3").string() + " --set clusters=2 >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  const int rc = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  os << "; missing-file manifest exit code " << rc << " (need 2)";
  ok = ok && rc == 2;
  return {ok, os.str()};
}

}  // namespace

int main() {
  report(1, "vanilla equivalence", vanilla_equivalence);
  report(2, "gradient oracle", gradient_oracle);
  report(3, "soft-count oracle", soft_count_oracle);
  report(4, "burst-suppression scaling", burst_scaling);
  report(5, "PCA isometry", pca_isometry);
  report(6, "synthetic benchmark direction", synthetic_direction);
  report(7, "speed ratio", speed_ratio);
  report(8, "retrieval sanity", retrieval_sanity);
  report(9, "format round-trips", format_round_trips);
  std::printf("%d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
