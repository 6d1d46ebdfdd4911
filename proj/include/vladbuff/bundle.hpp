#pragma once

#include "aggregation.hpp"
#include "errors.hpp"
#include "featureio.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace vladbuff {

/// Model bundle: a directory holding f64 VBFF matrices plus `model.json`
/// with every scalar, flag, eigenvalue list and the model fingerprint.
namespace bundle {

inline constexpr const char* kManifestName = "model.json";
inline constexpr int kFormatVersion = 1;

inline std::vector<double> to_list(const Vector& v) { return {v.data(), v.data() + v.size()}; }

inline Vector from_list(const nlohmann::json& j) {
  const auto list = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(list.data(), static_cast<Index>(list.size()));
}

inline void write_matrix(const std::filesystem::path& dir, const char* name, const RowMatrix& m) {
  vbff::write(dir / name, m, vbff::DType::f64);
}

inline RowMatrix read_matrix(const std::filesystem::path& dir, const char* name) {
  auto loaded = vbff::read(dir / name);
  if (loaded.dtype != vbff::DType::f64) throw FormatError(std::string("bundle matrix must be f64: ") + name);
  return std::move(loaded.matrix);
}

}  // namespace bundle

inline void save_bundle(const AggregationModel& model, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create bundle directory " + dir.string() + ": " + ec.message());
  using bundle::write_matrix;
  write_matrix(dir, "centroids.vbff", model.vocabulary.centroids);
  write_matrix(dir, "assign_weights.vbff", model.assignment.weights);
  write_matrix(dir, "assign_biases.vbff", model.assignment.biases.transpose());

  nlohmann::json j;
  j["format"] = "vladbuff-bundle";
  j["version"] = bundle::kFormatVersion;
  j["config_hash"] = model_fingerprint(model);
  j["clusters"] = model.clusters();
  j["agg_dim"] = model.agg_dim();
  j["input_dim"] = model.input_dim();
  j["a"] = model.burst.a;
  j["b"] = model.burst.b;
  j["p"] = model.burst.p;
  j["burst_enabled"] = model.burst.enabled;
  j["sharpness"] = model.assignment.sharpness_init;
  j["vocabulary"] = vocabulary_sidecar(model.vocabulary);
  if (model.prepool) {
    write_matrix(dir, "prepool_rotation.vbff", model.prepool->rotation);
    write_matrix(dir, "prepool_mean.vbff", model.prepool->mean.transpose());
    j["prepool"] = {{"kind", to_string(model.prepool->init_kind)},
                    {"dims", {model.prepool->in_dim(), model.prepool->out_dim()}},
                    {"eigenvalues", bundle::to_list(model.prepool->eigenvalues)}};
  } else {
    j["prepool"] = nullptr;
  }
  if (model.whitening) {
    write_matrix(dir, "whiten_rotation.vbff", model.whitening->rotation);
    write_matrix(dir, "whiten_mean.vbff", model.whitening->mean.transpose());
    j["whitening"] = {{"kind", "pcaw"},
                      {"dims", {model.whitening->in_dim(), model.whitening->out_dim()}},
                      {"epsilon", model.whitening->epsilon},
                      {"eigenvalues", bundle::to_list(model.whitening->eigenvalues)}};
  } else {
    j["whitening"] = nullptr;
  }
  std::ofstream os(dir / bundle::kManifestName);
  if (!os) throw IoError("cannot write " + (dir / bundle::kManifestName).string());
  os << j.dump(2) << '\n';
  if (!os) throw IoError("write failed: " + (dir / bundle::kManifestName).string());
}

/// Loads and validates a bundle; the stored fingerprint must match the
/// reloaded parameters.
inline AggregationModel load_bundle(const std::filesystem::path& dir) {
  std::ifstream is(dir / bundle::kManifestName);
  if (!is) throw ConfigError("no model bundle at " + dir.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed " + (dir / bundle::kManifestName).string() + ": " + e.what());
  }
  try {
    if (j.at("format") != "vladbuff-bundle" || j.at("version") != bundle::kFormatVersion)
      throw FormatError("unsupported bundle format in " + dir.string());
    using bundle::read_matrix;
    AggregationModel m;
    m.vocabulary.centroids = read_matrix(dir, "centroids.vbff");
    const auto& v = j.at("vocabulary");
    m.vocabulary.seed = v.at("seed").get<std::uint64_t>();
    m.vocabulary.inertia = v.at("inertia").get<double>();
    m.vocabulary.fitted_on_normalized = v.at("fitted_on_normalized").get<bool>();
    m.assignment.weights = read_matrix(dir, "assign_weights.vbff");
    m.assignment.biases = read_matrix(dir, "assign_biases.vbff").row(0).transpose();
    m.assignment.sharpness_init = j.at("sharpness").get<double>();
    m.burst = {j.at("a").get<double>(), j.at("b").get<double>(), j.at("p").get<double>(),
               j.at("burst_enabled").get<bool>()};
    if (!j.at("prepool").is_null()) {
      const auto& pj = j.at("prepool");
      PcaModel pm;
      pm.rotation = read_matrix(dir, "prepool_rotation.vbff");
      pm.mean = read_matrix(dir, "prepool_mean.vbff").row(0).transpose();
      pm.eigenvalues = bundle::from_list(pj.at("eigenvalues"));
      pm.init_kind = parse_projection_init(pj.at("kind").get<std::string>());
      m.prepool = std::move(pm);
    }
    if (!j.at("whitening").is_null()) {
      const auto& wj = j.at("whitening");
      WhiteningModel wm;
      wm.rotation = read_matrix(dir, "whiten_rotation.vbff");
      wm.mean = read_matrix(dir, "whiten_mean.vbff").row(0).transpose();
      wm.eigenvalues = bundle::from_list(wj.at("eigenvalues"));
      wm.epsilon = wj.at("epsilon").get<double>();
      m.whitening = std::move(wm);
    }
    validate_model(m);
    refresh_fingerprint(m);
    if (m.config_hash != j.at("config_hash").get<std::string>())
      throw FormatError("bundle fingerprint mismatch in " + dir.string());
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad bundle manifest " + dir.string() + ": " + e.what());
  }
}

}  // namespace vladbuff
