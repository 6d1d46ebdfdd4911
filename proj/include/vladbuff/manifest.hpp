#pragma once

#include "errors.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

namespace vladbuff {

enum class Split { query, reference };

inline const char* to_string(Split s) { return s == Split::query ? "query" : "reference"; }

inline Split parse_split(const std::string& s) {
  if (s == "query") return Split::query;
  if (s == "reference") return Split::reference;
  throw ConfigError("unknown split '" + s + "' (expected query|reference)");
}

struct ManifestEntry {
  std::string image_id;
  std::filesystem::path feature_path;
  double x_m = 0.0;
  double y_m = 0.0;
  Split split = Split::reference;
};

/// Images of one dataset with planar positions in meters.
struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  double radius_m = 25.0;

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].split == s) out.push_back(i);
    return out;
  }
};

/// Checks the manifest invariants: unique ids, resolvable feature files, and at
/// least one query and one reference. Throws ConfigError.
inline void validate_manifest(const DatasetManifest& m, bool require_both_splits = true) {
  if (!(m.radius_m >= 0.0)) throw ConfigError("radius_m must be non-negative");
  std::set<std::string> ids;
  bool has_query = false, has_ref = false;
  for (const auto& e : m.entries) {
    if (!ids.insert(e.image_id).second) throw ConfigError("duplicate image_id '" + e.image_id + "'");
    if (!std::filesystem::is_regular_file(e.feature_path))
      throw ConfigError("feature file not found for '" + e.image_id + "': " + e.feature_path.string());
    (e.split == Split::query ? has_query : has_ref) = true;
  }
  if (m.entries.empty()) throw ConfigError("manifest has no entries");
  if (require_both_splits && !(has_query && has_ref))
    throw ConfigError("manifest needs at least one query and one reference");
}

/// Reads a JSON Lines manifest. Relative feature paths resolve against the
/// manifest's directory. Blank lines are skipped.
inline DatasetManifest load_manifest(const std::filesystem::path& path, double radius_m = 25.0,
                                     bool require_both_splits = true) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest: " + path.string());
  DatasetManifest m;
  m.radius_m = radius_m;
  const auto base = path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      for (auto it = j.begin(); it != j.end(); ++it) {
        static const std::set<std::string> known{"image_id", "feature_path", "x_m", "y_m", "split"};
        if (!known.count(it.key())) throw ConfigError("unknown key '" + it.key() + "'");
      }
      ManifestEntry e;
      e.image_id = j.at("image_id").get<std::string>();
      std::filesystem::path fp = j.at("feature_path").get<std::string>();
      e.feature_path = fp.is_absolute() ? fp : base / fp;
      e.x_m = j.at("x_m").get<double>();
      e.y_m = j.at("y_m").get<double>();
      e.split = parse_split(j.at("split").get<std::string>());
      m.entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    } catch (const ConfigError& ex) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  validate_manifest(m, require_both_splits);
  return m;
}

/// Writes entries as JSON Lines; feature paths are written relative to the
/// manifest directory when they live below it.
inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest: " + path.string());
  const auto base = std::filesystem::absolute(path).parent_path();
  for (const auto& e : m.entries) {
    auto fp = std::filesystem::absolute(e.feature_path).lexically_relative(base);
    if (fp.empty() || *fp.begin() == "..") fp = e.feature_path;
    nlohmann::json j;
    j["image_id"] = e.image_id;
    j["feature_path"] = fp.generic_string();
    j["x_m"] = e.x_m;
    j["y_m"] = e.y_m;
    j["split"] = to_string(e.split);
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace vladbuff
