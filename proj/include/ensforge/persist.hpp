#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ensforge/ens_train.hpp"
#include "ensforge/objects.hpp"
#include "ensforge/refnet.hpp"
#include "ensforge/synthdata.hpp"

namespace ensforge {

// JSON forms of the value types that appear in manifests and configs.
void to_json(nlohmann::json& j, const SceneSpec& s);
void from_json(const nlohmann::json& j, SceneSpec& s);
void to_json(nlohmann::json& j, const NetConfig& c);
void from_json(const nlohmann::json& j, NetConfig& c);
void to_json(nlohmann::json& j, const AugConfig& a);
void from_json(const nlohmann::json& j, AugConfig& a);

/// Snapshot directory: member_<k>.ensw files plus manifest.json listing
/// member_id, provenance, file, fingerprint.
void save_snapshot_set(const SnapshotSet& set, const std::filesystem::path& dir);
SnapshotSet load_snapshot_set(const std::filesystem::path& dir);

/// Dataset split directory: scene_<k>.image.ensr, scene_<k>.mask.ensr,
/// gt_points.csv (scene_id,row,col), manifest.json (spec, master seed, seeds).
void save_dataset(const std::vector<Scene>& scenes, const std::string& split, std::uint64_t master_seed,
                  const std::filesystem::path& dir);
std::vector<Scene> load_dataset(const std::filesystem::path& dir);

/// RFC-4180 field quoting.
std::string csv_field(const std::string& s);
/// Fixed, locale-independent number formatting for CSV output.
std::string fmt_num(double v, int digits = 6);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

/// Detections CSV: scene_id,row,col,score,area_px,source.
std::string detections_csv(const std::vector<std::pair<std::string, std::vector<Detection>>>& per_scene);

}  // namespace ensforge
