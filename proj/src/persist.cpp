#include "ensforge/persist.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "ensforge/binary_io.hpp"
#include "ensforge/errors.hpp"

namespace ensforge {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

void to_json(json& j, const SceneSpec& s) {
  j = json{{"size", s.size},
           {"gsd", s.gsd},
           {"n_vehicles", s.n_vehicles},
           {"n_distractors", s.n_distractors},
           {"distractor_mix",
            {{"tree", s.distractor_mix.tree}, {"rock", s.distractor_mix.rock}, {"building", s.distractor_mix.building}}},
           {"background",
            {{"noise_scale", s.background.noise_scale},
             {"smoothing_radius", s.background.smoothing_radius},
             {"base_intensity", s.background.base_intensity}}},
           {"contrast", {s.contrast_min, s.contrast_max}}};
}

void from_json(const json& j, SceneSpec& s) {
  const SceneSpec d;
  s.size = j.value("size", d.size);
  s.gsd = j.value("gsd", d.gsd);
  s.n_vehicles = j.value("n_vehicles", d.n_vehicles);
  s.n_distractors = j.value("n_distractors", d.n_distractors);
  if (j.contains("distractor_mix")) {
    const auto& m = j.at("distractor_mix");
    s.distractor_mix.tree = m.value("tree", d.distractor_mix.tree);
    s.distractor_mix.rock = m.value("rock", d.distractor_mix.rock);
    s.distractor_mix.building = m.value("building", d.distractor_mix.building);
  }
  if (j.contains("background")) {
    const auto& b = j.at("background");
    s.background.noise_scale = b.value("noise_scale", d.background.noise_scale);
    s.background.smoothing_radius = b.value("smoothing_radius", d.background.smoothing_radius);
    s.background.base_intensity = b.value("base_intensity", d.background.base_intensity);
  }
  if (j.contains("contrast")) {
    const auto& c = j.at("contrast");
    if (!c.is_array() || c.size() != 2) throw ConfigError("scene.contrast must be [min, max]");
    s.contrast_min = c[0].get<double>();
    s.contrast_max = c[1].get<double>();
  }
}

void to_json(json& j, const NetConfig& c) {
  j = json{{"input_size", c.input_size},
           {"base_channels", c.base_channels},
           {"depth", c.depth},
           {"dropout_rate", c.dropout_rate},
           {"init_seed", c.init_seed}};
}

void from_json(const json& j, NetConfig& c) {
  const NetConfig d;
  c.input_size = j.value("input_size", d.input_size);
  c.base_channels = j.value("base_channels", d.base_channels);
  c.depth = j.value("depth", d.depth);
  c.dropout_rate = j.value("dropout_rate", d.dropout_rate);
  c.init_seed = j.value("init_seed", d.init_seed);
}

void to_json(json& j, const AugConfig& a) {
  std::vector<std::string> geoms;
  for (const auto& g : a.geom_pool) geoms.push_back(g.name());
  j = json{{"geoms", geoms}, {"noise_sigma", a.noise_sigma}, {"brightness_delta", a.brightness_delta}, {"seed", a.seed}};
}

void from_json(const json& j, AugConfig& a) {
  const AugConfig d;
  a.geom_pool.clear();
  if (j.contains("geoms")) {
    for (const auto& g : j.at("geoms")) a.geom_pool.push_back(parse_geom(g.get<std::string>()));
  } else {
    a.geom_pool = d.geom_pool;
  }
  a.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  a.brightness_delta = j.value("brightness_delta", d.brightness_delta);
  a.seed = j.value("seed", d.seed);
}

// --- text helpers -------------------------------------------------------------

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace {

json read_json(const fs::path& path) {
  const std::string text = read_text(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string fmt_num(double v, int digits) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  std::string s = buf;
  // "-0.000" -> "0.000"
  bool all_zero = true;
  for (char c : s) {
    if (c != '-' && c != '0' && c != '.') all_zero = false;
  }
  if (all_zero && !s.empty() && s[0] == '-') s.erase(0, 1);
  return s;
}

std::string detections_csv(const std::vector<std::pair<std::string, std::vector<Detection>>>& per_scene) {
  std::string out = "scene_id,row,col,score,area_px,source\r\n";
  for (const auto& [scene_id, dets] : per_scene) {
    for (const auto& d : dets) {
      out += csv_field(scene_id) + "," + fmt_num(d.centroid.row, 3) + "," + fmt_num(d.centroid.col, 3) + "," +
             fmt_num(d.score, 6) + "," + std::to_string(d.area_px) + "," + csv_field(d.source) + "\r\n";
    }
  }
  return out;
}

// --- snapshot sets ------------------------------------------------------------

void save_snapshot_set(const SnapshotSet& set, const fs::path& dir) {
  if (set.empty()) throw ValidationError("refusing to save an empty snapshot set");
  fs::create_directories(dir);
  ojson manifest;
  manifest["fingerprint"] = fingerprint_hex(set.fingerprint());
  auto members = ojson::array();
  for (std::size_t k = 0; k < set.size(); ++k) {
    const auto& m = set.members()[k];
    const std::string file = "member_" + std::to_string(k) + ".ensw";
    save_params(m.params, dir / file);
    members.push_back({{"member_id", m.member_id},
                       {"provenance", m.provenance},
                       {"file", file},
                       {"fingerprint", fingerprint_hex(m.params.fingerprint())}});
  }
  manifest["members"] = members;
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

SnapshotSet load_snapshot_set(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw MissingArtifactError("no snapshot manifest in " + dir.string());
  const json manifest = read_json(dir / "manifest.json");
  SnapshotSet set;
  try {
    for (const auto& m : manifest.at("members")) {
      ParamSet p = load_params(dir / m.at("file").get<std::string>());
      const std::string recorded = m.at("fingerprint").get<std::string>();
      if (recorded != fingerprint_hex(p.fingerprint())) {
        throw FormatError(dir.string() + ": member " + m.at("member_id").get<std::string>() +
                          " fingerprint differs from manifest");
      }
      set.add({m.at("member_id").get<std::string>(), std::move(p), m.at("provenance").get<std::string>()});
    }
  } catch (const json::exception& e) {
    throw FormatError((dir / "manifest.json").string() + ": " + e.what());
  }
  if (set.empty()) throw FormatError((dir / "manifest.json").string() + ": no members");
  return set;
}

// --- datasets -----------------------------------------------------------------

namespace {

std::string scene_id(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04zu", k);
  return buf;
}

std::string exact_num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void save_dataset(const std::vector<Scene>& scenes, const std::string& split, std::uint64_t master_seed,
                  const fs::path& dir) {
  fs::create_directories(dir);
  std::string csv = "scene_id,row,col\r\n";
  ojson manifest;
  manifest["split"] = split;
  manifest["master_seed"] = master_seed;
  manifest["spec"] = scenes.empty() ? json(SceneSpec{}) : json(scenes.front().spec);
  auto entries = ojson::array();
  for (std::size_t k = 0; k < scenes.size(); ++k) {
    const std::string id = scene_id(k);
    save_raster(scenes[k].image, dir / (id + ".image.ensr"));
    save_raster(scenes[k].mask, dir / (id + ".mask.ensr"));
    for (const auto& p : scenes[k].gt_points) csv += id + "," + exact_num(p.row) + "," + exact_num(p.col) + "\r\n";
    entries.push_back({{"scene_id", id}, {"seed", scenes[k].seed}});
  }
  manifest["scenes"] = entries;
  write_text(dir / "gt_points.csv", csv);
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

std::vector<Scene> load_dataset(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw MissingArtifactError("no dataset manifest in " + dir.string());
  const json manifest = read_json(dir / "manifest.json");
  std::vector<Scene> scenes;
  std::map<std::string, std::size_t> index;
  try {
    const SceneSpec spec = manifest.at("spec").get<SceneSpec>();
    for (const auto& e : manifest.at("scenes")) {
      Scene s;
      const std::string id = e.at("scene_id").get<std::string>();
      s.spec = spec;
      s.seed = e.at("seed").get<std::uint64_t>();
      s.image = load_raster(dir / (id + ".image.ensr"));
      s.mask = load_raster(dir / (id + ".mask.ensr"));
      index[id] = scenes.size();
      scenes.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw FormatError((dir / "manifest.json").string() + ": " + e.what());
  }
  std::istringstream csv(read_text(dir / "gt_points.csv"));
  std::string line;
  std::getline(csv, line);  // header
  std::size_t lineno = 1;
  while (std::getline(csv, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string id, r, c;
    if (!std::getline(row, id, ',') || !std::getline(row, r, ',') || !std::getline(row, c, ',')) {
      throw FormatError((dir / "gt_points.csv").string() + ": malformed line " + std::to_string(lineno));
    }
    const auto it = index.find(id);
    if (it == index.end()) {
      throw FormatError((dir / "gt_points.csv").string() + ": unknown scene '" + id + "' on line " +
                        std::to_string(lineno));
    }
    scenes[it->second].gt_points.push_back({std::stod(r), std::stod(c)});
  }
  return scenes;
}

}  // namespace ensforge
