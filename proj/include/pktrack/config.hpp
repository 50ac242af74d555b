// Experiment configuration: one JSON document with a section per module,
// explicit units in key names and a named seed in every random section.

#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pktrack/dataset.hpp"
#include "pktrack/error.hpp"
#include "pktrack/stage1.hpp"
#include "pktrack/stage2.hpp"

namespace pktrack {

enum class NodeRole { kGray, kBlue, kUnused };

inline std::string to_string(NodeRole r) {
  switch (r) {
    case NodeRole::kGray: return "gray";
    case NodeRole::kBlue: return "blue";
    case NodeRole::kUnused: return "unused";
  }
  return "?";
}
inline NodeRole node_role_from_string(const std::string& s) {
  if (s == "gray") return NodeRole::kGray;
  if (s == "blue") return NodeRole::kBlue;
  if (s == "unused") return NodeRole::kUnused;
  throw InvalidConfig("unknown node role '" + s + "' (expected gray, blue or unused)");
}

inline ScenarioConfig scenario_preset(const std::string& name) {
  if (name == "default") return default_sphere_scenario();
  if (name == "gap") return gap_sphere_scenario();
  if (name == "fusion") return fusion_sphere_scenario();
  throw InvalidConfig("unknown scenario preset '" + name + "' (expected default, gap or fusion)");
}

inline GpsNoiseConfig gps_preset(const std::string& name) {
  if (name == "none") return GpsNoiseConfig::none();
  if (name == "low") return GpsNoiseConfig::low();
  if (name == "medium") return GpsNoiseConfig::medium();
  if (name == "high") return GpsNoiseConfig::high();
  throw InvalidConfig("unknown GPS preset '" + name + "' (expected none, low, medium or high)");
}

struct SplitConfig {
  double train_fraction = 0.8;
  double test_fraction = 0.2;
  std::uint64_t seed = 1;
};

struct ExperimentConfig {
  std::string scenario_preset = "default";
  ScenarioConfig scenario = default_sphere_scenario();
  CodecSettings codec;
  std::uint64_t codec_seed = 1;
  NetworkConfig network;
  std::string gps_preset = "medium";
  GpsNoiseConfig gps = GpsNoiseConfig::medium();
  std::uint64_t gps_seed = 1;
  Stage1Config stage1;
  Stage2Config stage2 = Stage2Config::desk();
  SplitConfig split;
  std::vector<NodeRole> node_roles = std::vector<NodeRole>(4, NodeRole::kGray);
  int n_scenes = 10;
  double baseline_window_s = 0.0;  // time-window baseline bin; 0 means 1 / fps
  int stage1_train_scenes = 0;     // stage 1 trains on the first N training scenes; 0 means all

  std::vector<std::size_t> cameras_with(NodeRole role) const {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < node_roles.size(); ++k)
      if (node_roles[k] == role) out.push_back(k);
    return out;
  }
  std::vector<std::size_t> gray_cameras() const { return cameras_with(NodeRole::kGray); }
  std::vector<std::size_t> blue_cameras() const { return cameras_with(NodeRole::kBlue); }
  double baseline_window() const { return baseline_window_s > 0.0 ? baseline_window_s : 1.0 / scenario.fps; }

  /// Copies the node counts implied by node_roles into the stage-2 config.
  void sync_roles() {
    stage2.n_gray = static_cast<int>(gray_cameras().size());
    stage2.n_blue = static_cast<int>(blue_cameras().size());
  }

  /// Replaces every named seed with a stream derived from `seed`.
  void override_seeds(std::uint64_t seed) {
    scenario.seed = derive_seed(seed, 1);
    codec_seed = derive_seed(seed, 2);
    network.seed = derive_seed(seed, 3);
    gps_seed = derive_seed(seed, 4);
    split.seed = derive_seed(seed, 5);
    stage1.seed = derive_seed(seed, 6);
    stage2.seed = derive_seed(seed, 7);
  }

  std::size_t n_train() const {
    return static_cast<std::size_t>(std::llround(split.train_fraction * n_scenes));
  }

  void validate() const {
    if (scenario.cameras.empty()) throw InvalidConfig("scenario has zero cameras");
    scenario.validate();
    codec.gop.validate();
    codec.model.validate();
    if (codec.resolution < 0) throw InvalidConfig("codec resolution must be >= 0");
    network.validate();
    gps.validate();
    stage1.validate();
    stage2.validate();
    if (!(split.train_fraction >= 0.0 && split.test_fraction >= 0.0) ||
        std::abs(split.train_fraction + split.test_fraction - 1.0) > 1e-9)
      throw InvalidConfig("split fractions must be non-negative and sum to 1");
    if (node_roles.size() != scenario.cameras.size())
      throw InvalidConfig("node_roles needs one entry per camera (" + std::to_string(scenario.cameras.size()) +
                          "), got " + std::to_string(node_roles.size()));
    if (gray_cameras().empty() && blue_cameras().empty())
      throw InvalidConfig("at least one camera must be a gray or blue node");
    if (stage2.n_gray != static_cast<int>(gray_cameras().size()) ||
        stage2.n_blue != static_cast<int>(blue_cameras().size()))
      throw InvalidConfig("stage2 node counts disagree with node_roles");
    if (n_scenes < 2) throw InvalidConfig("n_scenes must be >= 2");
    const std::size_t tr = n_train();
    if (tr < 1 || tr >= static_cast<std::size_t>(n_scenes))
      throw InvalidConfig("split must leave at least one train and one test scene");
    if (!(baseline_window_s >= 0.0)) throw InvalidConfig("baseline_window_s must be >= 0");
    if (stage1_train_scenes < 0) throw InvalidConfig("stage1.train_scenes must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json camera_to_json(const CameraModel& c) {
  nlohmann::json rot = nlohmann::json::array();
  for (int i = 0; i < 3; ++i) rot.push_back({c.rotation()(i, 0), c.rotation()(i, 1), c.rotation()(i, 2)});
  return {{"position_m", {c.center().x(), c.center().y(), c.center().z()}},
          {"rotation", rot},
          {"focal_px", c.focal()},
          {"width_px", c.image_width()},
          {"height_px", c.image_height()},
          {"pixels_per_unit", c.pixels_per_unit()}};
}

/// A camera is given either by `rotation` (camera-to-world, rows) or by a
/// `target_m` point on its optical axis.
inline CameraModel camera_from_json(const nlohmann::json& j) {
  const auto p = j.at("position_m").get<std::vector<double>>();
  if (p.size() != 3) throw InvalidConfig("camera position_m needs 3 values");
  const Vec3 pos(p[0], p[1], p[2]);
  const double f = j.at("focal_px").get<double>();
  const int w = j.at("width_px").get<int>(), h = j.at("height_px").get<int>();
  if (j.contains("target_m")) {
    const auto t = j.at("target_m").get<std::vector<double>>();
    if (t.size() != 3) throw InvalidConfig("camera target_m needs 3 values");
    return CameraModel::look_at(pos, Vec3(t[0], t[1], t[2]), f, w, h);
  }
  const auto rows = j.at("rotation").get<std::vector<std::vector<double>>>();
  if (rows.size() != 3) throw InvalidConfig("camera rotation needs 3 rows");
  Mat3 r;
  for (int i = 0; i < 3; ++i) {
    if (rows[i].size() != 3) throw InvalidConfig("camera rotation rows need 3 values");
    for (int k = 0; k < 3; ++k) r(i, k) = rows[i][k];
  }
  return CameraModel(r, pos, f, w, h, j.value("pixels_per_unit", 1.0));
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json cams = nlohmann::json::array();
  for (const auto& cam : c.scenario.cameras) cams.push_back(camera_to_json(cam));
  const ScenarioConfig& s = c.scenario;
  nlohmann::json roles = nlohmann::json::array();
  for (auto r : c.node_roles) roles.push_back(to_string(r));
  nlohmann::json stage1 = c.stage1;
  stage1["train_scenes"] = c.stage1_train_scenes;
  return {
      {"scenario",
       {{"preset", c.scenario_preset},
        {"seed", s.seed},
        {"cameras", cams},
        {"region", s.region},
        {"z_known_m", s.z_known},
        {"target_radius_m", s.target_radius},
        {"fps", s.fps},
        {"duration_frames", s.duration_frames},
        {"speed_min_mps", s.speed_min_mps},
        {"speed_max_mps", s.speed_max_mps},
        {"min_track_frames", s.min_track_frames},
        {"occlusion_gap", s.occlusion_gap},
        {"gap_margin_frames", s.gap_margin_frames},
        {"gap_margin_max_frames", s.gap_margin_max_frames},
        {"max_gap_frames", s.max_gap_frames}}},
      {"n_scenes", c.n_scenes},
      {"node_roles", roles},
      {"codec",
       {{"seed", c.codec_seed},
        {"gop_length", c.codec.gop.gop_length},
        {"i_base_bytes", c.codec.model.i_base_bytes},
        {"i_area_coeff", c.codec.model.i_area_coeff},
        {"p_base_bytes", c.codec.model.p_base_bytes},
        {"p_innovation_coeff", c.codec.model.p_innovation_coeff},
        {"noise_rel_std", c.codec.model.noise_rel_std},
        {"min_frame_bytes", c.codec.model.min_frame_bytes},
        {"resolution", c.codec.resolution}}},
      {"network",
       {{"seed", c.network.seed},
        {"bandwidth_bps", c.network.bandwidth_bps},
        {"delay_s", c.network.delay_s},
        {"jitter_s", c.network.jitter_s},
        {"payload_bytes", c.network.payload_bytes},
        {"baseline_window_s", c.baseline_window_s}}},
      {"gps",
       {{"preset", c.gps_preset},
        {"seed", c.gps_seed},
        {"sigma_h_m", c.gps.sigma_h_m},
        {"nu", c.gps.nu},
        {"tau_gps_s", c.gps.tau_gps_s},
        {"dt_s", c.gps.dt_s}}},
      {"stage1", stage1},
      {"stage2", c.stage2},
      {"split", {{"train_fraction", c.split.train_fraction}, {"test_fraction", c.split.test_fraction}, {"seed", c.split.seed}}}};
}

/// Presets fill every field first; keys present in the document override
/// them. Node counts for stage 2 always follow node_roles.
inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    if (j.contains("scenario")) {
      const auto& s = j.at("scenario");
      c.scenario_preset = s.value("preset", c.scenario_preset);
      c.scenario = scenario_preset(c.scenario_preset);
      ScenarioConfig& sc = c.scenario;
      if (s.contains("cameras")) {
        sc.cameras.clear();
        for (const auto& cam : s.at("cameras")) sc.cameras.push_back(camera_from_json(cam));
      }
      if (s.contains("region")) sc.region = s.at("region").get<Rect>();
      sc.seed = s.value("seed", sc.seed);
      sc.z_known = s.value("z_known_m", sc.z_known);
      sc.target_radius = s.value("target_radius_m", sc.target_radius);
      sc.fps = s.value("fps", sc.fps);
      sc.duration_frames = s.value("duration_frames", sc.duration_frames);
      sc.speed_min_mps = s.value("speed_min_mps", sc.speed_min_mps);
      sc.speed_max_mps = s.value("speed_max_mps", sc.speed_max_mps);
      sc.min_track_frames = s.value("min_track_frames", sc.min_track_frames);
      sc.occlusion_gap = s.value("occlusion_gap", sc.occlusion_gap);
      sc.gap_margin_frames = s.value("gap_margin_frames", sc.gap_margin_frames);
      sc.gap_margin_max_frames = s.value("gap_margin_max_frames", sc.gap_margin_max_frames);
      sc.max_gap_frames = s.value("max_gap_frames", sc.max_gap_frames);
    }
    c.n_scenes = j.value("n_scenes", c.n_scenes);
    if (j.contains("node_roles")) {
      c.node_roles.clear();
      for (const auto& r : j.at("node_roles")) c.node_roles.push_back(node_role_from_string(r.get<std::string>()));
    } else {
      c.node_roles.assign(c.scenario.cameras.size(), NodeRole::kGray);
    }
    if (j.contains("codec")) {
      const auto& s = j.at("codec");
      c.codec_seed = s.value("seed", c.codec_seed);
      c.codec.gop.gop_length = s.value("gop_length", c.codec.gop.gop_length);
      auto& m = c.codec.model;
      m.i_base_bytes = s.value("i_base_bytes", m.i_base_bytes);
      m.i_area_coeff = s.value("i_area_coeff", m.i_area_coeff);
      m.p_base_bytes = s.value("p_base_bytes", m.p_base_bytes);
      m.p_innovation_coeff = s.value("p_innovation_coeff", m.p_innovation_coeff);
      m.noise_rel_std = s.value("noise_rel_std", m.noise_rel_std);
      m.min_frame_bytes = s.value("min_frame_bytes", m.min_frame_bytes);
      c.codec.resolution = s.value("resolution", c.codec.resolution);
    }
    if (j.contains("network")) {
      const auto& s = j.at("network");
      auto& n = c.network;
      n.seed = s.value("seed", n.seed);
      n.bandwidth_bps = s.value("bandwidth_bps", n.bandwidth_bps);
      n.delay_s = s.value("delay_s", n.delay_s);
      n.jitter_s = s.value("jitter_s", n.jitter_s);
      n.payload_bytes = s.value("payload_bytes", n.payload_bytes);
      c.baseline_window_s = s.value("baseline_window_s", c.baseline_window_s);
    }
    if (j.contains("gps")) {
      const auto& s = j.at("gps");
      c.gps_preset = s.value("preset", c.gps_preset);
      c.gps = gps_preset(c.gps_preset);
      c.gps_seed = s.value("seed", c.gps_seed);
      c.gps.sigma_h_m = s.value("sigma_h_m", c.gps.sigma_h_m);
      c.gps.nu = s.value("nu", c.gps.nu);
      c.gps.tau_gps_s = s.value("tau_gps_s", c.gps.tau_gps_s);
      c.gps.dt_s = s.value("dt_s", c.gps.dt_s);
    }
    if (j.contains("stage1")) {
      j.at("stage1").get_to(c.stage1);
      c.stage1_train_scenes = j.at("stage1").value("train_scenes", c.stage1_train_scenes);
    }
    if (j.contains("stage2")) {
      const auto& s = j.at("stage2");
      if (s.value("preset", std::string("desk")) == "full") c.stage2 = Stage2Config{};
      from_json(s, c.stage2);
    }
    if (j.contains("split")) {
      const auto& s = j.at("split");
      c.split.train_fraction = s.value("train_fraction", c.split.train_fraction);
      c.split.test_fraction = s.value("test_fraction", c.split.test_fraction);
      c.split.seed = s.value("seed", c.split.seed);
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfig(std::string("config: ") + e.what());
  }
  c.sync_roles();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidConfig("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfig("config " + path + " is not valid JSON: " + e.what());
  }
  return experiment_from_json(j);
}

inline void save_config(const ExperimentConfig& c, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidConfig("cannot write config " + path);
  out << to_json(c).dump(2) << '\n';
}

}  // namespace pktrack
