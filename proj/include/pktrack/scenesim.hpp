// Multi-camera sphere scenes: constant-velocity trajectories, per-frame
// visibility and AR(1) heavy-tailed GPS corruption of the position labels.

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pktrack/csv.hpp"
#include "pktrack/error.hpp"
#include "pktrack/geometry.hpp"

namespace pktrack {

struct ScenarioConfig {
  std::vector<CameraModel> cameras;
  Rect region;
  double z_known = 1.0;
  double target_radius = 1.0;
  double fps = 30.0;
  int duration_frames = 300;  // upper bound on in-region frames
  std::uint64_t seed = 1;

  double speed_min_mps = 0.5;
  double speed_max_mps = 2.0;
  int min_track_frames = 60;  // shorter start/end draws are redrawn

  // Occlusion-gap mode extends the straight path before the start and after
  // the end until the target is outside every camera's view, plus a margin.
  // A gap_margin_max_frames above gap_margin_frames draws each margin
  // uniformly from [gap_margin_frames, gap_margin_max_frames].
  bool occlusion_gap = false;
  int gap_margin_frames = 12;
  int gap_margin_max_frames = 0;
  int max_gap_frames = 300;

  void validate() const {
    if (cameras.empty()) throw InvalidConfig("scenario needs at least one camera");
    if (cameras.size() > 32) throw InvalidConfig("at most 32 cameras fit in a visibility mask");
    if (region.empty()) throw InvalidConfig("scenario region is empty");
    if (!(fps > 0.0)) throw InvalidConfig("fps must be positive");
    if (duration_frames <= 0) throw InvalidConfig("duration_frames must be positive");
    if (!(target_radius > 0.0)) throw InvalidConfig("target radius must be positive");
    if (!(speed_min_mps > 0.0 && speed_max_mps >= speed_min_mps))
      throw InvalidConfig("speed range must be positive and ordered");
    if (gap_margin_frames < 0) throw InvalidConfig("gap_margin_frames must be >= 0");
    if (gap_margin_max_frames != 0 && gap_margin_max_frames < gap_margin_frames)
      throw InvalidConfig("gap_margin_max_frames must be 0 or >= gap_margin_frames");
    if (min_track_frames < 1 || min_track_frames > duration_frames)
      throw InvalidConfig("min_track_frames must lie in [1, duration_frames]");
    for (std::size_t k = 0; k < cameras.size(); ++k) {
      bool sees = false;
      for (int i = 0; i <= 20 && !sees; ++i)
        for (int j = 0; j <= 20 && !sees; ++j) {
          const double x = region.x_min + region.width() * i / 20.0;
          const double y = region.y_min + region.height() * j / 20.0;
          sees = is_visible(SphereTarget(Vec3(x, y, z_known), target_radius), cameras[k]);
        }
      if (!sees)
        throw InvalidConfig("camera " + std::to_string(k) + " sees no point of the region");
    }
  }
};

/// Four identical cameras on the diagonals around a 6 m x 6 m region, each
/// seeing the whole region; the target is a 1 m sphere resting on the ground.
inline ScenarioConfig default_sphere_scenario(std::uint64_t seed = 1) {
  ScenarioConfig cfg;
  cfg.region = Rect{-3.0, 3.0, -3.0, 3.0};
  cfg.z_known = 1.0;
  cfg.target_radius = 1.0;
  cfg.seed = seed;
  for (int k = 0; k < 4; ++k) {
    const double a = std::numbers::pi / 4.0 + k * std::numbers::pi / 2.0;
    cfg.cameras.push_back(CameraModel::look_at(Vec3(11.0 * std::cos(a), 11.0 * std::sin(a), 4.0),
                                               Vec3(0.0, 0.0, 1.0), 700.0, 640, 480));
  }
  return cfg;
}

/// Four cameras mounted high and tilted down so each ground footprint is
/// bounded; targets leaving the region eventually exit every view. Used for
/// occlusion-gap scenes.
inline ScenarioConfig gap_sphere_scenario(std::uint64_t seed = 1) {
  ScenarioConfig cfg = default_sphere_scenario(seed);
  cfg.cameras.clear();
  for (int k = 0; k < 4; ++k) {
    const double a = std::numbers::pi / 4.0 + k * std::numbers::pi / 2.0;
    cfg.cameras.push_back(CameraModel::look_at(Vec3(6.0 * std::cos(a), 6.0 * std::sin(a), 8.0),
                                               Vec3(0.0, 0.0, 1.0), 700.0, 640, 480));
  }
  cfg.occlusion_gap = true;
  return cfg;
}

/// Occlusion-gap cameras narrowed to 1200 px, with camera 0 at 2400 px aimed
/// at the region edge below it, and random gap margins so entry and exit
/// times cannot be learned from the sequence position. Camera 0 renders the
/// target in under a fifth of the frames, so it alone cannot decide
/// visibility.
inline ScenarioConfig fusion_sphere_scenario(std::uint64_t seed = 1) {
  ScenarioConfig cfg = gap_sphere_scenario(seed);
  cfg.gap_margin_max_frames = 90;
  for (std::size_t k = 1; k < cfg.cameras.size(); ++k)
    cfg.cameras[k] = CameraModel::look_at(cfg.cameras[k].center(), Vec3(0.0, 0.0, 1.0), 1200.0, 640, 480);
  const Vec3 c0 = cfg.cameras[0].center();
  const Vec2 dir = c0.head<2>().normalized();
  cfg.cameras[0] = CameraModel::look_at(c0, Vec3(3.0 * dir.x(), 3.0 * dir.y(), 1.0), 2400.0, 640, 480);
  return cfg;
}

struct GroundTruthTrack {
  double fps = 30.0;
  double z_known = 0.0;
  std::size_t n_cameras = 0;
  std::vector<Vec3> positions;
  std::vector<std::uint32_t> visible;  // bit k = camera k

  std::size_t size() const { return positions.size(); }
  bool visible_to(std::size_t t, std::size_t cam) const { return (visible[t] >> cam) & 1u; }
  bool any_visible(std::size_t t) const { return visible[t] != 0; }
  double time_s(std::size_t t) const { return csv::quantize_ns(static_cast<double>(t) / fps); }
};

inline std::uint32_t visibility_mask(const Vec3& p, const ScenarioConfig& cfg) {
  std::uint32_t mask = 0;
  const SphereTarget target(p, cfg.target_radius);
  for (std::size_t k = 0; k < cfg.cameras.size(); ++k)
    if (is_visible(target, cfg.cameras[k])) mask |= 1u << k;
  return mask;
}

/// Straight constant-velocity track from an explicit start and velocity.
inline GroundTruthTrack make_track(const ScenarioConfig& cfg, const Vec3& start, const Vec3& velocity,
                                   int frames) {
  GroundTruthTrack track;
  track.fps = cfg.fps;
  track.z_known = cfg.z_known;
  track.n_cameras = cfg.cameras.size();
  for (int t = 0; t < frames; ++t) {
    Vec3 p = start + velocity * (static_cast<double>(t) / cfg.fps);
    p.z() = cfg.z_known;
    track.positions.push_back(p);
    track.visible.push_back(visibility_mask(p, cfg));
  }
  return track;
}

inline GroundTruthTrack generate_trajectory(const ScenarioConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(cfg.region.x_min, cfg.region.x_max);
  std::uniform_real_distribution<double> uy(cfg.region.y_min, cfg.region.y_max);
  std::uniform_real_distribution<double> us(cfg.speed_min_mps, cfg.speed_max_mps);

  Vec3 start, end;
  double speed = 0.0;
  int frames = 0;
  for (int attempt = 0;; ++attempt) {
    start = Vec3(ux(rng), uy(rng), cfg.z_known);
    end = Vec3(ux(rng), uy(rng), cfg.z_known);
    speed = us(rng);
    const double travel_frames = (end - start).norm() / speed * cfg.fps;
    frames = std::min(cfg.duration_frames, static_cast<int>(std::floor(travel_frames)) + 1);
    if (frames >= cfg.min_track_frames) break;
    if (attempt > 10000) throw InvalidConfig("region too small for min_track_frames");
  }
  const Vec3 velocity = (end - start).normalized() * speed;

  if (!cfg.occlusion_gap) return make_track(cfg, start, velocity, frames);

  // Walk outwards along the line until no camera sees the target.
  auto frames_to_exit = [&](const Vec3& from, const Vec3& v) {
    int n = 0;
    while (n < cfg.max_gap_frames &&
           visibility_mask(from + v * (static_cast<double>(n + 1) / cfg.fps), cfg) != 0)
      ++n;
    int margin = cfg.gap_margin_frames;
    if (cfg.gap_margin_max_frames > cfg.gap_margin_frames)
      margin = std::uniform_int_distribution<int>(cfg.gap_margin_frames, cfg.gap_margin_max_frames)(rng);
    return std::min(n + margin, cfg.max_gap_frames);
  };
  const int lead = frames_to_exit(start, -velocity);
  const Vec3 last = start + velocity * (static_cast<double>(frames - 1) / cfg.fps);
  const int trail = frames_to_exit(last, velocity);
  const Vec3 first = start - velocity * (static_cast<double>(lead) / cfg.fps);
  return make_track(cfg, first, velocity, lead + frames + trail);
}

// ---------------------------------------------------------------------------
// GPS noise

struct GpsNoiseConfig {
  double sigma_h_m = 1.0;  // total horizontal standard deviation
  double nu = 5.0;         // Student-t degrees of freedom
  double tau_gps_s = 300.0;
  double dt_s = 1.0 / 30.0;

  double phi() const { return std::exp(-dt_s / tau_gps_s); }
  double sigma_e() const { return sigma_h_m / std::sqrt(2.0); }

  void validate() const {
    if (!(nu > 2.0)) throw InvalidConfig("GPS noise needs nu > 2 for finite variance");
    if (!(sigma_h_m >= 0.0)) throw InvalidConfig("GPS sigma_H must be non-negative");
    if (!(tau_gps_s > 0.0) || !(dt_s > 0.0)) throw InvalidConfig("GPS tau and dt must be positive");
  }

  static GpsNoiseConfig none() { return {0.0, 5.0, 300.0, 1.0 / 30.0}; }
  static GpsNoiseConfig low() { return {0.64, 9.0, 60.0, 1.0 / 30.0}; }
  static GpsNoiseConfig medium() { return {1.00, 5.0, 300.0, 1.0 / 30.0}; }
  static GpsNoiseConfig high() { return {3.70, 5.0, 300.0, 1.0 / 30.0}; }
};

/// AR(1) error sequence for one horizontal coordinate, stationary with
/// per-coordinate variance sigma_e^2. Driving noise is Student-t rescaled to
/// unit variance; e_0 is drawn from the same rescaled t shape at sigma_e.
inline std::vector<double> gps_error_sequence(std::size_t n, const GpsNoiseConfig& cfg,
                                              std::mt19937_64& rng) {
  cfg.validate();
  std::vector<double> e(n, 0.0);
  if (n == 0) return e;
  const double phi = cfg.phi();
  const double sigma_e = cfg.sigma_e();
  const double sigma_eta = sigma_e * std::sqrt(1.0 - phi * phi);
  const double unit = std::sqrt((cfg.nu - 2.0) / cfg.nu);
  std::student_t_distribution<double> t(cfg.nu);
  e[0] = sigma_e * unit * t(rng);
  for (std::size_t i = 1; i < n; ++i) e[i] = phi * e[i - 1] + sigma_eta * unit * t(rng);
  return e;
}

inline GroundTruthTrack apply_gps_noise(const GroundTruthTrack& track, const GpsNoiseConfig& cfg,
                                        std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const auto ex = gps_error_sequence(track.size(), cfg, rng);
  const auto ey = gps_error_sequence(track.size(), cfg, rng);
  GroundTruthTrack out = track;
  for (std::size_t t = 0; t < track.size(); ++t) {
    out.positions[t].x() += ex[t];
    out.positions[t].y() += ey[t];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trajectory CSV: frame_idx,t_s,x_m,y_m,z_m,visible_mask

inline void export_trajectory(const GroundTruthTrack& track, const std::string& path) {
  auto out = csv::open_out(path);
  out << "frame_idx,t_s,x_m,y_m,z_m,visible_mask\n";
  for (std::size_t t = 0; t < track.size(); ++t) {
    const Vec3& p = track.positions[t];
    out << t << ',' << csv::fixed9(track.time_s(t)) << ',' << csv::exact(p.x()) << ','
        << csv::exact(p.y()) << ',' << csv::exact(p.z()) << ',' << track.visible[t] << '\n';
  }
}

inline GroundTruthTrack import_trajectory(const std::string& path, std::size_t n_cameras) {
  auto in = csv::open_in(path);
  csv::Reader reader(in);
  const auto col = reader.require({"frame_idx", "t_s", "x_m", "y_m", "z_m", "visible_mask"});
  GroundTruthTrack track;
  track.n_cameras = n_cameras;
  std::vector<std::string> f;
  std::vector<double> times;
  while (reader.next(f)) {
    const auto line = reader.line();
    const long long idx = csv::to_int(f[col[0]], line);
    if (idx != static_cast<long long>(track.size()))
      throw InvariantError("frame_idx must count up from 0", line);
    times.push_back(csv::to_double(f[col[1]], line));
    if (times.size() > 1 && !(times.back() > times[times.size() - 2]))
      throw InvariantError("timestamps must be strictly increasing", line);
    track.positions.emplace_back(csv::to_double(f[col[2]], line), csv::to_double(f[col[3]], line),
                                 csv::to_double(f[col[4]], line));
    const long long mask = csv::to_int(f[col[5]], line);
    if (mask < 0 || (n_cameras < 32 && mask >= (1ll << n_cameras)))
      throw InvariantError("visible_mask has bits beyond the camera count", line);
    track.visible.push_back(static_cast<std::uint32_t>(mask));
  }
  // Timestamps carry nanosecond rounding; fps is recovered to 1e-3.
  if (track.size() >= 2) track.fps = std::round(1e3 / (times[1] - times[0])) / 1e3;
  if (!track.positions.empty()) track.z_known = track.positions.front().z();
  return track;
}

}  // namespace pktrack
