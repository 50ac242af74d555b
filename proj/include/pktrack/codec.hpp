// Differential-codec surrogate: per-camera scene innovation turned into
// GOP-structured I/P frame sizes, plus the frame-size CSV format.

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pktrack/csv.hpp"
#include "pktrack/error.hpp"
#include "pktrack/geometry.hpp"
#include "pktrack/scenesim.hpp"

namespace pktrack {

enum class FrameType : char { kI = 'I', kP = 'P', kUntyped = 'U' };

struct GopConfig {
  int gop_length = 30;

  FrameType type_of(std::size_t t) const {
    return t % static_cast<std::size_t>(gop_length) == 0 ? FrameType::kI : FrameType::kP;
  }
  void validate() const {
    if (gop_length < 1) throw InvalidConfig("gop_length must be >= 1");
  }
};

struct FrameSizeModelConfig {
  double i_base_bytes = 20000.0;
  double i_area_coeff = 2.0;        // bytes per image-plane unit^2
  double p_base_bytes = 800.0;
  double p_innovation_coeff = 4.0;  // bytes per image-plane unit^2
  double noise_rel_std = 0.05;
  std::int64_t min_frame_bytes = 200;

  void validate() const {
    if (i_base_bytes < 0 || i_area_coeff < 0 || p_base_bytes < 0 || p_innovation_coeff < 0 ||
        noise_rel_std < 0)
      throw InvalidConfig("frame-size model coefficients must be non-negative");
    if (min_frame_bytes < 1) throw InvalidConfig("min_frame_bytes must be >= 1");
  }
};

struct Frame {
  std::int64_t size_bytes = 0;
  FrameType type = FrameType::kUntyped;
  double timestamp_s = 0.0;

  bool operator==(const Frame&) const = default;
};

struct FrameSizeSequence {
  std::vector<Frame> frames;

  std::size_t size() const { return frames.size(); }
  bool empty() const { return frames.empty(); }
  std::vector<double> sizes() const {
    std::vector<double> s;
    s.reserve(frames.size());
    for (const auto& f : frames) s.push_back(static_cast<double>(f.size_bytes));
    return s;
  }
  bool operator==(const FrameSizeSequence&) const = default;
};

/// What one camera's sensor sees of a track: silhouette area, inter-frame
/// innovation (mask symmetric difference) and silhouette centroid per frame.
struct CameraRender {
  std::vector<double> area;
  std::vector<double> innovation;
  std::vector<std::optional<Vec2>> centroid;
};

inline CameraRender render_track(const GroundTruthTrack& track, double radius, const CameraModel& cam,
                                 int resolution) {
  CameraRender out;
  const std::size_t n = track.size();
  out.area.resize(n);
  out.innovation.resize(n);
  out.centroid.resize(n);
  SilhouetteSpans prev;
  for (std::size_t t = 0; t < n; ++t) {
    SilhouetteSpans cur = silhouette_spans(SphereTarget(track.positions[t], radius), cam, resolution);
    out.area[t] = cur.area();
    out.innovation[t] = t == 0 ? cur.area() : span_xor_area(prev, cur);
    out.centroid[t] = span_centroid(cur, cam, resolution);
    prev = std::move(cur);
  }
  return out;
}

/// Per-frame innovation: XOR area of consecutive silhouette masks, with the
/// first frame's full silhouette area as its innovation.
inline std::vector<double> innovation_signal(const GroundTruthTrack& track, double radius,
                                             const CameraModel& cam, int resolution) {
  return render_track(track, radius, cam, resolution).innovation;
}

/// Maps innovation and silhouette area to frame sizes: I-frames grow with the
/// silhouette area, P-frames with the innovation, both under multiplicative
/// Gaussian noise and a size floor.
inline FrameSizeSequence encode_frame_sizes(const std::vector<double>& innovation,
                                            const std::vector<double>& silhouette_area,
                                            const GopConfig& gop, const FrameSizeModelConfig& model,
                                            double fps, std::uint64_t seed) {
  gop.validate();
  model.validate();
  if (innovation.size() != silhouette_area.size())
    throw ShapeError("innovation and area sequences differ in length");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  FrameSizeSequence seq;
  seq.frames.reserve(innovation.size());
  for (std::size_t t = 0; t < innovation.size(); ++t) {
    const FrameType type = gop.type_of(t);
    double bytes = type == FrameType::kI
                       ? model.i_base_bytes + model.i_area_coeff * silhouette_area[t]
                       : model.p_base_bytes + model.p_innovation_coeff * innovation[t];
    // Draw unconditionally so the noise stream does not depend on the inputs.
    const double z = noise(rng);
    bytes *= 1.0 + model.noise_rel_std * z;
    Frame f;
    f.size_bytes = std::max<std::int64_t>(model.min_frame_bytes, std::llround(bytes));
    f.type = type;
    f.timestamp_s = csv::quantize_ns(static_cast<double>(t) / fps);
    seq.frames.push_back(f);
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Frame-size CSV: frame_idx,t_s,size_bytes,frame_type

inline void export_frame_sizes(const FrameSizeSequence& seq, const std::string& path) {
  auto out = csv::open_out(path);
  out << "frame_idx,t_s,size_bytes,frame_type\n";
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const Frame& f = seq.frames[i];
    out << i << ',' << csv::fixed9(f.timestamp_s) << ',' << f.size_bytes << ','
        << static_cast<char>(f.type) << '\n';
  }
}

inline FrameSizeSequence import_frame_sizes(const std::string& path) {
  auto in = csv::open_in(path);
  csv::Reader reader(in);
  const auto col = reader.require({"frame_idx", "t_s", "size_bytes", "frame_type"});
  FrameSizeSequence seq;
  std::vector<std::string> f;
  while (reader.next(f)) {
    const auto line = reader.line();
    const long long idx = csv::to_int(f[col[0]], line);
    if (idx != static_cast<long long>(seq.size()))
      throw InvariantError("frame_idx must count up from 0", line);
    Frame fr;
    fr.timestamp_s = csv::to_double(f[col[1]], line);
    fr.size_bytes = csv::to_int(f[col[2]], line);
    if (fr.size_bytes < 0) throw InvariantError("size_bytes must be non-negative", line);
    const std::string& type = f[col[3]];
    if (type == "I") {
      fr.type = FrameType::kI;
    } else if (type == "P") {
      fr.type = FrameType::kP;
    } else if (type == "U") {
      fr.type = FrameType::kUntyped;
    } else {
      throw ParseError("frame_type must be I, P or U", line);
    }
    if (!seq.empty() && !(fr.timestamp_s > seq.frames.back().timestamp_s))
      throw InvariantError("timestamps must be strictly increasing", line);
    seq.frames.push_back(fr);
  }
  return seq;
}

}  // namespace pktrack
