// Scene-to-traffic plumbing shared by training, evaluation and the pipeline:
// one scene yields a ground-truth track, per-camera renders, frame-size
// sequences and packet traces, all from derived seeds.

#pragma once

#include <cstdint>
#include <vector>

#include "pktrack/codec.hpp"
#include "pktrack/netem.hpp"
#include "pktrack/scenesim.hpp"

namespace pktrack {

/// splitmix64 finalizer; combines a base seed with stream identifiers.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(base) ^ a) ^ (b * 0xd6e8feb86659fd93ull));
}

struct CodecSettings {
  GopConfig gop;
  FrameSizeModelConfig model;
  int resolution = 0;  // raster columns; 0 means the image width in pixels
};

struct SceneStreams {
  GroundTruthTrack track;
  std::vector<CameraRender> renders;         // per camera
  std::vector<FrameSizeSequence> frames;     // per camera
};

inline SceneStreams encode_scene(const ScenarioConfig& scenario, const GroundTruthTrack& track,
                                 const CodecSettings& codec, std::uint64_t codec_seed) {
  SceneStreams s;
  s.track = track;
  for (std::size_t k = 0; k < scenario.cameras.size(); ++k) {
    const CameraModel& cam = scenario.cameras[k];
    const int res = codec.resolution > 0 ? codec.resolution : cam.image_width();
    s.renders.push_back(render_track(track, scenario.target_radius, cam, res));
    s.frames.push_back(encode_frame_sizes(s.renders.back().innovation, s.renders.back().area, codec.gop,
                                          codec.model, track.fps, derive_seed(codec_seed, k)));
  }
  return s;
}

inline SceneStreams make_scene(const ScenarioConfig& scenario, const CodecSettings& codec,
                               std::uint64_t scene_seed) {
  const GroundTruthTrack track = generate_trajectory(scenario, derive_seed(scene_seed, 1));
  return encode_scene(scenario, track, codec, derive_seed(scene_seed, 2));
}

inline PacketTrace transmit(const FrameSizeSequence& frames, NetworkConfig net, int node_id,
                            std::uint64_t seed) {
  net.seed = seed;
  return emulate(packetize(frames, net, node_id), net);
}

}  // namespace pktrack
