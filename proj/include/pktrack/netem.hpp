// Packetization of frame-size sequences and a single-queue link emulator
// (rate limit, fixed delay, uniform jitter, no reordering), plus the packet
// trace CSV format.

#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "pktrack/codec.hpp"
#include "pktrack/csv.hpp"
#include "pktrack/error.hpp"

namespace pktrack {

struct NetworkConfig {
  double bandwidth_bps = 50e6;
  double delay_s = 0.020;
  double jitter_s = 0.005;
  std::int64_t payload_bytes = 1400;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(bandwidth_bps > 0.0)) throw InvalidConfig("bandwidth must be positive");
    if (!(delay_s >= 0.0) || !(jitter_s >= 0.0)) throw InvalidConfig("delay and jitter must be non-negative");
    if (payload_bytes < 1) throw InvalidConfig("payload_bytes must be >= 1");
  }
};

struct Packet {
  double send_t_s = 0.0;
  double arrive_t_s = 0.0;
  std::int64_t size_bytes = 0;
  int node_id = 0;
  std::int64_t frame_idx = -1;  // ground truth, -1 when unlabeled
  bool last_pkt = false;        // ground truth, meaningful when labeled

  bool operator==(const Packet&) const = default;
};

struct PacketTrace {
  std::vector<Packet> packets;
  bool labeled = false;

  std::size_t size() const { return packets.size(); }
  bool empty() const { return packets.empty(); }
  std::vector<int> boundary_labels() const {
    std::vector<int> y;
    y.reserve(packets.size());
    for (const auto& p : packets) y.push_back(p.last_pkt ? 1 : 0);
    return y;
  }
  /// Copy with the ground-truth columns removed.
  PacketTrace unlabeled() const {
    PacketTrace t = *this;
    t.labeled = false;
    for (auto& p : t.packets) {
      p.frame_idx = -1;
      p.last_pkt = false;
    }
    return t;
  }
  bool operator==(const PacketTrace&) const = default;
};

/// Splits each frame into full payloads followed by the remainder. Every
/// packet of a frame shares the frame timestamp as its send time.
inline PacketTrace packetize(const FrameSizeSequence& frames, const NetworkConfig& cfg, int node_id = 0) {
  cfg.validate();
  PacketTrace trace;
  trace.labeled = true;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const Frame& f = frames.frames[i];
    std::int64_t left = f.size_bytes;
    while (left > 0) {
      Packet p;
      p.send_t_s = f.timestamp_s;
      p.arrive_t_s = f.timestamp_s;
      p.size_bytes = std::min(left, cfg.payload_bytes);
      p.node_id = node_id;
      p.frame_idx = static_cast<std::int64_t>(i);
      left -= p.size_bytes;
      p.last_pkt = left == 0;
      trace.packets.push_back(p);
    }
  }
  return trace;
}

/// Bottleneck departure times: a FIFO serializer at bandwidth_bps.
inline std::vector<double> link_departures(const PacketTrace& trace, const NetworkConfig& cfg) {
  std::vector<double> depart(trace.size());
  double prev = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < trace.size(); ++k) {
    const Packet& p = trace.packets[k];
    if (k > 0 && p.send_t_s < trace.packets[k - 1].send_t_s)
      throw InvariantError("send times must be non-decreasing", k + 1);
    const double start = std::max(p.send_t_s, prev);
    depart[k] = start + static_cast<double>(p.size_bytes) * 8.0 / cfg.bandwidth_bps;
    prev = depart[k];
  }
  return depart;
}

/// Serialization, then fixed delay plus U(-jitter, +jitter), then an order
/// clamp so arrivals never decrease and never precede the send time.
inline PacketTrace emulate(const PacketTrace& trace, const NetworkConfig& cfg) {
  cfg.validate();
  const auto depart = link_departures(trace, cfg);
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> jitter(-cfg.jitter_s, cfg.jitter_s);
  PacketTrace out = trace;
  double prev = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < out.size(); ++k) {
    Packet& p = out.packets[k];
    const double j = cfg.jitter_s > 0.0 ? jitter(rng) : 0.0;
    double arrive = depart[k] + cfg.delay_s + j;
    arrive = std::max({arrive, prev, p.send_t_s});
    p.arrive_t_s = csv::quantize_ns(arrive);
    prev = p.arrive_t_s;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Packet trace CSV: send_t_s,arrive_t_s,size_bytes,node_id[,frame_idx,last_pkt]

inline void export_trace(const PacketTrace& trace, const std::string& path, bool labeled) {
  if (labeled && !trace.labeled) throw InvalidConfig("cannot export labels of an unlabeled trace");
  auto out = csv::open_out(path);
  out << "send_t_s,arrive_t_s,size_bytes,node_id";
  if (labeled) out << ",frame_idx,last_pkt";
  out << '\n';
  for (const auto& p : trace.packets) {
    out << csv::fixed9(p.send_t_s) << ',' << csv::fixed9(p.arrive_t_s) << ',' << p.size_bytes << ','
        << p.node_id;
    if (labeled) out << ',' << p.frame_idx << ',' << (p.last_pkt ? 1 : 0);
    out << '\n';
  }
}

inline PacketTrace import_trace(const std::string& path) {
  auto in = csv::open_in(path);
  csv::Reader reader(in);
  const auto col = reader.require({"send_t_s", "arrive_t_s", "size_bytes", "node_id"});
  const bool has_frame = reader.has_column("frame_idx");
  const bool has_last = reader.has_column("last_pkt");
  if (has_frame != has_last) throw SchemaError("frame_idx and last_pkt must appear together");
  std::vector<std::size_t> label_col;
  if (has_frame) label_col = reader.require({"frame_idx", "last_pkt"});

  PacketTrace trace;
  trace.labeled = has_frame;
  std::map<std::int64_t, int> last_per_frame;
  std::map<std::int64_t, std::size_t> frame_line;
  std::vector<std::string> f;
  while (reader.next(f)) {
    const auto line = reader.line();
    Packet p;
    p.send_t_s = csv::to_double(f[col[0]], line);
    p.arrive_t_s = csv::to_double(f[col[1]], line);
    p.size_bytes = csv::to_int(f[col[2]], line);
    p.node_id = static_cast<int>(csv::to_int(f[col[3]], line));
    if (p.size_bytes <= 0) throw InvariantError("size_bytes must be positive", line);
    if (p.arrive_t_s < p.send_t_s) throw InvariantError("arrival precedes send time", line);
    if (!trace.empty()) {
      const Packet& prev = trace.packets.back();
      if (p.arrive_t_s < prev.arrive_t_s) throw InvariantError("arrival times must be non-decreasing", line);
      if (p.node_id != prev.node_id) throw InvariantError("a trace file holds a single node", line);
    }
    if (has_frame) {
      p.frame_idx = csv::to_int(f[label_col[0]], line);
      const long long last = csv::to_int(f[label_col[1]], line);
      if (last != 0 && last != 1) throw ParseError("last_pkt must be 0 or 1", line);
      if (p.frame_idx < 0) throw InvariantError("frame_idx must be non-negative", line);
      p.last_pkt = last == 1;
      last_per_frame[p.frame_idx] += last;
      frame_line[p.frame_idx] = line;
    }
    trace.packets.push_back(p);
  }
  for (const auto& [frame, count] : last_per_frame)
    if (count != 1)
      throw InvariantError("frame " + std::to_string(frame) + " needs exactly one last packet",
                           frame_line[frame]);
  return trace;
}

}  // namespace pktrack
