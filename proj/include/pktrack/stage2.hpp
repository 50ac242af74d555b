// Window labels, the recurrent state-token tracker with visibility and
// position heads, the frame-size-to-area regressor and the analytic tracking
// path built on it.

#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "pktrack/codec.hpp"
#include "pktrack/csv.hpp"
#include "pktrack/error.hpp"
#include "pktrack/geometry.hpp"
#include "pktrack/nn/checkpoint.hpp"
#include "pktrack/nn/layers.hpp"
#include "pktrack/nn/optim.hpp"
#include "pktrack/scenesim.hpp"

namespace pktrack {

inline void to_json(nlohmann::json& j, const Rect& r) {
  j = {{"x_min_m", r.x_min}, {"x_max_m", r.x_max}, {"y_min_m", r.y_min}, {"y_max_m", r.y_max}};
}
inline void from_json(const nlohmann::json& j, Rect& r) {
  r.x_min = j.at("x_min_m").get<double>();
  r.x_max = j.at("x_max_m").get<double>();
  r.y_min = j.at("y_min_m").get<double>();
  r.y_max = j.at("y_max_m").get<double>();
}

struct Stage2Config {
  int t_in = 20;
  int t_stride = 10;
  int t_avg = 6;
  double tau = 5.0 / 6.0;
  int f_detach = 4;
  double lambda_fov = 1.0;
  double lambda_pos = 1.0;
  nn::EncoderConfig encoder{8, 128, 512, 4};
  int n_gray = 4;
  int n_blue = 0;
  bool use_state = true;  // false resets the state token every window
  int epochs = 10;
  double lr_encoder = 2e-5;
  double lr_heads = 1e-4;
  double clip_grad_norm = 1.0;
  std::uint64_t seed = 1;

  /// Reduced encoder (2 layers, width 32, feed-forward 64, 2 heads) with
  /// learning rates sized for short training runs.
  static Stage2Config desk() {
    Stage2Config c;
    c.encoder = {2, 32, 64, 2};
    c.lr_encoder = 1e-3;
    c.lr_heads = 1e-3;
    return c;
  }

  void validate() const {
    if (t_in < 1 || t_stride < 1 || t_avg < 1) throw InvalidConfig("stage-2 window sizes must be positive");
    if (t_avg > t_in) throw InvalidConfig("T_avg must not exceed T_in");
    if (t_stride > t_in) throw InvalidConfig("T_stride must not exceed T_in");
    if (!(tau > 0.0 && tau <= 1.0)) throw InvalidConfig("tau must lie in (0, 1]");
    if (f_detach < 1) throw InvalidConfig("f_detach must be positive");
    if (lambda_fov < 0.0 || lambda_pos < 0.0) throw InvalidConfig("loss weights must be non-negative");
    if (n_gray < 0 || n_blue < 0 || n_gray + n_blue < 1) throw InvalidConfig("stage 2 needs at least one node");
    if (epochs < 0) throw InvalidConfig("epochs must be non-negative");
    if (!(lr_encoder > 0.0) || !(lr_heads > 0.0)) throw InvalidConfig("learning rates must be positive");
    encoder.validate();
  }
};

inline void to_json(nlohmann::json& j, const Stage2Config& c) {
  j = {{"t_in", c.t_in},
       {"t_stride", c.t_stride},
       {"t_avg", c.t_avg},
       {"tau", c.tau},
       {"f_detach", c.f_detach},
       {"lambda_fov", c.lambda_fov},
       {"lambda_pos", c.lambda_pos},
       {"encoder", c.encoder},
       {"n_gray", c.n_gray},
       {"n_blue", c.n_blue},
       {"use_state", c.use_state},
       {"epochs", c.epochs},
       {"lr_encoder", c.lr_encoder},
       {"lr_heads", c.lr_heads},
       {"clip_grad_norm", c.clip_grad_norm},
       {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, Stage2Config& c) {
  c.t_in = j.value("t_in", c.t_in);
  c.t_stride = j.value("t_stride", c.t_stride);
  c.t_avg = j.value("t_avg", c.t_avg);
  c.tau = j.value("tau", c.tau);
  c.f_detach = j.value("f_detach", c.f_detach);
  c.lambda_fov = j.value("lambda_fov", c.lambda_fov);
  c.lambda_pos = j.value("lambda_pos", c.lambda_pos);
  if (j.contains("encoder")) c.encoder = j.at("encoder").get<nn::EncoderConfig>();
  c.n_gray = j.value("n_gray", c.n_gray);
  c.n_blue = j.value("n_blue", c.n_blue);
  c.use_state = j.value("use_state", c.use_state);
  c.epochs = j.value("epochs", c.epochs);
  c.lr_encoder = j.value("lr_encoder", c.lr_encoder);
  c.lr_heads = j.value("lr_heads", c.lr_heads);
  c.clip_grad_norm = j.value("clip_grad_norm", c.clip_grad_norm);
  c.seed = j.value("seed", c.seed);
}

// ---------------------------------------------------------------------------
// Labels

struct TrackWindowLabel {
  double r = 0.0;               // visible fraction over [t_n, t_n + T_avg)
  std::optional<Vec2> p_avg;    // mean position over visible frames, meters
};

/// Windows start at n * T_stride and need T_in frames.
inline std::size_t window_count(std::size_t frames, const Stage2Config& cfg) {
  if (frames < static_cast<std::size_t>(cfg.t_in)) return 0;
  return (frames - static_cast<std::size_t>(cfg.t_in)) / static_cast<std::size_t>(cfg.t_stride) + 1;
}

inline std::vector<TrackWindowLabel> make_labels(const GroundTruthTrack& track, const Stage2Config& cfg) {
  cfg.validate();
  if (track.size() < static_cast<std::size_t>(cfg.t_in))
    throw TrackTooShort("track has " + std::to_string(track.size()) + " frames, T_in is " +
                        std::to_string(cfg.t_in));
  std::vector<TrackWindowLabel> out;
  for (std::size_t n = 0; n < window_count(track.size(), cfg); ++n) {
    const std::size_t t0 = n * static_cast<std::size_t>(cfg.t_stride);
    int visible = 0;
    Vec2 acc = Vec2::Zero();
    for (std::size_t t = t0; t < t0 + static_cast<std::size_t>(cfg.t_avg); ++t) {
      if (!track.any_visible(t)) continue;
      ++visible;
      acc += Vec2(track.positions[t].x(), track.positions[t].y());
    }
    TrackWindowLabel l;
    l.r = static_cast<double>(visible) / cfg.t_avg;
    if (visible > 0) l.p_avg = acc / visible;
    out.push_back(l);
  }
  return out;
}

/// r_n >= tau with slack for rounding when tau is a ratio like 5/6.
inline bool passes_tau(double r, double tau) { return r >= tau - 1e-12; }

// ---------------------------------------------------------------------------
// Observations and tokens

using BlueFeature = std::array<double, 4>;

/// Per-frame surrogate detection features: visible flag, centroid u and v
/// divided by the image extent, area divided by the image area.
inline std::vector<BlueFeature> blue_features(const CameraRender& render, const CameraModel& cam) {
  const double w = 2.0 * cam.half_width(), h = 2.0 * cam.half_height();
  std::vector<BlueFeature> out(render.area.size(), BlueFeature{0, 0, 0, 0});
  for (std::size_t t = 0; t < out.size(); ++t) {
    if (!(render.area[t] > 0.0) || !render.centroid[t]) continue;
    out[t] = {1.0, render.centroid[t]->x() / w, render.centroid[t]->y() / h, render.area[t] / (w * h)};
  }
  return out;
}

struct NodeObservations {
  std::vector<std::vector<double>> gray_bytes;  // [gray node][frame]
  std::vector<std::vector<BlueFeature>> blue;   // [blue node][frame]

  std::size_t frames() const {
    std::size_t n = std::numeric_limits<std::size_t>::max();
    for (const auto& g : gray_bytes) n = std::min(n, g.size());
    for (const auto& b : blue) n = std::min(n, b.size());
    return n == std::numeric_limits<std::size_t>::max() ? 0 : n;
  }
};

/// Aligns a reconstructed frame-size sequence to a frame count by index,
/// truncating extra frames and padding missing ones with zeros.
inline std::vector<double> align_frame_sizes(const FrameSizeSequence& seq, std::size_t frames) {
  std::vector<double> out(frames, 0.0);
  for (std::size_t i = 0; i < std::min(frames, seq.size()); ++i)
    out[i] = static_cast<double>(seq.frames[i].size_bytes);
  return out;
}

/// Per-gray-node z-score of log(1 + bytes), fitted on training data.
struct GrayNormalizer {
  std::vector<double> mean, std;

  static GrayNormalizer fit(const std::vector<const NodeObservations*>& data, int n_gray) {
    GrayNormalizer g;
    g.mean.assign(static_cast<std::size_t>(n_gray), 0.0);
    g.std.assign(static_cast<std::size_t>(n_gray), 1.0);
    for (int k = 0; k < n_gray; ++k) {
      double s = 0.0, ss = 0.0, n = 0.0;
      for (const auto* d : data)
        for (double b : d->gray_bytes.at(static_cast<std::size_t>(k))) {
          const double v = std::log1p(b);
          s += v;
          ss += v * v;
          n += 1.0;
        }
      if (n == 0.0) continue;
      g.mean[k] = s / n;
      const double var = ss / n - g.mean[k] * g.mean[k];
      g.std[k] = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
    return g;
  }
  double apply(int node, double bytes) const { return (std::log1p(bytes) - mean[node]) / std[node]; }
};

inline void to_json(nlohmann::json& j, const GrayNormalizer& g) { j = {{"mean", g.mean}, {"std", g.std}}; }
inline void from_json(const nlohmann::json& j, GrayNormalizer& g) {
  g.mean = j.at("mean").get<std::vector<double>>();
  g.std = j.at("std").get<std::vector<double>>();
}

// ---------------------------------------------------------------------------
// Losses

struct Stage2Losses {
  nn::Tensor fov, pos, sum;
};

/// L_fov = BCE(sigmoid(fov_logit), r); L_pos = |p_hat - p|^2 when r >= tau,
/// else 0; L_sum = lambda_fov L_fov + lambda_pos L_pos. Positions are in the
/// normalized frame the caller trains in.
inline Stage2Losses stage2_losses(const nn::Tensor& fov_logit, const nn::Tensor& p_hat,
                                  const TrackWindowLabel& label, const Stage2Config& cfg) {
  if (fov_logit.rows() != 1 || fov_logit.cols() != 1 || p_hat.rows() != 1 || p_hat.cols() != 2)
    throw ShapeError("stage-2 loss expects a 1x1 logit and a 1x2 position");
  if (!(label.r >= 0.0 && label.r <= 1.0)) throw InvalidConfig("label r must lie in [0, 1]");
  Stage2Losses l;
  l.fov = nn::bce_with_logits(fov_logit, nn::Mat::Constant(1, 1, label.r), nn::Mat::Ones(1, 1));
  if (passes_tau(label.r, cfg.tau) && label.p_avg) {
    nn::Mat target(1, 2);
    target << label.p_avg->x(), label.p_avg->y();
    const nn::Tensor d = nn::sub(p_hat, nn::Tensor(target));
    l.pos = nn::sum(nn::mul(d, d));
  } else {
    l.pos = nn::Tensor(nn::Mat::Zero(1, 1));
  }
  l.sum = nn::add(nn::scale(l.fov, cfg.lambda_fov), nn::scale(l.pos, cfg.lambda_pos));
  return l;
}

// ---------------------------------------------------------------------------
// Tracker

struct TrackerStep {
  nn::Tensor fov_logit;  // 1 x 1
  nn::Tensor pos;        // 1 x 2, normalized region coordinates
  nn::Tensor state;      // 1 x embed_dim
};

class TrackerModel {
 public:
  TrackerModel(const Stage2Config& cfg, const Rect& region, GrayNormalizer norm, std::uint64_t seed = 1)
      : cfg_(cfg), region_(region), norm_(std::move(norm)), seed_(seed), store_(seed) {
    cfg_.validate();
    if (region_.empty()) throw InvalidConfig("tracker region is empty");
    if (static_cast<int>(norm_.mean.size()) != cfg_.n_gray) {
      norm_.mean.assign(static_cast<std::size_t>(cfg_.n_gray), 0.0);
      norm_.std.assign(static_cast<std::size_t>(cfg_.n_gray), 1.0);
    }
    const int e = cfg_.encoder.embed_dim;
    gray_in_ = nn::Linear(store_, "s2.gray_in", 1, e, "encoder");
    blue_in_ = nn::Linear(store_, "s2.blue_in", 4, e, "encoder");
    time_ = nn::Embedding(store_, "s2.time", cfg_.t_in, e, "encoder");
    node_ = nn::Embedding(store_, "s2.node", cfg_.n_gray + cfg_.n_blue, e, "encoder");
    slot_ = nn::Embedding(store_, "s2.state_slot", 1, e, "encoder");
    encoder_ = nn::Encoder(store_, "s2.enc", cfg_.encoder, "encoder");
    fov_head_ = nn::MlpHead(store_, "s2.fov_head", e, e, 1, "heads");
    pos_head_ = nn::MlpHead(store_, "s2.pos_head", e, e, 2, "heads");
  }
  TrackerModel(const TrackerModel&) = delete;
  TrackerModel& operator=(const TrackerModel&) = delete;
  TrackerModel(TrackerModel&&) = default;

  nn::Tensor zero_state() const { return nn::Tensor(nn::Mat::Zero(1, cfg_.encoder.embed_dim)); }

  /// One window of T_in frames starting at `start`, attending over the state
  /// token and every node token.
  TrackerStep forward(const NodeObservations& obs, std::size_t start, const nn::Tensor& state) const {
    if (static_cast<int>(obs.gray_bytes.size()) != cfg_.n_gray || static_cast<int>(obs.blue.size()) != cfg_.n_blue)
      throw ShapeError("observation node counts do not match the tracker config");
    if (state.rows() != 1 || state.cols() != cfg_.encoder.embed_dim) throw ShapeError("state must be 1 x embed_dim");
    const int t_in = cfg_.t_in;
    if (start + static_cast<std::size_t>(t_in) > obs.frames()) throw ShapeError("window exceeds the observed frames");

    std::vector<nn::Tensor> rows{nn::add(state, slot_({0}))};
    if (cfg_.n_gray > 0) {
      nn::Mat g(cfg_.n_gray * t_in, 1);
      std::vector<int> ti, ni;
      for (int k = 0; k < cfg_.n_gray; ++k)
        for (int i = 0; i < t_in; ++i) {
          g(k * t_in + i, 0) = norm_.apply(k, obs.gray_bytes[k][start + i]);
          ti.push_back(i);
          ni.push_back(k);
        }
      rows.push_back(nn::add(gray_in_(nn::Tensor(g)), nn::add(time_(ti), node_(ni))));
    }
    if (cfg_.n_blue > 0) {
      nn::Mat b(cfg_.n_blue * t_in, 4);
      std::vector<int> ti, ni;
      for (int k = 0; k < cfg_.n_blue; ++k)
        for (int i = 0; i < t_in; ++i) {
          const BlueFeature& f = obs.blue[k][start + i];
          for (int c = 0; c < 4; ++c) b(k * t_in + i, c) = f[c];
          ti.push_back(i);
          ni.push_back(cfg_.n_gray + k);
        }
      rows.push_back(nn::add(blue_in_(nn::Tensor(b)), nn::add(time_(ti), node_(ni))));
    }
    const nn::Tensor x = nn::concat_rows(rows);
    const nn::Tensor h = encoder_(x, std::vector<bool>(static_cast<std::size_t>(x.rows()), true));
    TrackerStep out;
    out.state = nn::slice_rows(h, 0, 1);
    out.fov_logit = fov_head_(out.state);
    out.pos = pos_head_(out.state);
    return out;
  }

  Vec2 normalize(const Vec2& p) const {
    return {2.0 * (p.x() - region_.x_min) / region_.width() - 1.0,
            2.0 * (p.y() - region_.y_min) / region_.height() - 1.0};
  }
  Vec2 denormalize(const Vec2& q) const {
    return {region_.x_min + 0.5 * (q.x() + 1.0) * region_.width(),
            region_.y_min + 0.5 * (q.y() + 1.0) * region_.height()};
  }
  TrackWindowLabel normalize(const TrackWindowLabel& l) const {
    TrackWindowLabel out = l;
    if (l.p_avg) out.p_avg = normalize(*l.p_avg);
    return out;
  }

  const Stage2Config& config() const { return cfg_; }
  const Rect& region() const { return region_; }
  const GrayNormalizer& normalizer() const { return norm_; }
  std::uint64_t seed() const { return seed_; }
  nn::ParamStore& params() { return store_; }
  const nn::ParamStore& params() const { return store_; }

  void save(const std::string& path) const {
    nn::Checkpoint c;
    c.kind = "stage2";
    c.config = cfg_;
    c.seed = seed_;
    c.extra = {{"region", region_}, {"gray_normalizer", norm_}};
    c.tensors = store_.snapshot();
    nn::save_checkpoint(c, path);
  }
  static TrackerModel load(const std::string& path) {
    const nn::Checkpoint c = nn::load_checkpoint(path, "stage2");
    if (!c.extra.contains("region") || !c.extra.contains("gray_normalizer"))
      throw SchemaError("stage-2 checkpoint lacks region or normalizer");
    TrackerModel m(c.config.get<Stage2Config>(), c.extra.at("region").get<Rect>(),
                   c.extra.at("gray_normalizer").get<GrayNormalizer>(), c.seed);
    m.store_.load(c.tensors);
    return m;
  }

 private:
  Stage2Config cfg_;
  Rect region_;
  GrayNormalizer norm_;
  std::uint64_t seed_;
  nn::ParamStore store_;
  nn::Linear gray_in_, blue_in_;
  nn::Embedding time_, node_, slot_;
  nn::Encoder encoder_;
  nn::MlpHead fov_head_, pos_head_;
};

struct Stage2Sequence {
  NodeObservations obs;
  std::vector<TrackWindowLabel> labels;  // meters
};

struct ChunkResult {
  nn::Tensor loss;       // cumulative L_sum over the chunk
  nn::Tensor state;      // state leaving the last window
  std::size_t windows = 0;
};

/// Runs windows [first, first + count) from `state`, summing L_sum. Without
/// the state token every window starts from the zero state.
inline ChunkResult tracker_chunk(const TrackerModel& model, const Stage2Sequence& seq, std::size_t first,
                                 std::size_t count, nn::Tensor state) {
  const Stage2Config& cfg = model.config();
  ChunkResult r;
  r.loss = nn::Tensor(nn::Mat::Zero(1, 1));
  for (std::size_t n = first; n < std::min(first + count, seq.labels.size()); ++n) {
    const TrackerStep step =
        model.forward(seq.obs, n * static_cast<std::size_t>(cfg.t_stride), cfg.use_state ? state : model.zero_state());
    r.loss = nn::add(r.loss, stage2_losses(step.fov_logit, step.pos, model.normalize(seq.labels[n]), cfg).sum);
    state = step.state;
    ++r.windows;
  }
  r.state = state;
  return r;
}

struct Stage2TrainResult {
  std::vector<double> epoch_loss;  // mean window L_sum per epoch
};

/// Per sequence: the state starts at zero; every f_detach windows the
/// accumulated loss is back-propagated, a step is taken and the state is
/// detached.
inline Stage2TrainResult stage2_train(TrackerModel& model, const std::vector<Stage2Sequence>& data,
                                      int first_epoch = 0, int schedule_epochs = -1) {
  if (data.empty()) throw EmptyDataset("stage-2 training needs at least one sequence");
  const Stage2Config& cfg = model.config();
  if (schedule_epochs < 0) schedule_epochs = first_epoch + cfg.epochs;
  for (const auto& s : data)
    if (s.labels.size() > window_count(s.obs.frames(), cfg))
      throw ShapeError("more labels than windows in a stage-2 sequence");

  nn::AdamConfig acfg;
  acfg.group_lr = {{"encoder", cfg.lr_encoder}, {"heads", cfg.lr_heads}};
  acfg.clip_grad_norm = cfg.clip_grad_norm;
  nn::Adam opt(model.params(), acfg);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Stage2TrainResult result;
  for (int epoch = first_epoch; epoch < first_epoch + cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    opt.set_lr_scale(nn::cosine_lr_scale(epoch, schedule_epochs));
    double total = 0.0;
    std::size_t windows = 0;
    for (std::size_t k : order) {
      const Stage2Sequence& seq = data[k];
      nn::Tensor state = model.zero_state();
      for (std::size_t n = 0; n < seq.labels.size(); n += static_cast<std::size_t>(cfg.f_detach)) {
        ChunkResult c = tracker_chunk(model, seq, n, static_cast<std::size_t>(cfg.f_detach), state);
        total += c.loss.item();
        windows += c.windows;
        c.loss.backward();
        opt.step();
        state = c.state.detach();
      }
    }
    result.epoch_loss.push_back(windows ? total / static_cast<double>(windows) : 0.0);
  }
  return result;
}

struct TrackerPrediction {
  std::size_t window_idx = 0;
  double t_start_s = 0.0;
  double y_fov = 0.0;
  std::optional<Vec2> pos;  // meters; absent when y_fov < tau
};

/// Called per window with the state entering and leaving it.
using StateHook = std::function<void(std::size_t window, const nn::Mat& state_in, const nn::Mat& state_out)>;

inline std::vector<TrackerPrediction> stage2_infer(const TrackerModel& model, const NodeObservations& obs,
                                                   double fps, const StateHook& hook = {}) {
  const Stage2Config& cfg = model.config();
  std::vector<TrackerPrediction> out;
  nn::Tensor state = model.zero_state();
  for (std::size_t n = 0; n < window_count(obs.frames(), cfg); ++n) {
    const std::size_t start = n * static_cast<std::size_t>(cfg.t_stride);
    const nn::Tensor in = cfg.use_state ? state : model.zero_state();
    const TrackerStep step = model.forward(obs, start, in);
    if (hook) hook(n, in.value(), step.state.value());
    TrackerPrediction p;
    p.window_idx = n;
    p.t_start_s = csv::quantize_ns(static_cast<double>(start) / fps);
    p.y_fov = 1.0 / (1.0 + std::exp(-step.fov_logit.item()));
    if (p.y_fov >= cfg.tau) p.pos = model.denormalize(Vec2(step.pos.value()(0, 0), step.pos.value()(0, 1)));
    out.push_back(p);
    state = step.state.detach();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Predictions CSV: window_idx,t_start_s,y_fov,x_m,y_m,tracked

inline void export_predictions(const std::vector<TrackerPrediction>& preds, const std::string& path) {
  auto out = csv::open_out(path);
  out << "window_idx,t_start_s,y_fov,x_m,y_m,tracked\n";
  for (const auto& p : preds) {
    out << p.window_idx << ',' << csv::fixed9(p.t_start_s) << ',' << csv::exact(p.y_fov) << ',';
    if (p.pos) out << csv::exact(p.pos->x()) << ',' << csv::exact(p.pos->y()) << ",1\n";
    else out << ",,0\n";
  }
}

inline std::vector<TrackerPrediction> import_predictions(const std::string& path) {
  auto in = csv::open_in(path);
  csv::Reader reader(in);
  const auto col = reader.require({"window_idx", "t_start_s", "y_fov", "x_m", "y_m", "tracked"});
  std::vector<TrackerPrediction> out;
  std::vector<std::string> f;
  while (reader.next(f)) {
    const auto line = reader.line();
    TrackerPrediction p;
    const long long idx = csv::to_int(f[col[0]], line);
    if (idx < 0) throw InvariantError("window_idx must be non-negative", line);
    p.window_idx = static_cast<std::size_t>(idx);
    p.t_start_s = csv::to_double(f[col[1]], line);
    p.y_fov = csv::to_double(f[col[2]], line);
    if (!(p.y_fov >= 0.0 && p.y_fov <= 1.0)) throw InvariantError("y_fov outside [0, 1]", line);
    const long long tracked = csv::to_int(f[col[5]], line);
    if (tracked != 0 && tracked != 1) throw ParseError("tracked must be 0 or 1", line);
    if (tracked == 1) {
      p.pos = Vec2(csv::to_double(f[col[3]], line), csv::to_double(f[col[4]], line));
    } else if (!f[col[3]].empty() || !f[col[4]].empty()) {
      throw InvariantError("untracked window carries a position", line);
    }
    out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Frame-size to area regressor

struct AreaRegressorConfig {
  int window_len = 32;  // frames; one GOP plus margin so each window holds an I-frame
  int window_stride = 16;
  nn::EncoderConfig encoder{2, 32, 64, 2};
  int gop_length = 30;
  int epochs = 10;
  double learning_rate = 1e-3;
  std::uint64_t seed = 1;

  void validate() const {
    if (window_len < 1 || window_stride < 1 || window_stride > window_len)
      throw InvalidConfig("area regressor windows need 1 <= stride <= length");
    if (gop_length < 1) throw InvalidConfig("gop_length must be >= 1");
    if (epochs < 0 || !(learning_rate > 0.0)) throw InvalidConfig("invalid area regressor training settings");
    encoder.validate();
  }
};

inline void to_json(nlohmann::json& j, const AreaRegressorConfig& c) {
  j = {{"window_len", c.window_len}, {"window_stride", c.window_stride}, {"encoder", c.encoder},
       {"gop_length", c.gop_length}, {"epochs", c.epochs},               {"learning_rate", c.learning_rate},
       {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, AreaRegressorConfig& c) {
  c.window_len = j.value("window_len", c.window_len);
  c.window_stride = j.value("window_stride", c.window_stride);
  if (j.contains("encoder")) c.encoder = j.at("encoder").get<nn::EncoderConfig>();
  c.gop_length = j.value("gop_length", c.gop_length);
  c.epochs = j.value("epochs", c.epochs);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.seed = j.value("seed", c.seed);
}

/// One node's frame sizes paired with its rasterized silhouette areas.
struct AreaSample {
  std::vector<double> bytes;
  std::vector<double> area;  // image-plane units^2; empty when unlabeled
};

/// Input and output scales of the area regressor, fitted on training data.
struct AreaScales {
  double log_mean = 0.0;
  double log_std = 1.0;
  double bytes_scale = 1.0;  // largest training frame size
  double area_scale = 1.0;   // largest training area

  static AreaScales fit(const std::vector<AreaSample>& data) {
    double s = 0.0, ss = 0.0, n = 0.0, bmax = 0.0, amax = 0.0;
    for (const auto& d : data) {
      for (double b : d.bytes) {
        const double v = std::log1p(b);
        s += v;
        ss += v * v;
        n += 1.0;
        bmax = std::max(bmax, b);
      }
      for (double a : d.area) amax = std::max(amax, a);
    }
    if (n == 0.0) throw EmptyDataset("area regressor needs frame sizes");
    AreaScales sc;
    sc.log_mean = s / n;
    const double var = ss / n - sc.log_mean * sc.log_mean;
    sc.log_std = var > 1e-12 ? std::sqrt(var) : 1.0;
    sc.bytes_scale = bmax > 0.0 ? bmax : 1.0;
    sc.area_scale = amax > 0.0 ? amax : 1.0;
    return sc;
  }
};

inline void to_json(nlohmann::json& j, const AreaScales& s) {
  j = {{"log_mean", s.log_mean}, {"log_std", s.log_std}, {"bytes_scale", s.bytes_scale}, {"area_scale", s.area_scale}};
}
inline void from_json(const nlohmann::json& j, AreaScales& s) {
  s.log_mean = j.at("log_mean").get<double>();
  s.log_std = j.at("log_std").get<double>();
  s.bytes_scale = j.at("bytes_scale").get<double>();
  s.area_scale = j.at("area_scale").get<double>();
}

/// Shared per-frame regressor: tokens are (z-scored log size, size over the
/// largest training size, I-frame flag) plus a learned in-window position;
/// the head emits area / area_scale.
class AreaRegressor {
 public:
  AreaRegressor(const AreaRegressorConfig& cfg, const AreaScales& scales, std::uint64_t seed = 1)
      : cfg_(cfg), scales_(scales), seed_(seed), store_(seed) {
    cfg_.validate();
    if (!(scales_.log_std > 0.0) || !(scales_.bytes_scale > 0.0) || !(scales_.area_scale > 0.0))
      throw InvalidConfig("area regressor scales must be positive");
    const int e = cfg_.encoder.embed_dim;
    input_ = nn::Linear(store_, "area.input", 3, e, "encoder");
    pos_ = nn::Embedding(store_, "area.pos", cfg_.window_len, e, "encoder");
    encoder_ = nn::Encoder(store_, "area.enc", cfg_.encoder, "encoder");
    head_ = nn::MlpHead(store_, "area.head", e, e, 1, "heads");
  }
  AreaRegressor(const AreaRegressor&) = delete;
  AreaRegressor& operator=(const AreaRegressor&) = delete;
  AreaRegressor(AreaRegressor&&) = default;

  /// Normalized-area predictions for frames [start, start + n_valid).
  nn::Tensor forward(const std::vector<double>& bytes, std::size_t start) const {
    const int len = cfg_.window_len;
    const int n_valid = static_cast<int>(std::min<std::size_t>(len, bytes.size() - std::min(start, bytes.size())));
    if (n_valid == 0) throw ShapeError("area window starts past the sequence end");
    nn::Mat x = nn::Mat::Zero(len, 3);
    for (int i = 0; i < n_valid; ++i) {
      const double b = bytes[start + i];
      x(i, 0) = (std::log1p(b) - scales_.log_mean) / scales_.log_std;
      x(i, 1) = b / scales_.bytes_scale;
      x(i, 2) = (start + i) % static_cast<std::size_t>(cfg_.gop_length) == 0 ? 1.0 : 0.0;
    }
    std::vector<int> idx(static_cast<std::size_t>(len));
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<bool> valid(static_cast<std::size_t>(len), false);
    std::fill(valid.begin(), valid.begin() + n_valid, true);
    const nn::Tensor h = encoder_(nn::add(input_(nn::Tensor(x)), pos_(idx)), valid);
    return head_(nn::slice_rows(h, 0, n_valid));
  }

  /// Window-averaged per-frame area estimates (image-plane units^2, >= 0).
  std::vector<double> predict(const std::vector<double>& bytes) const {
    if (bytes.empty()) throw EmptySequence("area prediction on an empty sequence");
    std::vector<double> acc(bytes.size(), 0.0), cnt(bytes.size(), 0.0);
    for (std::size_t s : starts(bytes.size())) {
      const nn::Mat y = forward(bytes, s).value();
      for (Eigen::Index i = 0; i < y.rows(); ++i) {
        acc[s + i] += y(i, 0);
        cnt[s + i] += 1.0;
      }
    }
    for (std::size_t t = 0; t < acc.size(); ++t) acc[t] = std::max(0.0, acc[t] / cnt[t] * scales_.area_scale);
    return acc;
  }

  std::vector<std::size_t> starts(std::size_t n) const {
    std::vector<std::size_t> s{0};
    while (s.back() + static_cast<std::size_t>(cfg_.window_len) < n) s.push_back(s.back() + cfg_.window_stride);
    return s;
  }

  const AreaRegressorConfig& config() const { return cfg_; }
  const AreaScales& scales() const { return scales_; }
  double area_scale() const { return scales_.area_scale; }
  nn::ParamStore& params() { return store_; }
  const nn::ParamStore& params() const { return store_; }

  void save(const std::string& path) const {
    nn::Checkpoint c;
    c.kind = "area";
    c.config = cfg_;
    c.seed = seed_;
    c.extra = {{"scales", scales_}};
    c.tensors = store_.snapshot();
    nn::save_checkpoint(c, path);
  }
  static AreaRegressor load(const std::string& path) {
    const nn::Checkpoint c = nn::load_checkpoint(path, "area");
    if (!c.extra.contains("scales")) throw SchemaError("area checkpoint lacks scales");
    AreaRegressor m(c.config.get<AreaRegressorConfig>(), c.extra.at("scales").get<AreaScales>(), c.seed);
    m.store_.load(c.tensors);
    return m;
  }

  /// Builds a regressor whose input and output scales come from `data`.
  static AreaRegressor for_data(const AreaRegressorConfig& cfg, const std::vector<AreaSample>& data,
                                std::uint64_t seed = 1) {
    return AreaRegressor(cfg, AreaScales::fit(data), seed);
  }

 private:
  AreaRegressorConfig cfg_;
  AreaScales scales_;
  std::uint64_t seed_;
  nn::ParamStore store_;
  nn::Linear input_;
  nn::Embedding pos_;
  nn::Encoder encoder_;
  nn::MlpHead head_;
};

/// Per-window Adam steps on the mean squared error of normalized areas.
inline std::vector<double> train_area_regressor(AreaRegressor& model, const std::vector<AreaSample>& data) {
  const AreaRegressorConfig& cfg = model.config();
  struct Item {
    std::size_t sample, start;
  };
  std::vector<Item> items;
  for (std::size_t k = 0; k < data.size(); ++k) {
    if (data[k].area.size() != data[k].bytes.size()) throw NoLabels("area sample lacks per-frame areas");
    if (data[k].bytes.empty()) continue;
    for (std::size_t s : model.starts(data[k].bytes.size())) items.push_back({k, s});
  }
  if (items.empty()) throw EmptyDataset("area regressor training set is empty");
  nn::AdamConfig acfg;
  acfg.default_lr = cfg.learning_rate;
  nn::Adam opt(model.params(), acfg);
  std::mt19937_64 rng(cfg.seed);
  std::vector<double> losses;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(items.begin(), items.end(), rng);
    opt.set_lr_scale(nn::cosine_lr_scale(epoch, cfg.epochs));
    double total = 0.0;
    for (const Item& it : items) {
      const AreaSample& d = data[it.sample];
      const nn::Tensor y = model.forward(d.bytes, it.start);
      nn::Mat target(y.rows(), 1);
      for (Eigen::Index i = 0; i < y.rows(); ++i) target(i, 0) = d.area[it.start + i] / model.area_scale();
      const nn::Tensor diff = nn::sub(y, nn::Tensor(target));
      const nn::Tensor loss = nn::mean(nn::mul(diff, diff));
      total += loss.item();
      loss.backward();
      opt.step();
    }
    losses.push_back(total / static_cast<double>(items.size()));
  }
  return losses;
}

/// Mean relative area error over frames whose true area exceeds
/// min_fraction of the regressor's area scale.
inline double area_relative_error(const std::vector<double>& pred, const std::vector<double>& truth,
                                  double area_scale, double min_fraction = 0.05) {
  if (pred.size() != truth.size()) throw AlignmentError("area sequences differ in length");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < truth.size(); ++t) {
    if (truth[t] <= min_fraction * area_scale) continue;
    s += std::abs(pred[t] - truth[t]) / truth[t];
    ++n;
  }
  if (n == 0) throw EmptySequence("no frames with a visible silhouette");
  return s / static_cast<double>(n);
}

struct GeometricTrackOptions {
  double min_area = 1.0;  // image-plane units^2; smaller estimates are treated as unseen
  LocalizeOptions solver;
};

/// Per window, localizes each frame in [t_n, t_n + T_avg) from the per-node
/// areas (previous solution as the starting point, region centroid first)
/// and averages the solutions; windows with no solvable frame are untracked.
inline std::vector<std::optional<Vec2>> geometric_track(const std::vector<std::vector<double>>& node_areas,
                                                        const std::vector<CameraModel>& cams, double radius,
                                                        double z_known, const Rect& region,
                                                        const Stage2Config& cfg,
                                                        const GeometricTrackOptions& opt = {}) {
  if (node_areas.size() != cams.size()) throw ShapeError("one area sequence per camera is required");
  if (cams.size() < 2) throw DegenerateGeometry("geometric tracking needs at least two cameras");
  std::size_t frames = std::numeric_limits<std::size_t>::max();
  for (const auto& a : node_areas) frames = std::min(frames, a.size());
  Vec3 init(region.center().x(), region.center().y(), z_known);
  std::vector<std::optional<Vec2>> out;
  for (std::size_t n = 0; n < window_count(frames, cfg); ++n) {
    const std::size_t t0 = n * static_cast<std::size_t>(cfg.t_stride);
    Vec2 acc = Vec2::Zero();
    int solved = 0;
    for (std::size_t t = t0; t < t0 + static_cast<std::size_t>(cfg.t_avg); ++t) {
      std::vector<AreaObservation> obs;
      for (std::size_t k = 0; k < cams.size(); ++k)
        if (node_areas[k][t] > opt.min_area) obs.push_back({k, node_areas[k][t]});
      if (obs.size() < 2) continue;
      try {
        const auto r = localize_from_areas(obs, cams, radius, z_known, init, opt.solver);
        init = r.position;
        acc += Vec2(r.position.x(), r.position.y());
        ++solved;
      } catch (const NoConvergence&) {
      } catch (const DegenerateGeometry&) {
      } catch (const DegenerateView&) {
      }
    }
    out.push_back(solved ? std::optional<Vec2>(acc / solved) : std::nullopt);
  }
  return out;
}

}  // namespace pktrack
