// Frame-boundary recovery from packet traces: the fixed time-window baseline,
// a transformer boundary detector trained with BCE plus a frame-count
// penalty, window-averaged inference, frame-size reconstruction and the
// boundary/DTW metrics.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "pktrack/codec.hpp"
#include "pktrack/csv.hpp"
#include "pktrack/error.hpp"
#include "pktrack/netem.hpp"
#include "pktrack/nn/checkpoint.hpp"
#include "pktrack/nn/layers.hpp"
#include "pktrack/nn/optim.hpp"

namespace pktrack {

// ---------------------------------------------------------------------------
// Baseline and reconstruction

/// Bins arrivals into consecutive windows of window_s starting at the first
/// arrival; each bin's byte sum is one frame (empty bins give size 0).
inline FrameSizeSequence timewindow_grouping(const PacketTrace& trace, double window_s) {
  if (trace.empty()) throw EmptySequence("time-window grouping of an empty trace");
  if (!(window_s > 0.0)) throw InvalidConfig("time window must be positive");
  const double a0 = trace.packets.front().arrive_t_s;
  // Arrivals carry nanosecond rounding; allow it at bin edges.
  constexpr double kEdge = 2e-9;
  std::vector<std::int64_t> bytes;
  for (const auto& p : trace.packets) {
    const auto bin = static_cast<std::size_t>(std::floor((p.arrive_t_s - a0 + kEdge) / window_s));
    if (bin >= bytes.size()) bytes.resize(bin + 1, 0);
    bytes[bin] += p.size_bytes;
  }
  FrameSizeSequence seq;
  for (std::size_t k = 0; k < bytes.size(); ++k)
    seq.frames.push_back({bytes[k], FrameType::kUntyped, csv::quantize_ns(a0 + k * window_s)});
  return seq;
}

/// Right-inclusive grouping: a frame ends at each packet labeled 1; a trailing
/// unterminated group becomes a final frame. Timestamps are the arrival of
/// the closing packet, nudged by 1 ns where needed to stay strictly increasing.
inline FrameSizeSequence reconstruct_frame_sizes(const PacketTrace& trace, const std::vector<int>& boundaries) {
  if (boundaries.size() != trace.size()) throw AlignmentError("boundary labels and trace differ in length");
  FrameSizeSequence seq;
  std::int64_t acc = 0;
  bool open = false;
  auto close = [&](double t) {
    if (!seq.empty()) t = std::max(t, csv::quantize_ns(seq.frames.back().timestamp_s + 1e-9));
    seq.frames.push_back({acc, FrameType::kUntyped, t});
    acc = 0;
    open = false;
  };
  for (std::size_t i = 0; i < trace.size(); ++i) {
    acc += trace.packets[i].size_bytes;
    open = true;
    if (boundaries[i]) close(trace.packets[i].arrive_t_s);
  }
  if (open) close(trace.packets.back().arrive_t_s);
  return seq;
}

// ---------------------------------------------------------------------------
// Metrics

/// Fraction of packets whose boundary label differs.
inline double boundary_error(const std::vector<int>& pred, const std::vector<int>& truth) {
  if (truth.empty()) throw EmptySequence("boundary error of empty sequences");
  if (pred.size() != truth.size()) throw AlignmentError("boundary sequences differ in length");
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) wrong += (pred[i] != 0) != (truth[i] != 0);
  return static_cast<double>(wrong) / static_cast<double>(truth.size());
}

/// Classic DTW with |a_i - b_j| cost, no normalization.
inline double dtw_raw(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw EmptySequence("DTW needs non-empty sequences");
  const std::size_t n = a.size(), m = b.size();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> prev(m + 1, inf), cur(m + 1, inf);
  prev[0] = 0.0;
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = inf;
    for (std::size_t j = 1; j <= m; ++j)
      cur[j] = std::abs(a[i - 1] - b[j - 1]) + std::min({prev[j], cur[j - 1], prev[j - 1]});
    std::swap(prev, cur);
  }
  return prev[m];
}

/// DTW on sizes z-scored with the pooled mean and standard deviation of both
/// sequences, divided by the mean sequence length. Symmetric by construction.
inline double dtw_distance(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw EmptySequence("DTW needs non-empty sequences");
  const double n = static_cast<double>(a.size() + b.size());
  const double mu = (std::accumulate(a.begin(), a.end(), 0.0) + std::accumulate(b.begin(), b.end(), 0.0)) / n;
  double ss = 0.0;
  for (double v : a) ss += (v - mu) * (v - mu);
  for (double v : b) ss += (v - mu) * (v - mu);
  const double sd = std::sqrt(ss / n);
  const double inv = sd > 0.0 ? 1.0 / sd : 1.0;
  auto z = [&](const std::vector<double>& s) {
    std::vector<double> out(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) out[i] = (s[i] - mu) * inv;
    return out;
  };
  return dtw_raw(z(a), z(b)) / (0.5 * n);
}

// ---------------------------------------------------------------------------
// Learned detector

struct Stage1Config {
  int window_len = 256;
  int window_stride = 128;
  double lambda_count = 0.01;
  nn::EncoderConfig encoder{4, 16, 16, 1};
  double threshold = 0.5;
  std::int64_t payload_bytes = 1400;
  double learning_rate = 1e-3;
  int epochs = 20;
  int count_warmup_epochs = 3;  // lambda_count is 0 for these leading epochs
  std::uint64_t seed = 1;

  void validate() const {
    if (window_len < 1 || window_stride < 1) throw InvalidConfig("stage-1 window and stride must be positive");
    if (window_stride > window_len) throw InvalidConfig("stage-1 stride must not exceed the window");
    if (lambda_count < 0.0) throw InvalidConfig("lambda_count must be non-negative");
    if (payload_bytes < 1) throw InvalidConfig("payload_bytes must be positive");
    if (!(learning_rate > 0.0) || epochs < 0 || count_warmup_epochs < 0) throw InvalidConfig("invalid stage-1 optimizer settings");
    encoder.validate();
  }
};

inline void to_json(nlohmann::json& j, const Stage1Config& c) {
  j = {{"window_len", c.window_len},       {"window_stride", c.window_stride}, {"lambda_count", c.lambda_count},
       {"encoder", c.encoder},             {"threshold", c.threshold},         {"payload_bytes", c.payload_bytes},
       {"learning_rate", c.learning_rate}, {"epochs", c.epochs},               {"seed", c.seed},
       {"count_warmup_epochs", c.count_warmup_epochs}};
}
inline void from_json(const nlohmann::json& j, Stage1Config& c) {
  c.window_len = j.value("window_len", c.window_len);
  c.window_stride = j.value("window_stride", c.window_stride);
  c.lambda_count = j.value("lambda_count", c.lambda_count);
  if (j.contains("encoder")) j.at("encoder").get_to(c.encoder);
  c.threshold = j.value("threshold", c.threshold);
  c.payload_bytes = j.value("payload_bytes", c.payload_bytes);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.count_warmup_epochs = j.value("count_warmup_epochs", c.count_warmup_epochs);
  c.seed = j.value("seed", c.seed);
}

/// Per-packet features: size / payload and log(1 + gap / 1 ms) of the arrival
/// gap to the previous packet (0 for the first).
inline nn::Mat packet_features(const PacketTrace& trace, std::int64_t payload_bytes) {
  nn::Mat f(static_cast<Eigen::Index>(trace.size()), 2);
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const auto& p = trace.packets[i];
    const double gap = i == 0 ? 0.0 : std::max(0.0, p.arrive_t_s - trace.packets[i - 1].arrive_t_s);
    f(static_cast<Eigen::Index>(i), 0) = static_cast<double>(p.size_bytes) / static_cast<double>(payload_bytes);
    f(static_cast<Eigen::Index>(i), 1) = std::log1p(gap / 1e-3);
  }
  return f;
}

/// Window start offsets for n packets: 0, stride, ... until a window reaches
/// the end. A trace shorter than one window yields a single padded window.
inline std::vector<std::size_t> window_starts(std::size_t n, int window_len, int stride) {
  std::vector<std::size_t> starts{0};
  while (starts.back() + static_cast<std::size_t>(window_len) < n) starts.push_back(starts.back() + stride);
  return starts;
}

struct Stage1Window {
  nn::Mat features;  // window_len x 2, zero padded
  int n_valid = 0;
  std::size_t start = 0;
};

inline Stage1Window make_window(const nn::Mat& features, std::size_t start, int window_len) {
  Stage1Window w;
  w.start = start;
  w.features = nn::Mat::Zero(window_len, features.cols());
  const auto avail = static_cast<Eigen::Index>(features.rows()) - static_cast<Eigen::Index>(start);
  w.n_valid = static_cast<int>(std::clamp<Eigen::Index>(avail, 0, window_len));
  if (w.n_valid > 0) w.features.topRows(w.n_valid) = features.middleRows(static_cast<Eigen::Index>(start), w.n_valid);
  return w;
}

struct Stage1Losses {
  nn::Tensor boundary, count, total;
};

/// Mean BCE of sigmoid(logits) vs labels, |sum sigmoid - sum labels|, and
/// their sum weighted by lambda_count.
inline Stage1Losses stage1_losses(const nn::Tensor& logits, const std::vector<int>& truth, double lambda_count) {
  if (static_cast<std::size_t>(logits.rows()) != truth.size() || logits.cols() != 1)
    throw ShapeError("stage-1 logits and labels differ in length");
  if (truth.empty()) throw EmptySequence("stage-1 loss over an empty window");
  nn::Mat y(static_cast<Eigen::Index>(truth.size()), 1);
  double ysum = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) ysum += y(static_cast<Eigen::Index>(i)) = truth[i] ? 1.0 : 0.0;
  Stage1Losses l;
  l.boundary = nn::bce_with_logits(logits, y, nn::Mat::Ones(y.rows(), 1));
  l.count = nn::abs(nn::add_scalar(nn::sum(nn::sigmoid(logits)), -ysum));
  l.total = nn::add(l.boundary, nn::scale(l.count, lambda_count));
  return l;
}

class Stage1Model {
 public:
  explicit Stage1Model(const Stage1Config& cfg, std::uint64_t seed = 1) : cfg_(cfg), seed_(seed), store_(seed) {
    cfg_.validate();
    const int e = cfg_.encoder.embed_dim;
    input_ = nn::Linear(store_, "s1.input", 2, e, "encoder");
    pos_ = nn::Embedding(store_, "s1.pos", cfg_.window_len, e, "encoder");
    encoder_ = nn::Encoder(store_, "s1.enc", cfg_.encoder, "encoder");
    head_ = nn::MlpHead(store_, "s1.head", e, e, 1, "head");
  }
  Stage1Model(const Stage1Model&) = delete;
  Stage1Model& operator=(const Stage1Model&) = delete;
  Stage1Model(Stage1Model&&) = default;

  /// Logits for the n_valid leading packets of a window_len x 2 window.
  nn::Tensor forward(const nn::Mat& window, int n_valid) const {
    if (window.rows() != cfg_.window_len || window.cols() != 2)
      throw ShapeError("stage-1 window must be " + std::to_string(cfg_.window_len) + " x 2");
    if (n_valid < 0 || n_valid > cfg_.window_len) throw ShapeError("invalid stage-1 valid count");
    if (n_valid == 0) return nn::Tensor(nn::Mat(0, 1));
    std::vector<int> idx(cfg_.window_len);
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<bool> valid(cfg_.window_len, false);
    std::fill(valid.begin(), valid.begin() + n_valid, true);
    const nn::Tensor x = nn::add(input_(nn::Tensor(window)), pos_(idx));
    const nn::Tensor h = encoder_(x, valid);
    return head_(nn::slice_rows(h, 0, n_valid));
  }

  const Stage1Config& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  nn::ParamStore& params() { return store_; }
  const nn::ParamStore& params() const { return store_; }

  void save(const std::string& path) const {
    nn::Checkpoint c;
    c.kind = "stage1";
    c.config = cfg_;
    c.seed = seed_;
    c.tensors = store_.snapshot();
    nn::save_checkpoint(c, path);
  }
  static Stage1Model load(const std::string& path) {
    const nn::Checkpoint c = nn::load_checkpoint(path, "stage1");
    Stage1Model m(c.config.get<Stage1Config>(), c.seed);
    m.store_.load(c.tensors);
    return m;
  }

 private:
  Stage1Config cfg_;
  std::uint64_t seed_;
  nn::ParamStore store_;
  nn::Linear input_;
  nn::Embedding pos_;
  nn::Encoder encoder_;
  nn::MlpHead head_;
};

struct Stage1TrainResult {
  std::vector<double> epoch_loss;  // mean window L_total per epoch at the configured lambda_count
};

/// Per-window Adam steps over shuffled overlapping windows. `first_epoch`
/// lets callers continue a schedule across calls.
inline Stage1TrainResult stage1_train(Stage1Model& model, const std::vector<PacketTrace>& traces,
                                      int first_epoch = 0, int schedule_epochs = -1) {
  if (traces.empty()) throw EmptyDataset("stage-1 training needs at least one trace");
  const Stage1Config& cfg = model.config();
  if (schedule_epochs < 0) schedule_epochs = first_epoch + cfg.epochs;
  struct Item {
    Stage1Window w;
    std::vector<int> y;
  };
  std::vector<Item> items;
  for (const auto& t : traces) {
    if (!t.labeled) throw NoLabels("stage-1 training needs traces with last_pkt labels");
    if (t.empty()) continue;
    const nn::Mat f = packet_features(t, cfg.payload_bytes);
    const auto y = t.boundary_labels();
    for (std::size_t s : window_starts(t.size(), cfg.window_len, cfg.window_stride)) {
      Item it{make_window(f, s, cfg.window_len), {}};
      it.y.assign(y.begin() + static_cast<std::ptrdiff_t>(s), y.begin() + static_cast<std::ptrdiff_t>(s + it.w.n_valid));
      items.push_back(std::move(it));
    }
  }
  if (items.empty()) throw EmptyDataset("stage-1 training traces hold no packets");

  nn::AdamConfig acfg;
  acfg.default_lr = cfg.learning_rate;
  nn::Adam opt(model.params(), acfg);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  Stage1TrainResult result;
  for (int epoch = first_epoch; epoch < first_epoch + cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const double lambda = epoch < cfg.count_warmup_epochs ? 0.0 : cfg.lambda_count;
    opt.set_lr_scale(nn::cosine_lr_scale(epoch, schedule_epochs));
    double total = 0.0;
    for (std::size_t k : order) {
      const Item& it = items[k];
      const auto losses = stage1_losses(model.forward(it.w.features, it.w.n_valid), it.y, lambda);
      total += losses.boundary.item() + cfg.lambda_count * losses.count.item();
      losses.total.backward();
      opt.step();
    }
    result.epoch_loss.push_back(total / static_cast<double>(items.size()));
  }
  return result;
}

struct BoundaryPrediction {
  std::vector<double> prob;
  std::vector<int> label;
};

struct WindowProbs {
  std::size_t start = 0;
  std::vector<double> prob;
};

/// Averages overlapping window predictions per packet with a counter buffer,
/// then thresholds (prob >= threshold -> 1).
inline BoundaryPrediction average_window_predictions(std::size_t n, const std::vector<WindowProbs>& windows,
                                                     double threshold = 0.5) {
  std::vector<double> acc(n, 0.0);
  std::vector<int> count(n, 0);
  for (const auto& w : windows)
    for (std::size_t i = 0; i < w.prob.size() && w.start + i < n; ++i) {
      acc[w.start + i] += w.prob[i];
      ++count[w.start + i];
    }
  BoundaryPrediction out;
  out.prob.resize(n);
  out.label.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (count[i] == 0) throw ShapeError("packet not covered by any window");
    out.prob[i] = acc[i] / count[i];
    out.label[i] = out.prob[i] >= threshold ? 1 : 0;
  }
  return out;
}

inline BoundaryPrediction stage1_infer(const PacketTrace& trace, const Stage1Model& model) {
  if (trace.empty()) throw EmptySequence("stage-1 inference on an empty trace");
  const Stage1Config& cfg = model.config();
  const nn::Mat f = packet_features(trace, cfg.payload_bytes);
  std::vector<WindowProbs> windows;
  for (std::size_t s : window_starts(trace.size(), cfg.window_len, cfg.window_stride)) {
    const Stage1Window w = make_window(f, s, cfg.window_len);
    const nn::Mat logits = model.forward(w.features, w.n_valid).value();
    WindowProbs wp{s, std::vector<double>(static_cast<std::size_t>(w.n_valid))};
    for (int i = 0; i < w.n_valid; ++i) wp.prob[i] = 1.0 / (1.0 + std::exp(-logits(i, 0)));
    windows.push_back(std::move(wp));
  }
  return average_window_predictions(trace.size(), windows, cfg.threshold);
}

}  // namespace pktrack
