// End-to-end experiment runner. Each stage reads the previous stage's files
// from the run directory and writes its own, so the CLI verbs and the full
// pipeline share one code path:
//
//   config.json                      resolved experiment config
//   split.csv                        scene,split
//   scenes/<id>/track.csv            true trajectory
//   scenes/<id>/gps_track.csv        GPS-corrupted trajectory (training labels)
//   scenes/<id>/frames_c<k>.csv      gray node frame sizes
//   scenes/<id>/blue_c<k>.csv        blue node detection features
//   scenes/<id>/trace_c<k>.csv       gray node packet trace (labeled)
//   scenes/<id>/recon_c<k>.csv       stage-1 reconstructed frame sizes
//   scenes/<id>/baseline_c<k>.csv    time-window baseline frame sizes
//   scenes/<id>/labels.csv           test scenes: windows from the true track
//   scenes/<id>/predictions.csv      test scenes: tracker output
//   models/stage1.ckpt, models/stage2.ckpt, models/stage*_loss.csv
//   extract.csv                      per scene and gray node stage-1 metrics
//   report.csv                       evaluation report

#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "pktrack/config.hpp"
#include "pktrack/eval.hpp"

namespace pktrack {

namespace fs = std::filesystem;

/// A module error annotated with the pipeline stage and the file in use.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what) : Error("[" + stage + "] " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// ---------------------------------------------------------------------------
// Extra schemas

/// labels.csv: window_idx,r,x_m,y_m (position empty when never visible).
inline void export_labels(const std::vector<TrackWindowLabel>& labels, const std::string& path) {
  auto out = csv::open_out(path);
  out << "window_idx,r,x_m,y_m\n";
  for (std::size_t n = 0; n < labels.size(); ++n) {
    out << n << ',' << csv::exact(labels[n].r) << ',';
    if (labels[n].p_avg) out << csv::exact(labels[n].p_avg->x()) << ',' << csv::exact(labels[n].p_avg->y()) << '\n';
    else out << ",\n";
  }
}

inline std::vector<TrackWindowLabel> import_labels(const std::string& path) {
  auto in = csv::open_in(path);
  csv::Reader reader(in);
  const auto col = reader.require({"window_idx", "r", "x_m", "y_m"});
  std::vector<TrackWindowLabel> out;
  std::vector<std::string> f;
  while (reader.next(f)) {
    const auto line = reader.line();
    if (csv::to_int(f[col[0]], line) != static_cast<long long>(out.size()))
      throw InvariantError("window_idx must count up from 0", line);
    TrackWindowLabel l;
    l.r = csv::to_double(f[col[1]], line);
    if (!(l.r >= 0.0 && l.r <= 1.0)) throw InvariantError("r outside [0, 1]", line);
    const bool has_x = !f[col[2]].empty(), has_y = !f[col[3]].empty();
    if (has_x != has_y) throw ParseError("x_m and y_m must both be present or both empty", line);
    if (has_x) l.p_avg = Vec2(csv::to_double(f[col[2]], line), csv::to_double(f[col[3]], line));
    if (l.p_avg.has_value() != (l.r > 0.0)) throw InvariantError("position must be present exactly when r > 0", line);
    out.push_back(l);
  }
  return out;
}

/// blue_c<k>.csv: frame_idx,visible,u_norm,v_norm,area_norm.
inline void export_blue_features(const std::vector<BlueFeature>& feats, const std::string& path) {
  auto out = csv::open_out(path);
  out << "frame_idx,visible,u_norm,v_norm,area_norm\n";
  for (std::size_t t = 0; t < feats.size(); ++t)
    out << t << ',' << (feats[t][0] > 0.0 ? 1 : 0) << ',' << csv::exact(feats[t][1]) << ','
        << csv::exact(feats[t][2]) << ',' << csv::exact(feats[t][3]) << '\n';
}

inline std::vector<BlueFeature> import_blue_features(const std::string& path) {
  auto in = csv::open_in(path);
  csv::Reader reader(in);
  const auto col = reader.require({"frame_idx", "visible", "u_norm", "v_norm", "area_norm"});
  std::vector<BlueFeature> out;
  std::vector<std::string> f;
  while (reader.next(f)) {
    const auto line = reader.line();
    if (csv::to_int(f[col[0]], line) != static_cast<long long>(out.size()))
      throw InvariantError("frame_idx must count up from 0", line);
    const long long v = csv::to_int(f[col[1]], line);
    if (v != 0 && v != 1) throw ParseError("visible must be 0 or 1", line);
    out.push_back({static_cast<double>(v), csv::to_double(f[col[2]], line), csv::to_double(f[col[3]], line),
                   csv::to_double(f[col[4]], line)});
  }
  return out;
}

inline void export_losses(const std::vector<double>& losses, const std::string& path) {
  auto out = csv::open_out(path);
  out << "epoch,loss\n";
  for (std::size_t e = 0; e < losses.size(); ++e) out << e << ',' << csv::exact(losses[e]) << '\n';
}

struct ExtractRow {
  std::string scene;
  std::size_t camera = 0;
  double boundary_error = 0.0, dtw_learned = 0.0, dtw_baseline = 0.0;
};

inline void export_extract(const std::vector<ExtractRow>& rows, const std::string& path) {
  auto out = csv::open_out(path);
  out << "scene,camera,boundary_error,dtw_learned,dtw_baseline\n";
  for (const auto& r : rows)
    out << r.scene << ',' << r.camera << ',' << csv::exact(r.boundary_error) << ',' << csv::exact(r.dtw_learned) << ','
        << csv::exact(r.dtw_baseline) << '\n';
}

inline std::vector<ExtractRow> import_extract(const std::string& path) {
  auto in = csv::open_in(path);
  csv::Reader reader(in);
  const auto col = reader.require({"scene", "camera", "boundary_error", "dtw_learned", "dtw_baseline"});
  std::vector<ExtractRow> out;
  std::vector<std::string> f;
  while (reader.next(f)) {
    const auto line = reader.line();
    const long long cam = csv::to_int(f[col[1]], line);
    if (cam < 0) throw InvariantError("camera must be non-negative", line);
    out.push_back({f[col[0]], static_cast<std::size_t>(cam), csv::to_double(f[col[2]], line),
                   csv::to_double(f[col[3]], line), csv::to_double(f[col[4]], line)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run directory

enum class Split { kTrain, kTest };

struct RunLayout {
  fs::path root;

  static std::string scene_id(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "s%04zu", i);
    return buf;
  }
  fs::path config() const { return root / "config.json"; }
  fs::path split() const { return root / "split.csv"; }
  fs::path scene(std::size_t i) const { return root / "scenes" / scene_id(i); }
  fs::path track(std::size_t i) const { return scene(i) / "track.csv"; }
  fs::path gps_track(std::size_t i) const { return scene(i) / "gps_track.csv"; }
  fs::path node_file(std::size_t i, const std::string& kind, std::size_t cam) const {
    return scene(i) / (kind + "_c" + std::to_string(cam) + ".csv");
  }
  fs::path labels(std::size_t i) const { return scene(i) / "labels.csv"; }
  fs::path predictions(std::size_t i) const { return scene(i) / "predictions.csv"; }
  fs::path models() const { return root / "models"; }
  fs::path stage1_model() const { return models() / "stage1.ckpt"; }
  fs::path stage2_model() const { return models() / "stage2.ckpt"; }
  fs::path extract() const { return root / "extract.csv"; }
  fs::path report() const { return root / "report.csv"; }
};

/// Scene order by a seeded hash; the first round(train_fraction * n) train.
inline std::vector<Split> make_split(const ExperimentConfig& cfg) {
  const auto n = static_cast<std::size_t>(cfg.n_scenes);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto ka = derive_seed(cfg.split.seed, a), kb = derive_seed(cfg.split.seed, b);
    return ka != kb ? ka < kb : a < b;
  });
  std::vector<Split> split(n, Split::kTest);
  for (std::size_t r = 0; r < cfg.n_train(); ++r) split[order[r]] = Split::kTrain;
  return split;
}

inline void export_split(const std::vector<Split>& split, const std::string& path) {
  auto out = csv::open_out(path);
  out << "scene,split\n";
  for (std::size_t i = 0; i < split.size(); ++i)
    out << RunLayout::scene_id(i) << ',' << (split[i] == Split::kTrain ? "train" : "test") << '\n';
}

inline std::vector<Split> import_split(const std::string& path) {
  auto in = csv::open_in(path);
  csv::Reader reader(in);
  const auto col = reader.require({"scene", "split"});
  std::vector<Split> out;
  std::vector<std::string> f;
  while (reader.next(f)) {
    const auto line = reader.line();
    if (f[col[0]] != RunLayout::scene_id(out.size())) throw InvariantError("scenes must be listed in order", line);
    if (f[col[1]] == "train") out.push_back(Split::kTrain);
    else if (f[col[1]] == "test") out.push_back(Split::kTest);
    else throw ParseError("split must be train or test", line);
  }
  return out;
}

/// Shared state of one stage invocation: the config, the layout, a log sink
/// and the file currently being processed, for error context.
class StageRunner {
 public:
  StageRunner(ExperimentConfig cfg, fs::path root, std::ostream* log = nullptr)
      : cfg_(std::move(cfg)), layout_{std::move(root)}, log_(log) {}

  const ExperimentConfig& config() const { return cfg_; }
  const RunLayout& layout() const { return layout_; }

  void run(const std::string& stage, const std::function<void()>& body) {
    file_.clear();
    const auto t0 = std::chrono::steady_clock::now();
    try {
      body();
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(stage, (file_.empty() ? std::string() : file_ + ": ") + e.what());
    }
    if (log_) {
      const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.1f", sec);
      *log_ << "[" << stage << "] done in " << buf << " s\n";
    }
  }
  /// Records `p` as the file in use and returns it as a string.
  std::string at(const fs::path& p) {
    file_ = p.string();
    return file_;
  }
  void log(const std::string& msg) {
    if (log_) *log_ << msg << '\n';
  }

 private:
  ExperimentConfig cfg_;
  RunLayout layout_;
  std::ostream* log_;
  std::string file_;
};

// ---------------------------------------------------------------------------
// Stages

inline void stage_gen(StageRunner& r) {
  r.run("gen", [&] {
    const auto& cfg = r.config();
    const auto& L = r.layout();
    cfg.validate();
    fs::create_directories(L.root / "scenes");
    save_config(cfg, r.at(L.config()));
    export_split(make_split(cfg), r.at(L.split()));
    for (std::size_t i = 0; i < static_cast<std::size_t>(cfg.n_scenes); ++i) {
      fs::create_directories(L.scene(i));
      const GroundTruthTrack track = generate_trajectory(cfg.scenario, derive_seed(cfg.scenario.seed, i));
      export_trajectory(track, r.at(L.track(i)));
      export_trajectory(apply_gps_noise(track, cfg.gps, derive_seed(cfg.gps_seed, i)), r.at(L.gps_track(i)));
    }
  });
}

inline void stage_encode(StageRunner& r) {
  r.run("encode", [&] {
    const auto& cfg = r.config();
    const auto& L = r.layout();
    const std::size_t n_cams = cfg.scenario.cameras.size();
    for (std::size_t i = 0; i < static_cast<std::size_t>(cfg.n_scenes); ++i) {
      const GroundTruthTrack track = import_trajectory(r.at(L.track(i)), n_cams);
      for (std::size_t k = 0; k < n_cams; ++k) {
        if (cfg.node_roles[k] == NodeRole::kUnused) continue;
        const CameraModel& cam = cfg.scenario.cameras[k];
        const int res = cfg.codec.resolution > 0 ? cfg.codec.resolution : cam.image_width();
        const CameraRender render = render_track(track, cfg.scenario.target_radius, cam, res);
        if (cfg.node_roles[k] == NodeRole::kBlue) {
          export_blue_features(blue_features(render, cam), r.at(L.node_file(i, "blue", k)));
        } else {
          const FrameSizeSequence seq = encode_frame_sizes(render.innovation, render.area, cfg.codec.gop,
                                                           cfg.codec.model, track.fps, derive_seed(cfg.codec_seed, i, k));
          export_frame_sizes(seq, r.at(L.node_file(i, "frames", k)));
        }
      }
    }
  });
}

/// Packetizes and emulates every gray node's stream.
inline void stage_netem(StageRunner& r) {
  r.run("netem", [&] {
    const auto& cfg = r.config();
    const auto& L = r.layout();
    for (std::size_t i = 0; i < static_cast<std::size_t>(cfg.n_scenes); ++i)
      for (std::size_t k : cfg.gray_cameras()) {
        const FrameSizeSequence seq = import_frame_sizes(r.at(L.node_file(i, "frames", k)));
        const PacketTrace trace =
            transmit(seq, cfg.network, static_cast<int>(k), derive_seed(cfg.network.seed, i, k));
        export_trace(trace, r.at(L.node_file(i, "trace", k)), true);
      }
  });
}

inline void stage_train_stage1(StageRunner& r) {
  r.run("train-stage1", [&] {
    const auto& cfg = r.config();
    const auto& L = r.layout();
    fs::create_directories(L.models());
    if (cfg.gray_cameras().empty()) {
      r.log("[train-stage1] no gray nodes; skipped");
      return;
    }
    const auto split = import_split(r.at(L.split()));
    std::vector<PacketTrace> traces;
    std::size_t used = 0;
    const auto limit = static_cast<std::size_t>(cfg.stage1_train_scenes);
    for (std::size_t i = 0; i < split.size(); ++i)
      if (split[i] == Split::kTrain && (limit == 0 || used++ < limit))
        for (std::size_t k : cfg.gray_cameras()) traces.push_back(import_trace(r.at(L.node_file(i, "trace", k))));
    r.at("");
    Stage1Model model(cfg.stage1, cfg.stage1.seed);
    const auto result = stage1_train(model, traces);
    model.save(r.at(L.stage1_model()));
    export_losses(result.epoch_loss, r.at(L.models() / "stage1_loss.csv"));
  });
}

/// Stage-1 inference on the unlabeled traces of every scene, the time-window
/// baseline, and boundary/DTW metrics against the labeled ground truth.
inline void stage_extract(StageRunner& r) {
  r.run("extract", [&] {
    const auto& cfg = r.config();
    const auto& L = r.layout();
    std::vector<ExtractRow> rows;
    if (!cfg.gray_cameras().empty()) {
      const Stage1Model model = Stage1Model::load(r.at(L.stage1_model()));
      for (std::size_t i = 0; i < static_cast<std::size_t>(cfg.n_scenes); ++i)
        for (std::size_t k : cfg.gray_cameras()) {
          const FrameSizeSequence truth = import_frame_sizes(r.at(L.node_file(i, "frames", k)));
          const PacketTrace labeled = import_trace(r.at(L.node_file(i, "trace", k)));
          const PacketTrace observed = labeled.unlabeled();
          const BoundaryPrediction pred = stage1_infer(observed, model);
          const FrameSizeSequence recon = reconstruct_frame_sizes(observed, pred.label);
          const FrameSizeSequence base = timewindow_grouping(observed, cfg.baseline_window());
          export_frame_sizes(recon, r.at(L.node_file(i, "recon", k)));
          export_frame_sizes(base, r.at(L.node_file(i, "baseline", k)));
          rows.push_back({RunLayout::scene_id(i), k, boundary_error(pred.label, labeled.boundary_labels()),
                          dtw_distance(recon.sizes(), truth.sizes()), dtw_distance(base.sizes(), truth.sizes())});
        }
    }
    export_extract(rows, r.at(L.extract()));
  });
}

/// Tracker inputs of one scene: reconstructed gray sizes aligned to the
/// frame grid and blue features.
inline NodeObservations load_observations(StageRunner& r, std::size_t scene, std::size_t frames) {
  const auto& cfg = r.config();
  const auto& L = r.layout();
  NodeObservations obs;
  for (std::size_t k : cfg.gray_cameras())
    obs.gray_bytes.push_back(align_frame_sizes(import_frame_sizes(r.at(L.node_file(scene, "recon", k))), frames));
  for (std::size_t k : cfg.blue_cameras()) {
    auto b = import_blue_features(r.at(L.node_file(scene, "blue", k)));
    if (b.size() != frames) throw AlignmentError("blue features and track differ in length");
    obs.blue.push_back(std::move(b));
  }
  return obs;
}

inline void stage_train_stage2(StageRunner& r) {
  r.run("train-stage2", [&] {
    const auto& cfg = r.config();
    const auto& L = r.layout();
    const std::size_t n_cams = cfg.scenario.cameras.size();
    const auto split = import_split(r.at(L.split()));
    std::vector<Stage2Sequence> data;
    for (std::size_t i = 0; i < split.size(); ++i) {
      if (split[i] != Split::kTrain) continue;
      const GroundTruthTrack gps = import_trajectory(r.at(L.gps_track(i)), n_cams);
      Stage2Sequence s;
      s.labels = make_labels(gps, cfg.stage2);
      s.obs = load_observations(r, i, gps.size());
      data.push_back(std::move(s));
    }
    r.at("");
    std::vector<const NodeObservations*> obs;
    for (const auto& s : data) obs.push_back(&s.obs);
    TrackerModel model(cfg.stage2, cfg.scenario.region, GrayNormalizer::fit(obs, cfg.stage2.n_gray), cfg.stage2.seed);
    const auto result = stage2_train(model, data);
    fs::create_directories(L.models());
    model.save(r.at(L.stage2_model()));
    export_losses(result.epoch_loss, r.at(L.models() / "stage2_loss.csv"));
  });
}

/// Tracker inference and true-track window labels on the test scenes.
inline void stage_track(StageRunner& r) {
  r.run("track", [&] {
    const auto& cfg = r.config();
    const auto& L = r.layout();
    const std::size_t n_cams = cfg.scenario.cameras.size();
    const auto split = import_split(r.at(L.split()));
    const TrackerModel model = TrackerModel::load(r.at(L.stage2_model()));
    for (std::size_t i = 0; i < split.size(); ++i) {
      if (split[i] != Split::kTest) continue;
      const GroundTruthTrack track = import_trajectory(r.at(L.track(i)), n_cams);
      export_labels(make_labels(track, model.config()), r.at(L.labels(i)));
      const NodeObservations obs = load_observations(r, i, track.size());
      export_predictions(stage2_infer(model, obs, track.fps), r.at(L.predictions(i)));
    }
  });
}

/// Builds the report from persisted files only.
inline EvaluationReport evaluate_run(StageRunner& r) {
  const auto& cfg = r.config();
  const auto& L = r.layout();
  const auto split = import_split(r.at(L.split()));
  const auto extract = import_extract(r.at(L.extract()));
  std::vector<ScenarioMetrics> rows;
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (split[i] != Split::kTest) continue;
    ScenarioMetrics m;
    m.scenario = RunLayout::scene_id(i);
    const auto preds = import_predictions(r.at(L.predictions(i)));
    const auto labels = import_labels(r.at(L.labels(i)));
    m.fov = eval_fov(preds, labels, cfg.stage2.tau);
    m.pos = eval_position(preds, labels, cfg.stage2.tau);
    for (const auto& e : extract)
      if (e.scene == m.scenario) {
        m.boundary_errors.push_back(e.boundary_error);
        m.dtw_learned.push_back(e.dtw_learned);
        m.dtw_baseline.push_back(e.dtw_baseline);
      }
    rows.push_back(std::move(m));
  }
  return EvaluationReport::aggregate(std::move(rows));
}

inline EvaluationReport stage_eval(StageRunner& r) {
  EvaluationReport report;
  r.run("eval", [&] {
    report = evaluate_run(r);
    export_report(report, r.at(r.layout().report()));
  });
  return report;
}

/// gen -> encode -> packetize/emulate -> extract (stage-1 training and
/// inference) -> track (stage-2 training and inference) -> eval.
inline EvaluationReport run_pipeline(const ExperimentConfig& cfg, const fs::path& out_dir, std::ostream* log = nullptr) {
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw StageError("config", e.what());
  }
  StageRunner r(cfg, out_dir, log);
  stage_gen(r);
  stage_encode(r);
  stage_netem(r);
  stage_train_stage1(r);
  stage_extract(r);
  stage_train_stage2(r);
  stage_track(r);
  return stage_eval(r);
}

inline EvaluationReport run_pipeline(const std::string& config_path, const fs::path& out_dir,
                                     std::ostream* log = nullptr) {
  ExperimentConfig cfg;
  try {
    cfg = load_config(config_path);
  } catch (const Error& e) {
    throw StageError("config", e.what());
  }
  return run_pipeline(cfg, out_dir, log);
}

}  // namespace pktrack
