#include <gtest/gtest.h>

#include <fstream>
#include <iterator>
#include <set>

#include "pktrack/pipeline.hpp"

using namespace pktrack;

namespace {

const std::string kSmoke = std::string(PKTRACK_SOURCE_DIR) + "/configs/smoke.json";

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("pktrack_pipe_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::set<fs::path> relative_files(const fs::path& root) {
  std::set<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.insert(fs::relative(e.path(), root));
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

TEST(Config, SmokeConfigLoadsAndValidates) {
  const ExperimentConfig c = load_config(kSmoke);
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.n_scenes, 10);
  EXPECT_EQ(c.stage2.n_gray, 3);
  EXPECT_EQ(c.stage2.n_blue, 1);
  EXPECT_EQ(c.gray_cameras(), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(c.blue_cameras(), (std::vector<std::size_t>{3}));
}

TEST(Config, JsonRoundTripIsStable) {
  const ExperimentConfig c = load_config(kSmoke);
  const nlohmann::json j = to_json(c);
  const ExperimentConfig back = experiment_from_json(j);
  EXPECT_EQ(to_json(back).dump(), j.dump());
  for (std::size_t k = 0; k < c.scenario.cameras.size(); ++k)
    EXPECT_EQ(back.scenario.cameras[k].rotation(), c.scenario.cameras[k].rotation());
}

TEST(Config, PresetsFillDefaults) {
  const ExperimentConfig c = experiment_from_json(nlohmann::json::parse(R"({"scenario": {"preset": "gap"}})"));
  EXPECT_TRUE(c.scenario.occlusion_gap);
  EXPECT_EQ(c.node_roles.size(), 4u);
  EXPECT_NO_THROW(c.validate());
  const ExperimentConfig f = experiment_from_json(nlohmann::json::parse(R"({"scenario": {"preset": "fusion"}})"));
  EXPECT_EQ(f.scenario.cameras[0].focal(), 2400.0);
  EXPECT_EQ(f.scenario.cameras[1].focal(), 1200.0);
  EXPECT_EQ(f.scenario.gap_margin_max_frames, 90);
}

TEST(Config, CameraGivenByTarget) {
  const auto j = nlohmann::json::parse(R"({"scenario": {"cameras": [
      {"position_m": [10, 0, 4], "target_m": [0, 0, 1], "focal_px": 700, "width_px": 640, "height_px": 480}]},
      "node_roles": ["gray"]})");
  const ExperimentConfig c = experiment_from_json(j);
  ASSERT_EQ(c.scenario.cameras.size(), 1u);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, ValidationErrors) {
  auto invalid = [](const std::string& text) {
    EXPECT_THROW(experiment_from_json(nlohmann::json::parse(text)).validate(), InvalidConfig) << text;
  };
  invalid(R"({"scenario": {"cameras": []}})");
  invalid(R"({"split": {"train_fraction": 0.7, "test_fraction": 0.2}})");
  invalid(R"({"split": {"train_fraction": 1.2, "test_fraction": -0.2}})");
  invalid(R"({"node_roles": ["gray", "gray"]})");
  invalid(R"({"node_roles": ["unused", "unused", "unused", "unused"]})");
  invalid(R"({"n_scenes": 1})");
  invalid(R"({"n_scenes": 2, "split": {"train_fraction": 1.0, "test_fraction": 0.0}})");
  EXPECT_THROW(experiment_from_json(nlohmann::json::parse(R"({"node_roles": ["red"]})")), InvalidConfig);
  EXPECT_THROW(experiment_from_json(nlohmann::json::parse(R"({"scenario": {"preset": "x"}})")), InvalidConfig);
  EXPECT_THROW(experiment_from_json(nlohmann::json::parse(R"({"gps": {"preset": "x"}})")), InvalidConfig);
  EXPECT_THROW(experiment_from_json(nlohmann::json::parse(R"({"n_scenes": "ten"})")), InvalidConfig);
}

TEST(Config, SeedOverrideReplacesEveryNamedSeed) {
  ExperimentConfig a = load_config(kSmoke), b = load_config(kSmoke);
  a.override_seeds(99);
  b.override_seeds(99);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  const std::set<std::uint64_t> seeds{a.scenario.seed, a.codec_seed, a.network.seed, a.gps_seed,
                                      a.split.seed,    a.stage1.seed, a.stage2.seed};
  EXPECT_EQ(seeds.size(), 7u);
  const ExperimentConfig orig = load_config(kSmoke);
  EXPECT_NE(a.scenario.seed, orig.scenario.seed);
}

TEST(Config, SplitHonorsFractions) {
  ExperimentConfig c = load_config(kSmoke);
  c.n_scenes = 50;
  const auto split = make_split(c);
  EXPECT_EQ(std::count(split.begin(), split.end(), Split::kTrain), 40);
  EXPECT_EQ(make_split(c), split);
  c.split.seed += 1;
  EXPECT_NE(make_split(c), split);
}

// ---------------------------------------------------------------------------
// Schemas

TEST(Schema, LabelsRoundTrip) {
  const std::vector<TrackWindowLabel> l{{1.0, Vec2(0.1, -2.0 / 3.0)}, {0.0, std::nullopt}, {0.5, Vec2(3, 4)}};
  const std::string path = (fs::temp_directory_path() / "pktrack_labels.csv").string();
  export_labels(l, path);
  const auto back = import_labels(path);
  ASSERT_EQ(back.size(), l.size());
  for (std::size_t i = 0; i < l.size(); ++i) {
    EXPECT_EQ(back[i].r, l[i].r);
    EXPECT_EQ(back[i].p_avg.has_value(), l[i].p_avg.has_value());
    if (l[i].p_avg) {
      EXPECT_EQ(*back[i].p_avg, *l[i].p_avg);
    }
  }
}

TEST(Schema, LabelsRejectPositionWithoutVisibility) {
  const std::string path = (fs::temp_directory_path() / "pktrack_bad_labels.csv").string();
  { csv::open_out(path) << "window_idx,r,x_m,y_m\n0,0,1,2\n"; }
  try {
    import_labels(path);
    FAIL();
  } catch (const InvariantError& e) {
    EXPECT_EQ(e.line(), 1u);
  }
}

TEST(Schema, BlueFeaturesRoundTrip) {
  const std::vector<BlueFeature> f{{1.0, 0.1, -0.2, 0.03}, {0.0, 0.0, 0.0, 0.0}};
  const std::string path = (fs::temp_directory_path() / "pktrack_blue.csv").string();
  export_blue_features(f, path);
  EXPECT_EQ(import_blue_features(path), f);
}

// ---------------------------------------------------------------------------
// Pipeline

TEST(Pipeline, SmokeRunPopulatesReport) {
  const fs::path out = fresh_dir("smoke");
  const EvaluationReport report = run_pipeline(kSmoke, out);
  ASSERT_TRUE(fs::exists(out / "report.csv"));
  const auto entries = import_report((out / "report.csv").string());
  EXPECT_EQ(entries, report.entries());
  for (const auto& e : entries)
    if (e.scenario == "ALL") {
      ASSERT_TRUE(e.value.has_value()) << e.metric;
      EXPECT_GE(*e.value, 0.0) << e.metric;
    }
  EXPECT_EQ(report.rows.size(), 2u);
}

TEST(Pipeline, ReportRecomputableFromIntermediates) {
  const fs::path out = fresh_dir("recompute");
  const ExperimentConfig cfg = load_config(kSmoke);
  run_pipeline(cfg, out);
  const RunLayout L{out};
  const auto entries = import_report(L.report().string());
  double mis = 0, win = 0, sum = 0, cnt = 0, dtw = 0, dtw_n = 0;
  const auto split = import_split(L.split().string());
  for (std::size_t i = 0; i < split.size(); ++i) {
    for (std::size_t k : cfg.gray_cameras()) {
      const auto truth = import_frame_sizes(L.node_file(i, "frames", k).string());
      const auto recon = import_frame_sizes(L.node_file(i, "recon", k).string());
      if (split[i] == Split::kTest) {
        dtw += dtw_distance(recon.sizes(), truth.sizes());
        dtw_n += 1;
      }
    }
    if (split[i] != Split::kTest) continue;
    const auto p = import_predictions(L.predictions(i).string());
    const auto l = import_labels(L.labels(i).string());
    ASSERT_EQ(p.size(), l.size());
    for (std::size_t n = 0; n < p.size(); ++n) {
      win += 1;
      if ((p[n].y_fov >= cfg.stage2.tau) != (l[n].r >= cfg.stage2.tau - 1e-12)) mis += 1;
      if (p[n].pos && l[n].p_avg) {
        sum += (*p[n].pos - *l[n].p_avg).norm();
        cnt += 1;
      }
    }
  }
  EXPECT_NEAR(*find_entry(entries, "ALL", "weighted_fov_error_pct"), 100.0 * mis / win, 1e-9);
  if (cnt > 0) {
    EXPECT_NEAR(*find_entry(entries, "ALL", "pos_error_m_mean"), sum / cnt, 1e-9);
  }
  EXPECT_NEAR(*find_entry(entries, "ALL", "dtw_mean"), dtw / dtw_n, 1e-9);
}

TEST(Pipeline, RerunIsByteIdentical) {
  const fs::path a = fresh_dir("det_a"), b = fresh_dir("det_b");
  run_pipeline(kSmoke, a);
  run_pipeline(kSmoke, b);
  const auto files = relative_files(a);
  EXPECT_EQ(files, relative_files(b));
  EXPECT_GT(files.size(), 50u);
  for (const auto& f : files) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
}

TEST(Pipeline, PersistedFilesRoundTripThroughImporters) {
  const fs::path out = fresh_dir("schema");
  const ExperimentConfig cfg = load_config(kSmoke);
  run_pipeline(cfg, out);
  const RunLayout L{out};
  const fs::path tmp = fs::temp_directory_path() / "pktrack_rt.csv";
  auto same = [&](const fs::path& p) { EXPECT_EQ(slurp(p), slurp(tmp)) << p; };
  const std::size_t n_cams = cfg.scenario.cameras.size();
  export_trajectory(import_trajectory(L.track(0).string(), n_cams), tmp.string());
  same(L.track(0));
  export_trajectory(import_trajectory(L.gps_track(0).string(), n_cams), tmp.string());
  same(L.gps_track(0));
  for (const char* kind : {"frames", "recon", "baseline"}) {
    export_frame_sizes(import_frame_sizes(L.node_file(0, kind, 0).string()), tmp.string());
    same(L.node_file(0, kind, 0));
  }
  export_trace(import_trace(L.node_file(0, "trace", 0).string()), tmp.string(), true);
  same(L.node_file(0, "trace", 0));
  export_blue_features(import_blue_features(L.node_file(0, "blue", 3).string()), tmp.string());
  same(L.node_file(0, "blue", 3));
  export_split(import_split(L.split().string()), tmp.string());
  same(L.split());
  export_extract(import_extract(L.extract().string()), tmp.string());
  same(L.extract());
  export_report(import_report(L.report().string()), tmp.string());
  same(L.report());
  const auto split = import_split(L.split().string());
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (split[i] != Split::kTest) continue;
    export_labels(import_labels(L.labels(i).string()), tmp.string());
    same(L.labels(i));
    export_predictions(import_predictions(L.predictions(i).string()), tmp.string());
    same(L.predictions(i));
  }
}

TEST(Pipeline, ZeroCamerasFailsBeforeAnyWork) {
  ExperimentConfig cfg = load_config(kSmoke);
  cfg.scenario.cameras.clear();
  cfg.node_roles.clear();
  const fs::path out = fresh_dir("zero_cams");
  try {
    run_pipeline(cfg, out);
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "config");
    EXPECT_NE(std::string(e.what()).find("zero cameras"), std::string::npos);
  }
  EXPECT_FALSE(fs::exists(out));
}

TEST(Pipeline, ModuleErrorsCarryStageAndFile) {
  const fs::path out = fresh_dir("stage_err");
  StageRunner r(load_config(kSmoke), out);
  stage_gen(r);
  stage_encode(r);
  stage_netem(r);
  stage_train_stage1(r);
  const fs::path victim = r.layout().node_file(1, "trace", 2);
  { csv::open_out(victim.string()) << "send_t_s,arrive_t_s\n"; }
  try {
    stage_extract(r);
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "extract");
    EXPECT_NE(std::string(e.what()).find(victim.string()), std::string::npos) << e.what();
  }
}

TEST(Pipeline, VerbsReadPreviousStageFiles) {
  const fs::path out = fresh_dir("verbs");
  const ExperimentConfig cfg = load_config(kSmoke);
  StageRunner r(cfg, out);
  EXPECT_THROW(stage_encode(r), StageError);
  stage_gen(r);
  EXPECT_THROW(stage_extract(r), StageError);
  stage_encode(r);
  stage_netem(r);
  stage_train_stage1(r);
  stage_extract(r);
  stage_train_stage2(r);
  stage_track(r);
  const EvaluationReport a = stage_eval(r);
  const fs::path out2 = fresh_dir("verbs_full");
  const EvaluationReport b = run_pipeline(cfg, out2);
  EXPECT_EQ(slurp(out / "report.csv"), slurp(out2 / "report.csv"));
  EXPECT_EQ(a.entries(), b.entries());
}

TEST(Pipeline, BlueOnlyRunSkipsStageOne) {
  ExperimentConfig cfg = load_config(kSmoke);
  cfg.node_roles = {NodeRole::kUnused, NodeRole::kUnused, NodeRole::kUnused, NodeRole::kBlue};
  cfg.sync_roles();
  const fs::path out = fresh_dir("blue_only");
  const EvaluationReport r = run_pipeline(cfg, out);
  EXPECT_FALSE(r.dtw_mean.has_value());
  EXPECT_TRUE(r.weighted_fov_error_pct.has_value());
  EXPECT_FALSE(fs::exists(out / "models" / "stage1.ckpt"));
}
