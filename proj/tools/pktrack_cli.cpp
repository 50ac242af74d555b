// pktrack command-line driver. Every verb works on a run directory (--out);
// verbs after `gen` read the resolved config from it unless --config is given.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "pktrack/pipeline.hpp"

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
};

pktrack::ExperimentConfig resolve_config(const Globals& g, bool allow_run_config) {
  pktrack::ExperimentConfig cfg;
  try {
    if (!g.config.empty()) {
      cfg = pktrack::load_config(g.config);
    } else {
      const auto path = pktrack::RunLayout{g.out}.config();
      if (!allow_run_config || !pktrack::fs::exists(path))
        throw pktrack::InvalidConfig("no --config given and no " + path.string());
      cfg = pktrack::load_config(path.string());
    }
    if (g.seed) cfg.override_seeds(*g.seed);
    cfg.validate();
  } catch (const pktrack::Error& e) {
    throw pktrack::StageError("config", e.what());
  }
  return cfg;
}

void print_summary(const pktrack::EvaluationReport& r) {
  auto show = [](const char* name, const std::optional<double>& v) {
    std::cout << "  " << name << ": " << (v ? pktrack::csv::exact(*v) : std::string("n/a")) << '\n';
  };
  std::cout << "report over " << r.rows.size() << " test scenes, " << r.windows << " windows\n";
  show("weighted_fov_error_pct", r.weighted_fov_error_pct);
  show("fov_error_visible_pct", r.fov_error_visible_pct);
  show("pos_error_m_mean", r.pos_error_m_mean);
  show("pos_error_m_std", r.pos_error_m_std);
  show("missed_track_rate", r.missed_track_rate);
  show("boundary_error_mean", r.boundary_error_mean);
  show("dtw_mean", r.dtw_mean);
  show("dtw_baseline_mean", r.dtw_baseline_mean);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pktrack: object tracking from encrypted video traffic"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "experiment config (JSON)");
  app.add_option("--seed", g.seed, "replace every named seed with streams derived from N");
  app.add_option("--out", g.out, "run directory")->capture_default_str();

  using Stage = void (*)(pktrack::StageRunner&);
  struct Verb {
    const char* name;
    const char* help;
    Stage fn;
  };
  const Verb verbs[] = {
      {"gen", "generate trajectories, GPS labels and the train/test split", pktrack::stage_gen},
      {"encode", "render scenes and encode gray frame sizes and blue features", pktrack::stage_encode},
      {"netem", "packetize and emulate gray node traffic", pktrack::stage_netem},
      {"train-stage1", "train the frame-boundary detector on training traces", pktrack::stage_train_stage1},
      {"extract", "reconstruct frame sizes from traces with stage 1 and the baseline", pktrack::stage_extract},
      {"train-stage2", "train the tracker on training scenes", pktrack::stage_train_stage2},
      {"track", "run the tracker on test scenes", pktrack::stage_track},
  };
  for (const auto& v : verbs) {
    auto* sub = app.add_subcommand(v.name, v.help);
    sub->callback([&g, &v] {
      pktrack::StageRunner r(resolve_config(g, std::string(v.name) != "gen"), g.out, &std::cerr);
      v.fn(r);
    });
  }

  auto* eval = app.add_subcommand("eval", "evaluate predictions and write report.csv");
  eval->callback([&g] {
    pktrack::StageRunner r(resolve_config(g, true), g.out, &std::cerr);
    print_summary(pktrack::stage_eval(r));
  });

  auto* pipeline = app.add_subcommand("pipeline", "run every stage from a config");
  pipeline->callback([&g] {
    const auto cfg = resolve_config(g, false);
    print_summary(pktrack::run_pipeline(cfg, g.out, &std::cerr));
  });

  std::string report_a, report_b;
  auto* compare = app.add_subcommand("compare", "per-metric deltas between two report.csv files");
  compare->add_option("report_a", report_a, "first report")->required();
  compare->add_option("report_b", report_b, "second report")->required();
  compare->callback([&] {
    try {
      const auto rows = pktrack::compare_runs(pktrack::import_report(report_a), pktrack::import_report(report_b));
      pktrack::fs::create_directories(g.out);
      const auto path = (pktrack::fs::path(g.out) / "comparison.csv").string();
      pktrack::export_comparison(rows, path);
      std::cout << "wrote " << path << " (" << rows.size() << " rows)\n";
    } catch (const pktrack::StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw pktrack::StageError("compare", e.what());
    }
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const pktrack::StageError& e) {
    std::cerr << "pktrack: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "pktrack: [cli] " << e.what() << '\n';
    return 1;
  }
  return 0;
}
