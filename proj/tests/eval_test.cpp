#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "pktrack/eval.hpp"

using namespace pktrack;

namespace {

TrackerPrediction pred(double y, std::optional<Vec2> p = std::nullopt) {
  TrackerPrediction t;
  t.y_fov = y;
  t.pos = p;
  return t;
}
TrackWindowLabel label(double r, std::optional<Vec2> p = std::nullopt) { return {r, p}; }

std::string tmp(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("pktrack_eval_" + name)).string();
}

}  // namespace

// ---------------------------------------------------------------------------
// FoV

TEST(EvalFov, AllCorrectIsZero) {
  const std::vector<TrackerPrediction> p{pred(0.9), pred(0.1), pred(1.0)};
  const std::vector<TrackWindowLabel> l{label(1.0), label(0.0), label(5.0 / 6.0)};
  const FovEval e = eval_fov(p, l, 5.0 / 6.0);
  EXPECT_EQ(e.error_pct(), 0.0);
  EXPECT_EQ(*e.visible_error_pct(), 0.0);
}

TEST(EvalFov, OneOfFourIsTwentyFivePercent) {
  const std::vector<TrackerPrediction> p{pred(0.9), pred(0.1), pred(0.2), pred(0.95)};
  const std::vector<TrackWindowLabel> l{label(1.0), label(0.0), label(1.0), label(1.0)};
  const FovEval e = eval_fov(p, l, 0.8);
  EXPECT_DOUBLE_EQ(e.error_pct(), 25.0);
  EXPECT_EQ(e.visible_windows, 3u);
  EXPECT_NEAR(*e.visible_error_pct(), 100.0 / 3.0, 1e-12);
}

TEST(EvalFov, VisibleVariantUndefinedWithoutVisibleWindows) {
  const FovEval e = eval_fov({pred(0.9)}, {label(0.0)}, 0.5);
  EXPECT_DOUBLE_EQ(e.error_pct(), 100.0);
  EXPECT_FALSE(e.visible_error_pct().has_value());
}

TEST(EvalFov, RandomPredictionsOnBalancedLabelsNearFifty) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<TrackerPrediction> p;
  std::vector<TrackWindowLabel> l;
  for (int i = 0; i < 10000; ++i) {
    p.push_back(pred(u(rng) < 0.5 ? 0.9 : 0.1));
    l.push_back(label(i % 2 ? 1.0 : 0.0));
  }
  EXPECT_NEAR(eval_fov(p, l, 0.5).error_pct(), 50.0, 2.0);
}

TEST(EvalFov, LengthMismatchThrows) {
  EXPECT_THROW(eval_fov({pred(0.5)}, {}, 0.5), AlignmentError);
  EXPECT_THROW(eval_position({pred(0.5)}, {}, 0.5), AlignmentError);
}

// ---------------------------------------------------------------------------
// Position

TEST(EvalPosition, ExactPredictionsGiveZero) {
  const std::vector<TrackerPrediction> p{pred(0.9, Vec2(1, 2)), pred(0.9, Vec2(-3, 0.5))};
  const std::vector<TrackWindowLabel> l{label(1.0, Vec2(1, 2)), label(1.0, Vec2(-3, 0.5))};
  const PositionEval e = eval_position(p, l, 0.5);
  EXPECT_EQ(*e.mean_m(), 0.0);
  EXPECT_EQ(*e.std_m(), 0.0);
  EXPECT_EQ(*e.missed_rate(), 0.0);
}

TEST(EvalPosition, ThreeFourFive) {
  const PositionEval e = eval_position({pred(0.9, Vec2(4, 6))}, {label(1.0, Vec2(1, 2))}, 0.5);
  EXPECT_DOUBLE_EQ(*e.mean_m(), 5.0);
}

TEST(EvalPosition, MissedTracksCountedSeparately) {
  const std::vector<TrackerPrediction> p{pred(0.1), pred(0.9, Vec2(0, 0)), pred(0.1), pred(0.9, Vec2(1, 0))};
  const std::vector<TrackWindowLabel> l{label(1.0, Vec2(0, 0)), label(1.0, Vec2(0, 0)), label(0.0),
                                        label(0.0)};
  const PositionEval e = eval_position(p, l, 0.5);
  EXPECT_EQ(e.count(), 1u);
  EXPECT_EQ(e.truth_windows, 2u);
  EXPECT_EQ(e.missed, 1u);
  EXPECT_DOUBLE_EQ(*e.missed_rate(), 0.5);
}

TEST(EvalPosition, MatchesBruteForceRecomputation) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-5.0, 5.0), c(0.0, 1.0);
  std::vector<TrackerPrediction> p;
  std::vector<TrackWindowLabel> l;
  for (int i = 0; i < 500; ++i) {
    const bool has_pred = c(rng) < 0.7, has_label = c(rng) < 0.8;
    p.push_back(has_pred ? pred(0.9, Vec2(u(rng), u(rng))) : pred(0.1));
    l.push_back(has_label ? label(1.0, Vec2(u(rng), u(rng))) : label(0.0));
  }
  double sum = 0.0, n = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i].pos && l[i].p_avg) {
      sum += std::hypot(p[i].pos->x() - l[i].p_avg->x(), p[i].pos->y() - l[i].p_avg->y());
      n += 1.0;
    }
  const double mean = sum / n;
  double ss = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i].pos && l[i].p_avg) {
      const double d = std::hypot(p[i].pos->x() - l[i].p_avg->x(), p[i].pos->y() - l[i].p_avg->y()) - mean;
      ss += d * d;
    }
  const PositionEval e = eval_position(p, l, 0.5);
  EXPECT_NEAR(*e.mean_m(), mean, 1e-12);
  EXPECT_NEAR(*e.std_m(), std::sqrt(ss / n), 1e-12);
}

// ---------------------------------------------------------------------------
// Report

namespace {

EvaluationReport random_report(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<ScenarioMetrics> rows;
  for (int s = 0; s < 4; ++s) {
    std::vector<TrackerPrediction> p;
    std::vector<TrackWindowLabel> l;
    const int n = 5 + 7 * s;
    for (int i = 0; i < n; ++i) {
      p.push_back(u(rng) < 0.5 ? pred(0.9, Vec2(u(rng), u(rng))) : pred(0.2));
      l.push_back(u(rng) < 0.6 ? label(1.0, Vec2(u(rng), u(rng))) : label(0.0));
    }
    ScenarioMetrics m;
    m.scenario = "s" + std::to_string(s);
    m.fov = eval_fov(p, l, 0.8);
    m.pos = eval_position(p, l, 0.8);
    m.boundary_errors = {u(rng) * 0.01, u(rng) * 0.01};
    m.dtw_learned = {u(rng), u(rng)};
    m.dtw_baseline = {1 + u(rng), 1 + u(rng)};
    rows.push_back(std::move(m));
  }
  return EvaluationReport::aggregate(std::move(rows));
}

}  // namespace

TEST(Report, WeightedFovIsWindowCountWeightedMean) {
  const EvaluationReport r = random_report(3);
  double num = 0.0, den = 0.0;
  for (const auto& s : r.rows) {
    num += s.fov.error_pct() * s.fov.windows;
    den += s.fov.windows;
  }
  EXPECT_NEAR(*r.weighted_fov_error_pct, num / den, 1e-12);
  EXPECT_EQ(r.windows, static_cast<std::size_t>(den));
}

TEST(Report, AllErrorFieldsNonNegative) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed)
    for (const auto& e : random_report(seed).entries())
      if (e.value) {
        EXPECT_GE(*e.value, 0.0) << e.scenario << "/" << e.metric;
      }
}

TEST(Report, CsvRoundTrip) {
  const auto entries = random_report(4).entries();
  const std::string path = tmp("report.csv");
  export_report(entries, path);
  EXPECT_EQ(import_report(path), entries);
}

TEST(Report, ImportRejectsBadValue) {
  const std::string path = tmp("bad_report.csv");
  { csv::open_out(path) << "scenario,metric,value\nALL,dtw_mean,abc\n"; }
  EXPECT_THROW(import_report(path), ParseError);
}

// ---------------------------------------------------------------------------
// Comparison

TEST(Compare, ReportAgainstItselfHasZeroDeltas) {
  const auto entries = random_report(6).entries();
  for (const auto& d : compare_runs(entries, entries)) {
    if (!d.a) continue;
    EXPECT_EQ(*d.delta, 0.0);
    EXPECT_EQ(*d.ratio, 1.0);
  }
}

TEST(Compare, SignConventions) {
  const std::vector<ReportEntry> a{{"ALL", "weighted_fov_error_pct", 20.0}};
  const std::vector<ReportEntry> b{{"ALL", "weighted_fov_error_pct", 5.0}};
  const auto rows = compare_runs(a, b);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_DOUBLE_EQ(*rows[0].delta, -15.0);
  EXPECT_DOUBLE_EQ(*rows[0].ratio, 4.0);
}

TEST(Compare, MissingValuesGiveEmptyDeltas) {
  const std::vector<ReportEntry> a{{"ALL", "dtw_mean", std::nullopt}};
  const std::vector<ReportEntry> b{{"ALL", "dtw_mean", 1.0}};
  const auto rows = compare_runs(a, b);
  EXPECT_FALSE(rows[0].delta.has_value());
  EXPECT_FALSE(rows[0].ratio.has_value());
}

TEST(Compare, KeyMismatchThrows) {
  const std::vector<ReportEntry> a{{"s1", "windows", 3.0}};
  const std::vector<ReportEntry> b{{"s2", "windows", 3.0}};
  EXPECT_THROW(compare_runs(a, b), KeyMismatch);
  const std::vector<ReportEntry> c{{"s1", "windows", 3.0}, {"s1", "fov_error_pct", 1.0}};
  EXPECT_THROW(compare_runs(a, c), KeyMismatch);
  EXPECT_THROW(compare_runs(c, a), KeyMismatch);
}

TEST(Compare, ExportHeaderNamesConventions) {
  const auto entries = random_report(8).entries();
  const std::string path = tmp("cmp.csv");
  export_comparison(compare_runs(entries, entries), path);
  auto in = csv::open_in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "scenario,metric,a,b,delta_b_minus_a,ratio_a_over_b");
}
