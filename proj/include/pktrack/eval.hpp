// Tracking metrics, per-scenario report rows, report.csv and run comparison.
//
// report.csv is long-form: scenario,metric,value. Per-scenario rows use the
// scene id; pooled rows use the scenario "ALL". Undefined values (no windows
// to average over) are written as an empty field.

#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pktrack/csv.hpp"
#include "pktrack/error.hpp"
#include "pktrack/stage2.hpp"

namespace pktrack {

struct FovEval {
  std::size_t windows = 0;
  std::size_t misclassified = 0;
  std::size_t visible_windows = 0;  // true class visible
  std::size_t visible_misclassified = 0;

  double error_pct() const { return windows ? 100.0 * misclassified / windows : 0.0; }
  std::optional<double> visible_error_pct() const {
    if (!visible_windows) return std::nullopt;
    return 100.0 * visible_misclassified / visible_windows;
  }
};

/// Predicted class y_fov >= tau against true class r >= tau, over all windows
/// and over windows whose true class is visible.
inline FovEval eval_fov(const std::vector<TrackerPrediction>& preds, const std::vector<TrackWindowLabel>& labels,
                        double tau) {
  if (preds.size() != labels.size())
    throw AlignmentError("eval_fov: " + std::to_string(preds.size()) + " predictions vs " +
                         std::to_string(labels.size()) + " labels");
  FovEval e;
  e.windows = preds.size();
  for (std::size_t n = 0; n < preds.size(); ++n) {
    const bool truth = passes_tau(labels[n].r, tau);
    const bool pred = preds[n].y_fov >= tau;
    if (pred != truth) ++e.misclassified;
    if (truth) {
      ++e.visible_windows;
      if (pred != truth) ++e.visible_misclassified;
    }
  }
  return e;
}

struct PositionEval {
  std::vector<double> errors_m;     // per compared window
  std::size_t truth_windows = 0;    // true class visible with a position
  std::size_t missed = 0;           // of those, no predicted position

  std::size_t count() const { return errors_m.size(); }
  std::optional<double> mean_m() const {
    if (errors_m.empty()) return std::nullopt;
    double s = 0.0;
    for (double e : errors_m) s += e;
    return s / static_cast<double>(errors_m.size());
  }
  /// Population standard deviation.
  std::optional<double> std_m() const {
    const auto m = mean_m();
    if (!m) return std::nullopt;
    double ss = 0.0;
    for (double e : errors_m) ss += (e - *m) * (e - *m);
    return std::sqrt(ss / static_cast<double>(errors_m.size()));
  }
  std::optional<double> missed_rate() const {
    if (!truth_windows) return std::nullopt;
    return static_cast<double>(missed) / static_cast<double>(truth_windows);
  }
};

/// L2 error over windows where both a predicted and a label position exist.
/// Windows whose true class is visible but carry no prediction count as missed.
inline PositionEval eval_position(const std::vector<TrackerPrediction>& preds,
                                  const std::vector<TrackWindowLabel>& labels, double tau) {
  if (preds.size() != labels.size())
    throw AlignmentError("eval_position: " + std::to_string(preds.size()) + " predictions vs " +
                         std::to_string(labels.size()) + " labels");
  PositionEval e;
  for (std::size_t n = 0; n < preds.size(); ++n) {
    const auto& l = labels[n];
    if (preds[n].pos && l.p_avg) e.errors_m.push_back((*preds[n].pos - *l.p_avg).norm());
    if (l.p_avg && passes_tau(l.r, tau)) {
      ++e.truth_windows;
      if (!preds[n].pos) ++e.missed;
    }
  }
  return e;
}

// ---------------------------------------------------------------------------
// Report

struct ScenarioMetrics {
  std::string scenario;
  FovEval fov;
  PositionEval pos;
  std::vector<double> boundary_errors;  // per gray node
  std::vector<double> dtw_learned;      // per gray node
  std::vector<double> dtw_baseline;     // per gray node
};

inline std::optional<double> mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

struct ReportEntry {
  std::string scenario;
  std::string metric;
  std::optional<double> value;

  bool operator==(const ReportEntry&) const = default;
};

struct EvaluationReport {
  std::vector<ScenarioMetrics> rows;

  // Pooled over scenarios. FoV and position errors pool every window, so the
  // weighted FoV error is the window-count-weighted mean of per-scenario
  // errors. fov_error_pct_mean/std summarize the per-scenario errors.
  std::optional<double> fov_error_pct_mean, fov_error_pct_std;
  std::optional<double> weighted_fov_error_pct, fov_error_visible_pct;
  std::optional<double> pos_error_m_mean, pos_error_m_std, missed_track_rate;
  std::optional<double> dtw_mean, dtw_baseline_mean, boundary_error_mean;
  std::size_t windows = 0;

  static EvaluationReport aggregate(std::vector<ScenarioMetrics> rows) {
    EvaluationReport r;
    r.rows = std::move(rows);
    FovEval fov;
    PositionEval pos;
    std::vector<double> per_scene, bnd, dl, db;
    for (const auto& s : r.rows) {
      fov.windows += s.fov.windows;
      fov.misclassified += s.fov.misclassified;
      fov.visible_windows += s.fov.visible_windows;
      fov.visible_misclassified += s.fov.visible_misclassified;
      if (s.fov.windows) per_scene.push_back(s.fov.error_pct());
      pos.errors_m.insert(pos.errors_m.end(), s.pos.errors_m.begin(), s.pos.errors_m.end());
      pos.truth_windows += s.pos.truth_windows;
      pos.missed += s.pos.missed;
      bnd.insert(bnd.end(), s.boundary_errors.begin(), s.boundary_errors.end());
      dl.insert(dl.end(), s.dtw_learned.begin(), s.dtw_learned.end());
      db.insert(db.end(), s.dtw_baseline.begin(), s.dtw_baseline.end());
    }
    r.windows = fov.windows;
    r.fov_error_pct_mean = mean_of(per_scene);
    if (r.fov_error_pct_mean) {
      double ss = 0.0;
      for (double e : per_scene) ss += (e - *r.fov_error_pct_mean) * (e - *r.fov_error_pct_mean);
      r.fov_error_pct_std = std::sqrt(ss / static_cast<double>(per_scene.size()));
    }
    if (fov.windows) r.weighted_fov_error_pct = fov.error_pct();
    r.fov_error_visible_pct = fov.visible_error_pct();
    r.pos_error_m_mean = pos.mean_m();
    r.pos_error_m_std = pos.std_m();
    r.missed_track_rate = pos.missed_rate();
    r.dtw_mean = mean_of(dl);
    r.dtw_baseline_mean = mean_of(db);
    r.boundary_error_mean = mean_of(bnd);
    return r;
  }

  std::vector<ReportEntry> entries() const {
    std::vector<ReportEntry> out;
    auto add = [&](const std::string& sc, const std::string& m, std::optional<double> v) {
      out.push_back({sc, m, v});
    };
    auto count = [](std::size_t n) { return std::optional<double>(static_cast<double>(n)); };
    for (const auto& s : rows) {
      add(s.scenario, "windows", count(s.fov.windows));
      add(s.scenario, "fov_error_pct", s.fov.windows ? std::optional<double>(s.fov.error_pct()) : std::nullopt);
      add(s.scenario, "fov_error_visible_pct", s.fov.visible_error_pct());
      add(s.scenario, "visible_windows", count(s.fov.visible_windows));
      add(s.scenario, "pos_error_m_mean", s.pos.mean_m());
      add(s.scenario, "pos_error_m_std", s.pos.std_m());
      add(s.scenario, "pos_windows", count(s.pos.count()));
      add(s.scenario, "missed_track_rate", s.pos.missed_rate());
      add(s.scenario, "boundary_error", mean_of(s.boundary_errors));
      add(s.scenario, "dtw_learned", mean_of(s.dtw_learned));
      add(s.scenario, "dtw_baseline", mean_of(s.dtw_baseline));
    }
    add("ALL", "scenarios", count(rows.size()));
    add("ALL", "windows", count(windows));
    add("ALL", "fov_error_pct_mean", fov_error_pct_mean);
    add("ALL", "fov_error_pct_std", fov_error_pct_std);
    add("ALL", "weighted_fov_error_pct", weighted_fov_error_pct);
    add("ALL", "fov_error_visible_pct", fov_error_visible_pct);
    add("ALL", "pos_error_m_mean", pos_error_m_mean);
    add("ALL", "pos_error_m_std", pos_error_m_std);
    add("ALL", "missed_track_rate", missed_track_rate);
    add("ALL", "boundary_error_mean", boundary_error_mean);
    add("ALL", "dtw_mean", dtw_mean);
    add("ALL", "dtw_baseline_mean", dtw_baseline_mean);
    return out;
  }
};

inline std::string format_optional(const std::optional<double>& v) { return v ? csv::exact(*v) : std::string(); }

inline void export_report(const std::vector<ReportEntry>& entries, const std::string& path) {
  auto out = csv::open_out(path);
  out << "scenario,metric,value\n";
  for (const auto& e : entries) out << e.scenario << ',' << e.metric << ',' << format_optional(e.value) << '\n';
}
inline void export_report(const EvaluationReport& r, const std::string& path) { export_report(r.entries(), path); }

inline std::vector<ReportEntry> import_report(const std::string& path) {
  auto in = csv::open_in(path);
  csv::Reader reader(in);
  const auto col = reader.require({"scenario", "metric", "value"});
  std::vector<ReportEntry> out;
  std::vector<std::string> f;
  while (reader.next(f)) {
    const auto line = reader.line();
    ReportEntry e{f[col[0]], f[col[1]], std::nullopt};
    if (e.scenario.empty() || e.metric.empty()) throw ParseError("empty scenario or metric", line);
    if (!f[col[2]].empty()) e.value = csv::to_double(f[col[2]], line);
    out.push_back(std::move(e));
  }
  return out;
}

inline std::optional<double> find_entry(const std::vector<ReportEntry>& entries, const std::string& scenario,
                                        const std::string& metric) {
  for (const auto& e : entries)
    if (e.scenario == scenario && e.metric == metric) return e.value;
  throw KeyMismatch("report has no " + scenario + "/" + metric);
}

// ---------------------------------------------------------------------------
// Run comparison: delta = b - a (negative means run b is lower);
// ratio = a / b (above 1 means run b is lower).

struct DeltaRow {
  std::string scenario, metric;
  std::optional<double> a, b, delta, ratio;
};

inline std::vector<DeltaRow> compare_runs(const std::vector<ReportEntry>& a, const std::vector<ReportEntry>& b) {
  std::map<std::pair<std::string, std::string>, std::optional<double>> mb;
  for (const auto& e : b)
    if (!mb.emplace(std::make_pair(e.scenario, e.metric), e.value).second)
      throw KeyMismatch("duplicate key " + e.scenario + "/" + e.metric + " in report b");
  std::vector<DeltaRow> out;
  std::map<std::pair<std::string, std::string>, bool> seen;
  for (const auto& e : a) {
    const auto key = std::make_pair(e.scenario, e.metric);
    if (!seen.emplace(key, true).second) throw KeyMismatch("duplicate key " + e.scenario + "/" + e.metric + " in report a");
    const auto it = mb.find(key);
    if (it == mb.end()) throw KeyMismatch("report b lacks " + e.scenario + "/" + e.metric);
    DeltaRow d{e.scenario, e.metric, e.value, it->second, std::nullopt, std::nullopt};
    if (d.a && d.b) {
      d.delta = *d.b - *d.a;
      if (*d.b != 0.0) d.ratio = *d.a / *d.b;
      else if (*d.a == 0.0) d.ratio = 1.0;
    }
    out.push_back(std::move(d));
  }
  if (out.size() != mb.size()) {
    for (const auto& [key, v] : mb)
      if (!seen.count(key)) throw KeyMismatch("report a lacks " + key.first + "/" + key.second);
  }
  return out;
}

inline void export_comparison(const std::vector<DeltaRow>& rows, const std::string& path) {
  auto out = csv::open_out(path);
  out << "scenario,metric,a,b,delta_b_minus_a,ratio_a_over_b\n";
  for (const auto& r : rows)
    out << r.scenario << ',' << r.metric << ',' << format_optional(r.a) << ',' << format_optional(r.b) << ','
        << format_optional(r.delta) << ',' << format_optional(r.ratio) << '\n';
}

}  // namespace pktrack
