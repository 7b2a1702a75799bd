#pragma once

// Scores and report exports. All inputs are physical units.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "phase/errors.hpp"
#include "phase/io.hpp"
#include "phase/ood.hpp"
#include "phase/pipeline.hpp"
#include "phase/sample.hpp"

namespace phase::metrics {

namespace fs = std::filesystem;

inline double r2(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) throw DimensionError("r2: prediction and truth lengths differ");
  if (truth.size() < 2) throw UndefinedMetricError("r2 needs at least two samples");
  const double mean = std::accumulate(truth.begin(), truth.end(), 0.0) / static_cast<double>(truth.size());
  double ss_res = 0, ss_tot = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ss_res += (truth[i] - pred[i]) * (truth[i] - pred[i]);
    ss_tot += (truth[i] - mean) * (truth[i] - mean);
  }
  if (ss_tot == 0) throw UndefinedMetricError("r2 is undefined for constant truth");
  return 1 - ss_res / ss_tot;
}

inline double mse(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) throw DimensionError("rmse: prediction and truth lengths differ");
  if (truth.empty()) throw RangeError("rmse of no samples");
  double s = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return s / static_cast<double>(truth.size());
}

inline double rmse(std::span<const double> pred, std::span<const double> truth) { return std::sqrt(mse(pred, truth)); }

/// Rows of a [n, target_size] table restricted to one task, optionally one component.
inline std::vector<double> task_column(std::span<const double> table, const Dims& d, Task t,
                                       std::optional<std::size_t> component = std::nullopt,
                                       const std::vector<std::size_t>* rows = nullptr) {
  const std::size_t TT = target_size(d), off = task_offset(t, d), w = task_width(t, d);
  if (table.size() % TT) throw DimensionError("table width is not the target size");
  if (component && *component >= w) throw RangeError("component " + std::to_string(*component) + " out of range for " + std::string(task_name(t)));
  std::vector<std::size_t> all;
  if (!rows) {
    all.resize(table.size() / TT);
    std::iota(all.begin(), all.end(), std::size_t{0});
    rows = &all;
  }
  std::vector<double> out;
  for (std::size_t r : *rows) {
    if (component) out.push_back(table[r * TT + off + *component]);
    else
      for (std::size_t k = 0; k < w; ++k) out.push_back(table[r * TT + off + k]);
  }
  return out;
}

struct TaskScore {
  Task task;
  double r2 = 0, rmse = 0;
};

/// Task-level scores pool every component of the task.
inline std::vector<TaskScore> task_scores(std::span<const double> pred, std::span<const double> truth, const Dims& d) {
  std::vector<TaskScore> out;
  for (Task t : kAllTasks) {
    const auto p = task_column(pred, d, t), y = task_column(truth, d, t);
    out.push_back({t, r2(p, y), rmse(p, y)});
  }
  return out;
}

/// Mean over rows of (npp - (gpp - ar))^2.
inline double physics_residual(std::span<const double> table, const Dims& d) {
  const auto gpp = task_column(table, d, Task::gpp), ar = task_column(table, d, Task::ar), npp = task_column(table, d, Task::npp);
  if (npp.empty()) throw RangeError("physics residual of no rows");
  double s = 0;
  for (std::size_t i = 0; i < npp.size(); ++i) s += (npp[i] - (gpp[i] - ar[i])) * (npp[i] - (gpp[i] - ar[i]));
  return s / static_cast<double>(npp.size());
}

struct DimScore {
  std::size_t index = 0;
  double r2 = 0;  // NaN when this component's truth is constant
  double rmse = 0;
  std::size_t n = 0;
};

inline std::vector<DimScore> per_dimension_scores(std::span<const double> pred, std::span<const double> truth,
                                                  const Dims& d, Task t) {
  if (task_shape(t) == TaskShape::scalar) throw ContractError(std::string(task_name(t)) + " has no per-dimension axis");
  std::vector<DimScore> out;
  for (std::size_t k = 0; k < task_width(t, d); ++k) {
    const auto p = task_column(pred, d, t, k), y = task_column(truth, d, t, k);
    DimScore s{k, std::numeric_limits<double>::quiet_NaN(), rmse(p, y), y.size()};
    try {
      s.r2 = r2(p, y);
    } catch (const UndefinedMetricError&) {
    }
    out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Latitude bands

inline constexpr double kTropicsLat = 23.0;

enum class Band { tropics, extratropics };
inline std::string_view band_name(Band b) { return b == Band::tropics ? "tropics" : "extratropics"; }
inline bool in_band(Band b, double lat) { return (std::abs(lat) < kTropicsLat) == (b == Band::tropics); }

struct BandSummary {
  Band band;
  std::size_t cells = 0, n = 0;
  double mean = 0, rmse = 0;
  double q05 = 0, q25 = 0, q50 = 0, q75 = 0, q95 = 0;
  std::vector<double> edges;         // histogram bin edges, size bins + 1
  std::vector<std::size_t> counts;  // per bin
};

/// Signed errors (pred - truth) of one task over the rows in the band, every component pooled.
inline BandSummary latitudinal_errors(std::span<const double> pred, std::span<const double> truth,
                                      std::span<const double> lat, const Dims& d, Task t, Band band,
                                      std::vector<double> edges = {}) {
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < lat.size(); ++r)
    if (in_band(band, lat[r])) rows.push_back(r);
  if (rows.empty()) throw RangeError("no cells in the " + std::string(band_name(band)) + " band");
  const auto p = task_column(pred, d, t, std::nullopt, &rows), y = task_column(truth, d, t, std::nullopt, &rows);
  std::vector<double> e(p.size());
  for (std::size_t i = 0; i < e.size(); ++i) e[i] = p[i] - y[i];
  BandSummary s;
  s.band = band;
  s.cells = rows.size();
  s.n = e.size();
  s.mean = std::accumulate(e.begin(), e.end(), 0.0) / static_cast<double>(e.size());
  s.rmse = rmse(p, y);
  s.q05 = ood::percentile(e, 5), s.q25 = ood::percentile(e, 25), s.q50 = ood::percentile(e, 50);
  s.q75 = ood::percentile(e, 75), s.q95 = ood::percentile(e, 95);
  if (edges.empty()) {
    double m = 0;
    for (double x : e) m = std::max(m, std::abs(x));
    if (m == 0) m = 1;
    constexpr std::size_t kBins = 20;
    for (std::size_t i = 0; i <= kBins; ++i) edges.push_back(-m + 2 * m * static_cast<double>(i) / kBins);
  }
  s.edges = edges;
  s.counts.assign(edges.size() - 1, 0);
  for (double x : e) {
    auto it = std::upper_bound(edges.begin(), edges.end(), x);
    std::size_t bin = it == edges.begin() ? 0 : static_cast<std::size_t>(it - edges.begin()) - 1;
    s.counts[std::min(bin, s.counts.size() - 1)]++;
  }
  return s;
}

/// Shared symmetric edges covering both bands, so the histograms are comparable.
inline std::vector<double> common_edges(std::span<const double> pred, std::span<const double> truth, const Dims& d, Task t,
                                        std::size_t bins = 20) {
  const auto p = task_column(pred, d, t), y = task_column(truth, d, t);
  double m = 0;
  for (std::size_t i = 0; i < p.size(); ++i) m = std::max(m, std::abs(p[i] - y[i]));
  if (m == 0) m = 1;
  std::vector<double> edges;
  for (std::size_t i = 0; i <= bins; ++i) edges.push_back(-m + 2 * m * static_cast<double>(i) / static_cast<double>(bins));
  return edges;
}

// ---------------------------------------------------------------------------
// Exports

/// lat, lon, predicted, truth, difference for one task component.
inline io::Csv export_map(std::span<const double> pred, std::span<const double> truth, std::span<const double> lat,
                          std::span<const double> lon, std::span<const long long> ids, const Dims& d, Task t,
                          std::size_t component) {
  const auto p = task_column(pred, d, t, component), y = task_column(truth, d, t, component);
  io::Csv c({"id", "lat", "lon", "predicted", "truth", "difference"});
  for (std::size_t r = 0; r < p.size(); ++r) c.row(ids[r], lat[r], lon[r], p[r], y[r], p[r] - y[r]);
  return c;
}

/// Every component of the six state targets, long form.
inline io::Csv spatial_csv(std::span<const double> pred, const data::Split& split, const Dims& d) {
  const std::size_t TT = target_size(d);
  if (pred.size() != split.n * TT) throw DimensionError("prediction table does not match the split");
  io::Csv c({"id", "lat", "lon", "task", "index", "predicted", "truth", "difference"});
  for (std::size_t r = 0; r < split.n; ++r)
    for (Task t : kStateTasks) {
      const std::size_t off = task_offset(t, d);
      for (std::size_t k = 0; k < task_width(t, d); ++k) {
        const double p = pred[r * TT + off + k], y = split.targets[r * TT + off + k];
        c.row(split.ids[r], split.lat[r], split.lon[r], std::string(task_name(t)), k, p, y, p - y);
      }
    }
  return c;
}

struct EvalReport {
  std::vector<TaskScore> tasks;
  std::vector<std::pair<Task, std::vector<DimScore>>> dims;
  std::vector<BandSummary> bands;  // soil3c by default
  bool restart_capable = false;
  double phys_residual = 0;

  const TaskScore& score(Task t) const {
    for (const auto& s : tasks)
      if (s.task == t) return s;
    throw ContractError("task not in report");
  }
  double mean_state_r2() const {
    double s = 0;
    for (Task t : kStateTasks) s += score(t).r2;
    return s / static_cast<double>(kStateTasks.size());
  }
};

/// `pred`/`truth` are [n, target_size] physical tables over the rows of `split`.
inline EvalReport evaluate(std::span<const double> pred, const data::Split& split, const Dims& d,
                           Task band_task = Task::soil3c) {
  EvalReport r;
  r.tasks = task_scores(pred, split.targets, d);
  for (Task t : kAllTasks)
    if (task_shape(t) != TaskShape::scalar) r.dims.emplace_back(t, per_dimension_scores(pred, split.targets, d, t));
  const auto edges = common_edges(pred, split.targets, d, band_task);
  for (Band b : {Band::tropics, Band::extratropics}) {
    try {
      r.bands.push_back(latitudinal_errors(pred, split.targets, split.lat, d, band_task, b, edges));
    } catch (const RangeError&) {
    }
  }
  r.phys_residual = physics_residual(pred, d);
  r.restart_capable = true;
  for (Task t : kStateTasks)
    for (double v : task_column(pred, d, t)) r.restart_capable = r.restart_capable && v > 0 && std::isfinite(v);
  return r;
}

inline io::Csv metrics_csv(const EvalReport& r) {
  io::Csv c({"task", "r2", "rmse"});
  for (const auto& s : r.tasks) c.row(std::string(task_name(s.task)), s.r2, s.rmse);
  return c;
}

/// Scalar summary: mean state R2, physics residual, restart capability.
inline io::Csv summary_csv(const EvalReport& r) {
  io::Csv c({"key", "value"});
  c.row("mean_state_r2", r.mean_state_r2());
  c.row("phys_residual", r.phys_residual);
  c.row("restart_capable", r.restart_capable ? 1 : 0);
  return c;
}

inline io::Csv per_dimension_csv(const EvalReport& r) {
  io::Csv c({"task", "axis", "index", "r2", "rmse", "n"});
  for (const auto& [t, v] : r.dims)
    for (const auto& s : v)
      c.row(std::string(task_name(t)), task_shape(t) == TaskShape::layer ? "layer" : "pft", s.index,
            std::isnan(s.r2) ? std::string("nan") : io::fmt(s.r2), s.rmse, s.n);
  return c;
}

inline io::Csv bands_csv(const EvalReport& r) {
  io::Csv c({"band", "cells", "n", "mean", "rmse", "q05", "q25", "q50", "q75", "q95"});
  for (const auto& b : r.bands) c.row(std::string(band_name(b.band)), b.cells, b.n, b.mean, b.rmse, b.q05, b.q25, b.q50, b.q75, b.q95);
  return c;
}

inline io::Csv histogram_csv(const EvalReport& r) {
  io::Csv c({"band", "bin_lo", "bin_hi", "count"});
  for (const auto& b : r.bands)
    for (std::size_t i = 0; i < b.counts.size(); ++i) c.row(std::string(band_name(b.band)), b.edges[i], b.edges[i + 1], b.counts[i]);
  return c;
}

/// Mean and sample standard deviation of per-seed values.
struct MeanStd {
  double mean = 0, std = 0;
};
inline MeanStd mean_std(const std::vector<double>& v) {
  if (v.empty()) throw RangeError("mean of no values");
  MeanStd m;
  m.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double s = 0;
    for (double x : v) s += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(s / static_cast<double>(v.size() - 1));
  }
  return m;
}

/// Task x (r2 mean, r2 std, rmse mean, rmse std) over several seeds' reports.
inline io::Csv seed_summary_csv(const std::vector<EvalReport>& reports) {
  io::Csv c({"task", "r2_mean", "r2_std", "rmse_mean", "rmse_std", "seeds"});
  for (Task t : kAllTasks) {
    std::vector<double> a, b;
    for (const auto& r : reports) a.push_back(r.score(t).r2), b.push_back(r.score(t).rmse);
    const auto ra = mean_std(a), rb = mean_std(b);
    c.row(std::string(task_name(t)), ra.mean, ra.std, rb.mean, rb.std, reports.size());
  }
  return c;
}

}  // namespace phase::metrics
