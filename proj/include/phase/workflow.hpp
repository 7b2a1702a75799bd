#pragma once

// Multi-step workflows shared by the CLI and the acceptance runner: the
// restart check and attention inspection.

#include <algorithm>
#include <string>
#include <vector>

#include "phase/metrics.hpp"
#include "phase/restart.hpp"
#include "phase/training.hpp"

namespace phase::workflow {

/// A split of world records in the model's normalization.
inline data::Split model_split(const train::SurrogateModel& sm, const std::vector<SampleRecord>& records) {
  data::Split s;
  for (const auto& r : records) s.append(r, sm.stats);
  return s;
}

struct RestartOptions {
  std::size_t years = 100;
  double tol = 0.005;
};

struct RestartCheck {
  restart::RestartFile file;
  std::vector<long long> ids;
  std::vector<ood::Verdict> ood;
  std::vector<std::string> validation;  // empty when the simulator accepts the file
  sim::RestartReport report;            // only filled when validation passed
  std::vector<std::size_t> cold_start;  // years to tolerance from zero pools, per cell
  std::size_t window_years = 0;

  std::size_t cold_start_min() const { return *std::min_element(cold_start.begin(), cold_start.end()); }
  double cold_start_median() const {
    std::vector<double> v(cold_start.begin(), cold_start.end());
    return sim::detail::median(v);
  }
  double speedup() const { return static_cast<double>(cold_start_min()) / static_cast<double>(window_years); }
  std::size_t flagged() const {
    return static_cast<std::size_t>(std::count_if(ood.begin(), ood.end(), [](const ood::Verdict& v) { return v.flag; }));
  }
  /// Largest per-pool median relative error of the predicted slow (soil3c,
  /// soil4c) pools.
  double slow_prediction_error() const { return worst(is_slow, &sim::PoolDrift::before_median); }
  double fast_after_max() const { return worst(is_fast, &sim::PoolDrift::after_max); }
  double slow_drift_max() const { return worst(is_slow, &sim::PoolDrift::drift_max); }
  double slow_drift_median() const { return worst(is_slow, &sim::PoolDrift::drift_median); }

  io::Csv drift_csv() const {
    io::Csv c({"pool", "fast", "before_median", "before_max", "after_median", "after_max", "drift_median", "drift_max"});
    for (const auto& p : report.pools)
      c.row(p.pool, p.fast ? 1 : 0, p.before_median, p.before_max, p.after_median, p.after_max, p.drift_median, p.drift_max);
    return c;
  }
  io::Csv summary_csv() const {
    io::Csv c({"key", "value"});
    c.row("cells", ids.size());
    c.row("window_years", window_years);
    c.row("cold_start_min_years", cold_start_min());
    c.row("cold_start_median_years", cold_start_median());
    c.row("speedup", speedup());
    c.row("slow_prediction_median_error", slow_prediction_error());
    c.row("fast_after_max", fast_after_max());
    c.row("slow_drift_median", slow_drift_median());
    c.row("slow_drift_max", slow_drift_max());
    c.row("ood_flagged", flagged());
    c.row("validation_errors", validation.size());
    return c;
  }
  io::Csv ood_csv() const {
    io::Csv c({"id", "flag", "score", "reasons"});
    for (std::size_t i = 0; i < ood.size(); ++i) {
      std::string why;
      for (const auto& r : ood[i].reasons) why += (why.empty() ? "" : ";") + r;
      c.row(ids[i], ood[i].flag ? 1 : 0, ood[i].score, why);
    }
    return c;
  }

 private:
  static bool is_fast(const sim::PoolDrift& p) { return p.fast; }
  static bool is_slow(const sim::PoolDrift& p) { return p.pool == "soil3c" || p.pool == "soil4c"; }
  double worst(bool (*pick)(const sim::PoolDrift&), double sim::PoolDrift::*field) const {
    double m = 0;
    for (const auto& p : report.pools)
      if (pick(p)) m = std::max(m, p.*field);
    return m;
  }
};

/// Predicts every record, writes the predictions into a restart file, checks
/// the simulator accepts it, runs the restart and times a cold start per cell.
inline RestartCheck restart_check(const train::SurrogateModel& sm, const sim::World& w,
                                  const std::vector<SampleRecord>& records, const RestartOptions& opt = {}) {
  if (sm.dims.months % 12 || sm.dims.n_pft != w.n_pft()) throw DimensionError("model does not match the world");
  RestartCheck rc;
  rc.window_years = sm.dims.months / 12;
  if (rc.window_years > w.years) throw DimensionError("model input window is longer than the world's simulated span");
  const auto split = model_split(sm, records);
  const auto p = train::predict(sm, split);
  rc.ids = split.ids;
  rc.ood = ood::check_split(split, sm.dims, p.latent, sm.ood);
  std::vector<long long> expected;
  for (const auto& c : w.cells) expected.push_back(c.id);
  rc.file = restart::from_predictions(p.phys, split.ids, sm.dims, expected);
  const auto states = restart::to_states(rc.file, w, rc.window_years);
  rc.validation = restart::validate(states, w);
  if (rc.validation.empty()) rc.report = sim::restart_run(w, states, opt.years);
  for (std::size_t i = 0; i < w.cells.size(); ++i) rc.cold_start.push_back(sim::cold_start_years(w, i, opt.tol));
  return rc;
}

/// Mean first-layer attention over the rows of `split`, [heads, N, N].
struct AttentionMap {
  std::vector<std::string> groups;
  std::size_t heads = 0;
  std::vector<double> weights;

  io::Csv csv() const {
    io::Csv c({"head", "query", "key", "weight"});
    const std::size_t N = groups.size();
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) c.row(h, groups[i], groups[j], weights[(h * N + i) * N + j]);
    return c;
  }
};

inline AttentionMap attention_map(const train::SurrogateModel& sm, const data::Split& split) {
  if (!sm.model.attention_fusion())
    throw ContractError("variant " + std::string(model::variant_name(sm.model.variant)) + " has no attention fusion");
  if (split.n == 0) throw RangeError("no rows to inspect");
  const auto net = sm.network();
  AttentionMap m;
  for (auto g : sm.model.groups()) m.groups.emplace_back(model::group_name(g));
  m.heads = sm.model.heads;
  const std::size_t N = m.groups.size(), cell = m.heads * N * N;
  m.weights.assign(cell, 0.0);
  for (std::size_t lo = 0; lo < split.n; lo += train::kInferenceBatch) {
    std::vector<std::size_t> rows;
    for (std::size_t i = lo; i < std::min(split.n, lo + train::kInferenceBatch); ++i) rows.push_back(i);
    const auto b = model::make_batch<double>(split, rows, sm.dims, sm.stats, net.static_columns());
    std::vector<double> probs;
    net.latent(b, &probs);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t k = 0; k < cell; ++k) m.weights[k] += probs[r * cell + k];
  }
  for (auto& x : m.weights) x /= static_cast<double>(split.n);
  return m;
}

}  // namespace phase::workflow
