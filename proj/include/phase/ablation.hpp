#pragma once

// Ablation harness: trains every variant per seed on one dataset and tabulates
// held-out R2 of the slow targets against the full model.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "phase/metrics.hpp"
#include "phase/training.hpp"

namespace phase::ablation {

using model::Variant;
using train::TrainConfig;
using json = nlohmann::json;

struct AblationSpec {
  Variant variant = Variant::full;
  json overrides = json::object();  // applied on top of the base config
};

/// The training config for one variant. Only the variant (and with it the
/// effective lambda) differs from `base` unless overrides say otherwise.
inline TrainConfig build_variant(const AblationSpec& spec, TrainConfig base = {}) {
  TrainConfig c = train::train_config_from_json(spec.overrides, std::move(base));
  c.model.variant = spec.variant;
  c.validate();
  return c;
}

struct Run {
  Variant variant = Variant::full;
  std::uint64_t seed = 0;
  metrics::EvalReport report;
};

/// Held-out report of a trained model on a split normalized like its training data.
inline metrics::EvalReport evaluate_model(const train::SurrogateModel& sm, const data::Split& split) {
  const auto p = train::predict(sm, split);
  return metrics::evaluate(p.phys, split, sm.dims);
}

inline Run run_variant(const data::Dataset& ds, const AblationSpec& spec, std::uint64_t seed, TrainConfig base = {},
                       train::SurrogateModel* model_out = nullptr) {
  base.seed = seed;
  const auto cfg = build_variant(spec, std::move(base));
  auto sm = train::train(ds, cfg);
  Run r{spec.variant, seed, evaluate_model(sm, ds.test)};
  if (model_out) *model_out = std::move(sm);
  return r;
}

struct Table {
  std::vector<std::uint64_t> seeds;
  std::vector<Run> runs;

  std::vector<const Run*> of(Variant v) const {
    std::vector<const Run*> out;
    for (const auto& r : runs)
      if (r.variant == v) out.push_back(&r);
    return out;
  }
  /// Seed-mean held-out R2 of one task.
  double r2(Variant v, Task t) const {
    const auto rs = of(v);
    if (rs.empty()) throw ContractError("variant " + std::string(model::variant_name(v)) + " was not run");
    double s = 0;
    for (const Run* r : rs) s += r->report.score(t).r2;
    return s / static_cast<double>(rs.size());
  }
  /// Seed-mean R2 averaged over the six slow targets.
  double mean_r2(Variant v) const {
    double s = 0;
    for (Task t : kStateTasks) s += r2(v, t);
    return s / static_cast<double>(kStateTasks.size());
  }

  /// One row per slow target, one column per variant.
  io::Csv r2_csv() const {
    std::vector<std::string> h{"task"};
    for (Variant v : model::kAllVariants) h.emplace_back(model::variant_name(v));
    io::Csv c(h);
    for (Task t : kStateTasks) {
      std::vector<std::string> row{std::string(task_name(t))};
      for (Variant v : model::kAllVariants) row.push_back(io::fmt(r2(v, t)));
      c.row_strings(row);
    }
    return c;
  }
  /// Same layout, each cell R2(variant) - R2(full).
  io::Csv delta_csv() const {
    std::vector<std::string> h{"task"};
    for (Variant v : model::kAllVariants) h.emplace_back(model::variant_name(v));
    io::Csv c(h);
    for (Task t : kStateTasks) {
      std::vector<std::string> row{std::string(task_name(t))};
      for (Variant v : model::kAllVariants) row.push_back(io::fmt(r2(v, t) - r2(Variant::full, t)));
      c.row_strings(row);
    }
    return c;
  }
  /// Long form: variant, seed, task, r2, rmse, plus the physics residual per run.
  io::Csv runs_csv() const {
    io::Csv c({"variant", "seed", "task", "r2", "rmse", "phys_residual"});
    for (const auto& r : runs)
      for (const auto& s : r.report.tasks)
        c.row(std::string(model::variant_name(r.variant)), static_cast<long long>(r.seed), std::string(task_name(s.task)),
              s.r2, s.rmse, r.report.phys_residual);
    return c;
  }
};

/// Trains every variant for every seed. `on_run` sees each run as it finishes.
inline Table run_ablation_suite(const data::Dataset& ds, const std::vector<std::uint64_t>& seeds, TrainConfig base = {},
                                const std::function<void(const Run&)>& on_run = {}) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed", "seeds");
  Table t;
  t.seeds = seeds;
  for (std::uint64_t seed : seeds)
    for (Variant v : model::kAllVariants) {
      t.runs.push_back(run_variant(ds, {v}, seed, base));
      if (on_run) on_run(t.runs.back());
    }
  return t;
}

}  // namespace phase::ablation
