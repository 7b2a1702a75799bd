// Acceptance runner: checks the ten acceptance criteria end to end and prints
// one PASS/FAIL line per criterion.
//
//   phase_acceptance [--work DIR] [--cache DIR] [--cli PATH] [criterion ...]
//
// Trained models are shared between criteria within one run. With --cache they
// are also kept on disk across runs, keyed by dataset and config.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "phase/ablation.hpp"
#include "phase/calendar.hpp"
#include "phase/fpenv.hpp"
#include "phase/gradcheck.hpp"
#include "phase/metrics.hpp"
#include "phase/ops.hpp"
#include "phase/pipeline.hpp"
#include "phase/sim.hpp"
#include "phase/spatial.hpp"
#include "phase/training.hpp"
#include "phase/workflow.hpp"

#ifndef PHASE_CLI_PATH
#define PHASE_CLI_PATH ""
#endif

using namespace phase;
using ad::Shape;
using ad::Tensor;
using model::Variant;
using train::TrainConfig;
namespace fs = std::filesystem;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fixed(double x, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << x;
  return os.str();
}

struct Outcome {
  bool pass = false;
  std::vector<std::string> details;
  void note(const std::string& s) { details.push_back(s); }
};

const std::vector<std::uint64_t> kSeeds{0, 1, 2};

// ---------------------------------------------------------------------------
// Shared state: datasets and trained models

struct Trained {
  train::SurrogateModel sm;
  metrics::EvalReport report;
  double seconds = 0;  // training wall time
};

class Context {
 public:
  Context(fs::path work, std::optional<fs::path> cache, std::string cli)
      : work_(std::move(work)), cache_(std::move(cache)), cli_(std::move(cli)) {
    fs::create_directories(work_);
    if (cache_) fs::create_directories(*cache_);
  }

  const fs::path& work() const { return work_; }
  const std::string& cli() const { return cli_; }

  /// World and dataset built through the file pipeline.
  const data::Dataset& dataset(const std::string& grid) {
    if (auto it = datasets_.find(grid); it != datasets_.end()) return it->second;
    const fs::path wdir = work_ / ("world_" + grid), ddir = work_ / ("data_" + grid);
    if (!fs::exists(ddir / "manifest.json")) {
      const auto t0 = Clock::now();
      const auto w = sim::generate_world(0, sim::make_grid(grid), 20);
      io::StagedDir staged(wdir);
      data::write_world(w, staged.path());
      staged.commit();
      data::build_dataset(wdir, ddir, data::BuildOptions{});
      std::cout << "  built " << grid << " dataset in " << fixed(seconds_since(t0), 1) << " s\n" << std::flush;
    }
    return datasets_.emplace(grid, data::load_dataset(ddir)).first->second;
  }
  fs::path world_dir(const std::string& grid) {
    dataset(grid);
    return work_ / ("world_" + grid);
  }

  /// Trains (or reuses) a model from scratch and scores it on the test split.
  const Trained& trained(const std::string& grid, const TrainConfig& cfg) {
    return memo(grid + "|" + train::to_json_value(cfg).dump(), [&] {
      const auto& ds = dataset(grid);
      return train::train(ds, cfg);
    }, grid);
  }

  /// Fine-tunes `base` on a fraction of the grid's train split; scored on its test split.
  const Trained& fine_tuned(const std::string& grid, const std::string& base_key, const train::SurrogateModel& base,
                            double fraction, const TrainConfig& cfg) {
    return memo(grid + "|fine|" + base_key + "|" + std::to_string(fraction) + "|" + train::to_json_value(cfg).dump(),
                [&] { return train::fine_tune(base, dataset(grid), fraction, cfg); }, grid);
  }

  /// Scores any model on a grid's test split, rebased into the model's normalization.
  metrics::EvalReport score(const train::SurrogateModel& sm, const std::string& grid) {
    const auto& ds = dataset(grid);
    const auto s = json(ds.stats) == json(sm.stats) ? ds.test : train::rebase(ds.test, ds.stats, sm.stats);
    return ablation::evaluate_model(sm, s);
  }

 private:
  const Trained& memo(const std::string& key, const std::function<train::SurrogateModel()>& fit, const std::string& grid) {
    if (auto it = models_.find(key); it != models_.end()) return it->second;
    Trained t;
    const auto file = cache_ ? std::optional<fs::path>(*cache_ / (std::to_string(std::hash<std::string>{}(key)) + ".phm"))
                             : std::nullopt;
    if (file && fs::exists(*file) && fs::exists(fs::path(*file) += ".json")) {
      t.sm = train::load_model(*file);
      t.seconds = json::parse(io::read_text(fs::path(*file) += ".json")).at("seconds").get<double>();
    } else {
      const auto t0 = Clock::now();
      t.sm = fit();
      t.seconds = seconds_since(t0);
      if (file) {
        train::save_model(*file, t.sm);
        io::atomic_write_text(fs::path(*file) += ".json", json({{"seconds", t.seconds}, {"key", key}}).dump());
      }
    }
    t.report = score(t.sm, grid);
    std::cout << "  trained " << model::variant_name(t.sm.model.variant) << " seed " << t.sm.train.seed
              << (t.sm.info.contains("fraction") ? " fraction " + t.sm.info.at("fraction").dump() : std::string())
              << " on " << grid << ": " << t.sm.info.at("epochs") << " epochs, " << fixed(t.seconds, 1)
              << " s, mean state r2 " << fixed(t.report.mean_state_r2()) << "\n"
              << std::flush;
    return models_.emplace(key, std::move(t)).first->second;
  }

  fs::path work_;
  std::optional<fs::path> cache_;
  std::string cli_;
  std::map<std::string, data::Dataset> datasets_;
  std::map<std::string, Trained> models_;
};

TrainConfig config_for(Variant v, std::uint64_t seed) {
  TrainConfig c;
  c.model.variant = v;
  c.seed = seed;
  return c;
}

// ---------------------------------------------------------------------------
// 1. Autodiff correctness

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor<double>(std::move(shape), std::move(v));
}

/// Entries bounded away from zero, for the relu kink.
Tensor<double> away_from_zero(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = (rng() & 1 ? 1 : -1) * u(rng);
  return Tensor<double>(std::move(shape), std::move(v));
}

Tensor<double> probe(const Tensor<double>& y) {
  std::vector<double> w(y.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(0.7 * static_cast<double>(i) + 0.3);
  return ad::sum(ad::mul(y, Tensor<double>(y.shape(), w)));
}

struct OpCase {
  std::string name;
  std::function<std::vector<Tensor<double>>(std::mt19937_64&)> inputs;
  std::function<Tensor<double>(std::vector<Tensor<double>>&)> loss;
};

std::vector<OpCase> op_cases() {
  using V = std::vector<Tensor<double>>;
  auto r = [](Shape s) { return [s](std::mt19937_64& g) { return V{random_tensor(s, g)}; }; };
  auto r2 = [](Shape a, Shape b) { return [a, b](std::mt19937_64& g) { return V{random_tensor(a, g), random_tensor(b, g)}; }; };
  return {
      {"matmul", r2({3, 4}, {4, 2}), [](V& in) { return probe(ad::matmul(in[0], in[1])); }},
      {"add", r2({3, 4}, {3, 4}), [](V& in) { return probe(ad::add(in[0], in[1])); }},
      {"sub", r2({3, 4}, {3, 4}), [](V& in) { return probe(ad::sub(in[0], in[1])); }},
      {"mul", r2({3, 4}, {3, 4}), [](V& in) { return probe(ad::mul(in[0], in[1])); }},
      {"square", r({5}), [](V& in) { return probe(ad::square(in[0])); }},
      {"scale", r({2, 3}), [](V& in) { return probe(ad::scale(in[0], 1.7)); }},
      {"add_trailing", r2({2, 3, 4}, {3, 4}), [](V& in) { return probe(ad::add_trailing(in[0], in[1])); }},
      {"softplus", [](std::mt19937_64& g) { return V{random_tensor({4, 3}, g, -4, 4)}; },
       [](V& in) { return probe(ad::softplus(in[0])); }},
      {"sigmoid", [](std::mt19937_64& g) { return V{random_tensor({4, 3}, g, -4, 4)}; },
       [](V& in) { return probe(ad::sigmoid(in[0])); }},
      {"tanh", [](std::mt19937_64& g) { return V{random_tensor({4, 3}, g, -3, 3)}; },
       [](V& in) { return probe(ad::tanh(in[0])); }},
      {"relu", [](std::mt19937_64& g) { return V{away_from_zero({4, 3}, g)}; }, [](V& in) { return probe(ad::relu(in[0])); }},
      {"softmax_rows", r({3, 5}), [](V& in) { return probe(ad::softmax(in[0], 1)); }},
      {"softmax_cols", r({3, 5}), [](V& in) { return probe(ad::softmax(in[0], 0)); }},
      {"conv1d_same", r2({2, 7, 3}, {3, 3, 4}), [](V& in) { return probe(ad::conv1d(in[0], in[1], 1, 1)); }},
      {"conv1d_strided", r2({2, 8, 2}, {3, 2, 3}), [](V& in) { return probe(ad::conv1d(in[0], in[1], 2, 0)); }},
      {"layer_norm",
       [](std::mt19937_64& g) { return V{random_tensor({4, 6}, g, -2, 2), random_tensor({6}, g), random_tensor({6}, g)}; },
       [](V& in) { return probe(ad::layer_norm(in[0], in[1], in[2], 1e-5)); }},
      {"reshape", r({2, 6}), [](V& in) { return probe(ad::reshape(in[0], {3, 4})); }},
      {"concat_cols", r2({2, 3}, {2, 4}), [](V& in) { return probe(ad::concat_cols<double>({in[0], in[1]})); }},
      {"stack_tokens", r2({2, 3}, {2, 3}), [](V& in) { return probe(ad::stack_tokens<double>({in[0], in[1], in[0]})); }},
      {"mean_tokens", r({2, 3, 4}), [](V& in) { return probe(ad::mean_tokens(in[0])); }},
      {"sum", r({3, 3}), [](V& in) { return ad::sum(ad::square(in[0])); }},
      {"mean", r({3, 3}), [](V& in) { return ad::mean(ad::square(in[0])); }},
      {"mse", r2({4, 2}, {4, 2}), [](V& in) { return ad::mse(in[0], in[1]); }},
      {"lstm",
       [](std::mt19937_64& g) {
         return V{random_tensor({2, 5, 3}, g), random_tensor({3, 16}, g, -0.5, 0.5), random_tensor({4, 16}, g, -0.5, 0.5),
                  random_tensor({16}, g, -0.2, 0.2)};
       },
       [](V& in) { return probe(ad::lstm(in[0], in[1], in[2], in[3])); }},
      {"attention",
       [](std::mt19937_64& g) { return V{random_tensor({2, 3, 4}, g), random_tensor({2, 3, 4}, g), random_tensor({2, 3, 4}, g)}; },
       [](V& in) { return probe(ad::attention(in[0], in[1], in[2], 2)); }},
  };
}

Outcome criterion_autodiff() {
  Outcome o;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  double worst = 0;
  std::string worst_name;
  std::size_t cases = 0, entries = 0;
  constexpr int kPerOp = 4;
  for (const auto& c : op_cases()) {
    for (int k = 0; k < kPerOp; ++k) {
      const auto res = ad::gradcheck(c.inputs(rng), c.loss, 1e-5);
      ++cases, entries += res.checked;
      if (res.max_rel_err > worst) worst = res.max_rel_err, worst_name = c.name;
    }
  }
  // Full training loss of every variant on a real batch, gradients wrt all parameters.
  const auto w = sim::generate_world(11, sim::make_grid("6x12"), 1);
  const auto recs = sim::export_samples(w, 1);
  const Dims d = sim::world_dims(w, 1);
  std::vector<std::size_t> all(recs.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto stats = data::fit_stats(recs, all, d);
  data::Split split;
  for (const auto& r : recs) split.append(r, stats);
  for (Variant v : model::kAllVariants) {
    TrainConfig cfg;
    cfg.model.d = 8, cfg.model.lstm_hidden = 4, cfg.model.conv1 = 2, cfg.model.conv2 = 3, cfg.model.heads = 2;
    cfg.model.layers = 1, cfg.model.ffn_mult = 2, cfg.model.head_hidden = 4, cfg.model.mlp_hidden = 8;
    cfg.model.variant = v;
    model::Model<double> m(cfg.model, d, 1000 + static_cast<std::uint64_t>(v));
    // Nonzero biases keep every relu away from its kink at the zero-bias init.
    std::mt19937_64 brng(2000 + static_cast<std::uint64_t>(v));
    for (const auto& [name, t] : m.params())
      if (name.substr(name.rfind('.') + 1).starts_with('b'))
        for (auto& x : const_cast<Tensor<double>&>(t).mutable_data()) x = std::uniform_real_distribution<double>(-0.3, 0.3)(brng);
    const std::vector<std::size_t> rows{0, 1};
    const auto b = model::make_batch<double>(split, rows, d, stats, m.static_columns());
    std::vector<Tensor<double>> params;
    for (const auto& [name, t] : m.params()) params.push_back(t);
    const auto res = ad::gradcheck(params, [&](auto&) { return train::total_loss(m.forward(b), b, cfg).total; }, 1e-5);
    ++cases, entries += res.checked;
    if (res.max_rel_err >= 1e-4) o.note("model " + std::string(model::variant_name(v)) + ": max relative error " + std::to_string(res.max_rel_err));
    if (res.max_rel_err > worst) worst = res.max_rel_err, worst_name = "model:" + std::string(model::variant_name(v));
  }
  const double secs = seconds_since(t0);
  o.note(std::to_string(cases) + " randomized cases (" + std::to_string(op_cases().size()) + " ops x " +
         std::to_string(kPerOp) + " + 8 full-model losses), " + std::to_string(entries) + " entries");
  o.note("max relative error " + std::to_string(worst) + " (" + worst_name + "), runtime " + fixed(secs, 1) + " s");
  o.pass = cases >= 100 && worst < 1e-4 && secs < 120;
  return o;
}

// ---------------------------------------------------------------------------
// 2. Positivity and restart capability

template <class T>
bool heads_positive(const model::Model<T>& m, std::size_t n, std::size_t d, std::uint64_t seed, std::size_t* bad) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-100, 100);
  constexpr std::size_t kChunk = 1000;
  for (std::size_t lo = 0; lo < n; lo += kChunk) {
    const std::size_t B = std::min(kChunk, n - lo);
    std::vector<T> z(B * d);
    for (std::size_t r = 0; r < B; ++r)
      for (std::size_t k = 0; k < d; ++k) {
        const std::size_t row = lo + r;
        double x = u(rng);
        if (row == 0) x = 100;                       // all +100
        else if (row == 1) x = -100;                 // all -100
        else if (row == 2) x = k % 2 ? 100 : -100;   // alternating extremes
        else if (row == 3) x = k % 2 ? -100 : 100;
        z[r * d + k] = static_cast<T>(x);
      }
    const auto out = m.predict_all(Tensor<T>({B, d}, z));
    for (const auto& p : out.pred)
      for (T v : p.data())
        if (!(v > 0) || !std::isfinite(v)) ++*bad;
  }
  return *bad == 0;
}

std::optional<workflow::RestartCheck> g_restart;

const workflow::RestartCheck& restart_result(Context& ctx) {
  if (!g_restart) {
    const auto& t = ctx.trained("coarse", config_for(Variant::full, 0));
    const auto w = data::load_world(ctx.world_dir("coarse"));
    Dims d;
    const auto recs = data::clean(data::assemble_records(ctx.world_dir("coarse"), &d), d);
    const auto t0 = Clock::now();
    g_restart = workflow::restart_check(t.sm, w, recs);
    std::cout << "  restart check in " << fixed(seconds_since(t0), 1) << " s\n";
  }
  return *g_restart;
}

Outcome criterion_positivity(Context& ctx) {
  Outcome o;
  const Dims d = ctx.dataset("coarse").dims;
  const model::ModelConfig cfg;
  std::size_t bad64 = 0, bad32 = 0;
  model::Model<double> m64(cfg, d, 5);
  model::Model<float> m32(cfg, d, m64.params().cast<float>());
  heads_positive(m64, 10000, cfg.d, 6, &bad64);
  heads_positive(m32, 10000, cfg.d, 6, &bad32);
  o.note("10000 latents in [-100, 100] incl. extreme rows: non-positive outputs f64 " + std::to_string(bad64) + ", f32 " +
         std::to_string(bad32));
  const auto& rc = restart_result(ctx);
  o.note("restart file from the trained model: " + std::to_string(rc.file.cells.size()) + " cells, " +
         std::to_string(rc.validation.size()) + " validation errors");
  for (std::size_t i = 0; i < std::min<std::size_t>(3, rc.validation.size()); ++i) o.note("  " + rc.validation[i]);
  o.pass = bad64 == 0 && bad32 == 0 && rc.validation.empty() && !rc.file.cells.empty();
  return o;
}

// ---------------------------------------------------------------------------
// 3. Physics soft constraint

Outcome criterion_physics(Context& ctx) {
  Outcome o;
  double with = 0, without = 0, secs = 0;
  bool each_lower = true;
  for (auto seed : kSeeds) {
    const auto& a = ctx.trained("coarse", config_for(Variant::full, seed));
    const auto& b = ctx.trained("coarse", config_for(Variant::no_phys, seed));
    with += a.report.phys_residual, without += b.report.phys_residual;
    secs += a.seconds + b.seconds;
    each_lower = each_lower && a.report.phys_residual < b.report.phys_residual;
    o.note("seed " + std::to_string(seed) + ": residual lambda=1 " + std::to_string(a.report.phys_residual) +
           ", lambda=0 " + std::to_string(b.report.phys_residual) + " (gC/m2/yr)^2");
  }
  with /= static_cast<double>(kSeeds.size()), without /= static_cast<double>(kSeeds.size());
  const double reduction = 1 - with / without;
  o.note("seed-mean held-out residual: lambda=1 " + std::to_string(with) + ", lambda=0 " + std::to_string(without) +
         ", reduction " + fixed(100 * reduction, 1) + "% (need >= 50%)");
  o.note("training time of the paired runs " + fixed(secs / 60, 1) + " min (budget 15)");
  o.pass = with < without && reduction >= 0.5 && secs < 15 * 60;
  return o;
}

// ---------------------------------------------------------------------------
// 4. End-to-end accuracy

Outcome criterion_accuracy(Context& ctx) {
  Outcome o;
  std::map<Task, std::vector<double>> r2;
  double slowest = 0;
  for (auto seed : kSeeds) {
    const auto& t = ctx.trained("coarse", config_for(Variant::full, seed));
    slowest = std::max(slowest, t.seconds);
    for (Task task : kStateTasks) r2[task].push_back(t.report.score(task).r2);
  }
  bool ok = true;
  for (Task task : kStateTasks) {
    const auto ms = metrics::mean_std(r2[task]);
    const double lo = *std::min_element(r2[task].begin(), r2[task].end());
    ok = ok && lo >= 0.90;
    o.note(std::string(task_name(task)) + " r2 " + fixed(ms.mean) + " +- " + fixed(ms.std) + " (min " + fixed(lo) + ")");
  }
  o.note(std::to_string(ctx.dataset("coarse").train.n + ctx.dataset("coarse").test.n) + " cells; slowest seed " +
         fixed(slowest / 60, 1) + " min (budget 10)");
  o.pass = ok && slowest < 600;
  return o;
}

// ---------------------------------------------------------------------------
// 5. Restart acceleration

Outcome criterion_restart(Context& ctx) {
  Outcome o;
  const auto t0 = Clock::now();
  const auto& rc = restart_result(ctx);
  const double secs = seconds_since(t0);
  if (!rc.validation.empty()) {
    o.note("restart file rejected: " + rc.validation.front());
    return o;
  }
  const bool a = rc.cold_start_min() >= 1200;
  const bool b = rc.slow_prediction_error() <= 0.05;
  const bool c = rc.fast_after_max() <= 0.005 && rc.slow_drift_max() < 0.01;
  o.note("(a) cold start to the 0.5% band: min " + std::to_string(rc.cold_start_min()) + " yr, median " +
         fixed(rc.cold_start_median(), 0) + " yr over " + std::to_string(rc.cold_start.size()) + " cells");
  o.note("(b) predicted slow pools (soil3c, soil4c), worst per-pool median relative error " +
         fixed(rc.slow_prediction_error()));
  for (const auto& p : rc.report.pools)
    o.note("    " + p.pool + (p.fast ? " (fast)" : "") + ": before median " + fixed(p.before_median) + ", after max " +
           fixed(p.after_max, 6) + ", final-decade drift max " + fixed(p.drift_max, 6));
  o.note("(c) after 100 yr: fast pools within " + fixed(rc.fast_after_max(), 6) +
         " of equilibrium (all cells); slow-pool final-decade drift max over cells " + fixed(rc.slow_drift_max(), 6) +
         ", median " + fixed(rc.slow_drift_median(), 6));
  o.note("speedup " + fixed(rc.speedup(), 1) + "x (cold start / " + std::to_string(rc.window_years) +
         "-yr window); check runtime " + fixed(secs, 1) + " s");
  o.pass = a && b && c && rc.speedup() >= 60 && secs < 300;
  return o;
}

// ---------------------------------------------------------------------------
// 6. Ablation ordering

Outcome criterion_ablation(Context& ctx) {
  Outcome o;
  ablation::Table table;
  table.seeds = kSeeds;
  double secs = 0;
  for (auto seed : kSeeds)
    for (Variant v : model::kAllVariants) {
      const auto& t = ctx.trained("coarse", config_for(v, seed));
      table.runs.push_back({v, seed, t.report});
      secs += t.seconds;
    }
  table.r2_csv().save(ctx.work() / "ablation_r2.csv");
  table.delta_csv().save(ctx.work() / "ablation_delta.csv");
  const double full = table.mean_r2(Variant::full);
  bool ok = true;
  std::string row = "mean slow-target r2: full " + fixed(full);
  for (Variant v : model::kAllVariants) {
    if (v == Variant::full) continue;
    const double m = table.mean_r2(v);
    row += ", " + std::string(model::variant_name(v)) + " " + fixed(m);
    if (v != Variant::baseline_mlp && v != Variant::baseline_pinn) {
      const bool gap = full - m >= 0.02;
      ok = ok && gap;
      o.note(std::string(model::variant_name(v)) + ": gap " + fixed(full - m) + (gap ? "" : "  (< 0.02)"));
    }
  }
  o.note(row);
  o.note("8 variants x 3 seeds trained in " + fixed(secs / 60, 1) + " min (budget 60); table in " +
         (ctx.work() / "ablation_r2.csv").string());
  o.pass = ok && secs < 3600;
  return o;
}

// ---------------------------------------------------------------------------
// 7. Cross-resolution transfer

Outcome criterion_transfer(Context& ctx) {
  Outcome o;
  const auto t0 = Clock::now();
  const auto base_cfg = config_for(Variant::full, 0);
  const auto& base = ctx.trained("coarse", base_cfg);
  const std::string base_key = train::to_json_value(base_cfg).dump();
  const double zero = ctx.score(base.sm, "fine").mean_state_r2();
  const double f05 = ctx.fine_tuned("fine", base_key, base.sm, 0.05, base_cfg).report.mean_state_r2();
  const double f10 = ctx.fine_tuned("fine", base_key, base.sm, 0.10, base_cfg).report.mean_state_r2();
  const double f100 = ctx.fine_tuned("fine", base_key, base.sm, 1.0, base_cfg).report.mean_state_r2();
  const auto& fine = ctx.dataset("fine");
  o.note("fine grid: " + std::to_string(fine.train.n) + " train / " + std::to_string(fine.test.n) + " test cells");
  o.note("mean slow-target r2: zero-shot " + fixed(zero) + ", 5% " + fixed(f05) + ", 10% " + fixed(f10) + ", full " +
         fixed(f100));
  const double secs = seconds_since(t0);
  o.note("runtime " + fixed(secs / 60, 1) + " min excluding the shared coarse model (budget 30)");
  o.pass = zero < f05 && f05 <= f10 && f10 <= f100 && secs < 1800;
  return o;
}

// ---------------------------------------------------------------------------
// 8. Nutrient knowledge

Outcome criterion_nutrient(Context& ctx) {
  Outcome o;
  auto band = [](const metrics::EvalReport& r, metrics::Band b) {
    for (const auto& s : r.bands)
      if (s.band == b) return s.rmse;
    throw ContractError("band missing from report");
  };
  // Paired seeds: soil_p is constant outside the tropics, so any extratropical
  // change there is seed noise, which a single pair does not average out.
  double tw = 0, tn = 0, ew = 0, en = 0, secs = 0;
  for (auto seed : kSeeds) {
    auto cfg = config_for(Variant::full, seed);
    const auto& with = ctx.trained("coarse", cfg);
    cfg.model.drop_static = {"soil_p"};
    const auto& without = ctx.trained("coarse", cfg);
    const double a = band(with.report, metrics::Band::tropics), b = band(without.report, metrics::Band::tropics);
    const double c = band(with.report, metrics::Band::extratropics), e = band(without.report, metrics::Band::extratropics);
    tw += a, tn += b, ew += c, en += e;
    secs += with.seconds + without.seconds;
    o.note("seed " + std::to_string(seed) + ": tropics " + fixed(a, 1) + " -> " + fixed(b, 1) + ", extratropics " +
           fixed(c, 1) + " -> " + fixed(e, 1));
  }
  const double trop = tn / tw - 1, extra = en / ew - 1;
  const double k = static_cast<double>(kSeeds.size());
  o.note("seed-mean soil3c RMSE tropics: with soil_p " + fixed(tw / k, 2) + ", without " + fixed(tn / k, 2) + " (" +
         fixed(100 * trop, 1) + "%, need >= +20%)");
  o.note("seed-mean soil3c RMSE extratropics: with " + fixed(ew / k, 2) + ", without " + fixed(en / k, 2) + " (" +
         fixed(100 * extra, 1) + "%, need |change| < 10%)");
  o.note("training time of the paired runs " + fixed(secs / 60, 1) + " min (budget 20)");
  o.pass = trop >= 0.20 && std::abs(extra) < 0.10 && secs < 1200;
  return o;
}

// ---------------------------------------------------------------------------
// 9. Pipeline oracles

Outcome criterion_pipeline() {
  Outcome o;
  const auto t0 = Clock::now();
  bool ok = true;
  auto check = [&](bool cond, const std::string& what) {
    o.note(std::string(cond ? "ok   " : "FAIL ") + what);
    ok = ok && cond;
  };

  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> la(-90, 90), lo(-180, 180);
  std::uniform_int_distribution<int> gi(-18, 18), gj(-36, 36);
  std::vector<spatial::Point> forcing, model;
  for (int i = 0; i < 400; ++i) forcing.push_back({la(rng), lo(rng)});
  for (int i = -9; i <= 9; ++i)
    for (int j = -18; j <= 18; ++j) forcing.push_back({10.0 * i, 10.0 * j});
  for (int i = 0; i < 1000; ++i)
    model.push_back(i % 2 ? spatial::Point{la(rng), lo(rng)} : spatial::Point{5.0 * gi(rng), 5.0 * gj(rng)});
  const auto m = spatial::kdtree_map(model, forcing);
  std::size_t mismatches = 0;
  for (std::size_t i = 0; i < model.size(); ++i) mismatches += m[i] != spatial::brute_nearest(forcing, model[i]);
  check(mismatches == 0, "kd-tree equals brute force on 1000 points (half on equidistant midpoints): " +
                             std::to_string(mismatches) + " mismatches");
  std::vector<spatial::Point> tie(10, spatial::Point{50, 50});
  tie[3] = {0, 1}, tie[7] = {0, -1};
  check(spatial::kdtree_map({{0, 0}}, tie)[0] == 3, "equidistant tie resolves to the lowest index");

  const auto fp = sim::make_forcing_point(4, 2, 12.0, 30.0);
  const auto fast = sim::monthly_forcing(4, 2, fp, 2);
  double agg_err = 0;
  for (std::size_t v = 0; v < sim::kForcingVars; ++v) {
    const auto series = sim::forcing_series(4, 2, fp, v, 2);
    const auto ref = aggregate_years(series);
    for (std::size_t mth = 0; mth < ref.size(); ++mth) {
      double s = 0;
      const std::size_t y = mth / kMonthsPerYear, k = mth % kMonthsPerYear;
      for (std::size_t i = 0; i < kStepsPerMonth; ++i) s += series[y * kStepsPerYear + k * kStepsPerMonth + i];
      agg_err = std::max({agg_err, std::abs(ref[mth] - s / kStepsPerMonth), std::abs(fast[mth * sim::kForcingVars + v] - ref[mth])});
    }
  }
  check(agg_err <= 1e-6, "monthly aggregation of 6-hourly series (2 years, 5 variables): max error " + std::to_string(agg_err));

  std::uniform_real_distribution<double> u(-1e4, 3e5);
  std::vector<double> vals(20000);
  for (auto& x : vals) x = u(rng);
  const auto mm = data::MinMax::fit(vals, 5);
  const auto back = mm.invert_rows(mm.apply_rows(vals));
  double rt = 0;
  for (std::size_t i = 0; i < vals.size(); ++i) rt = std::max(rt, std::abs(back[i] - vals[i]) / (mm.hi[i % 5] - mm.lo[i % 5]));
  check(rt <= 1e-6, "MinMax round trip, max error relative to range " + std::to_string(rt));

  const auto sp = data::split_shuffle(20975, 0);
  std::set<std::size_t> cover(sp.train.begin(), sp.train.end());
  for (std::size_t i : sp.test) cover.insert(i);
  check(sp.train.size() == 16780 && sp.test.size() == 4195 && cover.size() == 20975,
        "split 20975 -> " + std::to_string(sp.train.size()) + "/" + std::to_string(sp.test.size()) + ", disjoint cover");

  std::vector<SampleRecord> recs(1003);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    recs[i].id = static_cast<long long>(i);
    recs[i].lat = static_cast<double>(rng() % 30), recs[i].lon = static_cast<double>(rng() % 60);
  }
  std::vector<std::size_t> idx(recs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const auto batches = data::batch_by_latlon(recs, idx, 64);
  std::vector<std::size_t> flat;
  bool sizes = batches.size() == 16;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    sizes = sizes && batches[b].size() == (b + 1 < batches.size() ? 64u : 1003u - 15 * 64);
    flat.insert(flat.end(), batches[b].begin(), batches[b].end());
  }
  bool ordered = flat.size() == recs.size();
  for (std::size_t i = 1; ordered && i < flat.size(); ++i) {
    const auto &a = recs[flat[i - 1]], &b = recs[flat[i]];
    ordered = std::tie(a.lat, a.lon, a.id) < std::tie(b.lat, b.lon, b.id);
  }
  check(sizes && ordered, "batching: 1003 records into 16 batches of 64 (last 43), (lat, lon, id) order, each once");

  const double secs = seconds_since(t0);
  o.note("runtime " + fixed(secs, 1) + " s (budget 60)");
  o.pass = ok && secs < 60;
  return o;
}

// ---------------------------------------------------------------------------
// 10. Determinism through the CLI

int run_cli(const std::string& cli, const std::string& args, const fs::path& log) {
  const std::string cmd = "\"" + cli + "\" " + args + " >> \"" + log.string() + "\" 2>&1";
  const int rc = std::system(cmd.c_str());
  return rc;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

Outcome criterion_determinism(Context& ctx) {
  Outcome o;
  if (ctx.cli().empty() || !fs::exists(ctx.cli())) {
    o.note("CLI binary not found: '" + ctx.cli() + "'");
    return o;
  }
  const fs::path root = ctx.work() / "determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  io::atomic_write_text(root / "config.json", R"({"max_epochs": 8, "seed": 3})");
  for (const char* run : {"a", "b"}) {
    const fs::path d = root / run, log = root / (std::string(run) + ".log");
    const std::string p = d.string();
    const std::vector<std::string> steps{
        "gen-data --seed 3 --grid 8x16 --years 20 --out \"" + p + "/world\"",
        "build-dataset --world \"" + p + "/world\" --seed 3 --batch-size 16 --out \"" + p + "/data\"",
        "train --data \"" + p + "/data\" --config \"" + (root / "config.json").string() + "\" --out \"" + p + "/model.phm\"",
        "eval --model \"" + p + "/model.phm\" --data \"" + p + "/data\" --out \"" + p + "/report\""};
    for (const auto& s : steps) {
      if (const int rc = run_cli(ctx.cli(), s, log); rc != 0) {
        o.note("run " + std::string(run) + " failed (status " + std::to_string(rc) + "): phase " + s);
        return o;
      }
    }
  }
  std::vector<fs::path> files{"model.phm"};
  for (const auto& e : fs::directory_iterator(root / "a" / "report")) files.push_back(fs::path("report") / e.path().filename());
  std::sort(files.begin(), files.end());
  std::size_t same = 0;
  for (const auto& f : files) {
    const bool eq = file_bytes(root / "a" / f) == file_bytes(root / "b" / f) && fs::exists(root / "b" / f);
    same += eq;
    if (!eq) o.note("differs: " + f.string());
  }
  o.note(std::to_string(same) + " of " + std::to_string(files.size()) +
         " artifacts byte-identical across two gen-data -> build-dataset -> train -> eval runs");
  o.pass = same == files.size() && files.size() > 1;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  flush_denormals();
  fs::path work = fs::temp_directory_path() / "phase_acceptance";
  std::optional<fs::path> cache;
  std::string cli = PHASE_CLI_PATH;
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) work = argv[++i];
    else if (a == "--cache" && i + 1 < argc) cache = argv[++i];
    else if (a == "--cli" && i + 1 < argc) cli = argv[++i];
    else if (!a.empty() && std::isdigit(static_cast<unsigned char>(a[0]))) only.insert(std::stoi(a));
    else {
      std::cerr << "usage: phase_acceptance [--work DIR] [--cache DIR] [--cli PATH] [criterion ...]\n";
      return 2;
    }
  }
  Context ctx(work, cache, cli);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"Autodiff correctness", [] { return criterion_autodiff(); }},
      {"Hard constraint and restart capability", [&] { return criterion_positivity(ctx); }},
      {"Physics soft constraint", [&] { return criterion_physics(ctx); }},
      {"End-to-end accuracy", [&] { return criterion_accuracy(ctx); }},
      {"Restart acceleration", [&] { return criterion_restart(ctx); }},
      {"Ablation ordering", [&] { return criterion_ablation(ctx); }},
      {"Cross-resolution transfer", [&] { return criterion_transfer(ctx); }},
      {"Nutrient-knowledge impact", [&] { return criterion_nutrient(ctx); }},
      {"Pipeline oracles", [] { return criterion_pipeline(); }},
      {"Determinism", [&] { return criterion_determinism(ctx); }},
  };

  std::vector<std::pair<int, bool>> results;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(n)) continue;
    std::cout << "== " << n << ". " << criteria[i].first << "\n" << std::flush;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.note(std::string("exception: ") + e.what());
    }
    for (const auto& d : o.details) std::cout << "   " << d << "\n";
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << n << ". " << criteria[i].first << " ("
              << fixed(seconds_since(t0), 1) << " s)\n\n"
              << std::flush;
    results.emplace_back(n, o.pass);
  }
  std::size_t passed = 0;
  std::cout << "== summary\n";
  for (const auto& [n, ok] : results) {
    std::cout << (ok ? "PASS " : "FAIL ") << n << ". " << criteria[static_cast<std::size_t>(n - 1)].first << "\n";
    passed += ok;
  }
  std::cout << passed << " of " << results.size() << " criteria passed\n";
  return passed == results.size() ? 0 : 1;
}
