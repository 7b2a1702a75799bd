// phase: world generation, dataset building, training, evaluation, ablation,
// fine-tuning and the restart check from one executable.
//
// Exit codes: 0 ok, 1 runtime failure, 2 usage or config error.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "phase/ablation.hpp"
#include "phase/fpenv.hpp"
#include "phase/io.hpp"
#include "phase/metrics.hpp"
#include "phase/pipeline.hpp"
#include "phase/sim.hpp"
#include "phase/training.hpp"
#include "phase/workflow.hpp"

using namespace phase;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

/// Sibling path: "dir/name.csv" + "_summary" -> "dir/name_summary.csv".
fs::path sibling(const fs::path& p, const std::string& suffix, const std::string& ext = ".csv") {
  return p.parent_path() / (p.stem().string() + suffix + ext);
}

train::TrainConfig load_config(const std::string& path) {
  if (path.empty()) return {};
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path, "config");
  json j;
  try {
    j = json::parse(io::read_text(path));
  } catch (const json::exception& e) {
    throw ConfigError("config file is not valid JSON: " + std::string(e.what()), "config");
  }
  return train::train_config_from_json(j);
}

data::Dataset open_dataset(const std::string& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("dataset directory not found: " + dir, "data");
  return data::load_dataset(dir);
}

train::SurrogateModel open_model(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("model file not found: " + path, "model");
  return train::load_model(path);
}

/// The split in the model's normalization.
data::Split for_model(const train::SurrogateModel& sm, const data::Dataset& ds, const data::Split& s) {
  if (ds.dims != sm.dims) throw DimensionError("dataset dimensions do not match the model");
  if (json(ds.stats) == json(sm.stats)) return s;
  return train::rebase(s, ds.stats, sm.stats);
}

void print_log_tail(const train::TrainLog& log) {
  if (log.epochs.empty()) return;
  const double best = log.best_epoch == 0 ? log.start_val : log.epochs[log.best_epoch - 1].val;
  std::cout << "epochs " << log.epochs.size() << ", best epoch " << log.best_epoch << " (val " << best << ")\n";
}

// ---------------------------------------------------------------------------

struct GenData {
  std::uint64_t seed = 0;
  std::string grid = "coarse";
  std::size_t years = 20;
  std::string out;
  void run() const {
    const auto w = sim::generate_world(seed, sim::make_grid(grid), years);
    io::StagedDir dir(out);
    data::write_world(w, dir.path());
    dir.commit();
    std::cout << "world " << grid << ": " << w.cells.size() << " land cells, " << years << " years -> " << out << "\n";
  }
};

struct BuildDataset {
  std::string world, out;
  std::uint64_t seed = 0;
  std::size_t batch_size = data::kDefaultBatchSize;
  void run() const {
    if (!fs::is_directory(world)) throw ConfigError("world directory not found: " + world, "world");
    data::BuildOptions o;
    o.seed = seed;
    o.batch_size = batch_size;
    const auto r = data::build_dataset(world, out, o);
    std::cout << "dataset: " << r.n_train << " train, " << r.n_test << " test, " << r.cleaning.removed.size()
              << " records removed -> " << out << "\n";
  }
};

struct Train {
  std::string data, config, out, variant, log;
  std::optional<std::uint64_t> seed;
  void run() const {
    auto cfg = load_config(config);
    if (!variant.empty()) cfg.model.variant = model::variant_from_name(variant);
    if (seed) cfg.seed = *seed;
    cfg.validate();
    const auto ds = open_dataset(data);
    train::TrainLog lg;
    const auto sm = train::train(ds, cfg, &lg);
    train::save_model(out, sm);
    if (!log.empty()) io::atomic_write_text(log, lg.csv());
    print_log_tail(lg);
    std::cout << "model -> " << out << "\n";
  }
};

struct Eval {
  std::string model, data, out, split = "test";
  void run() const {
    if (split != "test" && split != "train") throw ConfigError("split must be test or train", "split");
    const auto sm = open_model(model);
    const auto ds = open_dataset(data);
    const auto s = for_model(sm, ds, split == "test" ? ds.test : ds.train);
    const auto p = train::predict(sm, s);
    const auto rep = metrics::evaluate(p.phys, s, sm.dims);
    const auto verdicts = ood::check_split(s, sm.dims, p.latent, sm.ood);

    io::StagedDir dir(out);
    metrics::metrics_csv(rep).save(dir / "metrics.csv");
    metrics::summary_csv(rep).save(dir / "summary.csv");
    metrics::per_dimension_csv(rep).save(dir / "per_dimension.csv");
    metrics::bands_csv(rep).save(dir / "bands.csv");
    metrics::histogram_csv(rep).save(dir / "histogram.csv");
    metrics::spatial_csv(p.phys, s, sm.dims).save(dir / "spatial.csv");
    std::vector<std::string> h{"id"};
    for (Task t : kAllTasks)
      for (std::size_t k = 0; k < task_width(t, sm.dims); ++k)
        h.push_back(std::string(task_name(t)) + (task_shape(t) == TaskShape::scalar ? "" : "[" + std::to_string(k) + "]"));
    io::Csv pred(h);
    const std::size_t TT = target_size(sm.dims);
    for (std::size_t r = 0; r < s.n; ++r) {
      std::vector<std::string> row{io::fmt(s.ids[r])};
      for (std::size_t k = 0; k < TT; ++k) row.push_back(io::fmt(p.phys[r * TT + k]));
      pred.row_strings(row);
    }
    pred.save(dir / "predictions.csv");
    io::Csv oc({"id", "flag", "score", "reasons"});
    std::size_t flagged = 0;
    for (std::size_t r = 0; r < s.n; ++r) {
      std::string why;
      for (const auto& x : verdicts[r].reasons) why += (why.empty() ? "" : ";") + x;
      oc.row(s.ids[r], verdicts[r].flag ? 1 : 0, verdicts[r].score, why);
      flagged += verdicts[r].flag;
    }
    oc.save(dir / "ood.csv");
    dir.commit();
    for (const auto& t : rep.tasks) std::cout << task_name(t.task) << " r2 " << t.r2 << " rmse " << t.rmse << "\n";
    std::cout << "ood flagged " << flagged << " of " << s.n << "; report -> " << out << "\n";
  }
};

struct Ablate {
  std::string data, out, config;
  std::size_t seeds = 3;
  void run() const {
    if (seeds < 1) throw ConfigError("seeds must be >= 1", "seeds");
    const auto base = load_config(config);
    const auto ds = open_dataset(data);
    std::vector<std::uint64_t> list;
    for (std::size_t s = 0; s < seeds; ++s) list.push_back(base.seed + s);
    const auto t = ablation::run_ablation_suite(ds, list, base, [](const ablation::Run& r) {
      std::cout << model::variant_name(r.variant) << " seed " << r.seed << " mean state r2 " << r.report.mean_state_r2()
                << "\n";
    });
    t.delta_csv().save(sibling(out, "_delta"));
    t.runs_csv().save(sibling(out, "_runs"));
    t.r2_csv().save(out);
    std::cout << "table -> " << out << "\n";
  }
};

struct FineTune {
  std::string model, data, out, config, log;
  double fraction = 0.05;
  std::optional<std::uint64_t> seed;
  void run() const {
    auto cfg = load_config(config);
    if (seed) cfg.seed = *seed;
    const auto base = open_model(model);
    const auto ds = open_dataset(data);
    train::TrainLog lg;
    const auto sm = train::fine_tune(base, ds, fraction, cfg, &lg);
    train::save_model(out, sm);
    if (!log.empty()) io::atomic_write_text(log, lg.csv());
    print_log_tail(lg);
    std::cout << "fine-tuned on " << sm.info.at("samples") << " samples -> " << out << "\n";
  }
};

struct RestartCheck {
  std::string model, world, out, restart_file;
  std::size_t years = 100;
  double tol = 0.005;
  bool ood_strict = false;
  int run() const {
    const auto sm = open_model(model);
    if (!fs::is_directory(world)) throw ConfigError("world directory not found: " + world, "world");
    const auto w = data::load_world(world);
    Dims d;
    auto raw = data::assemble_records(world, &d);
    const auto records = data::clean(std::move(raw), d);
    const auto rc = workflow::restart_check(sm, w, records, {years, tol});
    rc.ood_csv().save(sibling(out, "_ood"));
    if (!rc.validation.empty()) {
      for (const auto& e : rc.validation) std::cerr << "invalid restart state: " << e << "\n";
      return 1;
    }
    if (ood_strict && rc.flagged() > 0) {
      std::cerr << "error: " << rc.flagged() << " cells flagged out of distribution; restart file not written (see "
                << sibling(out, "_ood").string() << ")\n";
      return 1;
    }
    restart::save(restart_file.empty() ? sibling(out, "_restart", ".phrs") : fs::path(restart_file), rc.file);
    rc.summary_csv().save(sibling(out, "_summary"));
    rc.drift_csv().save(out);
    std::cout << "cold start " << rc.cold_start_min() << " yr (min over cells) vs " << rc.window_years
              << "-yr window: speedup " << rc.speedup() << "x\n"
              << "slow pool prediction error (median) " << rc.slow_prediction_error() << ", fast pools after "
              << years << " yr within " << rc.fast_after_max() << ", slow drift " << rc.slow_drift_max() << "\n"
              << "ood flagged " << rc.flagged() << " of " << rc.ids.size() << "\n";
    return 0;
  }
};

struct InspectAttention {
  std::string model, data, out, split = "test";
  void run() const {
    if (split != "test" && split != "train") throw ConfigError("split must be test or train", "split");
    const auto sm = open_model(model);
    const auto ds = open_dataset(data);
    const auto m = workflow::attention_map(sm, for_model(sm, ds, split == "test" ? ds.test : ds.train));
    m.csv().save(out);
    std::cout << "attention (" << m.heads << " heads, " << m.groups.size() << " groups) -> " << out << "\n";
  }
};

int fail(int code, const std::string& msg) {
  std::cerr << "error: " << msg << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  flush_denormals();
  CLI::App app{"Surrogate model workflow for the synthetic carbon-cycle simulator"};
  app.require_subcommand(1);

  GenData gen;
  auto* c_gen = app.add_subcommand("gen-data", "Simulate a world and write its files");
  c_gen->add_option("--seed", gen.seed);
  c_gen->add_option("--grid", gen.grid, "coarse, fine or RxC")->capture_default_str();
  c_gen->add_option("--years", gen.years)->capture_default_str()->check(CLI::PositiveNumber);
  c_gen->add_option("--out", gen.out)->required();

  BuildDataset bd;
  auto* c_bd = app.add_subcommand("build-dataset", "Align, clean, normalize and split a world into batches");
  c_bd->add_option("--world", bd.world)->required();
  c_bd->add_option("--seed", bd.seed);
  c_bd->add_option("--batch-size", bd.batch_size)->capture_default_str();
  c_bd->add_option("--out", bd.out)->required();

  Train tr;
  auto* c_tr = app.add_subcommand("train", "Train a model");
  c_tr->add_option("--data", tr.data)->required();
  c_tr->add_option("--config", tr.config, "JSON config (see `phase config --defaults`)");
  c_tr->add_option("--variant", tr.variant);
  c_tr->add_option("--seed", tr.seed, "overrides the config seed");
  c_tr->add_option("--log", tr.log, "per-epoch loss CSV");
  c_tr->add_option("--out", tr.out)->required();

  Eval ev;
  auto* c_ev = app.add_subcommand("eval", "Score a model and export report CSVs");
  c_ev->add_option("--model", ev.model)->required();
  c_ev->add_option("--data", ev.data)->required();
  c_ev->add_option("--split", ev.split)->capture_default_str();
  c_ev->add_option("--out", ev.out)->required();

  Ablate ab;
  auto* c_ab = app.add_subcommand("ablate", "Train every variant per seed and tabulate R2");
  c_ab->add_option("--data", ab.data)->required();
  c_ab->add_option("--seeds", ab.seeds)->capture_default_str();
  c_ab->add_option("--config", ab.config);
  c_ab->add_option("--out", ab.out)->required();

  FineTune ft;
  auto* c_ft = app.add_subcommand("fine-tune", "Continue training a model on part of another dataset");
  c_ft->add_option("--model", ft.model)->required();
  c_ft->add_option("--data-fine", ft.data)->required();
  c_ft->add_option("--fraction", ft.fraction)->capture_default_str();
  c_ft->add_option("--config", ft.config);
  c_ft->add_option("--seed", ft.seed);
  c_ft->add_option("--log", ft.log);
  c_ft->add_option("--out", ft.out)->required();

  RestartCheck rc;
  auto* c_rc = app.add_subcommand("restart-check", "Write a restart file from predictions and run the simulator from it");
  c_rc->add_option("--model", rc.model)->required();
  c_rc->add_option("--world", rc.world)->required();
  c_rc->add_option("--years", rc.years)->capture_default_str();
  c_rc->add_option("--tol", rc.tol, "cold-start band, relative")->capture_default_str();
  c_rc->add_option("--restart", rc.restart_file, "restart file path (default: next to --out)");
  c_rc->add_flag("--ood-strict", rc.ood_strict, "refuse to write the restart file if any cell is flagged");
  c_rc->add_option("--out", rc.out)->required();

  InspectAttention ia;
  auto* c_ia = app.add_subcommand("inspect-attention", "Mean first-layer fusion attention over a split");
  c_ia->add_option("--model", ia.model)->required();
  c_ia->add_option("--data", ia.data)->required();
  c_ia->add_option("--split", ia.split)->capture_default_str();
  c_ia->add_option("--out", ia.out)->required();

  bool defaults = false;
  auto* c_cf = app.add_subcommand("config", "Print configuration");
  c_cf->add_flag("--defaults", defaults, "print the default training config as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*c_gen) gen.run();
    else if (*c_bd) bd.run();
    else if (*c_tr) tr.run();
    else if (*c_ev) ev.run();
    else if (*c_ab) ab.run();
    else if (*c_ft) ft.run();
    else if (*c_rc) return rc.run();
    else if (*c_ia) ia.run();
    else if (*c_cf) {
      if (!defaults) return fail(2, "config: nothing to do (try --defaults)");
      std::cout << train::to_json_value(train::TrainConfig{}).dump(2) << "\n";
    }
  } catch (const ConfigError& e) {
    return fail(2, std::string(e.what()) + (e.key().empty() ? "" : " [key: " + e.key() + "]"));
  } catch (const DivergenceError& e) {
    return fail(1, std::string(e.what()) + " [epoch " + std::to_string(e.epoch()) + "]");
  } catch (const CompletenessError& e) {
    return fail(1, std::string(e.what()) + " [cell " + std::to_string(e.cell()) + "]");
  } catch (const std::exception& e) {
    return fail(1, e.what());
  }
  return 0;
}
