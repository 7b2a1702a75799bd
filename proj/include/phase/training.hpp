#pragma once

// Composite loss, Adam, the epoch loop with early stopping, fine-tuning and
// the model file.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "phase/blob.hpp"
#include "phase/errors.hpp"
#include "phase/io.hpp"
#include "phase/model.hpp"
#include "phase/ood.hpp"
#include "phase/pipeline.hpp"

namespace phase::train {

using ad::Shape;
using ad::Tensor;
using json = nlohmann::json;
using model::Model;
using model::ModelConfig;
using model::Variant;
namespace fs = std::filesystem;

enum class Precision { f32, f64 };

struct TrainConfig {
  std::map<std::string, double> task_weights;  // missing tasks weigh 1
  double lambda = 1.0;                         // physics weight
  double lr = 1e-3;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 200;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;
  double val_fraction = 0.1;
  ModelConfig model;

  bool operator==(const TrainConfig&) const = default;

  double weight(Task t) const {
    auto it = task_weights.find(std::string(task_name(t)));
    return it == task_weights.end() ? 1.0 : it->second;
  }
  /// Physics weight actually used; the no_phys ablation switches it off.
  double effective_lambda() const { return model.variant == Variant::no_phys ? 0.0 : lambda; }

  void validate() const {
    if (!(lambda >= 0)) throw ConfigError("lambda must be >= 0", "lambda");
    if (!(lr > 0)) throw ConfigError("lr must be > 0", "lr");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1", "batch_size");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1", "max_epochs");
    if (!(val_fraction >= 0 && val_fraction < 1)) throw ConfigError("val_fraction must be in [0, 1)", "val_fraction");
    bool any = false;
    for (const auto& [name, w] : task_weights) {
      task_from_name(name);
      if (!(w >= 0)) throw ConfigError("task weight must be >= 0", "task_weights." + name);
    }
    for (Task t : kAllTasks) any = any || weight(t) > 0;
    if (!any) throw ConfigError("at least one task weight must be positive", "task_weights");
    model.validate();
  }
};

inline json to_json_value(const TrainConfig& c) {
  json w = json::object();
  for (Task t : kAllTasks) w[std::string(task_name(t))] = c.weight(t);
  return {{"task_weights", w},
          {"lambda", c.lambda},
          {"lr", c.lr},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"patience", c.patience},
          {"seed", c.seed},
          {"precision", c.precision == Precision::f32 ? "f32" : "f64"},
          {"val_fraction", c.val_fraction},
          {"model", model::to_json_value(c.model)}};
}

/// Keys present in `j` override `c`; unknown keys raise ConfigError naming the key.
inline TrainConfig train_config_from_json(const json& j, TrainConfig c = {}) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object", "");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "task_weights") {
        if (!v.is_object()) throw ConfigError("task_weights must be an object", key);
        for (const auto& [task, w] : v.items()) {
          try {
            task_from_name(task);
          } catch (const std::exception&) {
            throw ConfigError("unknown task '" + task + "'", "task_weights." + task);
          }
          c.task_weights[task] = w.get<double>();
        }
      } else if (key == "lambda") c.lambda = v.get<double>();
      else if (key == "lr") c.lr = v.get<double>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "max_epochs") c.max_epochs = v.get<std::size_t>();
      else if (key == "patience") c.patience = v.get<std::size_t>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "val_fraction") c.val_fraction = v.get<double>();
      else if (key == "precision") {
        const auto p = v.get<std::string>();
        if (p == "f32") c.precision = Precision::f32;
        else if (p == "f64") c.precision = Precision::f64;
        else throw ConfigError("precision must be f32 or f64", key);
      } else if (key == "model") c.model = model::model_config_from_json(v, c.model);
      else throw ConfigError("unknown config key '" + key + "'", key);
    } catch (const json::exception&) {
      throw ConfigError("bad value for config key '" + key + "'", key);
    }
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Losses (normalized space)

template <class T>
Tensor<T> task_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape())
    throw DimensionError("task loss shape mismatch: " + ad::to_string(pred.shape()) + " vs " + ad::to_string(target.shape()));
  return ad::mse(pred, target);
}

/// Mean over samples of (npp - (gpp - ar))^2.
template <class T>
Tensor<T> phys_loss(const Tensor<T>& npp, const Tensor<T>& gpp, const Tensor<T>& ar) {
  if (npp.shape() != gpp.shape() || npp.shape() != ar.shape() || npp.rank() != 1)
    throw DimensionError("physics loss needs three equal-length flux vectors");
  return ad::mean(ad::square(ad::sub(npp, ad::sub(gpp, ar))));
}

/// Data term plus the evolution term MSE(initial + delta, target), equally weighted.
template <class T>
Tensor<T> pinn_delta_loss(const Tensor<T>& pred_final, const Tensor<T>& pred_delta, const Tensor<T>& initial,
                          const Tensor<T>& target_final) {
  if (initial.size() == 0) throw ContractError("delta-state loss needs the initial state");
  if (pred_delta.shape() != initial.shape()) throw DimensionError("delta and initial state shapes differ");
  const auto flat_pred = ad::reshape(pred_final, initial.shape());
  const auto flat_target = ad::reshape(target_final, initial.shape());
  return ad::add(task_loss(flat_pred, flat_target), task_loss(ad::add(initial, pred_delta), flat_target));
}

template <class T>
struct LossParts {
  Tensor<T> total;
  std::vector<double> task;  // kAllTasks order
  double phys = 0;
  double delta = 0;          // sum of evolution terms (delta-state baseline)
};

/// sum_j w_j L_task + lambda L_phys (+ the evolution terms of the delta-state baseline).
template <class T>
LossParts<T> total_loss(const model::Output<T>& out, const model::Batch<T>& b, const TrainConfig& cfg) {
  LossParts<T> parts;
  std::optional<Tensor<T>> acc;
  auto accumulate = [&](const Tensor<T>& t) { acc = acc ? ad::add(*acc, t) : t; };
  for (std::size_t i = 0; i < kAllTasks.size(); ++i) {
    const auto l = task_loss(out.pred[i], b.targets[i]);
    parts.task.push_back(static_cast<double>(l.item()));
    const double w = cfg.weight(kAllTasks[i]);
    if (w != 0) accumulate(w == 1 ? l : ad::scale(l, static_cast<T>(w)));
  }
  const auto ph = phys_loss(out.get(Task::npp), out.get(Task::gpp), out.get(Task::ar));
  parts.phys = static_cast<double>(ph.item());
  const double lambda = cfg.effective_lambda();
  if (lambda != 0) accumulate(lambda == 1 ? ph : ad::scale(ph, static_cast<T>(lambda)));
  if (!out.delta.empty()) {
    if (b.initial.size() != kStateTasks.size()) throw ContractError("delta-state loss needs the initial state");
    for (std::size_t k = 0; k < kStateTasks.size(); ++k) {
      const Task t = kStateTasks[k];
      const std::size_t i = static_cast<std::size_t>(std::find(kAllTasks.begin(), kAllTasks.end(), t) - kAllTasks.begin());
      const auto flat_target = ad::reshape(b.targets[i], b.initial[k].shape());
      const auto ev = task_loss(ad::add(b.initial[k], out.delta[k]), flat_target);
      parts.delta += static_cast<double>(ev.item());
      const double w = cfg.weight(t);
      if (w != 0) accumulate(w == 1 ? ev : ad::scale(ev, static_cast<T>(w)));
    }
  }
  parts.total = *acc;
  return parts;
}

// ---------------------------------------------------------------------------
// Optimizer

template <class T>
class Adam {
 public:
  explicit Adam(double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8) : lr_(lr), b1_(b1), b2_(b2), eps_(eps) {}

  void step(nn::ParamStore<T>& params) {
    ++t_;
    const double c1 = 1 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1 - std::pow(b2_, static_cast<double>(t_));
    for (auto& [name, p] : params) {
      if (!p.has_grad()) continue;
      auto& st = state_[name];
      const auto g = p.grad();
      if (st.m.empty()) st.m.assign(g.size(), 0), st.v.assign(g.size(), 0);
      auto x = p.mutable_data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        st.m[i] = b1_ * st.m[i] + (1 - b1_) * gi;
        st.v[i] = b2_ * st.v[i] + (1 - b2_) * gi * gi;
        x[i] -= static_cast<T>(lr_ * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps_));
      }
    }
  }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

// ---------------------------------------------------------------------------
// Trained model

struct SurrogateModel {
  ModelConfig model;
  TrainConfig train;
  Dims dims;
  data::Stats stats;
  nn::ParamStore<double> params;
  ood::OodStats ood;
  json info = json::object();

  Model<double> network() const { return Model<double>(model, dims, params.clone()); }
};

struct EpochRow {
  std::size_t epoch = 0;
  double train = 0, val = 0, phys_residual = 0;
};

struct TrainLog {
  std::vector<EpochRow> epochs;
  std::vector<double> steps;  // total loss of every optimizer step, before the update
  std::size_t best_epoch = 0;  // 0: the starting weights were never beaten
  double start_val = 0;        // validation loss of the starting weights

  std::string csv() const {
    io::Csv c({"epoch", "train", "val", "phys_residual"});
    for (const auto& r : epochs) c.row(r.epoch, r.train, r.val, r.phys_residual);
    return c.str();
  }
};

/// Re-expresses a split normalized with `from` in the normalization of `to`.
inline data::Split rebase(const data::Split& s, const data::Stats& from, const data::Stats& to) {
  data::Split out = s;
  auto redo = [](std::vector<double>& v, const data::MinMax& a, const data::MinMax& b) {
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = b.apply(i % b.size(), a.invert(i % a.size(), v[i]));
  };
  redo(out.forcing, from.forcing, to.forcing);
  redo(out.statics, from.statics, to.statics);
  redo(out.traits, from.traits, to.traits);
  redo(out.state, from.state, to.state);
  redo(out.layered, from.layered, to.layered);
  for (std::size_t i = 0; i < out.targets.size(); ++i) out.targets_norm[i] = to.targets.apply(i % to.targets.size(), out.targets[i]);
  return out;
}

/// Model predictions for every row of a split (already in the model's normalization).
struct Predictions {
  std::size_t n = 0;
  std::vector<double> norm;    // [n, target_size]
  std::vector<double> phys;    // [n, target_size]
  std::vector<double> latent;  // [n, d]
};

inline constexpr std::size_t kInferenceBatch = 64;

inline Predictions predict(const SurrogateModel& sm, const data::Split& s) {
  const auto net = sm.network();
  const std::size_t TT = target_size(sm.dims), d = sm.model.d;
  Predictions p;
  p.n = s.n;
  p.norm.reserve(s.n * TT);
  p.latent.reserve(s.n * d);
  for (std::size_t lo = 0; lo < s.n; lo += kInferenceBatch) {
    std::vector<std::size_t> rows;
    for (std::size_t i = lo; i < std::min(s.n, lo + kInferenceBatch); ++i) rows.push_back(i);
    const auto b = model::make_batch<double>(s, rows, sm.dims, sm.stats, net.static_columns());
    const auto out = net.forward(b);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t i = 0; i < kAllTasks.size(); ++i) {
        const std::size_t w = task_width(kAllTasks[i], sm.dims);
        for (std::size_t k = 0; k < w; ++k) p.norm.push_back(out.pred[i][r * w + k]);
      }
      for (std::size_t k = 0; k < d; ++k) p.latent.push_back(out.latent[r * d + k]);
    }
  }
  p.phys.resize(p.norm.size());
  for (std::size_t i = 0; i < p.norm.size(); ++i) p.phys[i] = sm.stats.targets.invert(i % TT, p.norm[i]);
  return p;
}

namespace detail {

inline std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Held-in validation rows: a seeded `fraction` of `rows`, at least one when there are two or more rows.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> hold_out(const std::vector<std::size_t>& rows,
                                                                                 double fraction, std::uint64_t seed) {
  const auto perm = data::permutation(rows.size(), mix(seed, 0x76616c));
  std::size_t nv = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(rows.size())));
  if (fraction > 0 && rows.size() >= 2) nv = std::max<std::size_t>(nv, 1);
  nv = std::min(nv, rows.size() - 1);
  std::vector<std::size_t> fit, val;
  for (std::size_t i = 0; i < perm.size(); ++i) (i < nv ? val : fit).push_back(rows[perm[i]]);
  std::sort(val.begin(), val.end());
  return {fit, val};
}

struct Evaluation {
  double loss = 0, phys = 0;
};

template <class T>
Evaluation evaluate(const Model<T>& net, const data::Split& s, const std::vector<std::size_t>& rows,
                    const data::Stats& stats, const TrainConfig& cfg) {
  Evaluation e;
  for (std::size_t lo = 0; lo < rows.size(); lo += kInferenceBatch) {
    const std::span<const std::size_t> chunk(rows.data() + lo, std::min(rows.size() - lo, kInferenceBatch));
    const auto b = model::make_batch<T>(s, chunk, net.dims(), stats, net.static_columns());
    const auto parts = total_loss(net.forward(b), b, cfg);
    e.loss += static_cast<double>(parts.total.item()) * static_cast<double>(chunk.size());
    e.phys += parts.phys * static_cast<double>(chunk.size());
  }
  e.loss /= static_cast<double>(rows.size());
  e.phys /= static_cast<double>(rows.size());
  return e;
}

template <class T>
nn::ParamStore<double> fit(Model<T>& net, const data::Split& s, const std::vector<std::size_t>& rows,
                           const data::Stats& stats, const TrainConfig& cfg, TrainLog* log) {
  auto [fit_rows, val_rows] = hold_out(rows, cfg.val_fraction, cfg.seed);
  const auto& monitor = val_rows.empty() ? fit_rows : val_rows;
  Adam<T> opt(cfg.lr);
  // The starting weights are epoch 0: a fine-tune that never beats them on
  // validation returns them unchanged.
  nn::ParamStore<T> best = net.params().clone();
  TrainLog local;
  TrainLog& lg = log ? *log : local;
  lg.start_val = evaluate(net, s, monitor, stats, cfg).loss;
  lg.best_epoch = 0;
  double best_val = std::isfinite(lg.start_val) ? lg.start_val : std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto perm = data::permutation(fit_rows.size(), mix(cfg.seed, epoch));
    double sum = 0;
    for (std::size_t lo = 0; lo < perm.size(); lo += cfg.batch_size) {
      std::vector<std::size_t> chunk;
      for (std::size_t i = lo; i < std::min(perm.size(), lo + cfg.batch_size); ++i) chunk.push_back(fit_rows[perm[i]]);
      const auto b = model::make_batch<T>(s, chunk, net.dims(), stats, net.static_columns());
      ad::Tape<T> tape;
      typename ad::Tape<T>::Scope scope(tape);
      const auto parts = total_loss(net.forward(b), b, cfg);
      const double l = static_cast<double>(parts.total.item());
      if (!std::isfinite(l)) throw DivergenceError("training loss is not finite at epoch " + std::to_string(epoch), static_cast<int>(epoch));
      net.params().zero_grad();
      tape.backward(parts.total);
      opt.step(net.params());
      lg.steps.push_back(l);
      sum += l * static_cast<double>(chunk.size());
    }
    const auto ev = evaluate(net, s, monitor, stats, cfg);
    if (!std::isfinite(ev.loss)) throw DivergenceError("validation loss is not finite at epoch " + std::to_string(epoch), static_cast<int>(epoch));
    lg.epochs.push_back({epoch, sum / static_cast<double>(fit_rows.size()), ev.loss, ev.phys});
    if (ev.loss < best_val) {
      best_val = ev.loss;
      best = net.params().clone();
      lg.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  net.params().assign(best);
  return best.template cast<double>();
}

template <class T>
void finish(SurrogateModel& sm, const data::Split& s, const std::vector<std::size_t>& rows, const TrainLog& lg) {
  data::Split used = s.subset(rows, sm.dims);
  const auto p = predict(sm, used);
  sm.ood = ood::fit(used, sm.dims, p.latent, sm.model.d);
  sm.info = {{"epochs", lg.epochs.size()},
             {"best_epoch", lg.best_epoch},
             {"best_val", lg.best_epoch == 0 ? lg.start_val : lg.epochs[lg.best_epoch - 1].val},
             {"samples", rows.size()}};
}

template <class T>
SurrogateModel run(const data::Dataset& ds, const TrainConfig& cfg, const std::vector<std::size_t>& rows,
                   const data::Split& split, std::optional<const SurrogateModel*> start, TrainLog* log) {
  SurrogateModel sm;
  sm.model = cfg.model;
  sm.train = cfg;
  sm.dims = ds.dims;
  sm.stats = start ? (*start)->stats : ds.stats;
  std::optional<Model<T>> net;
  if (start) net.emplace(cfg.model, ds.dims, (*start)->params.template cast<T>());
  else net.emplace(cfg.model, ds.dims, mix(cfg.seed, 0x696e6974));
  TrainLog local;
  TrainLog& lg = log ? *log : local;
  sm.params = fit(*net, split, rows, sm.stats, cfg, &lg);
  finish<T>(sm, split, rows, lg);
  return sm;
}

}  // namespace detail

/// Trains from scratch on the dataset's train split.
inline SurrogateModel train(const data::Dataset& ds, TrainConfig cfg, TrainLog* log = nullptr) {
  cfg.validate();
  if (ds.train.n == 0) throw RangeError("cannot train on an empty dataset");
  std::vector<std::size_t> rows(ds.train.n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return cfg.precision == Precision::f32 ? detail::run<float>(ds, cfg, rows, ds.train, std::nullopt, log)
                                         : detail::run<double>(ds, cfg, rows, ds.train, std::nullopt, log);
}

/// Seeded subsample of `fraction` of the rows, at least one.
inline std::vector<std::size_t> subsample(std::size_t n, double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction <= 1)) throw RangeError("fine-tune fraction must be in (0, 1]");
  if (n == 0) throw RangeError("cannot subsample an empty split");
  const std::size_t k = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))));
  auto perm = data::permutation(n, detail::mix(seed, 0x66696e65));
  perm.resize(std::min(k, n));
  std::sort(perm.begin(), perm.end());
  return perm;
}

/// Continues optimization of `base` on a fraction of `fine`'s train split,
/// keeping the base model's normalization.
inline SurrogateModel fine_tune(const SurrogateModel& base, const data::Dataset& fine, double fraction, TrainConfig cfg,
                                TrainLog* log = nullptr) {
  cfg.model = base.model;
  cfg.validate();
  if (fine.dims.n_pft != base.dims.n_pft || fine.dims.months != base.dims.months ||
      fine.dims.forcing_vars != base.dims.forcing_vars || fine.dims.n_layered != base.dims.n_layered)
    throw DimensionError("fine-tune dataset dimensions do not match the model");
  const auto split = rebase(fine.train, fine.stats, base.stats);
  const auto rows = subsample(split.n, fraction, cfg.seed);
  auto sm = cfg.precision == Precision::f32 ? detail::run<float>(fine, cfg, rows, split, &base, log)
                                            : detail::run<double>(fine, cfg, rows, split, &base, log);
  sm.info["fraction"] = fraction;
  return sm;
}

// ---------------------------------------------------------------------------
// Model file: "PHM1", u64 manifest length, manifest JSON, then one
// (u32 name length, name, blob) record per parameter in name order.

inline constexpr std::array<char, 4> kModelMagic{'P', 'H', 'M', '1'};

inline json manifest(const SurrogateModel& sm) {
  json params = json::array();
  for (const auto& [name, t] : sm.params) params.push_back(name);
  return {{"format", "phase-model"},
          {"version", 1},
          {"model", model::to_json_value(sm.model)},
          {"train", to_json_value(sm.train)},
          {"dims", sm.dims},
          {"stats", sm.stats},
          {"ood", sm.ood},
          {"info", sm.info},
          {"params", params}};
}

inline void write_model(std::ostream& os, const SurrogateModel& sm) {
  const std::string text = manifest(sm).dump();
  os.write(kModelMagic.data(), kModelMagic.size());
  blob::detail::put_le<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : sm.params) {
    blob::detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    blob::write<double>(os, t);
  }
}

inline void save_model(const fs::path& path, const SurrogateModel& sm) {
  io::atomic_write(path, [&](std::ostream& os) { write_model(os, sm); });
}

inline SurrogateModel read_model(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kModelMagic) throw FormatError("not a model file");
  const auto len = blob::detail::get_le<std::uint64_t>(is);
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw FormatError("truncated model manifest");
  const json m = json::parse(text);
  if (m.value("format", "") != "phase-model") throw FormatError("not a model manifest");
  SurrogateModel sm;
  sm.model = model::model_config_from_json(m.at("model"));
  sm.train = train_config_from_json(m.at("train"));
  sm.dims = m.at("dims").get<Dims>();
  sm.stats = m.at("stats").get<data::Stats>();
  sm.ood = m.at("ood").get<ood::OodStats>();
  sm.info = m.at("info");
  for (std::size_t i = 0; i < m.at("params").size(); ++i) {
    const auto n = blob::detail::get_le<std::uint32_t>(is);
    std::string name(n, '\0');
    if (!is.read(name.data(), n)) throw FormatError("truncated parameter record");
    sm.params.insert(name, blob::read(is).tensor<double>());
  }
  Model<double>(sm.model, sm.dims, sm.params.clone());  // validates names and shapes
  return sm;
}

inline SurrogateModel load_model(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open model file " + path.string(), "model");
  return read_model(is);
}

}  // namespace phase::train
