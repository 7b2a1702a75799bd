#pragma once

// The surrogate: one encoder per input group, attention fusion over the group
// embeddings, and one softplus head per task. Ablation and baseline variants
// are configurations of the same class.

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "phase/errors.hpp"
#include "phase/nn.hpp"
#include "phase/ops.hpp"
#include "phase/pipeline.hpp"
#include "phase/sample.hpp"

namespace phase::model {

using ad::Shape;
using ad::Tensor;
using json = nlohmann::json;
using nn::ParamStore;

enum class Variant { full, no_cnn, no_fc, no_lstm, no_trans, no_phys, baseline_mlp, baseline_pinn };

inline constexpr std::array<Variant, 8> kAllVariants{Variant::full,    Variant::no_cnn,       Variant::no_fc,
                                                     Variant::no_lstm, Variant::no_trans,     Variant::no_phys,
                                                     Variant::baseline_mlp, Variant::baseline_pinn};

inline std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_cnn: return "no_cnn";
    case Variant::no_fc: return "no_fc";
    case Variant::no_lstm: return "no_lstm";
    case Variant::no_trans: return "no_trans";
    case Variant::no_phys: return "no_phys";
    case Variant::baseline_mlp: return "baseline_mlp";
    case Variant::baseline_pinn: return "baseline_pinn";
  }
  return "?";
}

inline Variant variant_from_name(std::string_view s) {
  for (Variant v : kAllVariants)
    if (variant_name(v) == s) return v;
  throw ConfigError("unknown variant '" + std::string(s) + "'", "variant");
}

/// Input groups, in fusion token order.
enum class Group { temporal, layered, statics, pft };
inline constexpr std::array<Group, 4> kAllGroups{Group::temporal, Group::layered, Group::statics, Group::pft};

inline std::string_view group_name(Group g) {
  switch (g) {
    case Group::temporal: return "temporal";
    case Group::layered: return "layered";
    case Group::statics: return "static";
    case Group::pft: return "pft";
  }
  return "?";
}

struct ModelConfig {
  std::size_t d = 64;            // shared latent width
  std::size_t lstm_hidden = 64;
  std::size_t conv1 = 16, conv2 = 32;
  std::size_t heads = 4, layers = 2, ffn_mult = 4;
  std::size_t head_hidden = 64;
  std::size_t mlp_hidden = 256;  // baseline backbones only
  Variant variant = Variant::full;
  std::vector<std::string> drop_static;  // static feature names withheld from the model

  bool operator==(const ModelConfig&) const = default;

  std::vector<Group> groups() const {
    std::vector<Group> g;
    for (Group x : kAllGroups) {
      if (x == Group::temporal && variant == Variant::no_lstm) continue;
      if (x == Group::layered && variant == Variant::no_cnn) continue;
      if ((x == Group::statics || x == Group::pft) && variant == Variant::no_fc) continue;
      g.push_back(x);
    }
    return g;
  }
  bool flat_backbone() const { return variant == Variant::baseline_mlp || variant == Variant::baseline_pinn; }
  bool attention_fusion() const { return !flat_backbone() && variant != Variant::no_trans; }
  bool delta_heads() const { return variant == Variant::baseline_pinn; }

  void validate() const {
    auto positive = [](std::size_t v, const char* key) {
      if (v == 0) throw ConfigError(std::string("model.") + key + " must be positive", std::string("model.") + key);
    };
    positive(d, "d"), positive(lstm_hidden, "lstm_hidden"), positive(conv1, "conv1"), positive(conv2, "conv2");
    positive(heads, "heads"), positive(layers, "layers"), positive(ffn_mult, "ffn_mult");
    positive(head_hidden, "head_hidden"), positive(mlp_hidden, "mlp_hidden");
    if (d % heads != 0) throw ConfigError("model.d must be divisible by model.heads", "model.heads");
  }
};

inline json to_json_value(const ModelConfig& c) {
  return {{"d", c.d},
          {"lstm_hidden", c.lstm_hidden},
          {"conv1", c.conv1},
          {"conv2", c.conv2},
          {"heads", c.heads},
          {"layers", c.layers},
          {"ffn_mult", c.ffn_mult},
          {"head_hidden", c.head_hidden},
          {"mlp_hidden", c.mlp_hidden},
          {"variant", std::string(variant_name(c.variant))},
          {"drop_static", c.drop_static}};
}

/// Reads the keys present in `j` over `base`; unknown keys are a ConfigError naming the key.
inline ModelConfig model_config_from_json(const json& j, ModelConfig c = {}, const std::string& prefix = "model.") {
  if (!j.is_object()) throw ConfigError(prefix + " must be an object", prefix);
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "d") c.d = v.get<std::size_t>();
      else if (key == "lstm_hidden") c.lstm_hidden = v.get<std::size_t>();
      else if (key == "conv1") c.conv1 = v.get<std::size_t>();
      else if (key == "conv2") c.conv2 = v.get<std::size_t>();
      else if (key == "heads") c.heads = v.get<std::size_t>();
      else if (key == "layers") c.layers = v.get<std::size_t>();
      else if (key == "ffn_mult") c.ffn_mult = v.get<std::size_t>();
      else if (key == "head_hidden") c.head_hidden = v.get<std::size_t>();
      else if (key == "mlp_hidden") c.mlp_hidden = v.get<std::size_t>();
      else if (key == "variant") c.variant = variant_from_name(v.get<std::string>());
      else if (key == "drop_static") c.drop_static = v.get<std::vector<std::string>>();
      else throw ConfigError("unknown config key '" + prefix + key + "'", prefix + key);
    } catch (const json::exception&) {
      throw ConfigError("bad value for config key '" + prefix + key + "'", prefix + key);
    }
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Batches

/// Model inputs for B samples; `initial` holds the year-20 slow states in
/// normalized target units (delta-state baseline only).
template <class T>
struct Batch {
  std::size_t n = 0;
  Tensor<T> forcing;  // [B, months, vars]
  Tensor<T> statics;  // [B, static columns kept]
  Tensor<T> pft;      // [B, n_pft * (n_traits + n_pft_state)], traits then state per PFT
  Tensor<T> layered;  // [B, 9, n_layered]
  std::vector<Tensor<T>> initial;  // kStateTasks order, each [B, width]
  std::vector<Tensor<T>> targets;  // kAllTasks order, normalized, registered shapes
};

/// Registered output shape of a task for B samples.
inline Shape task_shape_for(Task t, const Dims& d, std::size_t B) {
  switch (task_shape(t)) {
    case TaskShape::scalar: return {B};
    case TaskShape::pft: return {B, d.n_pft};
    case TaskShape::layer: return {B, d.n_layers};
    case TaskShape::pft_layer: return {B, d.n_pft, d.n_layers};
  }
  return {};
}

/// (feature group, field) of the year-20 input holding each slow task's state.
struct InitialSource {
  bool layered;
  std::size_t field;
};
inline InitialSource initial_source(Task t) {
  switch (t) {
    case Task::deadcrootc: return {false, 3};
    case Task::deadstemc: return {false, 2};
    case Task::tlai: return {false, 4};
    case Task::cwdc: return {true, 0};
    case Task::soil3c: return {true, 1};
    case Task::soil4c: return {true, 2};
    default: throw ContractError("task " + std::string(task_name(t)) + " has no year-20 state");
  }
}

template <class T>
Batch<T> make_batch(const data::Split& s, std::span<const std::size_t> rows, const Dims& d, const data::Stats& stats,
                    const std::vector<std::size_t>& static_cols) {
  const std::size_t B = rows.size();
  const std::size_t TT = target_size(d), per_pft = d.n_traits + d.n_pft_state;
  std::vector<T> f, st, pf, ly, tg;
  f.reserve(B * d.forcing_size());
  for (std::size_t r : rows) {
    auto row = [&](const std::vector<double>& src, std::size_t w) { return src.begin() + static_cast<std::ptrdiff_t>(r * w); };
    f.insert(f.end(), row(s.forcing, d.forcing_size()), row(s.forcing, d.forcing_size()) + static_cast<std::ptrdiff_t>(d.forcing_size()));
    for (std::size_t c : static_cols) st.push_back(static_cast<T>(s.statics[r * d.n_static + c]));
    for (std::size_t j = 0; j < d.n_pft; ++j) {
      for (std::size_t k = 0; k < d.n_traits; ++k) pf.push_back(static_cast<T>(s.traits[r * d.traits_size() + j * d.n_traits + k]));
      for (std::size_t k = 0; k < d.n_pft_state; ++k) pf.push_back(static_cast<T>(s.state[r * d.pft_state_size() + j * d.n_pft_state + k]));
    }
    ly.insert(ly.end(), row(s.layered, d.layered_size()), row(s.layered, d.layered_size()) + static_cast<std::ptrdiff_t>(d.layered_size()));
    tg.insert(tg.end(), row(s.targets_norm, TT), row(s.targets_norm, TT) + static_cast<std::ptrdiff_t>(TT));
  }
  Batch<T> b;
  b.n = B;
  b.forcing = Tensor<T>({B, d.months, d.forcing_vars}, std::move(f));
  b.statics = Tensor<T>({B, static_cols.size()}, std::move(st));
  b.pft = Tensor<T>({B, d.n_pft * per_pft}, std::move(pf));
  b.layered = Tensor<T>({B, d.n_layers, d.n_layered}, std::move(ly));
  for (Task t : kAllTasks) {
    const std::size_t off = task_offset(t, d), w = task_width(t, d);
    std::vector<T> v;
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t k = 0; k < w; ++k) v.push_back(tg[i * TT + off + k]);
    b.targets.emplace_back(task_shape_for(t, d, B), std::move(v));
  }
  for (Task t : kStateTasks) {
    const auto src = initial_source(t);
    const std::size_t off = task_offset(t, d), w = task_width(t, d);
    std::vector<T> v;
    for (std::size_t r : rows)
      for (std::size_t k = 0; k < w; ++k) {
        double phys;
        if (src.layered) {
          const std::size_t c = k * d.n_layered + src.field;
          phys = stats.layered.invert(c, s.layered[r * d.layered_size() + c]);
        } else {
          const std::size_t c = k * d.n_pft_state + src.field;
          phys = stats.state.invert(c, s.state[r * d.pft_state_size() + c]);
        }
        v.push_back(static_cast<T>(stats.targets.apply(off + k, phys)));
      }
    b.initial.emplace_back(Shape{B, w}, std::move(v));
  }
  return b;
}

// ---------------------------------------------------------------------------
// Model

template <class T>
struct Output {
  std::vector<Tensor<T>> pred;   // kAllTasks order, registered shapes, normalized units
  std::vector<Tensor<T>> delta;  // kStateTasks order [B, width]; delta-state baseline only
  Tensor<T> latent;              // [B, d]

  const Tensor<T>& get(Task t) const {
    for (std::size_t i = 0; i < kAllTasks.size(); ++i)
      if (kAllTasks[i] == t) return pred.at(i);
    throw ContractError("unregistered task");
  }
};

template <class T>
class Model {
 public:
  Model(ModelConfig cfg, Dims dims, std::uint64_t seed) : cfg_(std::move(cfg)), dims_(dims) {
    cfg_.validate();
    static_cols_ = resolve_static_columns(cfg_, dims_);
    std::mt19937_64 rng(seed);
    init(rng);
  }

  /// Wraps stored parameters; names and shapes must match the configuration.
  Model(ModelConfig cfg, Dims dims, ParamStore<T> params) : cfg_(std::move(cfg)), dims_(dims) {
    cfg_.validate();
    static_cols_ = resolve_static_columns(cfg_, dims_);
    std::mt19937_64 rng(0);
    init(rng);
    params_.assign(params);
  }

  const ModelConfig& config() const { return cfg_; }
  const Dims& dims() const { return dims_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const std::vector<std::size_t>& static_columns() const { return static_cols_; }

  static std::vector<std::size_t> resolve_static_columns(const ModelConfig& cfg, const Dims& d) {
    const auto names = static_feature_names(d.n_pft);
    if (names.size() != d.n_static) throw DimensionError("static feature count does not match dims");
    for (const auto& drop : cfg.drop_static)
      if (std::find(names.begin(), names.end(), drop) == names.end())
        throw ConfigError("unknown static feature '" + drop + "'", "model.drop_static");
    std::vector<std::size_t> cols;
    for (std::size_t i = 0; i < names.size(); ++i)
      if (std::find(cfg.drop_static.begin(), cfg.drop_static.end(), names[i]) == cfg.drop_static.end()) cols.push_back(i);
    return cols;
  }

  // -- encoders -------------------------------------------------------------

  /// forcing [B, T, F] -> [B, d]
  Tensor<T> encode_temporal(const Tensor<T>& x) const {
    if (x.rank() != 3 || x.dim(2) != dims_.forcing_vars) throw DimensionError("temporal input must be [B, T, " + std::to_string(dims_.forcing_vars) + "]");
    if (x.dim(1) == 0) throw ContractError("temporal input has no time steps");
    const auto h = ad::lstm(x, p("lstm.w_in"), p("lstm.w_rec"), p("lstm.b"));
    return nn::dense(params_, "lstm.proj", h);
  }

  /// layered [B, 9, F_l] -> [B, d]
  Tensor<T> encode_layered(const Tensor<T>& x) const {
    if (x.rank() != 3 || x.dim(1) != kLayers || x.dim(2) != dims_.n_layered)
      throw DimensionError("layered input must be [B, 9, " + std::to_string(dims_.n_layered) + "]");
    auto h = ad::relu(ad::add_trailing(ad::conv1d(x, p("cnn.k1"), 1, 1), p("cnn.b1")));
    h = ad::relu(ad::add_trailing(ad::conv1d(h, p("cnn.k2"), 1, 1), p("cnn.b2")));
    return nn::dense(params_, "cnn.proj", ad::reshape(h, {x.dim(0), kLayers * cfg_.conv2}));
  }

  /// [B, F] -> [B, d] through two dense layers.
  Tensor<T> encode_fc(const std::string& name, const Tensor<T>& x) const {
    const auto& w = p(name + ".fc1.w");
    if (x.rank() != 2 || x.dim(1) != w.dim(0))
      throw DimensionError(name + " input must be [B, " + std::to_string(w.dim(0)) + "]");
    return nn::dense(params_, name + ".fc2", ad::relu(nn::dense(params_, name + ".fc1", x)));
  }

  // -- fusion ---------------------------------------------------------------

  /// z_list: N tensors [B, d] -> [B, d]. `probs` receives first-layer attention [B, h, N, N].
  Tensor<T> fuse(const std::vector<Tensor<T>>& z, std::vector<T>* probs = nullptr) const {
    const std::size_t N = z.size(), d = cfg_.d;
    if (N != cfg_.groups().size()) throw DimensionError("fusion expects " + std::to_string(cfg_.groups().size()) + " inputs");
    for (const auto& x : z)
      if (x.rank() != 2 || x.dim(1) != d) throw DimensionError("fusion input width must be " + std::to_string(d));
    const std::size_t B = z[0].dim(0);
    if (!cfg_.attention_fusion()) {
      return nn::dense(params_, "concat.proj", ad::concat_cols(z));
    }
    auto x = ad::add_trailing(ad::stack_tokens(z), p("fusion.embed"));
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string pre = "fusion." + std::to_string(l);
      auto flat = ad::reshape(x, {B * N, d});
      auto proj = [&](const char* nm, const Tensor<T>& in) { return ad::reshape(nn::dense(params_, pre + nm, in), {B, N, d}); };
      auto a = ad::attention(proj(".q", flat), proj(".k", flat), proj(".v", flat), cfg_.heads, l == 0 ? probs : nullptr);
      auto o = proj(".o", ad::reshape(a, {B * N, d}));
      x = ad::layer_norm(ad::add(x, o), p(pre + ".ln1.g"), p(pre + ".ln1.b"), T(1e-5));
      auto f = nn::dense(params_, pre + ".ffn2", ad::relu(nn::dense(params_, pre + ".ffn1", ad::reshape(x, {B * N, d}))));
      x = ad::layer_norm(ad::add(x, ad::reshape(f, {B, N, d})), p(pre + ".ln2.g"), p(pre + ".ln2.b"), T(1e-5));
    }
    return ad::mean_tokens(x);
  }

  // -- heads ----------------------------------------------------------------

  /// dense(relu)dense then softplus, reshaped to the registered shape.
  Tensor<T> head(const std::string& name, TaskShape shape, const Tensor<T>& z) const {
    const std::size_t B = z.dim(0);
    auto y = ad::softplus(nn::dense(params_, name + ".fc2", ad::relu(nn::dense(params_, name + ".fc1", z))));
    switch (shape) {
      case TaskShape::scalar: return ad::reshape(y, {B});
      case TaskShape::pft: return ad::reshape(y, {B, dims_.n_pft});
      case TaskShape::layer: return ad::reshape(y, {B, dims_.n_layers});
      case TaskShape::pft_layer: return ad::reshape(y, {B, dims_.n_pft, dims_.n_layers});
    }
    return y;
  }

  Output<T> predict_all(const Tensor<T>& z) const {
    Output<T> out;
    out.latent = z;
    for (Task t : kAllTasks) out.pred.push_back(head("head." + std::string(task_name(t)), task_shape(t), z));
    if (cfg_.delta_heads()) {
      for (Task t : kStateTasks) {
        const std::string nm = "delta." + std::string(task_name(t));
        out.delta.push_back(nn::dense(params_, nm + ".fc2", ad::relu(nn::dense(params_, nm + ".fc1", z))));
      }
    }
    return out;
  }

  // -- full forward ---------------------------------------------------------

  Tensor<T> latent(const Batch<T>& b, std::vector<T>* probs = nullptr) const {
    if (cfg_.flat_backbone()) {
      const std::size_t B = b.n;
      auto x = ad::concat_cols<T>({ad::reshape(b.forcing, {B, dims_.forcing_size()}), b.statics, b.pft,
                                   ad::reshape(b.layered, {B, dims_.layered_size()})});
      x = ad::relu(nn::dense(params_, "mlp.fc1", x));
      x = ad::relu(nn::dense(params_, "mlp.fc2", x));
      return nn::dense(params_, "mlp.fc3", x);
    }
    std::vector<Tensor<T>> z;
    for (Group g : cfg_.groups()) {
      switch (g) {
        case Group::temporal: z.push_back(encode_temporal(b.forcing)); break;
        case Group::layered: z.push_back(encode_layered(b.layered)); break;
        case Group::statics: z.push_back(encode_fc("static", b.statics)); break;
        case Group::pft: z.push_back(encode_fc("pft", b.pft)); break;
      }
    }
    return fuse(z, probs);
  }

  Output<T> forward(const Batch<T>& b, std::vector<T>* probs = nullptr) const { return predict_all(latent(b, probs)); }

 private:
  const Tensor<T>& p(const std::string& name) const { return params_.get(name); }

  void dense(std::mt19937_64& rng, const std::string& name, std::size_t in, std::size_t out) {
    nn::add_dense(params_, name, in, out, rng);
  }

  void init(std::mt19937_64& rng) {
    const std::size_t d = cfg_.d, H = cfg_.lstm_hidden;
    const std::size_t pft_in = dims_.n_pft * (dims_.n_traits + dims_.n_pft_state);
    if (cfg_.flat_backbone()) {
      const std::size_t in = dims_.forcing_size() + static_cols_.size() + pft_in + dims_.layered_size();
      dense(rng, "mlp.fc1", in, cfg_.mlp_hidden);
      dense(rng, "mlp.fc2", cfg_.mlp_hidden, cfg_.mlp_hidden);
      dense(rng, "mlp.fc3", cfg_.mlp_hidden, d);
    } else {
      for (Group g : cfg_.groups()) {
        switch (g) {
          case Group::temporal:
            params_.add_uniform("lstm.w_in", {dims_.forcing_vars, 4 * H}, dims_.forcing_vars, 4 * H, rng);
            params_.add_uniform("lstm.w_rec", {H, 4 * H}, H, 4 * H, rng);
            params_.add_constant("lstm.b", {4 * H}, T(0));
            dense(rng, "lstm.proj", H, d);
            break;
          case Group::layered:
            params_.add_uniform("cnn.k1", {3, dims_.n_layered, cfg_.conv1}, 3 * dims_.n_layered, 3 * cfg_.conv1, rng);
            params_.add_constant("cnn.b1", {cfg_.conv1}, T(0));
            params_.add_uniform("cnn.k2", {3, cfg_.conv1, cfg_.conv2}, 3 * cfg_.conv1, 3 * cfg_.conv2, rng);
            params_.add_constant("cnn.b2", {cfg_.conv2}, T(0));
            dense(rng, "cnn.proj", kLayers * cfg_.conv2, d);
            break;
          case Group::statics:
            dense(rng, "static.fc1", static_cols_.size(), d);
            dense(rng, "static.fc2", d, d);
            break;
          case Group::pft:
            dense(rng, "pft.fc1", pft_in, d);
            dense(rng, "pft.fc2", d, d);
            break;
        }
      }
      const std::size_t N = cfg_.groups().size();
      if (cfg_.attention_fusion()) {
        params_.add_uniform("fusion.embed", {N, d}, N, d, rng);
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
          const std::string pre = "fusion." + std::to_string(l);
          for (const char* nm : {".q", ".k", ".v", ".o"}) dense(rng, pre + nm, d, d);
          params_.add_constant(pre + ".ln1.g", {d}, T(1));
          params_.add_constant(pre + ".ln1.b", {d}, T(0));
          dense(rng, pre + ".ffn1", d, cfg_.ffn_mult * d);
          dense(rng, pre + ".ffn2", cfg_.ffn_mult * d, d);
          params_.add_constant(pre + ".ln2.g", {d}, T(1));
          params_.add_constant(pre + ".ln2.b", {d}, T(0));
        }
      } else {
        dense(rng, "concat.proj", N * d, d);
      }
    }
    for (Task t : kAllTasks) {
      const std::string nm = "head." + std::string(task_name(t));
      dense(rng, nm + ".fc1", d, cfg_.head_hidden);
      dense(rng, nm + ".fc2", cfg_.head_hidden, task_width(t, dims_));
    }
    if (cfg_.delta_heads()) {
      for (Task t : kStateTasks) {
        const std::string nm = "delta." + std::string(task_name(t));
        dense(rng, nm + ".fc1", d, cfg_.head_hidden);
        dense(rng, nm + ".fc2", cfg_.head_hidden, task_width(t, dims_));
      }
    }
  }

  ModelConfig cfg_;
  Dims dims_;
  std::vector<std::size_t> static_cols_;
  ParamStore<T> params_;
};

/// Physical-unit predictions from normalized ones. Every task needs statistics.
inline std::vector<double> denormalize(std::span<const double> norm_row, const data::Stats& stats, const Dims& d) {
  if (stats.targets.size() != target_size(d)) throw ContractError("denormalize: target statistics missing or incomplete");
  if (norm_row.size() != target_size(d)) throw DimensionError("denormalize: row width mismatch");
  std::vector<double> out(norm_row.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stats.targets.invert(i, norm_row[i]);
  return out;
}

}  // namespace phase::model
