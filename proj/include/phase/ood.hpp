#pragma once

// Out-of-distribution guard: a per-feature envelope on the normalized inputs
// plus a diagonal-standardized distance in the fused latent space.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"

#include "phase/errors.hpp"
#include "phase/pipeline.hpp"
#include "phase/sim.hpp"

namespace phase::ood {

using json = nlohmann::json;

/// Named scalar features the envelope watches, all in the model's normalized
/// space. Forcing is summarized per variable over the months.
struct FeatureView {
  std::vector<std::string> names;
  std::vector<double> values;  // row-major [n, names.size()]
};

inline std::vector<std::string> feature_names(const Dims& d) {
  std::vector<std::string> n;
  for (std::size_t v = 0; v < d.forcing_vars; ++v) {
    const std::string base = "forcing." + (v < sim::kForcingNames.size() ? std::string(sim::kForcingNames[v]) : std::to_string(v));
    n.push_back(base + ".min");
    n.push_back(base + ".max");
  }
  const auto st = static_feature_names(d.n_pft);
  for (std::size_t i = 0; i < d.n_static; ++i) n.push_back("static." + (i < st.size() ? st[i] : std::to_string(i)));
  for (std::size_t i = 0; i < d.traits_size(); ++i) n.push_back("pft_traits[" + std::to_string(i) + "]");
  for (std::size_t i = 0; i < d.pft_state_size(); ++i) n.push_back("pft_state[" + std::to_string(i) + "]");
  for (std::size_t i = 0; i < d.layered_size(); ++i) n.push_back("layered[" + std::to_string(i) + "]");
  return n;
}

/// Forcing variables contribute their min and max over the window.
inline FeatureView features(const data::Split& s, const Dims& d) {
  FeatureView f;
  f.names = feature_names(d);
  const std::size_t w = f.names.size();
  f.values.reserve(s.n * w);
  for (std::size_t r = 0; r < s.n; ++r) {
    for (std::size_t v = 0; v < d.forcing_vars; ++v) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (std::size_t m = 0; m < d.months; ++m) {
        const double x = s.forcing[r * d.forcing_size() + m * d.forcing_vars + v];
        lo = std::min(lo, x), hi = std::max(hi, x);
      }
      f.values.push_back(lo);
      f.values.push_back(hi);
    }
    auto put = [&](const std::vector<double>& src, std::size_t width) {
      f.values.insert(f.values.end(), src.begin() + static_cast<std::ptrdiff_t>(r * width),
                      src.begin() + static_cast<std::ptrdiff_t>((r + 1) * width));
    };
    put(s.statics, d.n_static);
    put(s.traits, d.traits_size());
    put(s.state, d.pft_state_size());
    put(s.layered, d.layered_size());
  }
  return f;
}

struct OodStats {
  std::vector<std::string> names;
  std::vector<double> lo, hi;            // train envelope per feature
  double tau = 0.05;                     // tolerance as a fraction of the train range
  std::vector<double> latent_mean, latent_var;
  double q = 99;
  double threshold = 0;                  // nearest-rank q-th percentile of train latent scores

  bool fitted() const { return !lo.empty(); }
};

inline void to_json(json& j, const OodStats& s) {
  j = {{"names", s.names}, {"min", s.lo}, {"max", s.hi}, {"tau", s.tau}, {"latent_mean", s.latent_mean},
       {"latent_var", s.latent_var}, {"q", s.q}, {"threshold", s.threshold}};
}
inline void from_json(const json& j, OodStats& s) {
  j.at("names").get_to(s.names);
  j.at("min").get_to(s.lo);
  j.at("max").get_to(s.hi);
  j.at("tau").get_to(s.tau);
  j.at("latent_mean").get_to(s.latent_mean);
  j.at("latent_var").get_to(s.latent_var);
  j.at("q").get_to(s.q);
  j.at("threshold").get_to(s.threshold);
}

inline double latent_score(std::span<const double> z, const OodStats& s) {
  double acc = 0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    const double dz = z[k] - s.latent_mean[k];
    acc += dz * dz / std::max(s.latent_var[k], 1e-12);
  }
  return acc;
}

/// Linear-interpolated percentile, p in [0, 100].
inline double percentile(std::vector<double> v, double p) {
  if (v.empty()) throw RangeError("percentile of an empty set");
  std::sort(v.begin(), v.end());
  const double pos = p / 100.0 * static_cast<double>(v.size() - 1);
  const std::size_t i = static_cast<std::size_t>(std::floor(pos));
  if (i + 1 >= v.size()) return v.back();
  return v[i] + (pos - static_cast<double>(i)) * (v[i + 1] - v[i]);
}

/// Nearest-rank percentile: the smallest sample with at least p% of the set at
/// or below it, so at most (100 - p)% of the samples exceed it.
inline double rank_percentile(std::vector<double> v, double p) {
  if (v.empty()) throw RangeError("percentile of an empty set");
  std::sort(v.begin(), v.end());
  const auto k = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(v.size())));
  return v[std::clamp<std::size_t>(k, 1, v.size()) - 1];
}

/// `latents` is row-major [n, d] for the same rows as `train`.
inline OodStats fit(const data::Split& train, const Dims& dims, std::span<const double> latents, std::size_t d,
                    double tau = 0.05, double q = 99) {
  if (train.n == 0) throw RangeError("cannot fit the OOD guard on an empty training set");
  if (latents.size() != train.n * d) throw DimensionError("latent rows do not match the training split");
  OodStats s;
  s.tau = tau;
  s.q = q;
  const auto f = features(train, dims);
  s.names = f.names;
  const std::size_t w = f.names.size();
  s.lo.assign(f.values.begin(), f.values.begin() + static_cast<std::ptrdiff_t>(w));
  s.hi = s.lo;
  for (std::size_t i = w; i < f.values.size(); ++i) {
    s.lo[i % w] = std::min(s.lo[i % w], f.values[i]);
    s.hi[i % w] = std::max(s.hi[i % w], f.values[i]);
  }
  s.latent_mean.assign(d, 0.0);
  s.latent_var.assign(d, 0.0);
  for (std::size_t r = 0; r < train.n; ++r)
    for (std::size_t k = 0; k < d; ++k) s.latent_mean[k] += latents[r * d + k];
  for (auto& m : s.latent_mean) m /= static_cast<double>(train.n);
  for (std::size_t r = 0; r < train.n; ++r)
    for (std::size_t k = 0; k < d; ++k) {
      const double dz = latents[r * d + k] - s.latent_mean[k];
      s.latent_var[k] += dz * dz;
    }
  for (auto& v : s.latent_var) v /= static_cast<double>(train.n);
  std::vector<double> scores(train.n);
  for (std::size_t r = 0; r < train.n; ++r) scores[r] = latent_score(latents.subspan(r * d, d), s);
  s.threshold = rank_percentile(std::move(scores), q);
  return s;
}

struct Verdict {
  bool flag = false;
  double score = 0;
  std::vector<std::string> reasons;
};

/// `feature_row` in the order of OodStats::names.
inline Verdict check(std::span<const double> feature_row, std::span<const double> latent, const OodStats& s) {
  if (feature_row.size() != s.names.size()) throw DimensionError("OOD feature row width mismatch");
  if (latent.size() != s.latent_mean.size()) throw DimensionError("OOD latent width mismatch");
  Verdict v;
  for (std::size_t i = 0; i < feature_row.size(); ++i) {
    const double slack = s.tau * (s.hi[i] - s.lo[i]);
    if (feature_row[i] < s.lo[i] - slack || feature_row[i] > s.hi[i] + slack) v.reasons.push_back(s.names[i]);
  }
  v.score = latent_score(latent, s);
  if (v.score > s.threshold) v.reasons.push_back("latent_distance");
  v.flag = !v.reasons.empty();
  return v;
}

/// Verdicts for every row of a split given its latents.
inline std::vector<Verdict> check_split(const data::Split& split, const Dims& dims, std::span<const double> latents,
                                        const OodStats& s) {
  const auto f = features(split, dims);
  const std::size_t w = f.names.size(), d = s.latent_mean.size();
  std::vector<Verdict> out;
  for (std::size_t r = 0; r < split.n; ++r)
    out.push_back(check(std::span<const double>(f.values).subspan(r * w, w), latents.subspan(r * d, d), s));
  return out;
}

inline double flag_rate(const std::vector<Verdict>& v) {
  if (v.empty()) return 0;
  return static_cast<double>(std::count_if(v.begin(), v.end(), [](const Verdict& x) { return x.flag; })) /
         static_cast<double>(v.size());
}

}  // namespace phase::ood
