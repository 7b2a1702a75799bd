#pragma once

// Toy land-carbon box model.
//
// Per PFT: leaf and fine root (turnover k_fast), dead stem and dead coarse root
// (turnover k_dead). Per soil layer: coarse woody debris -> soil3 -> soil4.
// Every pool obeys dC/dt = u(t) - k C, integrated with monthly forward Euler,
// so the equilibrium of the chain is available in closed form.
//
// Forcing is procedural: each 6-hourly value is a pure function of
// (seed, forcing point, variable, step), generated on demand rather than stored.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "phase/calendar.hpp"
#include "phase/errors.hpp"
#include "phase/sample.hpp"

namespace phase::sim {

// ---------------------------------------------------------------------------
// Counter-based randomness

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_key(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                              std::uint64_t c = 0) {
  return splitmix64(splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b) ^ c);
}

inline double to_unit(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

/// Sequential stream keyed by (seed, stream id); draw i is hash(seed, stream, i).
class Stream {
 public:
  Stream(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {}
  double uniform() { return to_unit(hash_key(seed_, stream_, counter_++)); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() {
    const double u1 = 1.0 - uniform(), u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::uint64_t seed_, stream_, counter_ = 0;
};

// ---------------------------------------------------------------------------
// Grids

struct GridSpec {
  std::string name;
  std::size_t n_lat = 0, n_lon = 0;
  double resolution_deg = 1.0;
  double lat_offset = 0.5, lon_offset = 0.5;  // cell-center offsets in cell units
  std::vector<std::uint8_t> land_mask;        // n_lat * n_lon, row-major (lat, lon)

  double lat(std::size_t i) const {
    return -90.0 + (static_cast<double>(i) + lat_offset) * 180.0 / static_cast<double>(n_lat);
  }
  double lon(std::size_t j) const {
    return -180.0 + (static_cast<double>(j) + lon_offset) * 360.0 / static_cast<double>(n_lon);
  }
  std::size_t cells() const { return n_lat * n_lon; }
  std::size_t land_count() const {
    return static_cast<std::size_t>(std::count(land_mask.begin(), land_mask.end(), 1));
  }
};

/// Analytic continents: smooth blobs in (lat, lon), polar caps excluded.
inline bool is_land(double lat, double lon) {
  if (std::abs(lat) > 80.0) return false;
  const double d2r = std::numbers::pi / 180.0;
  const double f = std::sin(2.0 * lon * d2r + 0.6) * std::cos(1.4 * lat * d2r) +
                   0.55 * std::sin(3.0 * lon * d2r - 1.1 + 2.0 * lat * d2r) +
                   0.35 * std::cos(5.0 * lat * d2r + lon * d2r);
  return f > -0.3;
}

/// Elevation field in metres, nonnegative.
inline double elevation_at(double lat, double lon) {
  const double d2r = std::numbers::pi / 180.0;
  const double ridge = std::sin(3.0 * lon * d2r + 0.4) * std::cos(2.0 * lat * d2r - 0.3);
  return 2200.0 * std::max(0.0, ridge) * std::max(0.0, ridge) + 120.0 * (1.0 + std::sin(7.0 * lon * d2r));
}

/// "coarse" (24x48, labelled 1.0 deg), "fine" (48x96, labelled 0.5 deg) or "RxC".
inline GridSpec make_grid(const std::string& name) {
  GridSpec g;
  g.name = name;
  if (name == "coarse") {
    g.n_lat = 24, g.n_lon = 48, g.resolution_deg = 1.0;
  } else if (name == "fine") {
    g.n_lat = 48, g.n_lon = 96, g.resolution_deg = 0.5;
  } else {
    const auto x = name.find('x');
    std::size_t r = 0, c = 0;
    try {
      if (x == std::string::npos) throw std::invalid_argument(name);
      r = std::stoul(name.substr(0, x));
      c = std::stoul(name.substr(x + 1));
    } catch (const std::exception&) {
      throw ConfigError("unknown grid '" + name + "' (expected coarse, fine or RxC)", "grid");
    }
    if (r == 0 || c == 0) throw ConfigError("grid dimensions must be positive", "grid");
    g.n_lat = r, g.n_lon = c, g.resolution_deg = 1.0;
  }
  g.land_mask.resize(g.cells());
  for (std::size_t i = 0; i < g.n_lat; ++i)
    for (std::size_t j = 0; j < g.n_lon; ++j) g.land_mask[i * g.n_lon + j] = is_land(g.lat(i), g.lon(j));
  return g;
}

/// The forcing data live on their own, denser and offset, grid.
inline GridSpec forcing_grid_for(const GridSpec& g) {
  GridSpec f;
  f.name = g.name + "-forcing";
  f.n_lat = static_cast<std::size_t>(std::ceil(1.25 * static_cast<double>(g.n_lat)));
  f.n_lon = static_cast<std::size_t>(std::ceil(1.25 * static_cast<double>(g.n_lon)));
  f.resolution_deg = g.resolution_deg / 1.25;
  f.lat_offset = 0.3;
  f.lon_offset = 0.2;
  f.land_mask.assign(f.cells(), 1);
  return f;
}

// ---------------------------------------------------------------------------
// Forcing

enum ForcingVar : std::size_t { kRadiation = 0, kPrecip, kPressure, kHumidity, kTemperature };
inline constexpr std::size_t kForcingVars = 5;
inline constexpr std::array<const char*, kForcingVars> kForcingNames{
    "radiation", "precipitation", "pressure", "humidity", "temperature"};
inline constexpr std::array<const char*, kForcingVars> kForcingUnits{"W/m2", "mm/day", "Pa",
                                                                     "kg/kg", "K"};
inline constexpr std::array<double, kForcingVars> kForcingLo{0.0, 0.0, 40000.0, 0.0, 200.0};
inline constexpr std::array<double, kForcingVars> kForcingHi{1400.0, 500.0, 110000.0, 0.05, 340.0};

/// Climatology of one forcing point. The offsets folded into t_mean and p_mean
/// are not observable from any static feature.
struct ForcingPoint {
  double lat = 0, lon = 0, elevation = 0;
  double t_mean = 288, t_amp = 10;  // K
  double p_mean = 2, p_phase = 196;  // mm/day, peak day of year
  double r_scale = 420;             // W/m2
};
inline constexpr std::size_t kForcingPointFields = 6;

inline ForcingPoint make_forcing_point(std::uint64_t seed, std::size_t idx, double lat, double lon) {
  Stream s(seed, hash_key(0xF0, idx));
  ForcingPoint fp;
  fp.lat = lat, fp.lon = lon;
  fp.elevation = elevation_at(lat, lon);
  const double a = std::abs(lat) / 90.0;
  fp.t_mean = 301.0 - 45.0 * std::pow(a, 1.6) - 0.0065 * fp.elevation + s.uniform(-4.0, 4.0);
  fp.t_amp = 1.5 + 20.0 * std::pow(a, 1.2) * s.uniform(0.7, 1.2);
  fp.p_mean = (0.6 + 6.0 * std::exp(-std::pow(lat / 10.0, 2)) +
               2.2 * std::exp(-std::pow((std::abs(lat) - 48.0) / 12.0, 2))) *
              s.uniform(0.4, 1.6);
  fp.p_phase = 196.0 + s.uniform(-40.0, 40.0);
  fp.r_scale = 430.0 * s.uniform(0.85, 1.05);
  return fp;
}

inline std::array<double, kForcingPointFields> pack(const ForcingPoint& f) {
  return {f.elevation, f.t_mean, f.t_amp, f.p_mean, f.p_phase, f.r_scale};
}

inline ForcingPoint unpack(double lat, double lon, std::span<const double> v) {
  ForcingPoint f;
  f.lat = lat, f.lon = lon;
  f.elevation = v[0], f.t_mean = v[1], f.t_amp = v[2], f.p_mean = v[3], f.p_phase = v[4],
  f.r_scale = v[5];
  return f;
}

/// Saturation specific humidity (kg/kg) at temperature T (K) and pressure p (Pa).
inline double qsat(double T, double p) {
  const double es = 611.2 * std::exp(17.67 * (T - 273.15) / (T - 29.65));
  return 0.622 * es / p;
}

namespace detail {

inline double hashed_normal(std::uint64_t seed, std::uint64_t point, std::uint64_t var, std::uint64_t at) {
  const double u1 = 1.0 - to_unit(hash_key(seed, point, var, 2 * at));
  const double u2 = to_unit(hash_key(seed, point, var, 2 * at + 1));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/// Quantities shared by every step of one year.
struct YearTerms {
  double t_anom, p_factor;
};

inline YearTerms year_terms(std::uint64_t seed, std::size_t point, std::size_t year) {
  return {0.8 * hashed_normal(seed, point, 100 + kTemperature, year),
          std::exp(0.25 * hashed_normal(seed, point, 100 + kPrecip, year) - 0.03125)};
}

/// Quantities shared by the four steps of one day.
struct DayTerms {
  double t_season, r_day, p_day, pressure;
};

inline DayTerms day_terms(const ForcingPoint& fp, double day) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  const double hemi = fp.lat >= 0 ? 1.0 : -1.0;
  const double decl = 23.44 * std::sin(two_pi * (day - 80.0) / 365.0);
  return {fp.t_mean + fp.t_amp * hemi * std::sin(two_pi * (day - 105.0) / 365.0),
          fp.r_scale * std::max(0.03, std::cos((fp.lat - decl) * std::numbers::pi / 180.0)),
          fp.p_mean * (1.0 + 0.6 * std::sin(two_pi * (day - fp.p_phase + 91.25) / 365.0)),
          101325.0 * std::exp(-fp.elevation / 8400.0)};
}

inline std::array<double, kForcingVars> step_values(std::uint64_t seed, std::size_t point,
                                                    std::size_t step, const YearTerms& y,
                                                    const DayTerms& d) {
  // diurnal temperature phase 3 sin(2 pi (h - 9) / 24) and radiation weights at h = 0, 6, 12, 18
  static constexpr double s = 0.70710678118654752;
  static constexpr std::array<double, kStepsPerDay> t_diurnal{-3 * s, -3 * s, 3 * s, 3 * s};
  static constexpr std::array<double, kStepsPerDay> r_diurnal{0.0, 1.7, 2.3, 0.0};
  const std::size_t slot = step % kStepsPerDay;
  auto u = [&](std::uint64_t var) { return to_unit(hash_key(seed, point, var, step)); };

  // one Box-Muller pair drives the temperature and pressure noise
  const double u1 = 1.0 - to_unit(hash_key(seed, point, 200, step));
  const double u2 = to_unit(hash_key(seed, point, 201, step));
  const double rad = std::sqrt(-2.0 * std::log(u1)), ang = 2.0 * std::numbers::pi * u2;

  std::array<double, kForcingVars> out{};
  out[kTemperature] = d.t_season + t_diurnal[slot] + y.t_anom + 1.5 * rad * std::cos(ang);
  out[kRadiation] = d.r_day * r_diurnal[slot] * (1.0 - 0.4 * u(kRadiation));
  out[kPrecip] = d.p_day * y.p_factor * -std::log(1.0 - u(kPrecip));
  out[kPressure] = d.pressure + 250.0 * rad * std::sin(ang);
  out[kHumidity] = qsat(std::clamp(out[kTemperature], kForcingLo[kTemperature], kForcingHi[kTemperature]),
                        std::clamp(out[kPressure], kForcingLo[kPressure], kForcingHi[kPressure])) *
                   (0.45 + 0.4 * u(kHumidity));
  for (std::size_t v = 0; v < kForcingVars; ++v) out[v] = std::clamp(out[v], kForcingLo[v], kForcingHi[v]);
  return out;
}

}  // namespace detail

/// All five variables at one 6-hourly step of the forcing cycle.
inline std::array<double, kForcingVars> forcing_step(std::uint64_t seed, std::size_t point,
                                                     const ForcingPoint& fp, std::size_t step) {
  const std::size_t q = step % kStepsPerYear;
  return detail::step_values(seed, point, step, detail::year_terms(seed, point, step / kStepsPerYear),
                             detail::day_terms(fp, static_cast<double>(q / kStepsPerDay)));
}

/// 6-hourly series of one variable: years x 1460 values.
inline std::vector<double> forcing_series(std::uint64_t seed, std::size_t point,
                                          const ForcingPoint& fp, std::size_t var,
                                          std::size_t years) {
  std::vector<double> s(years * kStepsPerYear);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = forcing_step(seed, point, fp, i)[var];
  return s;
}

/// Monthly means [years*12 x 5] of one forcing point. Equivalent to
/// aggregate_years over forcing_series, without materializing the series.
inline std::vector<double> monthly_forcing(std::uint64_t seed, std::size_t point,
                                           const ForcingPoint& fp, std::size_t years) {
  std::vector<double> out(years * kMonthsPerYear * kForcingVars, 0.0);
  std::array<detail::DayTerms, kMonthsPerYear * kDaysPerMonth> days;
  for (std::size_t d = 0; d < days.size(); ++d) days[d] = detail::day_terms(fp, static_cast<double>(d));
  for (std::size_t y = 0; y < years; ++y) {
    const auto yt = detail::year_terms(seed, point, y);
    for (std::size_t m = 0; m < kMonthsPerYear; ++m) {
      std::array<double, kForcingVars> acc{};
      for (std::size_t i = 0; i < kStepsPerMonth; ++i) {
        const std::size_t q = m * kStepsPerMonth + i;
        const auto v = detail::step_values(seed, point, y * kStepsPerYear + q, yt, days[q / kStepsPerDay]);
        for (std::size_t k = 0; k < kForcingVars; ++k) acc[k] += v[k];
      }
      for (std::size_t k = 0; k < kForcingVars; ++k)
        out[(y * kMonthsPerYear + m) * kForcingVars + k] = acc[k] / static_cast<double>(kStepsPerMonth);
    }
  }
  return out;
}

/// Fixed smooth positive productivity response to monthly mean forcing.
inline double response(double T, double P, double R) {
  const double fT = 1.0 / (1.0 + std::exp(-(T - 270.0) / 4.0)) *
                    (1.0 - 1.0 / (1.0 + std::exp(-(T - 312.0) / 3.0)));
  const double fP = P / (P + 1.2);
  const double fR = R / (R + 180.0);
  return std::max(0.02, fT * fP * fR);
}

// ---------------------------------------------------------------------------
// Cell parameters

struct Traits {
  double a_leaf, a_froot, a_stem, a_croot;  // allocation, sums to 1
  double k_dead;                            // 1/yr
  double sla;                               // m2 leaf per gC
  double eff;                               // productivity multiplier
  double cn;                                // carbon:nitrogen, no effect on carbon
};
inline constexpr std::size_t kTraitFields = 8;
inline constexpr std::size_t kPftStateFields = 5;  // leaf, froot, deadstem, deadcroot, tlai
inline constexpr std::size_t kLayeredFields = 3;   // cwd, soil3, soil4

inline std::array<double, kTraitFields> pack(const Traits& t) {
  return {t.a_leaf, t.a_froot, t.a_stem, t.a_croot, t.k_dead, t.sla, t.eff, t.cn};
}

/// Base traits of the five default PFTs; extra PFTs cycle through the table.
inline Traits base_traits(std::size_t pft) {
  static const std::array<Traits, 5> table{{
      {0.25, 0.20, 0.38, 0.17, 0.020, 0.0040, 1.10, 40},  // tropical broadleaf tree
      {0.28, 0.22, 0.34, 0.16, 0.025, 0.0050, 1.00, 35},  // temperate broadleaf tree
      {0.22, 0.25, 0.36, 0.17, 0.016, 0.0025, 0.85, 60},  // boreal needleleaf tree
      {0.30, 0.30, 0.25, 0.15, 0.032, 0.0035, 0.80, 45},  // shrub
      {0.50, 0.40, 0.06, 0.04, 0.038, 0.0060, 0.90, 30},  // grass
  }};
  return table[pft % table.size()];
}

/// Latitudinal preference of each default PFT for cover fractions.
inline double cover_preference(std::size_t pft, double lat) {
  const double a = std::abs(lat);
  switch (pft % 5) {
    case 0: return std::exp(-std::pow(lat / 15.0, 2));
    case 1: return std::exp(-std::pow((a - 40.0) / 12.0, 2));
    case 2: return std::exp(-std::pow((a - 60.0) / 10.0, 2));
    case 3: return 0.3;
    default: return 0.4;
  }
}

struct SimConfig {
  std::size_t n_pft = 5;
  double k_fast = 0.1;     // leaf and fine root turnover, 1/yr
  double k_slow = 0.004;   // soil3/soil4 base turnover, 1/yr
  double k_cwd = 0.03;     // debris base turnover, 1/yr
  double f_cwd = 0.6;      // fraction of decayed debris entering soil3
  double f_litter = 0.5;   // fraction of fast-pool turnover entering soil3
  double f_34 = 0.25;      // fraction of decayed soil3 entering soil4
  double tau_nutrient = 150.0;  // years for nutrient limitation to develop
  double init_lo = 0.2, init_hi = 1.5;  // window initial pools, multiples of typical
  std::size_t corrupt_records = 0;      // invalid records injected into world files
};

/// Global typical pool sizes used to scale arbitrary initial states.
struct TypicalPools {
  double leaf = 900, froot = 800, deadstem = 7000, deadcroot = 3000;
  double cwd = 2500, soil3 = 60000, soil4 = 12000;  // per-cell totals over layers
};

struct PoolState {
  std::vector<double> leaf, froot, deadstem, deadcroot;  // per PFT, gC/m2
  std::array<double, kLayers> cwd{}, soil3{}, soil4{};   // per layer, gC/m2

  static PoolState zeros(std::size_t n_pft) {
    PoolState s;
    s.leaf.assign(n_pft, 0.0);
    s.froot.assign(n_pft, 0.0);
    s.deadstem.assign(n_pft, 0.0);
    s.deadcroot.assign(n_pft, 0.0);
    return s;
  }
  bool operator==(const PoolState&) const = default;
};

struct Cell {
  long long id = 0;  // index in the full grid, lat-major
  double lat = 0, lon = 0;
  std::size_t forcing_point = 0;
  // observable static attributes
  double land_frac = 1, fertility = 0.5, soil_p = 1, elevation = 0;
  std::vector<double> cover;   // n_pft, sums to 1
  std::vector<Traits> traits;  // n_pft
  // hidden parameters
  double alpha = 0;  // gC/m2/yr per unit response
  double r = 0.4;    // autotrophic respiration fraction
  double p = 1;      // nutrient limitation factor
  double m = 1;      // decomposition climate modifier (debris, soil3)
  double m4 = 1;     // decomposition climate modifier (soil4)
  double efold = 2;  // deposition e-folding depth, layers
  std::array<double, kLayers> depo{}, k_cwd{}, k_s3{}, k_s4{};
  // derived from this cell's forcing
  std::vector<double> monthly;  // monthly mean forcing [years*12 x 5]
  std::vector<double> g_month;  // response per month of the forcing cycle
  double g_mean = 0, t_mean = 0, p_mean = 0;
  PoolState initial;  // state at the start of the input window
  // record validity as written to world files
  std::vector<int> pft_codes;
  int nlevbed = static_cast<int>(kLayers);
};

struct World {
  std::uint64_t seed = 0;
  GridSpec grid, forcing_grid;
  std::size_t years = 20;  // forcing cycle length and simulated window
  double heterogeneity = 1.0;
  SimConfig cfg;
  std::vector<ForcingPoint> forcing_points;
  std::vector<Cell> cells;  // land cells in grid order

  std::size_t n_pft() const { return cfg.n_pft; }
};

/// Index of the nearest forcing point in (lat, lon) degrees; ties go to the lowest index.
inline std::size_t nearest_point(const std::vector<ForcingPoint>& pts, double lat, double lon) {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double d = (pts[i].lat - lat) * (pts[i].lat - lat) + (pts[i].lon - lon) * (pts[i].lon - lon);
    if (d < bd) bd = d, best = i;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Fluxes and dynamics

/// Rounds to a multiple of 2^-30. Fluxes below 2^22 then keep at most 52
/// significant bits, so gpp - ar and npp + ar are computed without rounding.
inline double quantize_flux(double x) { return std::ldexp(std::nearbyint(std::ldexp(x, 30)), -30); }

struct Fluxes {
  double gpp = 0, ar = 0, npp = 0;  // gC/m2/month
};

/// Grid-level fluxes for one month: gpp = alpha * p * g(T, P, R) * sum_j w_j eff_j.
inline Fluxes step_fluxes(double T, double P, double R, double alpha, double p, double r,
                          double eff = 1.0) {
  Fluxes f;
  f.gpp = quantize_flux(alpha * p * response(T, P, R) * eff / 12.0);
  f.ar = quantize_flux(r * f.gpp);
  f.npp = f.gpp - f.ar;
  return f;
}

inline double cover_weighted_eff(const Cell& c) {
  double e = 0;
  for (std::size_t j = 0; j < c.traits.size(); ++j) e += c.cover[j] * c.traits[j].eff;
  return e;
}

/// Nutrient limitation develops progressively from none at t = 0 to p.
inline double effective_p(double p, double years_elapsed, double tau) {
  return 1.0 - (1.0 - p) * (1.0 - std::exp(-years_elapsed / tau));
}

enum class ForcingMode {
  cycled,  // monthly forcing of the cycle, progressive nutrient limitation
  mean     // constant long-run mean input
};

inline constexpr double kDt = 1.0 / 12.0;

inline void check_stability(const Cell& c, const SimConfig& cfg) {
  auto check = [&](double k, const char* what) {
    if (!(k * kDt < 2.0)) {
      throw ConfigError(std::string("unstable step: ") + what + " turnover " + std::to_string(k) +
                            "/yr gives k*dt >= 2", "k");
    }
  };
  check(cfg.k_fast, "fast pool");
  for (const auto& t : c.traits) check(t.k_dead, "dead wood");
  for (std::size_t l = 0; l < kLayers; ++l) {
    check(c.k_cwd[l], "debris");
    check(c.k_s3[l], "soil3");
    check(c.k_s4[l], "soil4");
  }
}

/// One forward-Euler month. `g` is the productivity response, `p_eff` the
/// nutrient factor in force.
inline void euler_step(PoolState& s, const Cell& c, const SimConfig& cfg, double g, double p_eff) {
  const std::size_t np = c.traits.size();
  double wood_in = 0, litter_in = 0;  // cover-weighted turnover, gC/m2/yr
  for (std::size_t j = 0; j < np; ++j) {
    wood_in += c.cover[j] * c.traits[j].k_dead * (s.deadstem[j] + s.deadcroot[j]);
    litter_in += c.cover[j] * cfg.k_fast * (s.leaf[j] + s.froot[j]);
  }
  std::array<double, kLayers> s3_from_cwd{}, s4_from_s3{};
  for (std::size_t l = 0; l < kLayers; ++l) {
    s3_from_cwd[l] = cfg.f_cwd * c.k_cwd[l] * s.cwd[l];
    s4_from_s3[l] = cfg.f_34 * c.k_s3[l] * s.soil3[l];
  }
  const double gross = c.alpha * p_eff * g;
  for (std::size_t j = 0; j < np; ++j) {
    const Traits& t = c.traits[j];
    const double npp = (1.0 - c.r) * gross * t.eff;
    s.leaf[j] += (t.a_leaf * npp - cfg.k_fast * s.leaf[j]) * kDt;
    s.froot[j] += (t.a_froot * npp - cfg.k_fast * s.froot[j]) * kDt;
    s.deadstem[j] += (t.a_stem * npp - t.k_dead * s.deadstem[j]) * kDt;
    s.deadcroot[j] += (t.a_croot * npp - t.k_dead * s.deadcroot[j]) * kDt;
  }
  for (std::size_t l = 0; l < kLayers; ++l) {
    s.cwd[l] += (c.depo[l] * wood_in - c.k_cwd[l] * s.cwd[l]) * kDt;
    s.soil3[l] += (s3_from_cwd[l] + c.depo[l] * cfg.f_litter * litter_in - c.k_s3[l] * s.soil3[l]) * kDt;
    s.soil4[l] += (s4_from_s3[l] - c.k_s4[l] * s.soil4[l]) * kDt;
  }
  // Pools stay nonnegative for valid parameters; the clamp only guards misuse.
  auto clamp0 = [](auto& v) {
    for (auto& x : v) x = std::max(0.0, x);
  };
  clamp0(s.leaf), clamp0(s.froot), clamp0(s.deadstem), clamp0(s.deadcroot);
  clamp0(s.cwd), clamp0(s.soil3), clamp0(s.soil4);
}

/// Advances `months` monthly steps starting at month index `month0` of the
/// run. `observe` (optional) sees the state after each step.
inline PoolState integrate(const World& w, std::size_t cell, PoolState s, std::size_t months,
                           ForcingMode mode, std::size_t month0 = 0,
                           const std::function<void(std::size_t, const PoolState&)>& observe = {}) {
  const Cell& c = w.cells.at(cell);
  check_stability(c, w.cfg);
  const std::size_t cycle = c.g_month.size();
  for (std::size_t m = month0; m < month0 + months; ++m) {
    double g, p_eff;
    if (mode == ForcingMode::mean) {
      g = c.g_mean, p_eff = c.p;
    } else {
      g = c.g_month[m % cycle];
      p_eff = effective_p(c.p, static_cast<double>(m) / 12.0, w.cfg.tau_nutrient);
    }
    euler_step(s, c, w.cfg, g, p_eff);
    if (observe) observe(m + 1, s);
  }
  return s;
}

/// Monthly trajectory (initial state first) of a spin-up from `initial`.
inline std::vector<PoolState> spinup(const World& w, std::size_t cell, std::size_t years,
                                     std::optional<PoolState> initial = std::nullopt,
                                     ForcingMode mode = ForcingMode::cycled) {
  if (years < 1) throw ConfigError("spinup needs at least one year", "years");
  std::vector<PoolState> traj;
  traj.reserve(years * 12 + 1);
  traj.push_back(initial ? *initial : PoolState::zeros(w.n_pft()));
  integrate(w, cell, traj.back(), years * 12, mode, 0,
            [&](std::size_t, const PoolState& s) { traj.push_back(s); });
  return traj;
}

/// Closed-form equilibrium under the long-run mean input.
inline PoolState analytic_equilibrium(const World& w, std::size_t cell) {
  const Cell& c = w.cells.at(cell);
  const SimConfig& cfg = w.cfg;
  const std::size_t np = c.traits.size();
  PoolState e = PoolState::zeros(np);
  double wood = 0, litter = 0;
  for (std::size_t j = 0; j < np; ++j) {
    const Traits& t = c.traits[j];
    const double npp = (1.0 - c.r) * c.alpha * c.p * c.g_mean * t.eff;
    e.leaf[j] = t.a_leaf * npp / cfg.k_fast;
    e.froot[j] = t.a_froot * npp / cfg.k_fast;
    e.deadstem[j] = t.a_stem * npp / t.k_dead;
    e.deadcroot[j] = t.a_croot * npp / t.k_dead;
    wood += c.cover[j] * (t.a_stem + t.a_croot) * npp;
    litter += c.cover[j] * (t.a_leaf + t.a_froot) * npp;
  }
  for (std::size_t l = 0; l < kLayers; ++l) {
    e.cwd[l] = c.depo[l] * wood / c.k_cwd[l];
    const double s3_in = cfg.f_cwd * c.depo[l] * wood + cfg.f_litter * c.depo[l] * litter;
    e.soil3[l] = s3_in / c.k_s3[l];
    e.soil4[l] = cfg.f_34 * s3_in / c.k_s4[l];
  }
  return e;
}

/// Long-run mean grid fluxes, gC/m2/yr.
inline Fluxes mean_fluxes(const World& w, std::size_t cell) {
  const Cell& c = w.cells.at(cell);
  Fluxes f;
  f.gpp = quantize_flux(c.alpha * c.p * c.g_mean * cover_weighted_eff(c));
  f.ar = quantize_flux(c.r * f.gpp);
  f.npp = f.gpp - f.ar;
  return f;
}

inline std::vector<double> tlai(const Cell& c, const PoolState& s) {
  std::vector<double> out(c.traits.size());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = c.traits[j].sla * s.leaf[j];
  return out;
}

// ---------------------------------------------------------------------------
// World generation

namespace detail {

inline void derive_climate(Cell& c, const SimConfig& cfg, const std::vector<double>& monthly) {
  const std::size_t months = monthly.size() / kForcingVars;
  c.g_month.resize(months);
  double tsum = 0, psum = 0, gsum = 0;
  for (std::size_t t = 0; t < months; ++t) {
    const double* f = &monthly[t * kForcingVars];
    c.g_month[t] = response(f[kTemperature], f[kPrecip], f[kRadiation]);
    tsum += f[kTemperature];
    psum += f[kPrecip];
    gsum += c.g_month[t];
  }
  c.t_mean = tsum / static_cast<double>(months);
  c.p_mean = psum / static_cast<double>(months);
  c.g_mean = gsum / static_cast<double>(months);
  const double warm = 1.0 / (1.0 + std::exp(-(c.t_mean - 283.0) / 5.0));
  c.m = 0.6 + 0.4 * warm * c.p_mean / (c.p_mean + 1.0);
  c.m4 = 0.6 + 0.4 / (1.0 + std::exp(-(c.t_mean - 280.0) / 6.0));
  c.r = std::clamp(0.3 + 0.012 * (c.t_mean - 273.15), 0.3, 0.65);
  for (std::size_t l = 0; l < kLayers; ++l) {
    const double dl = static_cast<double>(l);
    c.k_cwd[l] = cfg.k_cwd * c.m * std::exp(-0.1 * dl);
    c.k_s3[l] = cfg.k_slow * c.m * std::exp(-0.02 * dl);
    c.k_s4[l] = cfg.k_slow * c.m4 * std::exp(-0.02 * dl);
  }
}

inline void draw_cell(Cell& c, std::uint64_t seed, double h, const SimConfig& cfg) {
  Stream s(seed, hash_key(0xCE11, static_cast<std::uint64_t>(c.id)));
  const std::size_t np = cfg.n_pft;
  c.land_frac = s.uniform(0.4, 1.0);
  c.fertility = std::clamp(0.5 + 0.5 * h * s.uniform(-1.0, 1.0), 0.02, 1.0);
  c.alpha = 1500.0 + 2500.0 * c.fertility;
  c.elevation = elevation_at(c.lat, c.lon);
  c.p = std::abs(c.lat) < 23.0 ? s.uniform(0.35, 0.9) : 1.0;
  c.soil_p = c.p;
  c.efold = 2.45 * std::exp(0.49 * h * s.uniform(-1.0, 1.0));
  double dsum = 0;
  for (std::size_t l = 0; l < kLayers; ++l) dsum += c.depo[l] = std::exp(-static_cast<double>(l) / c.efold);
  for (auto& d : c.depo) d /= dsum;

  c.cover.resize(np);
  double csum = 0;
  for (std::size_t j = 0; j < np; ++j) {
    const double e = std::pow(-std::log(1.0 - s.uniform()), h);
    csum += c.cover[j] = (cover_preference(j, c.lat) + 0.05) * e;
  }
  for (auto& w : c.cover) w /= csum;

  c.traits.resize(np);
  for (std::size_t j = 0; j < np; ++j) {
    Traits t = base_traits(j);
    t.a_leaf *= std::exp(0.15 * h * s.normal());
    t.a_froot *= std::exp(0.15 * h * s.normal());
    t.a_stem *= std::exp(0.15 * h * s.normal());
    t.a_croot *= std::exp(0.15 * h * s.normal());
    const double a = t.a_leaf + t.a_froot + t.a_stem + t.a_croot;
    t.a_leaf /= a, t.a_froot /= a, t.a_stem /= a, t.a_croot /= a;
    t.k_dead = std::clamp(t.k_dead * std::exp(0.15 * h * s.normal()), 0.015, 0.04);
    t.sla *= std::exp(0.1 * h * s.normal());
    t.eff *= std::exp(0.1 * h * s.normal());
    t.cn *= std::exp(0.2 * s.normal());
    c.traits[j] = t;
  }
  c.pft_codes.resize(np);
  for (std::size_t j = 0; j < np; ++j) c.pft_codes[j] = static_cast<int>(j);

  // Arbitrary window initial state: per-pool multiples of a global typical
  // size; layered pools follow the cell's deposition profile.
  const TypicalPools typ;
  PoolState& x = c.initial;
  x = PoolState::zeros(np);
  for (std::size_t j = 0; j < np; ++j) {
    x.leaf[j] = typ.leaf * s.uniform(cfg.init_lo, cfg.init_hi);
    x.froot[j] = typ.froot * s.uniform(cfg.init_lo, cfg.init_hi);
    x.deadstem[j] = typ.deadstem * s.uniform(cfg.init_lo, cfg.init_hi);
    x.deadcroot[j] = typ.deadcroot * s.uniform(cfg.init_lo, cfg.init_hi);
  }
  const double fc = s.uniform(cfg.init_lo, cfg.init_hi), f3 = s.uniform(cfg.init_lo, cfg.init_hi),
               f4 = s.uniform(cfg.init_lo, cfg.init_hi);
  for (std::size_t l = 0; l < kLayers; ++l) {
    x.cwd[l] = typ.cwd * fc * c.depo[l];
    x.soil3[l] = typ.soil3 * f3 * c.depo[l];
    x.soil4[l] = typ.soil4 * f4 * c.depo[l];
  }
}

}  // namespace detail

/// Builds the world: grid, forcing climatology, per-cell parameters and the
/// window initial state. Identical inputs give an identical world.
inline World generate_world(std::uint64_t seed, const GridSpec& grid, std::size_t years,
                            const SimConfig& cfg = {}) {
  if (years < 1) throw ConfigError("years must be >= 1", "years");
  if (cfg.n_pft < 1) throw ConfigError("n_pft must be >= 1", "n_pft");
  if (grid.land_count() == 0) throw ConfigError("grid '" + grid.name + "' has no land cells", "grid");
  World w;
  w.seed = seed;
  w.grid = grid;
  w.years = years;
  w.cfg = cfg;
  w.heterogeneity = std::sqrt(1.0 / grid.resolution_deg);
  w.forcing_grid = forcing_grid_for(grid);
  for (std::size_t i = 0; i < w.forcing_grid.n_lat; ++i)
    for (std::size_t j = 0; j < w.forcing_grid.n_lon; ++j)
      w.forcing_points.push_back(make_forcing_point(seed, w.forcing_points.size(),
                                                    w.forcing_grid.lat(i), w.forcing_grid.lon(j)));
  for (std::size_t i = 0; i < grid.n_lat; ++i)
    for (std::size_t j = 0; j < grid.n_lon; ++j) {
      if (!grid.land_mask[i * grid.n_lon + j]) continue;
      Cell c;
      c.id = static_cast<long long>(i * grid.n_lon + j);
      c.lat = grid.lat(i), c.lon = grid.lon(j);
      c.forcing_point = nearest_point(w.forcing_points, c.lat, c.lon);
      detail::draw_cell(c, seed, w.heterogeneity, cfg);
      c.monthly = monthly_forcing(seed, c.forcing_point, w.forcing_points[c.forcing_point], years);
      detail::derive_climate(c, cfg, c.monthly);
      w.cells.push_back(std::move(c));
    }
  // Injected invalid records alternate between a bad PFT code and carbon
  // below the bedrock depth.
  const std::size_t bad = std::min(cfg.corrupt_records, w.cells.size());
  std::vector<std::size_t> order(w.cells.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return hash_key(seed, 0xBAD, a) < hash_key(seed, 0xBAD, b);
  });
  for (std::size_t k = 0; k < bad; ++k) {
    Cell& c = w.cells[order[k]];
    if (k % 2 == 0) {
      c.pft_codes[k % c.pft_codes.size()] = -1;
    } else {
      c.nlevbed = 6;
    }
  }
  return w;
}

// ---------------------------------------------------------------------------
// Restart validation

struct PoolDrift {
  std::string pool;
  bool fast = false;
  double before_median = 0, before_max = 0;  // relative distance to equilibrium
  double after_median = 0, after_max = 0;
  double drift_median = 0, drift_max = 0;  // relative change over the final 10 years
};

struct RestartReport {
  std::vector<PoolState> final_state;
  std::vector<PoolDrift> pools;
};

namespace detail {

inline double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <class F>
void for_each_pool(F&& f) {
  f("leafc", true, [](PoolState& s) -> std::span<double> { return s.leaf; });
  f("frootc", true, [](PoolState& s) -> std::span<double> { return s.froot; });
  f("deadstemc", false, [](PoolState& s) -> std::span<double> { return s.deadstem; });
  f("deadcrootc", false, [](PoolState& s) -> std::span<double> { return s.deadcroot; });
  f("cwdc", false, [](PoolState& s) -> std::span<double> { return s.cwd; });
  f("soil3c", false, [](PoolState& s) -> std::span<double> { return s.soil3; });
  f("soil4c", false, [](PoolState& s) -> std::span<double> { return s.soil4; });
}

}  // namespace detail

/// Problems that would stop the simulator from resuming from `s`; empty when valid.
inline std::vector<std::string> validate_state(const PoolState& s, std::size_t n_pft) {
  std::vector<std::string> errs;
  auto check = [&](const char* name, std::span<const double> v, std::size_t n) {
    if (v.size() != n) {
      errs.push_back(std::string(name) + ": expected " + std::to_string(n) + " values, got " +
                     std::to_string(v.size()));
      return;
    }
    for (std::size_t k = 0; k < v.size(); ++k)
      if (!std::isfinite(v[k]) || v[k] < 0.0)
        errs.push_back(std::string(name) + "[" + std::to_string(k) + "] = " + std::to_string(v[k]));
  };
  check("leafc", s.leaf, n_pft);
  check("frootc", s.froot, n_pft);
  check("deadstemc", s.deadstem, n_pft);
  check("deadcrootc", s.deadcroot, n_pft);
  check("cwdc", s.cwd, kLayers);
  check("soil3c", s.soil3, kLayers);
  check("soil4c", s.soil4, kLayers);
  return errs;
}

/// Runs every cell forward under mean forcing from `initial` and summarises,
/// per pool type, the distance to the analytic equilibrium before and after.
inline RestartReport restart_run(const World& w, const std::vector<PoolState>& initial,
                                 std::size_t years = 100) {
  if (initial.size() != w.cells.size()) {
    throw CompletenessError("restart state covers " + std::to_string(initial.size()) + " of " +
                                std::to_string(w.cells.size()) + " cells",
                            -1);
  }
  RestartReport rep;
  std::vector<PoolState> eq(w.cells.size()), late(w.cells.size());
  for (std::size_t i = 0; i < w.cells.size(); ++i) {
    if (const auto errs = validate_state(initial[i], w.n_pft()); !errs.empty()) {
      throw ContractError("restart state for cell " + std::to_string(w.cells[i].id) + ": " + errs.front());
    }
    eq[i] = analytic_equilibrium(w, i);
    const std::size_t months = years * 12;
    const std::size_t mark = months >= 120 ? months - 120 : 0;
    late[i] = integrate(w, i, initial[i], mark, ForcingMode::mean);
    rep.final_state.push_back(integrate(w, i, late[i], months - mark, ForcingMode::mean, mark));
  }
  detail::for_each_pool([&](const char* name, bool fast, auto get) {
    std::vector<double> before, after, drift;
    for (std::size_t i = 0; i < w.cells.size(); ++i) {
      PoolState a = initial[i], b = rep.final_state[i], e = eq[i], l = late[i];
      auto va = get(a), vb = get(b), ve = get(e), vl = get(l);
      for (std::size_t k = 0; k < ve.size(); ++k) {
        before.push_back(std::abs(va[k] - ve[k]) / ve[k]);
        after.push_back(std::abs(vb[k] - ve[k]) / ve[k]);
        drift.push_back(std::abs(vb[k] - vl[k]) / std::max(vb[k], 1e-300));
      }
    }
    PoolDrift d;
    d.pool = name;
    d.fast = fast;
    d.before_median = detail::median(before);
    d.before_max = *std::max_element(before.begin(), before.end());
    d.after_median = detail::median(after);
    d.after_max = *std::max_element(after.begin(), after.end());
    d.drift_median = detail::median(drift);
    d.drift_max = *std::max_element(drift.begin(), drift.end());
    rep.pools.push_back(d);
  });
  return rep;
}

/// Years of mean-forcing integration from zero pools until every soil3 and
/// soil4 layer of the cell is within `tol` (relative) of equilibrium.
inline std::size_t cold_start_years(const World& w, std::size_t cell, double tol = 0.005,
                                    std::size_t max_years = 20000) {
  const PoolState eq = analytic_equilibrium(w, cell);
  PoolState s = PoolState::zeros(w.n_pft());
  auto within = [&](const PoolState& x) {
    for (std::size_t l = 0; l < kLayers; ++l) {
      if (std::abs(x.soil3[l] - eq.soil3[l]) > tol * eq.soil3[l]) return false;
      if (std::abs(x.soil4[l] - eq.soil4[l]) > tol * eq.soil4[l]) return false;
    }
    return true;
  };
  for (std::size_t y = 1; y <= max_years; ++y) {
    s = integrate(w, cell, s, 12, ForcingMode::mean, (y - 1) * 12);
    if (within(s)) return y;
  }
  throw RangeError("cell " + std::to_string(w.cells[cell].id) + " not within tolerance after " +
                   std::to_string(max_years) + " years");
}

// ---------------------------------------------------------------------------
// Sample export (in-memory route)

inline Dims world_dims(const World& w, std::size_t window_years) {
  Dims d;
  d.months = window_years * kMonthsPerYear;
  d.forcing_vars = kForcingVars;
  d.n_pft = w.n_pft();
  d.n_static = 6 + w.n_pft();
  d.n_traits = kTraitFields;
  d.n_pft_state = kPftStateFields;
  d.n_layers = kLayers;
  d.n_layered = kLayeredFields;
  return d;
}

inline std::vector<double> static_features(const Cell& c) {
  std::vector<double> s{c.lat, c.lon, c.land_frac, c.fertility, c.soil_p, c.elevation};
  s.insert(s.end(), c.cover.begin(), c.cover.end());
  return s;
}

inline std::vector<double> pft_state_features(const Cell& c, const PoolState& s) {
  std::vector<double> out;
  const auto lai = tlai(c, s);
  for (std::size_t j = 0; j < c.traits.size(); ++j) {
    out.insert(out.end(), {s.leaf[j], s.froot[j], s.deadstem[j], s.deadcroot[j], lai[j]});
  }
  return out;
}

inline std::vector<double> layered_features(const PoolState& s) {
  std::vector<double> out;
  for (std::size_t l = 0; l < kLayers; ++l) out.insert(out.end(), {s.cwd[l], s.soil3[l], s.soil4[l]});
  return out;
}

inline std::vector<double> target_vector(const World& w, std::size_t cell) {
  const Cell& c = w.cells[cell];
  const PoolState e = analytic_equilibrium(w, cell);
  const Fluxes f = mean_fluxes(w, cell);
  std::vector<double> t{f.gpp, f.ar, f.npp};
  t.insert(t.end(), e.deadcroot.begin(), e.deadcroot.end());
  t.insert(t.end(), e.deadstem.begin(), e.deadstem.end());
  const auto lai = tlai(c, e);
  t.insert(t.end(), lai.begin(), lai.end());
  t.insert(t.end(), e.cwd.begin(), e.cwd.end());
  t.insert(t.end(), e.soil3.begin(), e.soil3.end());
  t.insert(t.end(), e.soil4.begin(), e.soil4.end());
  return t;
}

/// State of one cell at the end of the input window.
inline PoolState window_state(const World& w, std::size_t cell, std::size_t window_years) {
  return integrate(w, cell, w.cells[cell].initial, window_years * 12, ForcingMode::cycled);
}

/// Samples straight from the simulator, one per land cell in grid order.
inline std::vector<SampleRecord> export_samples(const World& w, std::size_t window_years = 20) {
  if (window_years > w.years) {
    throw RangeError("window of " + std::to_string(window_years) + " years exceeds the " +
                     std::to_string(w.years) + "-year simulated span");
  }
  std::vector<SampleRecord> out;
  out.reserve(w.cells.size());
  for (std::size_t i = 0; i < w.cells.size(); ++i) {
    const Cell& c = w.cells[i];
    SampleRecord r;
    r.id = c.id, r.lat = c.lat, r.lon = c.lon;
    r.forcing.assign(c.monthly.begin(),
                     c.monthly.begin() + static_cast<std::ptrdiff_t>(window_years * kMonthsPerYear * kForcingVars));
    r.statics = static_features(c);
    for (const auto& t : c.traits) {
      const auto v = pack(t);
      r.pft_traits.insert(r.pft_traits.end(), v.begin(), v.end());
    }
    const PoolState s = window_state(w, i, window_years);
    r.pft_state = pft_state_features(c, s);
    r.layered = layered_features(s);
    r.pft_codes = c.pft_codes;
    r.nlevbed = c.nlevbed;
    r.targets = target_vector(w, i);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace phase::sim
