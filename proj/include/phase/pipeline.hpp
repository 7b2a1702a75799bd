#pragma once

// World files -> cleaned, normalized, split and batched dataset.
//
// World directory (written by write_world):
//   world.json              seed, grid, years, window, dims, simulator config
//   grid.pht                [cells x 3]  id, lat, lon of land cells
//   forcing_grid.pht        [points x 2] lat, lon of forcing points
//   forcing_params.pht      [points x 6] per-point climatology
//   surface/static.pht      [cells x (1 + n_static)] id, static attributes
//   pft.pht                 [cells*n_pft x (2 + n_traits + n_pft_state)] id, pft code, traits, state
//                           rows ordered PFT-major, as in patch-level history files
//   column.pht              [cells x (2 + 9*n_layered)] id, nlevbed, layered pools
//                           rows in reverse grid order
//   targets.pht             [cells x (1 + targets)] id, equilibrium targets
//
// Dataset directory (written by build_dataset): manifest.json plus
// batches/{train,test}_NNN.pht, each a sequence of blobs in kBatchBlobs order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "phase/blob.hpp"
#include "phase/errors.hpp"
#include "phase/io.hpp"
#include "phase/sample.hpp"
#include "phase/sim.hpp"
#include "phase/spatial.hpp"

namespace phase::data {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr std::size_t kDefaultWindowYears = 20;
inline constexpr std::size_t kDefaultBatchSize = 256;

// ---------------------------------------------------------------------------
// World files

inline json config_json(const sim::SimConfig& c) {
  return {{"n_pft", c.n_pft},       {"k_fast", c.k_fast},   {"k_slow", c.k_slow},
          {"k_cwd", c.k_cwd},       {"f_cwd", c.f_cwd},     {"f_litter", c.f_litter},
          {"f_34", c.f_34},         {"tau_nutrient", c.tau_nutrient},
          {"init_lo", c.init_lo},   {"init_hi", c.init_hi}, {"corrupt_records", c.corrupt_records}};
}

inline sim::SimConfig config_from_json(const json& j) {
  sim::SimConfig c;
  c.n_pft = j.at("n_pft");
  c.k_fast = j.at("k_fast");
  c.k_slow = j.at("k_slow");
  c.k_cwd = j.at("k_cwd");
  c.f_cwd = j.at("f_cwd");
  c.f_litter = j.at("f_litter");
  c.f_34 = j.at("f_34");
  c.tau_nutrient = j.at("tau_nutrient");
  c.init_lo = j.at("init_lo");
  c.init_hi = j.at("init_hi");
  c.corrupt_records = j.at("corrupt_records");
  return c;
}

inline std::size_t window_for(std::size_t years) { return std::min(years, kDefaultWindowYears); }

/// Writes every world file into `dir` (created; existing files overwritten).
inline void write_world(const sim::World& w, const fs::path& dir) {
  fs::create_directories(dir / "surface");
  const std::size_t window = window_for(w.years);
  const Dims d = sim::world_dims(w, window);
  const std::size_t nc = w.cells.size(), np = w.n_pft();

  json meta = {{"format", "phase-world"},
               {"version", 1},
               {"seed", w.seed},
               {"grid", w.grid.name},
               {"resolution_deg", w.grid.resolution_deg},
               {"years", w.years},
               {"window_years", window},
               {"cells", nc},
               {"forcing_points", w.forcing_points.size()},
               {"dims", d},
               {"config", config_json(w.cfg)}};
  io::atomic_write_text(dir / "world.json", meta.dump(2) + "\n");

  std::vector<double> grid, fgrid, fparams, stat, pft, col, tgt;
  for (const auto& c : w.cells) grid.insert(grid.end(), {static_cast<double>(c.id), c.lat, c.lon});
  for (const auto& p : w.forcing_points) {
    fgrid.insert(fgrid.end(), {p.lat, p.lon});
    const auto v = sim::pack(p);
    fparams.insert(fparams.end(), v.begin(), v.end());
  }
  std::vector<sim::PoolState> states(nc);
  for (std::size_t i = 0; i < nc; ++i) {
    const auto& c = w.cells[i];
    stat.push_back(static_cast<double>(c.id));
    const auto s = sim::static_features(c);
    stat.insert(stat.end(), s.begin(), s.end());
    states[i] = sim::window_state(w, i, window);
    const auto t = sim::target_vector(w, i);
    tgt.push_back(static_cast<double>(c.id));
    tgt.insert(tgt.end(), t.begin(), t.end());
  }
  for (std::size_t j = 0; j < np; ++j) {
    for (std::size_t i = 0; i < nc; ++i) {
      const auto& c = w.cells[i];
      pft.insert(pft.end(), {static_cast<double>(c.id), static_cast<double>(c.pft_codes[j])});
      const auto tr = sim::pack(c.traits[j]);
      pft.insert(pft.end(), tr.begin(), tr.end());
      const auto st = sim::pft_state_features(c, states[i]);
      pft.insert(pft.end(), st.begin() + static_cast<std::ptrdiff_t>(j * d.n_pft_state),
                 st.begin() + static_cast<std::ptrdiff_t>((j + 1) * d.n_pft_state));
    }
  }
  for (std::size_t k = nc; k-- > 0;) {
    const auto& c = w.cells[k];
    col.insert(col.end(), {static_cast<double>(c.id), static_cast<double>(c.nlevbed)});
    auto lay = sim::layered_features(states[k]);
    // a shallower bedrock is reported by the column; the carbon rows below it
    // are what the cleaning step has to catch
    col.insert(col.end(), lay.begin(), lay.end());
  }
  io::write_blob(dir / "grid.pht", {nc, 3}, grid);
  io::write_blob(dir / "forcing_grid.pht", {w.forcing_points.size(), 2}, fgrid);
  io::write_blob(dir / "forcing_params.pht", {w.forcing_points.size(), sim::kForcingPointFields}, fparams);
  io::write_blob(dir / "surface" / "static.pht", {nc, 1 + d.n_static}, stat);
  io::write_blob(dir / "pft.pht", {nc * np, 2 + d.n_traits + d.n_pft_state}, pft);
  io::write_blob(dir / "column.pht", {nc, 2 + d.layered_size()}, col);
  io::write_blob(dir / "targets.pht", {nc, 1 + target_size(d)}, tgt);
}

inline json read_world_meta(const fs::path& dir) {
  if (!fs::exists(dir / "world.json")) throw ConfigError("not a world directory: " + dir.string(), "world");
  const json j = json::parse(io::read_text(dir / "world.json"));
  if (j.value("format", "") != "phase-world") throw FormatError(dir.string() + "/world.json: not a world manifest");
  return j;
}

/// Rebuilds the simulator world from its manifest (generation is deterministic).
inline sim::World load_world(const fs::path& dir) {
  const json j = read_world_meta(dir);
  sim::World w = sim::generate_world(j.at("seed").get<std::uint64_t>(), sim::make_grid(j.at("grid")),
                                     j.at("years"), config_from_json(j.at("config")));
  if (w.cells.size() != j.at("cells").get<std::size_t>()) {
    throw FormatError("world manifest cell count does not match regenerated world");
  }
  return w;
}

/// grid_cell_id -> source rows, in source order.
using InvertedMapping = std::map<long long, std::vector<std::size_t>>;

inline InvertedMapping invert(const blob::Blob& table) {
  InvertedMapping m;
  const std::size_t cols = table.shape.at(1);
  for (std::size_t r = 0; r < table.shape[0]; ++r) m[static_cast<long long>(table.values[r * cols])].push_back(r);
  return m;
}

inline spatial::Point point_row(const blob::Blob& b, std::size_t r, std::size_t lat_col) {
  const std::size_t cols = b.shape.at(1);
  return {b.values[r * cols + lat_col], b.values[r * cols + lat_col + 1]};
}

/// Assembles one record per land cell from the world files, in grid order.
/// Forcing is regenerated from the stored climatology and aligned with a KD-tree.
inline std::vector<SampleRecord> assemble_records(const fs::path& dir, Dims* dims_out = nullptr) {
  const json meta = read_world_meta(dir);
  const Dims d = meta.at("dims").get<Dims>();
  const std::uint64_t seed = meta.at("seed");
  const std::size_t years = meta.at("years");
  const std::size_t window = meta.at("window_years");

  const auto grid = io::read_blob(dir / "grid.pht");
  const auto fgrid = io::read_blob(dir / "forcing_grid.pht");
  const auto fparams = io::read_blob(dir / "forcing_params.pht");
  const auto stat = io::read_blob(dir / "surface" / "static.pht");
  const auto pft = io::read_blob(dir / "pft.pht");
  const auto col = io::read_blob(dir / "column.pht");
  const auto tgt = io::read_blob(dir / "targets.pht");

  const std::size_t nc = grid.shape.at(0);
  if (stat.shape.at(1) != 1 + d.n_static || pft.shape.at(1) != 2 + d.n_traits + d.n_pft_state ||
      col.shape.at(1) != 2 + d.layered_size() || tgt.shape.at(1) != 1 + target_size(d)) {
    throw DimensionError("world file widths disagree with world.json dims");
  }

  std::vector<spatial::Point> model(nc), forcing(fgrid.shape.at(0));
  for (std::size_t i = 0; i < nc; ++i) model[i] = point_row(grid, i, 1);
  for (std::size_t i = 0; i < forcing.size(); ++i) forcing[i] = point_row(fgrid, i, 0);
  const auto nearest = spatial::kdtree_map(model, forcing);

  const auto stat_map = invert(stat), pft_map = invert(pft), col_map = invert(col), tgt_map = invert(tgt);
  auto rows_of = [](const InvertedMapping& m, long long id, const char* what) -> const std::vector<std::size_t>& {
    auto it = m.find(id);
    if (it == m.end()) throw CompletenessError(std::string(what) + " has no rows for cell " + std::to_string(id), id);
    return it->second;
  };

  std::vector<SampleRecord> out(nc);
  const std::size_t pc = pft.shape[1], cc = col.shape[1], sc = stat.shape[1], tc = tgt.shape[1];
  for (std::size_t i = 0; i < nc; ++i) {
    SampleRecord& r = out[i];
    r.id = static_cast<long long>(grid.values[i * 3]);
    r.lat = grid.values[i * 3 + 1];
    r.lon = grid.values[i * 3 + 2];

    const std::size_t fp = nearest[i];
    const auto point = sim::unpack(forcing[fp].lat, forcing[fp].lon,
                                   std::span<const double>(fparams.values).subspan(fp * sim::kForcingPointFields,
                                                                                   sim::kForcingPointFields));
    auto monthly = sim::monthly_forcing(seed, fp, point, years);
    monthly.resize(window * kMonthsPerYear * d.forcing_vars);
    r.forcing = std::move(monthly);

    const auto& srow = rows_of(stat_map, r.id, "surface/static.pht");
    r.statics.assign(stat.values.begin() + static_cast<std::ptrdiff_t>(srow.front() * sc + 1),
                     stat.values.begin() + static_cast<std::ptrdiff_t>((srow.front() + 1) * sc));

    for (std::size_t row : rows_of(pft_map, r.id, "pft.pht")) {
      const double* v = &pft.values[row * pc];
      r.pft_codes.push_back(static_cast<int>(v[1]));
      r.pft_traits.insert(r.pft_traits.end(), v + 2, v + 2 + d.n_traits);
      r.pft_state.insert(r.pft_state.end(), v + 2 + d.n_traits, v + pc);
    }
    const auto& crow = rows_of(col_map, r.id, "column.pht");
    const double* cv = &col.values[crow.front() * cc];
    r.nlevbed = static_cast<int>(cv[1]);
    r.layered.assign(cv + 2, cv + cc);

    const auto& trow = rows_of(tgt_map, r.id, "targets.pht");
    r.targets.assign(tgt.values.begin() + static_cast<std::ptrdiff_t>(trow.front() * tc + 1),
                     tgt.values.begin() + static_cast<std::ptrdiff_t>((trow.front() + 1) * tc));
  }
  if (dims_out) *dims_out = d;
  return out;
}

// ---------------------------------------------------------------------------
// Cleaning, splitting, batching

/// Why a record is non-physical, or empty when it is valid.
inline std::string invalid_reason(const SampleRecord& r, const Dims& d) {
  if (r.pft_codes.size() != d.n_pft) return "pft count";
  for (int c : r.pft_codes)
    if (c < 0 || c >= static_cast<int>(d.n_pft)) return "invalid pft code " + std::to_string(c);
  if (r.nlevbed < 1 || r.nlevbed > static_cast<int>(d.n_layers)) return "invalid nlevbed";
  for (std::size_t l = static_cast<std::size_t>(r.nlevbed); l < d.n_layers; ++l)
    for (std::size_t f = 0; f < d.n_layered; ++f)
      if (r.layered[l * d.n_layered + f] != 0.0) return "carbon below bedrock layer " + std::to_string(r.nlevbed);
  auto finite = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
  };
  if (!finite(r.forcing) || !finite(r.statics) || !finite(r.pft_traits) || !finite(r.pft_state) ||
      !finite(r.layered) || !finite(r.targets))
    return "non-finite value";
  return {};
}

struct CleanReport {
  std::size_t kept = 0;
  std::vector<std::pair<long long, std::string>> removed;
};

inline std::vector<SampleRecord> clean(std::vector<SampleRecord> records, const Dims& d, CleanReport* report = nullptr) {
  std::vector<SampleRecord> out;
  CleanReport rep;
  for (auto& r : records) {
    if (auto why = invalid_reason(r, d); !why.empty()) {
      rep.removed.emplace_back(r.id, std::move(why));
    } else {
      out.push_back(std::move(r));
    }
  }
  rep.kept = out.size();
  if (report) *report = std::move(rep);
  return out;
}

/// Seeded Fisher-Yates permutation of 0..n-1 (platform independent).
inline std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(static_cast<double>(rng() >> 11) * 0x1.0p-53 * static_cast<double>(i));
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

inline std::size_t train_count(std::size_t n) { return (4 * n + 2) / 5; }  // round(0.8 n)

struct SplitIndex {
  std::vector<std::size_t> train, test;
};

inline SplitIndex split_shuffle(std::size_t n, std::uint64_t seed) {
  if (n < 5) throw RangeError("split needs at least 5 samples, got " + std::to_string(n));
  const auto p = permutation(n, seed);
  const std::size_t k = train_count(n);
  return {{p.begin(), p.begin() + static_cast<std::ptrdiff_t>(k)}, {p.begin() + static_cast<std::ptrdiff_t>(k), p.end()}};
}

/// Orders indices by (lat, lon), then chunks. The id breaks exact ties.
inline std::vector<std::vector<std::size_t>> batch_by_latlon(const std::vector<SampleRecord>& records,
                                                             std::vector<std::size_t> idx, std::size_t batch_size) {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1", "batch_size");
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = records[a];
    const auto& y = records[b];
    if (x.lat != y.lat) return x.lat < y.lat;
    if (x.lon != y.lon) return x.lon < y.lon;
    return x.id < y.id;
  });
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < idx.size(); i += batch_size)
    out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(i),
                     idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), i + batch_size)));
  return out;
}

// ---------------------------------------------------------------------------
// MinMax normalization

/// Per-column min/max. A constant column maps to 0.
struct MinMax {
  std::vector<double> lo, hi;

  std::size_t size() const { return lo.size(); }

  /// values: row-major [rows x cols]
  static MinMax fit(std::span<const double> values, std::size_t cols) {
    if (cols == 0 || values.size() < cols || values.size() % cols) throw DimensionError("minmax fit needs whole rows");
    MinMax m;
    m.lo.assign(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(cols));
    m.hi = m.lo;
    for (std::size_t i = cols; i < values.size(); ++i) {
      m.lo[i % cols] = std::min(m.lo[i % cols], values[i]);
      m.hi[i % cols] = std::max(m.hi[i % cols], values[i]);
    }
    return m;
  }

  double apply(std::size_t c, double x) const {
    const double r = hi[c] - lo[c];
    return r > 0 ? (x - lo[c]) / r : 0.0;
  }
  double invert(std::size_t c, double y) const { return lo[c] + y * (hi[c] - lo[c]); }

  /// Transforms whole rows; values outside the fitted range are not clipped.
  std::vector<double> apply_rows(std::span<const double> values) const {
    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = apply(i % size(), values[i]);
    return out;
  }
  std::vector<double> invert_rows(std::span<const double> values) const {
    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = invert(i % size(), values[i]);
    return out;
  }
};

inline void to_json(json& j, const MinMax& m) { j = {{"min", m.lo}, {"max", m.hi}}; }
inline void from_json(const json& j, MinMax& m) {
  m.lo = j.at("min").get<std::vector<double>>();
  m.hi = j.at("max").get<std::vector<double>>();
  if (m.lo.size() != m.hi.size()) throw FormatError("minmax stats length mismatch");
}

/// Feature and target statistics from the training split. Forcing is scaled
/// per variable; every other group per flattened column. Targets are scaled
/// per component, except that gpp, ar and npp share one zero-offset scale so
/// that npp = gpp - ar holds in normalized units too.
struct Stats {
  MinMax forcing, statics, traits, state, layered, targets;
};

inline void to_json(json& j, const Stats& s) {
  j = {{"forcing", s.forcing}, {"static", s.statics}, {"pft_traits", s.traits},
       {"pft_state", s.state}, {"layered", s.layered}, {"targets", s.targets}};
}
inline void from_json(const json& j, Stats& s) {
  s.forcing = j.at("forcing").get<MinMax>();
  s.statics = j.at("static").get<MinMax>();
  s.traits = j.at("pft_traits").get<MinMax>();
  s.state = j.at("pft_state").get<MinMax>();
  s.layered = j.at("layered").get<MinMax>();
  s.targets = j.at("targets").get<MinMax>();
}

template <class F>
std::vector<double> gather(const std::vector<SampleRecord>& rs, const std::vector<std::size_t>& idx, F field) {
  std::vector<double> out;
  for (std::size_t i : idx) {
    const auto& v = field(rs[i]);
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

inline Stats fit_stats(const std::vector<SampleRecord>& rs, const std::vector<std::size_t>& train, const Dims& d) {
  if (train.empty()) throw RangeError("cannot fit statistics on an empty training split");
  Stats s;
  s.forcing = MinMax::fit(gather(rs, train, [](const SampleRecord& r) -> auto& { return r.forcing; }), d.forcing_vars);
  s.statics = MinMax::fit(gather(rs, train, [](const SampleRecord& r) -> auto& { return r.statics; }), d.n_static);
  s.traits = MinMax::fit(gather(rs, train, [](const SampleRecord& r) -> auto& { return r.pft_traits; }), d.traits_size());
  s.state = MinMax::fit(gather(rs, train, [](const SampleRecord& r) -> auto& { return r.pft_state; }), d.pft_state_size());
  s.layered = MinMax::fit(gather(rs, train, [](const SampleRecord& r) -> auto& { return r.layered; }), d.layered_size());
  s.targets = MinMax::fit(gather(rs, train, [](const SampleRecord& r) -> auto& { return r.targets; }), target_size(d));
  double flux_hi = 0;
  for (Task t : kFluxTasks) flux_hi = std::max(flux_hi, s.targets.hi[task_offset(t, d)]);
  for (Task t : kFluxTasks) {
    s.targets.lo[task_offset(t, d)] = 0.0;
    s.targets.hi[task_offset(t, d)] = flux_hi;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Dataset

/// One split in batch (lat/lon) order. Feature groups are normalized and flat
/// row-major; targets are kept both normalized and in physical units.
struct Split {
  std::size_t n = 0;
  std::vector<long long> ids;
  std::vector<double> lat, lon;
  std::vector<double> forcing, statics, traits, state, layered;
  std::vector<double> targets_norm, targets;

  void append(const SampleRecord& r, const Stats& s) {
    ++n;
    ids.push_back(r.id);
    lat.push_back(r.lat);
    lon.push_back(r.lon);
    auto put = [](std::vector<double>& dst, const MinMax& m, const std::vector<double>& src) {
      for (std::size_t i = 0; i < src.size(); ++i) dst.push_back(m.apply(i % m.size(), src[i]));
    };
    put(forcing, s.forcing, r.forcing);
    put(statics, s.statics, r.statics);
    put(traits, s.traits, r.pft_traits);
    put(state, s.state, r.pft_state);
    put(layered, s.layered, r.layered);
    put(targets_norm, s.targets, r.targets);
    targets.insert(targets.end(), r.targets.begin(), r.targets.end());
  }

  /// Rows `idx` as a new split.
  Split subset(const std::vector<std::size_t>& idx, const Dims& d) const {
    Split o;
    const std::size_t T = target_size(d);
    auto take = [&](std::vector<double>& dst, const std::vector<double>& src, std::size_t w) {
      for (std::size_t i : idx) dst.insert(dst.end(), src.begin() + static_cast<std::ptrdiff_t>(i * w),
                                           src.begin() + static_cast<std::ptrdiff_t>((i + 1) * w));
    };
    for (std::size_t i : idx) {
      o.ids.push_back(ids[i]);
      o.lat.push_back(lat[i]);
      o.lon.push_back(lon[i]);
    }
    o.n = idx.size();
    take(o.forcing, forcing, d.forcing_size());
    take(o.statics, statics, d.n_static);
    take(o.traits, traits, d.traits_size());
    take(o.state, state, d.pft_state_size());
    take(o.layered, layered, d.layered_size());
    take(o.targets_norm, targets_norm, T);
    take(o.targets, targets, T);
    return o;
  }
};

/// Blob order inside a batch file.
inline constexpr std::array<const char*, 8> kBatchBlobs{"meta",    "forcing",  "static",       "pft_traits",
                                                        "pft_state", "layered", "targets_norm", "targets"};

inline void write_batch(std::ostream& os, const Split& b, const Dims& d) {
  std::vector<double> meta;
  for (std::size_t i = 0; i < b.n; ++i) meta.insert(meta.end(), {static_cast<double>(b.ids[i]), b.lat[i], b.lon[i]});
  const std::size_t T = target_size(d);
  blob::write<double>(os, {b.n, 3}, meta);
  blob::write<double>(os, {b.n, d.months, d.forcing_vars}, b.forcing);
  blob::write<double>(os, {b.n, d.n_static}, b.statics);
  blob::write<double>(os, {b.n, d.n_pft, d.n_traits}, b.traits);
  blob::write<double>(os, {b.n, d.n_pft, d.n_pft_state}, b.state);
  blob::write<double>(os, {b.n, d.n_layers, d.n_layered}, b.layered);
  blob::write<double>(os, {b.n, T}, b.targets_norm);
  blob::write<double>(os, {b.n, T}, b.targets);
}

inline void read_batch_into(const fs::path& path, Split& s, const Dims& d) {
  const auto blobs = io::read_blobs(path);
  if (blobs.size() != kBatchBlobs.size()) throw FormatError(path.string() + ": wrong blob count");
  const std::size_t n = blobs[0].shape.at(0);
  const std::size_t T = target_size(d);
  const std::array<std::size_t, 8> widths{3, d.forcing_size(), d.n_static, d.traits_size(),
                                          d.pft_state_size(), d.layered_size(), T, T};
  for (std::size_t k = 0; k < blobs.size(); ++k)
    if (blobs[k].shape.at(0) != n || blobs[k].values.size() != n * widths[k])
      throw DimensionError(path.string() + ": blob '" + kBatchBlobs[k] + "' has the wrong shape");
  for (std::size_t i = 0; i < n; ++i) {
    s.ids.push_back(static_cast<long long>(blobs[0].values[i * 3]));
    s.lat.push_back(blobs[0].values[i * 3 + 1]);
    s.lon.push_back(blobs[0].values[i * 3 + 2]);
  }
  s.n += n;
  auto app = [](std::vector<double>& dst, const blob::Blob& b) { dst.insert(dst.end(), b.values.begin(), b.values.end()); };
  app(s.forcing, blobs[1]);
  app(s.statics, blobs[2]);
  app(s.traits, blobs[3]);
  app(s.state, blobs[4]);
  app(s.layered, blobs[5]);
  app(s.targets_norm, blobs[6]);
  app(s.targets, blobs[7]);
}

struct Dataset {
  Dims dims;
  Stats stats;
  Split train, test;
  json manifest;
};

struct BuildOptions {
  std::uint64_t seed = 0;
  std::size_t batch_size = kDefaultBatchSize;
  /// Reuse statistics from an existing model instead of fitting them; used for
  /// datasets evaluated by a model trained elsewhere.
  const Stats* fixed_stats = nullptr;
};

struct BuildResult {
  CleanReport cleaning;
  std::size_t n_train = 0, n_test = 0, n_batches = 0;
};

/// Reads a world directory and writes the dataset directory atomically.
inline BuildResult build_dataset(const fs::path& world_dir, const fs::path& out_dir, const BuildOptions& opt = {}) {
  if (opt.batch_size < 1) throw ConfigError("batch size must be >= 1", "batch_size");
  Dims d;
  BuildResult res;
  auto records = clean(assemble_records(world_dir, &d), d, &res.cleaning);
  const auto split = split_shuffle(records.size(), opt.seed);
  const Stats stats = opt.fixed_stats ? *opt.fixed_stats : fit_stats(records, split.train, d);
  const json world = read_world_meta(world_dir);

  io::StagedDir out(out_dir);
  fs::create_directories(out / "batches");
  json batches = json::array();
  auto emit = [&](const char* name, const std::vector<std::size_t>& idx) {
    const auto groups = batch_by_latlon(records, idx, opt.batch_size);
    for (std::size_t b = 0; b < groups.size(); ++b) {
      Split part;
      for (std::size_t i : groups[b]) part.append(records[i], stats);
      char file[64];
      std::snprintf(file, sizeof file, "batches/%s_%03zu.pht", name, b);
      io::atomic_write(out / file, [&](std::ostream& os) { write_batch(os, part, d); });
      batches.push_back({{"file", file}, {"split", name}, {"count", part.n}});
    }
    res.n_batches += groups.size();
  };
  emit("train", split.train);
  emit("test", split.test);
  res.n_train = split.train.size();
  res.n_test = split.test.size();

  std::vector<long long> train_ids, test_ids;
  for (std::size_t i : split.train) train_ids.push_back(records[i].id);
  for (std::size_t i : split.test) test_ids.push_back(records[i].id);
  json removed = json::array();
  for (const auto& [id, why] : res.cleaning.removed) removed.push_back({{"id", id}, {"reason", why}});
  const json manifest = {{"format", "phase-dataset"},
                         {"version", 1},
                         {"samples", records.size()},
                         {"dims", d},
                         {"split", {{"seed", opt.seed}, {"train", train_ids}, {"test", test_ids}}},
                         {"batch_size", opt.batch_size},
                         {"batches", batches},
                         {"stats", stats},
                         {"removed", removed},
                         {"provenance",
                          {{"world_seed", world.at("seed")},
                           {"grid", world.at("grid")},
                           {"resolution_deg", world.at("resolution_deg")},
                           {"years", world.at("years")},
                           {"window_years", world.at("window_years")}}}};
  io::atomic_write_text(out / "manifest.json", manifest.dump(2) + "\n");
  out.commit();
  return res;
}

inline Dataset load_dataset(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw ConfigError("not a dataset directory: " + dir.string(), "data");
  Dataset ds;
  ds.manifest = json::parse(io::read_text(dir / "manifest.json"));
  if (ds.manifest.value("format", "") != "phase-dataset") throw FormatError(dir.string() + ": not a dataset manifest");
  ds.dims = ds.manifest.at("dims").get<Dims>();
  ds.stats = ds.manifest.at("stats").get<Stats>();
  for (const auto& b : ds.manifest.at("batches")) {
    const std::string split = b.at("split");
    read_batch_into(dir / b.at("file").get<std::string>(), split == "train" ? ds.train : ds.test, ds.dims);
  }
  return ds;
}

}  // namespace phase::data
