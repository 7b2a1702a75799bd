#pragma once

// Simplified restart file written from surrogate predictions:
// "PHRS", u32 version, u32 n_pft, u64 cell count, then per cell an i64 id and
// the pools deadcrootc[P], deadstemc[P], tlai[P], cwdc[9], soil3c[9], soil4c[9]
// as little-endian f32.

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "phase/blob.hpp"
#include "phase/errors.hpp"
#include "phase/io.hpp"
#include "phase/sample.hpp"
#include "phase/sim.hpp"

namespace phase::restart {

namespace fs = std::filesystem;

inline constexpr std::array<char, 4> kMagic{'P', 'H', 'R', 'S'};
inline constexpr std::uint32_t kVersion = 1;

/// Pool order inside a record.
inline constexpr std::array<Task, 6> kPools{Task::deadcrootc, Task::deadstemc, Task::tlai,
                                            Task::cwdc,       Task::soil3c,    Task::soil4c};

struct CellPools {
  long long id = 0;
  std::array<std::vector<float>, kPools.size()> pools;  // kPools order

  const std::vector<float>& get(Task t) const {
    for (std::size_t i = 0; i < kPools.size(); ++i)
      if (kPools[i] == t) return pools[i];
    throw ContractError("task " + std::string(task_name(t)) + " is not a restart pool");
  }
  bool operator==(const CellPools&) const = default;
};

struct RestartFile {
  std::uint32_t n_pft = 0;
  std::vector<CellPools> cells;
  bool operator==(const RestartFile&) const = default;
};

inline std::size_t pool_width(Task t, std::size_t n_pft) { return task_shape(t) == TaskShape::pft ? n_pft : kLayers; }

inline void write(std::ostream& os, const RestartFile& f) {
  using blob::detail::put_le;
  os.write(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(os, kVersion);
  put_le<std::uint32_t>(os, f.n_pft);
  put_le<std::uint64_t>(os, f.cells.size());
  for (const auto& c : f.cells) {
    put_le<std::uint64_t>(os, static_cast<std::uint64_t>(c.id));
    for (std::size_t i = 0; i < kPools.size(); ++i) {
      if (c.pools[i].size() != pool_width(kPools[i], f.n_pft))
        throw DimensionError("restart pool " + std::string(task_name(kPools[i])) + " of cell " + std::to_string(c.id) + " has the wrong width");
      for (float v : c.pools[i]) put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v));
    }
  }
}

inline RestartFile read(std::istream& is) {
  using blob::detail::get_le;
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) throw FormatError("not a restart file");
  if (const auto v = get_le<std::uint32_t>(is); v != kVersion) throw FormatError("unsupported restart version " + std::to_string(v));
  RestartFile f;
  f.n_pft = get_le<std::uint32_t>(is);
  const auto n = get_le<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < n; ++i) {
    CellPools c;
    c.id = static_cast<long long>(get_le<std::uint64_t>(is));
    for (std::size_t k = 0; k < kPools.size(); ++k) {
      c.pools[k].resize(pool_width(kPools[k], f.n_pft));
      for (auto& v : c.pools[k]) v = std::bit_cast<float>(get_le<std::uint32_t>(is));
    }
    f.cells.push_back(std::move(c));
  }
  return f;
}

inline void save(const fs::path& path, const RestartFile& f) {
  io::atomic_write(path, [&](std::ostream& os) { write(os, f); });
}

inline RestartFile load(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open restart file " + path.string(), "restart");
  return read(is);
}

/// Builds the file from physical prediction rows ([n, target_size]) keyed by
/// `ids`. Every id in `expected` must be present.
inline RestartFile from_predictions(std::span<const double> phys, std::span<const long long> ids, const Dims& d,
                                    std::span<const long long> expected) {
  const std::size_t TT = target_size(d);
  if (phys.size() != ids.size() * TT) throw DimensionError("prediction table does not match the id list");
  std::map<long long, std::size_t> row;
  for (std::size_t r = 0; r < ids.size(); ++r) row.emplace(ids[r], r);
  RestartFile f;
  f.n_pft = static_cast<std::uint32_t>(d.n_pft);
  for (long long id : expected) {
    auto it = row.find(id);
    if (it == row.end()) throw CompletenessError("no prediction for cell " + std::to_string(id), id);
    CellPools c;
    c.id = id;
    for (std::size_t k = 0; k < kPools.size(); ++k) {
      const std::size_t off = task_offset(kPools[k], d);
      for (std::size_t j = 0; j < task_width(kPools[k], d); ++j) c.pools[k].push_back(static_cast<float>(phys[it->second * TT + off + j]));
    }
    f.cells.push_back(std::move(c));
  }
  return f;
}

/// Simulator states for every cell of the world. Leaf carbon comes from the
/// predicted LAI; fine roots, which the file does not carry, start from the
/// window-end state.
inline std::vector<sim::PoolState> to_states(const RestartFile& f, const sim::World& w, std::size_t window_years) {
  if (f.n_pft != w.n_pft()) throw DimensionError("restart file PFT count does not match the world");
  std::map<long long, const CellPools*> by_id;
  for (const auto& c : f.cells) by_id.emplace(c.id, &c);
  std::vector<sim::PoolState> out;
  for (std::size_t i = 0; i < w.cells.size(); ++i) {
    const auto& cell = w.cells[i];
    auto it = by_id.find(cell.id);
    if (it == by_id.end()) throw CompletenessError("restart file has no record for cell " + std::to_string(cell.id), cell.id);
    const CellPools& c = *it->second;
    sim::PoolState s = sim::window_state(w, i, window_years);
    auto vec = [&](Task t) { return std::vector<double>(c.get(t).begin(), c.get(t).end()); };
    s.deadcroot = vec(Task::deadcrootc);
    s.deadstem = vec(Task::deadstemc);
    const auto lai = vec(Task::tlai);
    for (std::size_t j = 0; j < lai.size(); ++j) s.leaf[j] = lai[j] / cell.traits[j].sla;
    for (std::size_t l = 0; l < kLayers; ++l) {
      s.cwd[l] = c.get(Task::cwdc)[l];
      s.soil3[l] = c.get(Task::soil3c)[l];
      s.soil4[l] = c.get(Task::soil4c)[l];
    }
    out.push_back(std::move(s));
  }
  return out;
}

/// Validation errors over the whole file, each prefixed by the cell id.
inline std::vector<std::string> validate(const std::vector<sim::PoolState>& states, const sim::World& w) {
  std::vector<std::string> errs;
  for (std::size_t i = 0; i < states.size(); ++i)
    for (const auto& e : sim::validate_state(states[i], w.n_pft())) errs.push_back("cell " + std::to_string(w.cells[i].id) + ": " + e);
  return errs;
}

}  // namespace phase::restart
