#pragma once

// Per-cell sample layout and the prediction task registry.

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "phase/errors.hpp"

namespace phase {

inline constexpr std::size_t kLayers = 9;

/// Feature-group extents. Groups: forcing [months x forcing_vars], static
/// [n_static], PFT traits [n_pft x n_traits], PFT state [n_pft x n_pft_state],
/// layered [n_layers x n_layered].
struct Dims {
  std::size_t months = 240;
  std::size_t forcing_vars = 5;
  std::size_t n_static = 11;
  std::size_t n_pft = 5;
  std::size_t n_traits = 8;
  std::size_t n_pft_state = 5;
  std::size_t n_layers = kLayers;
  std::size_t n_layered = 3;

  std::size_t forcing_size() const { return months * forcing_vars; }
  std::size_t traits_size() const { return n_pft * n_traits; }
  std::size_t pft_state_size() const { return n_pft * n_pft_state; }
  std::size_t layered_size() const { return n_layers * n_layered; }
  bool operator==(const Dims&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(Dims, months, forcing_vars, n_static, n_pft, n_traits,
                                   n_pft_state, n_layers, n_layered)

enum class Task { gpp, ar, npp, deadcrootc, deadstemc, tlai, cwdc, soil3c, soil4c };
enum class TaskShape { scalar, pft, layer, pft_layer };

inline constexpr std::array<Task, 9> kAllTasks{Task::gpp,       Task::ar,        Task::npp,
                                               Task::deadcrootc, Task::deadstemc, Task::tlai,
                                               Task::cwdc,      Task::soil3c,    Task::soil4c};
/// The six state variables reported per task in accuracy tables.
inline constexpr std::array<Task, 6> kStateTasks{Task::deadcrootc, Task::deadstemc, Task::tlai,
                                                 Task::soil3c,     Task::soil4c,    Task::cwdc};
inline constexpr std::array<Task, 3> kFluxTasks{Task::gpp, Task::ar, Task::npp};

inline std::string_view task_name(Task t) {
  switch (t) {
    case Task::gpp: return "gpp";
    case Task::ar: return "ar";
    case Task::npp: return "npp";
    case Task::deadcrootc: return "deadcrootc";
    case Task::deadstemc: return "deadstemc";
    case Task::tlai: return "tlai";
    case Task::cwdc: return "cwdc";
    case Task::soil3c: return "soil3c";
    case Task::soil4c: return "soil4c";
  }
  return "?";
}

inline Task task_from_name(std::string_view name) {
  for (Task t : kAllTasks)
    if (task_name(t) == name) return t;
  throw ContractError("unregistered task '" + std::string(name) + "'");
}

inline TaskShape task_shape(Task t) {
  switch (t) {
    case Task::gpp:
    case Task::ar:
    case Task::npp: return TaskShape::scalar;
    case Task::deadcrootc:
    case Task::deadstemc:
    case Task::tlai: return TaskShape::pft;
    default: return TaskShape::layer;
  }
}

inline std::size_t shape_width(TaskShape s, const Dims& d) {
  switch (s) {
    case TaskShape::scalar: return 1;
    case TaskShape::pft: return d.n_pft;
    case TaskShape::layer: return d.n_layers;
    case TaskShape::pft_layer: return d.n_pft * d.n_layers;
  }
  return 0;
}

inline std::size_t task_width(Task t, const Dims& d) { return shape_width(task_shape(t), d); }

/// Offset of a task inside the flat target vector (registry order).
inline std::size_t task_offset(Task t, const Dims& d) {
  std::size_t off = 0;
  for (Task u : kAllTasks) {
    if (u == t) return off;
    off += task_width(u, d);
  }
  return off;
}

inline std::size_t target_size(const Dims& d) {
  std::size_t n = 0;
  for (Task t : kAllTasks) n += task_width(t, d);
  return n;
}

/// Static attribute columns: six cell attributes, then one cover fraction per PFT.
inline std::vector<std::string> static_feature_names(std::size_t n_pft) {
  std::vector<std::string> n{"lat", "lon", "land_frac", "fertility", "soil_p", "elevation"};
  for (std::size_t j = 0; j < n_pft; ++j) n.push_back("cover_" + std::to_string(j));
  return n;
}

/// One grid cell: the five input groups in physical units plus targets.
struct SampleRecord {
  long long id = 0;
  double lat = 0, lon = 0;
  std::vector<double> forcing;     // months x forcing_vars
  std::vector<double> statics;     // n_static
  std::vector<double> pft_traits;  // n_pft x n_traits
  std::vector<double> pft_state;   // n_pft x n_pft_state
  std::vector<double> layered;     // n_layers x n_layered
  std::vector<int> pft_codes;      // n_pft; negative marks an invalid record
  int nlevbed = static_cast<int>(kLayers);
  std::vector<double> targets;     // registry order, see task_offset

  std::span<const double> target(Task t, const Dims& d) const {
    return std::span<const double>(targets).subspan(task_offset(t, d), task_width(t, d));
  }
};

}  // namespace phase
