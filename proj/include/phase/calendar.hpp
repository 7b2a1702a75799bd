#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "phase/errors.hpp"

namespace phase {

inline constexpr std::size_t kStepsPerDay = 4;
inline constexpr std::size_t kStepsPerYear = 365 * kStepsPerDay;  // 1460
inline constexpr std::size_t kDaysPerMonth = 30;
inline constexpr std::size_t kStepsPerMonth = kDaysPerMonth * kStepsPerDay;  // 120
inline constexpr std::size_t kMonthsPerYear = 12;
/// 12 uniform months cover 360 days; the last 5 days of each year fall outside.
inline constexpr std::size_t kAggregatedStepsPerYear = kMonthsPerYear * kStepsPerMonth;

/// Means of consecutive 120-step (30-day) blocks.
inline std::vector<double> aggregate_monthly(std::span<const double> series) {
  if (series.size() % kStepsPerMonth != 0) {
    throw RangeError("series length " + std::to_string(series.size()) +
                     " is not a multiple of " + std::to_string(kStepsPerMonth));
  }
  std::vector<double> out(series.size() / kStepsPerMonth);
  for (std::size_t m = 0; m < out.size(); ++m) {
    double s = 0;
    for (std::size_t i = 0; i < kStepsPerMonth; ++i) s += series[m * kStepsPerMonth + i];
    out[m] = s / static_cast<double>(kStepsPerMonth);
  }
  return out;
}

/// Monthly means of a multi-year 6-hourly series: each 1460-step year
/// contributes its first 1440 steps.
inline std::vector<double> aggregate_years(std::span<const double> series) {
  if (series.size() % kStepsPerYear != 0) {
    throw RangeError("series length " + std::to_string(series.size()) +
                     " is not a whole number of years");
  }
  std::vector<double> out;
  out.reserve(series.size() / kStepsPerYear * kMonthsPerYear);
  for (std::size_t y = 0; y < series.size() / kStepsPerYear; ++y) {
    auto months = aggregate_monthly(series.subspan(y * kStepsPerYear, kAggregatedStepsPerYear));
    out.insert(out.end(), months.begin(), months.end());
  }
  return out;
}

}  // namespace phase
