#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "phase/metrics.hpp"

using namespace phase;
using namespace phase::metrics;

namespace {

Dims small_dims() {
  Dims d;
  d.months = 12;
  d.n_pft = 2;
  d.n_static = 8;
  return d;
}

/// n rows of positive random truth over the full target registry.
std::vector<double> random_table(std::size_t n, const Dims& d, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(1, 100);
  std::vector<double> t(n * target_size(d));
  for (auto& x : t) x = u(rng);
  return t;
}

data::Split split_of(const std::vector<double>& truth, const std::vector<double>& lat, const Dims& d) {
  data::Split s;
  s.n = lat.size();
  s.targets = truth;
  s.lat = lat;
  s.lon.assign(s.n, 0.0);
  for (std::size_t i = 0; i < s.n; ++i) s.ids.push_back(static_cast<long long>(i));
  (void)d;
  return s;
}

}  // namespace

TEST(Metrics, R2Oracles) {
  const std::vector<double> y{1, 2, 3};
  EXPECT_EQ(r2(y, y), 1.0);
  EXPECT_DOUBLE_EQ(r2(std::vector<double>{2, 2, 2}, y), 0.0);
  EXPECT_DOUBLE_EQ(r2(std::vector<double>{1, 2, 4}, y), 0.5);
  EXPECT_THROW(r2(y, std::vector<double>{5, 5, 5}), UndefinedMetricError);
  EXPECT_THROW(r2(std::vector<double>{1}, std::vector<double>{1}), UndefinedMetricError);
  EXPECT_THROW(r2(y, std::vector<double>{1, 2}), DimensionError);
}

TEST(Metrics, RmseOracles) {
  EXPECT_DOUBLE_EQ(rmse(std::vector<double>{0, 0}, std::vector<double>{3, 4}), std::sqrt(12.5));
  EXPECT_EQ(rmse(std::vector<double>{7}, std::vector<double>{7}), 0.0);
  EXPECT_THROW(rmse(std::vector<double>{}, std::vector<double>{}), RangeError);
}

TEST(Metrics, R2AtMostOneAndRmseNonNegative) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> p(20), y(20);
    for (std::size_t i = 0; i < p.size(); ++i) y[i] = g(rng), p[i] = y[i] + 0.3 * g(rng);
    EXPECT_LE(r2(p, y), 1.0);
    EXPECT_GE(rmse(p, y), 0.0);
  }
}

TEST(Metrics, TaskColumnSelectsRegistrySlice) {
  const Dims d = small_dims();
  std::vector<double> t(2 * target_size(d));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i);
  const auto c = task_column(t, d, Task::soil3c, 4);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[0], static_cast<double>(task_offset(Task::soil3c, d) + 4));
  EXPECT_EQ(c[1], static_cast<double>(target_size(d) + task_offset(Task::soil3c, d) + 4));
  EXPECT_EQ(task_column(t, d, Task::tlai).size(), 2 * d.n_pft);
  EXPECT_THROW(task_column(t, d, Task::tlai, d.n_pft), RangeError);
}

TEST(Metrics, ErrorInjectedIntoOneLayerShowsOnlyThere) {
  const Dims d = small_dims();
  std::mt19937_64 rng(2);
  const auto truth = random_table(50, d, rng);
  auto pred = truth;
  const std::size_t TT = target_size(d), col = task_offset(Task::soil3c, d) + 4;
  std::normal_distribution<double> g(0, 20);
  for (std::size_t r = 0; r < 50; ++r) pred[r * TT + col] += g(rng);
  const auto s = per_dimension_scores(pred, truth, d, Task::soil3c);
  ASSERT_EQ(s.size(), kLayers);
  for (std::size_t l = 0; l < kLayers; ++l) {
    if (l == 4) {
      EXPECT_LT(s[l].r2, 0.9);
      EXPECT_GT(s[l].rmse, 0.0);
    } else {
      EXPECT_EQ(s[l].r2, 1.0) << l;
      EXPECT_EQ(s[l].rmse, 0.0) << l;
    }
  }
  for (Task t : {Task::cwdc, Task::soil4c, Task::tlai})
    for (const auto& x : per_dimension_scores(pred, truth, d, t)) EXPECT_EQ(x.r2, 1.0);
}

TEST(Metrics, PooledMseIsMeanOfPerDimensionMse) {
  const Dims d = small_dims();
  std::mt19937_64 rng(3);
  const auto truth = random_table(30, d, rng);
  auto pred = random_table(30, d, rng);
  for (Task t : {Task::deadcrootc, Task::cwdc, Task::soil4c}) {
    const auto dims = per_dimension_scores(pred, truth, d, t);
    double acc = 0;
    for (const auto& x : dims) acc += x.rmse * x.rmse;
    const double pooled = rmse(task_column(pred, d, t), task_column(truth, d, t));
    EXPECT_NEAR(pooled * pooled, acc / static_cast<double>(dims.size()), 1e-9 * acc);
  }
}

TEST(Metrics, ConstantComponentGivesNaNNotFailure) {
  const Dims d = small_dims();
  std::mt19937_64 rng(4);
  auto truth = random_table(10, d, rng);
  const std::size_t TT = target_size(d), col = task_offset(Task::cwdc, d) + 8;
  for (std::size_t r = 0; r < 10; ++r) truth[r * TT + col] = 3.0;
  const auto s = per_dimension_scores(truth, truth, d, Task::cwdc);
  EXPECT_TRUE(std::isnan(s[8].r2));
  EXPECT_EQ(s[0].r2, 1.0);
  EXPECT_THROW(per_dimension_scores(truth, truth, d, Task::gpp), ContractError);
}

TEST(Metrics, BandsPartitionTheCells) {
  const Dims d = small_dims();
  std::mt19937_64 rng(5);
  const std::vector<double> lat{-60, -23, -22.9, 0, 10, 22.99, 23, 45, 80};
  const auto truth = random_table(lat.size(), d, rng), pred = random_table(lat.size(), d, rng);
  const auto e = common_edges(pred, truth, d, Task::soil3c);
  const auto tr = latitudinal_errors(pred, truth, lat, d, Task::soil3c, Band::tropics, e);
  const auto ex = latitudinal_errors(pred, truth, lat, d, Task::soil3c, Band::extratropics, e);
  EXPECT_EQ(tr.cells, 4u);
  EXPECT_EQ(ex.cells, 5u);
  EXPECT_EQ(tr.n + ex.n, lat.size() * kLayers);
  std::size_t sum = 0;
  for (auto c : tr.counts) sum += c;
  for (auto c : ex.counts) sum += c;
  EXPECT_EQ(sum, lat.size() * kLayers);
  EXPECT_LE(tr.q05, tr.q50);
  EXPECT_LE(tr.q50, tr.q95);
  EXPECT_THROW(latitudinal_errors(pred, truth, std::vector<double>(lat.size(), 50.0), d, Task::soil3c, Band::tropics),
               RangeError);
}

TEST(Metrics, EvaluateAndCsvRoundTrip) {
  const Dims d = small_dims();
  std::mt19937_64 rng(6);
  std::vector<double> lat;
  std::uniform_real_distribution<double> la(-80, 80);
  for (int i = 0; i < 40; ++i) lat.push_back(la(rng));
  const auto truth = random_table(40, d, rng);
  auto pred = truth;
  std::normal_distribution<double> g(0, 2);
  for (auto& x : pred) x = std::abs(x + g(rng));
  const auto split = split_of(truth, lat, d);
  const auto rep = evaluate(pred, split, d);
  EXPECT_TRUE(rep.restart_capable);
  EXPECT_EQ(rep.tasks.size(), kAllTasks.size());
  EXPECT_EQ(rep.bands.size(), 2u);

  const auto parsed = io::parse_csv(metrics_csv(rep).str());
  ASSERT_EQ(parsed.rows.size(), kAllTasks.size());
  for (std::size_t i = 0; i < parsed.rows.size(); ++i) {
    const Task t = task_from_name(parsed.rows[i][parsed.column("task")]);
    EXPECT_EQ(parsed.number(i, "r2"), rep.score(t).r2);
    EXPECT_EQ(parsed.number(i, "rmse"), rep.score(t).rmse);
  }
  const auto dims = io::parse_csv(per_dimension_csv(rep).str());
  EXPECT_EQ(dims.rows.size(), 3 * d.n_pft + 3 * kLayers);
  const auto hist = io::parse_csv(histogram_csv(rep).str());
  EXPECT_EQ(hist.rows.size(), 40u);
  const auto map = io::parse_csv(export_map(pred, truth, lat, split.lon, split.ids, d, Task::soil3c, 0).str());
  ASSERT_EQ(map.rows.size(), 40u);
  for (std::size_t r = 0; r < 40; ++r)
    EXPECT_EQ(map.number(r, "difference"), map.number(r, "predicted") - map.number(r, "truth"));

  pred[task_offset(Task::soil4c, d)] = -1;
  EXPECT_FALSE(evaluate(pred, split, d).restart_capable);
}

TEST(Metrics, SeedSummary) {
  const auto m = mean_std({1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(m.mean, 2.5);
  EXPECT_DOUBLE_EQ(m.std, std::sqrt(5.0 / 3.0));
  EXPECT_EQ(mean_std({7}).std, 0.0);
  EXPECT_THROW(mean_std({}), RangeError);
}

TEST(Metrics, PhysicsResidualOracle) {
  const Dims d = small_dims();
  std::vector<double> t(2 * target_size(d), 1.0);
  const std::size_t TT = target_size(d);
  // row 0: gpp 5, ar 2, npp 3 -> 0; row 1: gpp 5, ar 2, npp 4 -> 1
  for (std::size_t r = 0; r < 2; ++r) t[r * TT] = 5, t[r * TT + 1] = 2, t[r * TT + 2] = 3 + static_cast<double>(r);
  EXPECT_DOUBLE_EQ(physics_residual(t, d), 0.5);
}

TEST(Metrics, SpatialExportCoversEveryStateComponent) {
  const Dims d = small_dims();
  std::mt19937_64 rng(7);
  const auto truth = random_table(5, d, rng), pred = random_table(5, d, rng);
  const auto split = split_of(truth, {-10, 0, 10, 20, 30}, d);
  const auto t = io::parse_csv(spatial_csv(pred, split, d).str());
  EXPECT_EQ(t.rows.size(), 5 * (3 * d.n_pft + 3 * kLayers));
  for (std::size_t r = 0; r < t.rows.size(); ++r)
    EXPECT_EQ(t.number(r, "difference"), t.number(r, "predicted") - t.number(r, "truth"));
  EXPECT_THROW(spatial_csv(std::vector<double>(3), split, d), DimensionError);
}
