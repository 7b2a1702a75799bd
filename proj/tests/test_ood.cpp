#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "phase/ood.hpp"
#include "phase/sim.hpp"

using namespace phase;

namespace {

struct Fixture {
  Dims dims;
  data::Split train, test;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    const auto w = sim::generate_world(9, sim::make_grid("8x16"), 1);
    const auto recs = sim::export_samples(w, 1);
    Fixture x;
    x.dims = sim::world_dims(w, 1);
    const auto split = data::split_shuffle(recs.size(), 9);
    const auto stats = data::fit_stats(recs, split.train, x.dims);
    for (std::size_t i : split.train) x.train.append(recs[i], stats);
    for (std::size_t i : split.test) x.test.append(recs[i], stats);
    return x;
  }();
  return f;
}

std::vector<double> gaussian_latents(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::vector<double> z(n * d);
  for (auto& x : z) x = g(rng);
  return z;
}

std::size_t index_of(const std::vector<std::string>& names, const std::string& n) {
  return static_cast<std::size_t>(std::find(names.begin(), names.end(), n) - names.begin());
}

}  // namespace

TEST(Ood, FeatureNamesMatchWidth) {
  const auto& f = fixture();
  const auto v = ood::features(f.train, f.dims);
  EXPECT_EQ(v.values.size(), f.train.n * v.names.size());
  EXPECT_EQ(v.names.size(), 2 * f.dims.forcing_vars + f.dims.n_static + f.dims.traits_size() +
                                f.dims.pft_state_size() + f.dims.layered_size());
  EXPECT_LT(index_of(v.names, "static.fertility"), v.names.size());
}

TEST(Ood, TrainingRowsStayInsideAndLatentFlagsAtMostOnePercent) {
  const auto& f = fixture();
  const std::size_t d = 6;
  const auto z = gaussian_latents(f.train.n, d, 1);
  const auto s = ood::fit(f.train, f.dims, z, d);
  const auto v = ood::check_split(f.train, f.dims, z, s);
  std::size_t latent = 0;
  for (const auto& x : v) {
    for (const auto& r : x.reasons) {
      if (r == "latent_distance") ++latent;
      else ADD_FAILURE() << "training row outside its own envelope: " << r;
    }
  }
  EXPECT_LE(static_cast<double>(latent), 0.01 * static_cast<double>(f.train.n));
}

TEST(Ood, EnvelopeEdgesAndSlack) {
  const auto& f = fixture();
  const std::size_t d = 4;
  const auto z = gaussian_latents(f.train.n, d, 2);
  const auto s = ood::fit(f.train, f.dims, z, d, 0.05);
  const std::vector<double> zero(d, 0.0);
  const std::size_t k = index_of(s.names, "static.fertility");
  std::vector<double> row(s.lo);
  EXPECT_FALSE(ood::check(row, zero, s).flag);
  row = s.hi;
  EXPECT_FALSE(ood::check(row, zero, s).flag);
  const double range = s.hi[k] - s.lo[k];
  ASSERT_GT(range, 0);
  row[k] = s.hi[k] + 0.04 * range;
  EXPECT_FALSE(ood::check(row, zero, s).flag);
  row[k] = s.hi[k] + 0.06 * range;
  const auto v = ood::check(row, zero, s);
  ASSERT_TRUE(v.flag);
  ASSERT_EQ(v.reasons.size(), 1u);
  EXPECT_EQ(v.reasons[0], "static.fertility");
}

TEST(Ood, TenfoldFeatureIsNamed) {
  const auto& f = fixture();
  const std::size_t d = 4;
  const auto z = gaussian_latents(f.train.n, d, 3);
  const auto s = ood::fit(f.train, f.dims, z, d);
  const std::size_t k = index_of(s.names, "static.fertility");
  std::vector<double> row(s.lo);
  ASSERT_GT(s.hi[k], 0.0);
  row[k] = 10 * s.hi[k];
  const auto v = ood::check(row, std::vector<double>(d, 0.0), s);
  EXPECT_TRUE(v.flag);
  EXPECT_NE(std::find(v.reasons.begin(), v.reasons.end(), "static.fertility"), v.reasons.end());
}

TEST(Ood, LargerTauNeverFlagsMore) {
  const auto& f = fixture();
  const std::size_t d = 4;
  const auto z = gaussian_latents(f.train.n, d, 4);
  const auto zt = gaussian_latents(f.test.n, d, 5);
  std::vector<double> rates;
  std::vector<std::vector<ood::Verdict>> all;
  for (double tau : {0.0, 0.01, 0.05, 0.2, 1.0}) {
    const auto s = ood::fit(f.train, f.dims, z, d, tau);
    all.push_back(ood::check_split(f.test, f.dims, zt, s));
  }
  for (std::size_t i = 1; i < all.size(); ++i)
    for (std::size_t r = 0; r < f.test.n; ++r)
      EXPECT_LE(all[i][r].reasons.size(), all[i - 1][r].reasons.size());
}

TEST(Ood, PercentileAndJsonRoundTrip) {
  EXPECT_EQ(ood::percentile({3, 1, 2}, 50), 2.0);
  EXPECT_DOUBLE_EQ(ood::percentile({0, 10}, 25), 2.5);
  EXPECT_EQ(ood::percentile({0, 10}, 100), 10.0);
  EXPECT_THROW(ood::percentile({}, 50), RangeError);
  EXPECT_EQ(ood::rank_percentile({1, 2, 3, 4}, 50), 2.0);
  EXPECT_EQ(ood::rank_percentile({1, 2, 3, 4}, 51), 3.0);
  EXPECT_EQ(ood::rank_percentile({5}, 0), 5.0);
  std::vector<double> hundred(100);
  std::iota(hundred.begin(), hundred.end(), 0.0);
  EXPECT_EQ(ood::rank_percentile(hundred, 99), 98.0);
  const auto& f = fixture();
  const auto z = gaussian_latents(f.train.n, 3, 6);
  const auto s = ood::fit(f.train, f.dims, z, 3);
  const ood::OodStats back = nlohmann::json(s).get<ood::OodStats>();
  EXPECT_EQ(back.names, s.names);
  EXPECT_EQ(back.lo, s.lo);
  EXPECT_EQ(back.hi, s.hi);
  EXPECT_EQ(back.latent_var, s.latent_var);
  EXPECT_EQ(back.threshold, s.threshold);
}

TEST(Ood, RejectsEmptyAndMismatched) {
  const auto& f = fixture();
  EXPECT_THROW(ood::fit(data::Split{}, f.dims, {}, 3), RangeError);
  const auto z = gaussian_latents(f.train.n, 3, 7);
  EXPECT_THROW(ood::fit(f.train, f.dims, std::span<const double>(z).first(5), 3), DimensionError);
  const auto s = ood::fit(f.train, f.dims, z, 3);
  EXPECT_THROW(ood::check(std::vector<double>(2), std::vector<double>(3), s), DimensionError);
}

TEST(Ood, RankThresholdLeavesAtMostTheTailAbove) {
  std::mt19937_64 rng(8);
  std::exponential_distribution<double> e;
  for (std::size_t n : {1, 2, 7, 50, 99, 100, 101, 250, 1000}) {
    std::vector<double> v(n);
    for (auto& x : v) x = e(rng);
    const double t = ood::rank_percentile(v, 99);
    const auto above = std::count_if(v.begin(), v.end(), [&](double x) { return x > t; });
    EXPECT_LE(static_cast<double>(above), 0.01 * static_cast<double>(n)) << n;
  }
}
