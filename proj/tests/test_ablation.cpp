#include <gtest/gtest.h>

#include "phase/ablation.hpp"
#include "phase/sim.hpp"

using namespace phase;
using phase::model::Variant;

namespace {

const data::Dataset& smoke_dataset() {
  static const data::Dataset ds = [] {
    const auto w = sim::generate_world(7, sim::make_grid("8x16"), 1);
    const auto recs = sim::export_samples(w, 1);
    data::Dataset d;
    d.dims = sim::world_dims(w, 1);
    const auto split = data::split_shuffle(recs.size(), 7);
    d.stats = data::fit_stats(recs, split.train, d.dims);
    for (std::size_t i : split.train) d.train.append(recs[i], d.stats);
    for (std::size_t i : split.test) d.test.append(recs[i], d.stats);
    return d;
  }();
  return ds;
}

train::TrainConfig smoke_base() {
  train::TrainConfig c;
  c.model.d = 8, c.model.lstm_hidden = 4, c.model.conv1 = 2, c.model.conv2 = 3, c.model.heads = 2;
  c.model.layers = 1, c.model.ffn_mult = 2, c.model.head_hidden = 8, c.model.mlp_hidden = 16;
  c.batch_size = 8;
  c.max_epochs = 2;
  return c;
}

}  // namespace

TEST(Ablation, VariantChangesOnlyTheVariant) {
  const auto base = smoke_base();
  for (Variant v : model::kAllVariants) {
    auto c = ablation::build_variant({v}, base);
    EXPECT_EQ(c.model.variant, v);
    c.model.variant = base.model.variant;
    EXPECT_EQ(train::to_json_value(c), train::to_json_value(base));
  }
  const auto np = ablation::build_variant({Variant::no_phys}, base);
  EXPECT_EQ(np.lambda, base.lambda);
  EXPECT_EQ(np.effective_lambda(), 0.0);
  EXPECT_EQ(ablation::build_variant({Variant::full}, base).effective_lambda(), base.lambda);
}

TEST(Ablation, OverridesAndUnknownKeys) {
  const auto c = ablation::build_variant({Variant::no_cnn, {{"lr", 0.01}}}, smoke_base());
  EXPECT_EQ(c.lr, 0.01);
  try {
    ablation::build_variant({Variant::full, {{"learning_rate", 0.01}}}, smoke_base());
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "learning_rate");
  }
}

TEST(Ablation, SuiteTableShapeAndFullColumnMatchesStandaloneRun) {
  const auto& ds = smoke_dataset();
  std::size_t seen = 0;
  const auto t = ablation::run_ablation_suite(ds, {3}, smoke_base(), [&](const ablation::Run&) { ++seen; });
  EXPECT_EQ(seen, model::kAllVariants.size());
  const auto table = io::parse_csv(t.r2_csv().str());
  EXPECT_EQ(table.rows.size(), 6u);
  EXPECT_EQ(table.header.size(), 1 + 8u);
  const auto delta = io::parse_csv(t.delta_csv().str());
  for (std::size_t r = 0; r < delta.rows.size(); ++r) EXPECT_EQ(delta.number(r, "full"), 0.0);

  auto cfg = smoke_base();
  cfg.seed = 3;
  const auto sm = train::train(ds, cfg);
  const auto rep = ablation::evaluate_model(sm, ds.test);
  for (Task task : kStateTasks) EXPECT_EQ(t.r2(Variant::full, task), rep.score(task).r2);
  EXPECT_EQ(io::parse_csv(t.runs_csv().str()).rows.size(), 8 * kAllTasks.size());
}

TEST(Ablation, EmptySeedListIsConfigError) {
  EXPECT_THROW(ablation::run_ablation_suite(smoke_dataset(), {}, smoke_base()), ConfigError);
}
