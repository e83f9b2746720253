#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "ccnf/synthdata.hpp"
#include "ccnf/training.hpp"
#include "test_support.hpp"

namespace ccnf {
namespace {

using testing::uniform_vector;

FlowModel small_model(std::size_t d, std::size_t k, std::uint64_t seed, double scale = 0.5) {
  FlowModel m;
  m.field = ConditionedVectorField::initialized(d, k, 6, seed, scale);
  m.attributes = AttributeNormalizer::unit(k);
  return m;
}

std::vector<Vector> random_rows(std::size_t n, std::size_t dim, std::mt19937_64& rng, double lo, double hi) {
  std::vector<Vector> rows;
  for (std::size_t i = 0; i < n; ++i) rows.push_back(uniform_vector(dim, rng, lo, hi));
  return rows;
}

TEST(NormalizeAttributes, Examples) {
  const std::vector<Vector> raw{{0, 10}, {50, 20}, {100, 30}};
  const auto n = normalize_attributes(raw);
  EXPECT_EQ(n.values[1][0], 0.5);
  EXPECT_EQ(n.values[1][1], 0.5);

  // roughness-style axis declared up to 200
  const auto ext = normalize_attributes(raw, {AxisRange{0, 200}, std::nullopt});
  EXPECT_EQ(ext.values[2][0], 0.5);
  EXPECT_EQ(ext.values[2][1], 1.0);

  // stored stats reproduce the normalized set bit-exactly
  for (std::size_t i = 0; i < raw.size(); ++i) EXPECT_EQ(n.stats.normalize(raw[i]), n.values[i]);
}

TEST(NormalizeAttributes, ConstantAxisNamesTheAxis) {
  const std::vector<Vector> raw{{1, 5}, {2, 5}};
  try {
    normalize_attributes(raw);
    FAIL() << "expected DegenerateDimension";
  } catch (const DegenerateDimension& e) {
    EXPECT_EQ(e.axis(), 1u);
    EXPECT_NE(std::string(e.what()).find("axis 1"), std::string::npos);
  }
}

TEST(NllBatch, ZeroModelIsStandardNormal) {
  FlowModel m{ConditionedVectorField(2, 1, 4), SolverConfig{}, AttributeNormalizer::unit(1)};
  std::mt19937_64 rng(1);
  const auto s = random_rows(10, 2, rng, -2, 2);
  const auto a = random_rows(10, 1, rng, 0, 1);
  double want = 0.0;
  for (const auto& x : s) want += std::log(2.0 * std::numbers::pi) + 0.5 * dot(x, x);
  const auto bl = nll_batch(m, s, a);
  EXPECT_NEAR(bl.loss, want / 10.0, 1e-14);
  EXPECT_THROW(nll_batch(m, std::vector<Vector>{}, std::vector<Vector>{}), InvalidInput);
}

TEST(NllBatch, GradientMatchesFiniteDifferences) {
  const FlowModel m = small_model(2, 1, 3);
  std::mt19937_64 rng(2);
  const auto s = random_rows(4, 2, rng, -2, 2);
  const auto a = random_rows(4, 1, rng, 0, 1);
  NllOptions opt;
  opt.steps = 10;
  const auto bl = nll_batch(m, s, a, opt);
  const Vector fd = testing::fd_gradient(
      [&](const Vector& theta) {
        FlowModel p = m;
        p.field.set_flat_parameters(theta);
        return nll_batch(p, s, a, opt).loss;
      },
      m.field.flat_parameters());
  EXPECT_LT(testing::relative_error(bl.gradient, fd), 1e-4);
}

TEST(NllBatch, DuplicatingTheBatchChangesNothing) {
  const FlowModel m = small_model(3, 2, 4);
  std::mt19937_64 rng(3);
  auto s = random_rows(5, 3, rng, -2, 2);
  auto a = random_rows(5, 2, rng, 0, 1);
  const auto once = nll_batch(m, s, a);
  const auto s2 = s, a2 = a;
  s.insert(s.end(), s2.begin(), s2.end());
  a.insert(a.end(), a2.begin(), a2.end());
  const auto twice = nll_batch(m, s, a);
  EXPECT_NEAR(twice.loss, once.loss, 1e-14);
  EXPECT_LT(testing::max_abs_diff(twice.gradient, once.gradient), 1e-14);
}

TEST(NllBatch, ThreadCountDoesNotChangeResults) {
  const FlowModel m = small_model(3, 1, 5);
  std::mt19937_64 rng(4);
  const auto s = random_rows(9, 3, rng, -2, 2);
  const auto a = random_rows(9, 1, rng, 0, 1);
  NllOptions one, many;
  many.threads = 4;
  const auto r1 = nll_batch(m, s, a, one), r4 = nll_batch(m, s, a, many);
  EXPECT_EQ(r1.loss, r4.loss);
  EXPECT_EQ(r1.gradient, r4.gradient);
}

TEST(NllBatch, HutchinsonGradientAlignsWithExact) {
  FlowModel m;
  m.field = ConditionedVectorField::initialized(4, 2, 16, 6);
  m.attributes = AttributeNormalizer::unit(2);
  std::mt19937_64 rng(5);
  const auto s = random_rows(8, 4, rng, -2, 2);
  const auto a = random_rows(8, 2, rng, 0, 1);
  const Vector exact = nll_batch(m, s, a).gradient;
  Vector avg(exact.size(), 0.0);
  NllOptions opt;
  opt.trace = TraceMethod::hutchinson;
  for (std::uint64_t draw = 0; draw < 100; ++draw) {
    opt.probe_seed = draw;
    avg = avg + nll_batch(m, s, a, opt).gradient;
  }
  EXPECT_GT(dot(avg, exact) / (norm(avg) * norm(exact)), 0.99);
}

TEST(TrainConfig, LearningRateSchedule) {
  TrainConfig cfg;
  EXPECT_EQ(cfg.learning_rate(0), 1e-4);
  EXPECT_EQ(cfg.learning_rate(99), 1e-4);
  EXPECT_EQ(cfg.learning_rate(100), 1e-4 * 0.98);
  EXPECT_EQ(cfg.learning_rate(200), 1e-4 * 0.98 * 0.98);
}

TEST(TrainConfig, ParsesKeyValueDocuments) {
  std::istringstream is("# comment\nbatch_size=32\nlr0=0.01\ntrace_mode=hutchinson\nepochs=3\nhidden=64\n");
  const auto cfg = train_config_from_doc(KeyValueDoc::parse(is));
  EXPECT_EQ(cfg.batch_size, 32u);
  EXPECT_EQ(cfg.lr0, 0.01);
  EXPECT_EQ(cfg.trace, TraceMethod::hutchinson);
  EXPECT_EQ(cfg.epochs, 3u);
  std::istringstream bad("decay=1.5\n");
  EXPECT_THROW(train_config_from_doc(KeyValueDoc::parse(bad)), InvalidInput);
  std::istringstream junk("lr0=fast\n");
  EXPECT_THROW(train_config_from_doc(KeyValueDoc::parse(junk)), InvalidInput);
}

TEST(Train, ZeroEpochsReturnsInitialModel) {
  const FlowModel m = small_model(2, 1, 7);
  TrainConfig cfg;
  cfg.epochs = 0;
  const auto r = train(m, std::vector<Vector>{}, std::vector<Vector>{}, cfg);
  EXPECT_EQ(r.model, m);
  EXPECT_TRUE(r.epoch_nll.empty());
}

TEST(Train, BitReproducibleUnderSeed) {
  const auto g = ConditionalGaussianGenerator::random(2, 1, 8);
  const Dataset ds = generate_dataset(g, 64);
  const auto attrs = normalize_attributes(ds.attributes);
  const FlowModel init = make_initial_model(2, attrs.stats, 8, 3);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 20;
  cfg.lr0 = 1e-2;
  cfg.steps = 5;
  cfg.seed = 11;
  cfg.threads = 1;
  const auto r1 = train(init, ds.embeddings, attrs.values, cfg);
  cfg.threads = 3;
  const auto r2 = train(init, ds.embeddings, attrs.values, cfg);
  EXPECT_EQ(r1.model, r2.model);
  EXPECT_EQ(r1.epoch_nll, r2.epoch_nll);
  std::ostringstream c1, c2, p1, p2;
  save_checkpoint(c1, r1.model);
  save_checkpoint(c2, r2.model);
  write_train_report(p1, r1);
  write_train_report(p2, r2);
  EXPECT_EQ(c1.str(), c2.str());
  EXPECT_EQ(p1.str(), p2.str());
  EXPECT_NE(r1.model, init);
  cfg.seed = 12;
  EXPECT_NE(train(init, ds.embeddings, attrs.values, cfg).model, r1.model);
}

TEST(Train, ReachesTheTrueEntropyOn2DGaussian) {
  const auto g = ConditionalGaussianGenerator::random(2, 1, 21, 2.0, 0.5);
  const Dataset ds = generate_dataset(g, 2000);
  const auto attrs = normalize_attributes(ds.attributes);
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.batch_size = 100;
  cfg.lr0 = 1e-2;
  cfg.decay = 0.5;
  cfg.decay_every = 15;
  cfg.seed = 1;
  const auto r = train(make_initial_model(2, attrs.stats, 16, 2), ds.embeddings, attrs.values, cfg);
  const auto held = generate_dataset([&] {
    auto h = g;
    h.seed = 999;
    return h;
  }(), 1000);
  double nll = 0.0;
  for (std::size_t i = 0; i < held.size(); ++i) {
    nll -= log_likelihood(r.model, held.embeddings[i], attrs.stats.normalize(held.attributes[i]));
  }
  nll /= held.size();
  EXPECT_LT(std::abs(nll - true_conditional_entropy(g)), 0.1) << "wall " << r.wall_seconds << " s";
  // smoothed loss is non-increasing after the transient
  for (std::size_t e = 15; e < r.epoch_nll.size(); ++e) {
    double now = 0, before = 0;
    for (std::size_t w = 0; w < 10; ++w) {
      now += r.epoch_nll[e - w];
      before += r.epoch_nll[e - w - 1];
    }
    EXPECT_LE(now, before + 0.05) << "epoch " << e;
  }
}

TEST(Train, InstabilitySavesLastGoodCheckpoint) {
  const auto g = ConditionalGaussianGenerator::random(2, 1, 3);
  const Dataset ds = generate_dataset(g, 20);
  const auto attrs = normalize_attributes(ds.attributes);
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.batch_size = 10;
  cfg.lr0 = 1e300;  // overflows on the first update
  cfg.steps = 4;
  cfg.threads = 1;
  cfg.checkpoint_path = ::testing::TempDir() + "ccnf_unstable.ckpt";
  std::remove(cfg.checkpoint_path.c_str());
  try {
    train(make_initial_model(2, attrs.stats, 8, 1), ds.embeddings, attrs.values, cfg);
    FAIL() << "expected InstabilityError";
  } catch (const InstabilityError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
  }
  EXPECT_NO_THROW(load_checkpoint_file(cfg.checkpoint_path));
}

}  // namespace
}  // namespace ccnf
