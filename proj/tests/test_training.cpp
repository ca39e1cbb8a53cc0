#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"
#include "urt/gradcheck.hpp"
#include "urt/training.hpp"

using namespace urt;
using urt::testing::fixed_episode;
using urt::testing::random_params;
using urt::testing::random_store;
using urt::testing::TempDir;

namespace {

std::vector<double> flatten(const GradientSet& g) {
  std::vector<double> out;
  for_each_scalar(g.heads, [&](double x) { out.push_back(x); });
  return out;
}

GradcheckCase gc_case(std::uint64_t seed) {
  Rng rng(seed);
  return random_gradcheck_case(rng);
}

SynthConfig tiny_synth() {
  SynthConfig c;
  c.classes_train = 6;
  c.classes_valid = 4;
  c.classes_test = 4;
  c.samples_per_class = 16;
  c.dim = 8;
  return c;
}

TrainConfig tiny_train() {
  TrainConfig c;
  c.episodes = 40;
  c.key_dim = 8;
  c.policy.q_per_class = 4;
  c.validate_every = 20;
  c.validation_tasks = 8;
  return c;
}

}  // namespace

TEST(Gradients, MatchFiniteDifferencesOnRandomConfigurations) {
  for (std::uint64_t t = 0; t < 25; ++t) {
    const auto gc = gc_case(1000 + t);
    const auto [loss, analytic] =
        loss_and_gradients(gc.params, gc.store, gc.episode, gc.lambda, gc.scale);
    const auto numeric =
        finite_diff_gradients(gc.params, gc.store, gc.episode, gc.lambda, gc.scale, 1e-5);
    EXPECT_LE(max_relative_error(analytic, numeric), 1e-4) << "trial " << t;
    const auto direct = episode_loss(gc.params, gc.store, gc.episode, gc.lambda, gc.scale);
    EXPECT_NEAR(loss.total, direct.total, 1e-12);
    EXPECT_NEAR(loss.penalty, direct.penalty, 1e-12);
  }
}

TEST(Gradients, RunGradcheckSummaryIsBelowTolerance) {
  const auto s = run_gradcheck(0, 20);
  EXPECT_EQ(s.trials, 20u);
  EXPECT_GT(s.coordinates, 100u);
  EXPECT_LE(s.max_relative_error, 1e-4);
}

TEST(Gradients, KeyBiasGradientIsZero) {
  // softmax over backbones is invariant to a shared shift of the key bias
  const auto gc = gc_case(7);
  const auto g = loss_and_gradients(gc.params, gc.store, gc.episode, gc.lambda, gc.scale).second;
  const auto fd = finite_diff_gradients(gc.params, gc.store, gc.episode, gc.lambda, gc.scale);
  for (std::size_t h = 0; h < g.heads.size(); ++h)
    for (std::size_t a = 0; a < g.heads[h].bk.size(); ++a) {
      EXPECT_NEAR(g.heads[h].bk[a], 0.0, 1e-12);
      EXPECT_NEAR(fd.heads[h].bk[a], 0.0, 1e-9);
    }
}

TEST(Gradients, LambdaZeroEqualsCrossEntropyGradient) {
  const auto gc = gc_case(11);
  const auto g0 = loss_and_gradients(gc.params, gc.store, gc.episode, 0.0, gc.scale).second;
  const auto ce_only = finite_diff_gradients(
      gc.params,
      [&](const UrtParams& p) {
        return episode_loss<long double>(p, gc.store, gc.episode, 0.5, gc.scale).cross_entropy;
      },
      1e-5);
  EXPECT_LE(max_relative_error(g0, ce_only), 1e-4);
}

TEST(Gradients, PenaltyTermIsLinearInLambda) {
  const auto gc = gc_case(12);
  const auto [l0, g0] = loss_and_gradients(gc.params, gc.store, gc.episode, 0.0, gc.scale);
  const auto [l1, g1] = loss_and_gradients(gc.params, gc.store, gc.episode, 0.3, gc.scale);
  const auto [l2, g2] = loss_and_gradients(gc.params, gc.store, gc.episode, 0.6, gc.scale);
  EXPECT_NEAR(l2.total - l2.cross_entropy, 2 * (l1.total - l1.cross_entropy), 1e-12);
  const auto v0 = flatten(g0), v1 = flatten(g1), v2 = flatten(g2);
  for (std::size_t k = 0; k < v0.size(); ++k)
    EXPECT_NEAR(v2[k] - v0[k], 2 * (v1[k] - v0[k]), 1e-12);
}

TEST(FiniteDifferences, QuadraticProbeIsExact) {
  Rng rng(3);
  const auto p = random_params(rng, 2, 2, 2, 1);
  const double theta0 = p.heads[0].wq(1, 2);
  const auto g = finite_diff_gradients(
      p,
      [](const UrtParams& q) {
        const double x = q.heads[0].wq(1, 2);
        return 3.0 * x * x - 2.0 * x + 1.0;
      },
      1e-5);
  EXPECT_NEAR(g.heads[0].wq(1, 2), 6.0 * theta0 - 2.0, 1e-9);
  EXPECT_EQ(g.heads[0].wq(0, 0), 0.0);
}

TEST(FiniteDifferences, ErrorShrinksQuadraticallyWithStep) {
  const auto gc = gc_case(21);
  const auto analytic =
      loss_and_gradients(gc.params, gc.store, gc.episode, gc.lambda, gc.scale).second;
  auto fd_error = [&](double h) {
    const auto fd = finite_diff_gradients<long double>(gc.params, gc.store, gc.episode, gc.lambda,
                                                       gc.scale, h);
    const auto a = flatten(analytic), b = flatten(fd);
    double worst = 0;
    for (std::size_t k = 0; k < a.size(); ++k) worst = std::max(worst, std::abs(a[k] - b[k]));
    return worst;
  };
  const double e1 = fd_error(2e-2), e2 = fd_error(1e-2);
  const double ratio = e1 / e2;
  EXPECT_GT(ratio, 3.0);
  EXPECT_LT(ratio, 5.0);
}

TEST(FiniteDifferences, SingleCoordinateMatchesFullSweep) {
  const auto gc = gc_case(31);
  const auto full = finite_diff_gradients(gc.params, gc.store, gc.episode, gc.lambda, gc.scale);
  const double h = 1e-5;
  UrtParams p = gc.params;
  const double saved = p.heads.back().wk(0, 1);
  const double up = saved + h, down = saved - h;
  p.heads.back().wk(0, 1) = up;
  const auto f_up = episode_loss<long double>(p, gc.store, gc.episode, gc.lambda, gc.scale).total;
  p.heads.back().wk(0, 1) = down;
  const auto f_down = episode_loss<long double>(p, gc.store, gc.episode, gc.lambda, gc.scale).total;
  EXPECT_EQ(full.heads.back().wk(0, 1), static_cast<double>((f_up - f_down) / (up - down)));
  EXPECT_EQ(full, finite_diff_gradients(gc.params, gc.store, gc.episode, gc.lambda, gc.scale));
}

TEST(CosineLr, Endpoints) {
  EXPECT_EQ(cosine_lr(0, 100, 0.01), 0.01);
  EXPECT_NEAR(cosine_lr(100, 100, 0.01), 0.0, 1e-18);
  EXPECT_NEAR(cosine_lr(50, 100, 0.01), 0.005, 1e-15);
  EXPECT_THROW(cosine_lr(101, 100, 0.01), Error);
}

TEST(CosineLr, PropertyMonotoneNonIncreasing) {
  double prev = cosine_lr(0, 1000, 1.0);
  for (std::uint64_t s = 1; s <= 1000; ++s) {
    const double lr = cosine_lr(s, 1000, 1.0);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}

TEST(SgdStep, ZeroRateOrZeroGradientKeepsParams) {
  Rng rng(4);
  const auto p = random_params(rng, 2, 3, 2, 2);
  auto g = zero_gradients(p);
  for_each_scalar(g.heads, [&](double& x) { x = rng.normal(); });
  EXPECT_EQ(sgd_step(p, g, 0.0, 0.1), p);
  EXPECT_EQ(sgd_step(p, zero_gradients(p), 0.5, 0.0), p);
}

TEST(SgdStep, ScalarArithmetic) {
  UrtParams p{1, 1, 1, {HeadParams{DenseMatrix(1, 1, 1.0), {0.0}, DenseMatrix(1, 1, 0.0), {0.0}}}, true};
  auto g = zero_gradients(p);
  g.heads[0].wq(0, 0) = 0.5;
  EXPECT_DOUBLE_EQ(sgd_step(p, g, 0.1, 0.0).heads[0].wq(0, 0), 0.95);
}

TEST(SgdStep, ShapeMismatchIsRejected) {
  Rng rng(5);
  const auto p = random_params(rng, 2, 3, 2, 2);
  const auto g = zero_gradients(random_params(rng, 2, 3, 2, 1));
  EXPECT_THROW(sgd_step(p, g, 0.1, 0.0), Error);
}

TEST(OptimizerTest, SgdWithoutMomentumMatchesSgdStep) {
  Rng rng(6);
  auto p = random_params(rng, 2, 2, 3, 2);
  auto g = zero_gradients(p);
  for_each_scalar(g.heads, [&](double& x) { x = rng.normal(); });
  OptimizerSettings s;
  s.kind = OptimizerKind::sgd;
  Optimizer opt(p, s);
  const auto expected = sgd_step(p, g, 0.05, 1e-3);
  opt.step(p, g, 0.05, 1e-3);
  EXPECT_EQ(p, expected);
}

TEST(OptimizerTest, AdamFirstStepMovesByLearningRate) {
  Rng rng(7);
  auto p = random_params(rng, 2, 2, 3, 1);
  const auto before = p;
  auto g = zero_gradients(p);
  for_each_scalar(g.heads, [&](double& x) { x = rng.uniform(0.1, 1.0) * (rng.bernoulli(0.5) ? 1 : -1); });
  Optimizer opt(p, OptimizerSettings{});
  opt.step(p, g, 0.01, 0.0);
  std::vector<double> a, b, gv = flatten(g);
  for_each_scalar(before.heads, [&](double x) { a.push_back(x); });
  for_each_scalar(p.heads, [&](double x) { b.push_back(x); });
  for (std::size_t k = 0; k < a.size(); ++k)
    EXPECT_NEAR(a[k] - b[k], 0.01 * (gv[k] > 0 ? 1 : -1), 1e-9);
}

TEST(TrainConfigTest, ZeroEpisodesRejected) {
  TrainConfig c;
  c.episodes = 0;
  try {
    c.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
  }
}

TEST(TrainConfigTest, JsonRoundTrip) {
  TrainConfig c = tiny_train();
  c.ablation = Ablation::no_wq;
  c.optimizer.kind = OptimizerKind::sgd;
  c.lambda = 0.25;
  const auto back = train_config_from_json(train_config_to_json(c));
  EXPECT_EQ(train_config_to_json(back), train_config_to_json(c));
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"train.nope", 1}}), Error);
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"train.episodes", "many"}}), Error);
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"train.episodes", -3}}), Error);
}

TEST(Train, SameInputsGiveIdenticalModelBytes) {
  const auto store = generate_synthetic_store(tiny_synth());
  const auto a = train(store, tiny_train());
  const auto b = train(store, tiny_train());
  EXPECT_EQ(model_text(a), model_text(b));
  TrainOptions many;
  many.threads = 4;
  EXPECT_EQ(model_text(train(store, tiny_train(), many)), model_text(a));
  auto other = tiny_train();
  other.seed = 1;
  EXPECT_NE(model_text(train(store, other)), model_text(a));
}

TEST(Train, KeepsBestValidationCheckpoint) {
  const auto store = generate_synthetic_store(tiny_synth());
  const auto m = train(store, tiny_train());
  ASSERT_TRUE(m.best.has_value());
  EXPECT_TRUE(m.best->episode == 20 || m.best->episode == 40);
  EXPECT_GE(m.best->validation_accuracy, 0.0);
  EXPECT_LE(m.best->validation_accuracy, 1.0);
}

TEST(Train, PinnedAblationsStayPinned) {
  const auto store = generate_synthetic_store(tiny_synth());
  auto cfg = tiny_train();
  cfg.ablation = Ablation::no_wq;
  for (const auto& h : train(store, cfg).params.heads)
    for (double x : h.wq.values()) EXPECT_EQ(x, 0.0);
  cfg.ablation = Ablation::no_wk;
  for (const auto& h : train(store, cfg).params.heads) {
    for (double x : h.wk.values()) EXPECT_EQ(x, 0.0);
    for (double x : h.bk) EXPECT_EQ(x, 0.0);
  }
  cfg.ablation = Ablation::no_setrep;
  EXPECT_FALSE(train(store, cfg).params.set_rep_input);
}

TEST(Train, CrossEntropyDecreasesOnDefaultStore) {
  const auto store = generate_synthetic_store(SynthConfig{});
  TrainConfig cfg;
  cfg.key_dim = 128;
  cfg.validate_every = 0;
  const auto m = train(store, cfg);
  EXPECT_LT(m.final_cross_entropy, m.initial_cross_entropy);
}

TEST(ModelFile, SaveLoadRoundTrip) {
  const auto store = generate_synthetic_store(tiny_synth());
  const auto m = train(store, tiny_train());
  TempDir dir("model");
  save_model(m, dir.path() / "m.json");
  const auto back = load_model(dir.path() / "m.json");
  EXPECT_EQ(back.params, m.params);
  ASSERT_TRUE(back.best.has_value());
  EXPECT_EQ(*back.best, *m.best);
  EXPECT_EQ(back.initial_cross_entropy, m.initial_cross_entropy);
  EXPECT_EQ(back.final_loss, m.final_loss);
  EXPECT_EQ(model_text(back), model_text(m));
  EXPECT_NO_THROW(check_compatible(back, store));
}

TEST(ModelFile, IncompatibleStoreIsRejected) {
  const auto store = generate_synthetic_store(tiny_synth());
  const auto m = train(store, tiny_train());
  auto wider = tiny_synth();
  wider.domains = 5;
  try {
    check_compatible(m, generate_synthetic_store(wider));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::dimension);
  }
  auto reseeded = tiny_synth();
  reseeded.classes_test = 5;
  try {
    check_compatible(m, generate_synthetic_store(reseeded));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::contract);
  }
}

TEST(ModelFile, UnknownVersionIsVersionError) {
  const auto store = generate_synthetic_store(tiny_synth());
  auto doc = nlohmann::json::parse(model_text(train(store, tiny_train())));
  doc["version"] = 42;
  TempDir dir("version");
  detail::write_file(dir.path() / "m.json", doc.dump());
  try {
    load_model(dir.path() / "m.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::version);
  }
}

TEST(ModelFile, MalformedIsFormatError) {
  TempDir dir("malformed");
  detail::write_file(dir.path() / "m.json", "{\"format\": \"urt-model\", \"version\": 1}");
  try {
    load_model(dir.path() / "m.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::format);
  }
}
