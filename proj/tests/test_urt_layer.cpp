#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "test_support.hpp"
#include "urt/urt_layer.hpp"

using namespace urt;
using urt::testing::fixed_episode;
using urt::testing::random_params;
using urt::testing::random_store;

namespace {

// Attention computed with explicit nested loops over raw arrays:
// q = Wq r + bq, k_i = Wk r_i + bk, beta_i = q.k_i / sqrt(l), softmax over i,
// mean over classes. Returns [head][backbone].
std::vector<std::vector<double>> brute_force_alpha(const UrtParams& p,
                                                   const std::vector<std::vector<double>>& rc) {
  const std::size_t m = p.backbones, d = p.dim, l = p.key_dim, N = rc.size();
  std::vector<std::vector<double>> alpha(p.heads.size(), std::vector<double>(m, 0.0));
  for (std::size_t h = 0; h < p.heads.size(); ++h) {
    const auto& hp = p.heads[h];
    for (std::size_t c = 0; c < N; ++c) {
      std::vector<double> q(l);
      for (std::size_t a = 0; a < l; ++a) {
        double acc = hp.bq[a];
        for (std::size_t b = 0; b < m * d; ++b) acc += hp.wq(a, b) * rc[c][b];
        q[a] = acc;
      }
      std::vector<double> beta(m);
      for (std::size_t i = 0; i < m; ++i) {
        double s = 0;
        for (std::size_t a = 0; a < l; ++a) {
          double k = hp.bk[a];
          for (std::size_t b = 0; b < d; ++b) k += hp.wk(a, b) * rc[c][i * d + b];
          s += q[a] * k;
        }
        beta[i] = s / std::sqrt(double(l));
      }
      double mx = beta[0];
      for (double b : beta) mx = std::max(mx, b);
      double z = 0;
      for (double b : beta) z += std::exp(b - mx);
      for (std::size_t i = 0; i < m; ++i) alpha[h][i] += std::exp(beta[i] - mx) / z / double(N);
    }
  }
  return alpha;
}

SetReps reps_from(const std::vector<std::vector<double>>& rc, std::size_t m, std::size_t d) {
  SetReps r{m, d, DenseMatrix(rc.size(), m * d)};
  for (std::size_t c = 0; c < rc.size(); ++c)
    for (std::size_t k = 0; k < m * d; ++k) r.reps(c, k) = rc[c][k];
  return r;
}

std::vector<std::vector<double>> random_rows(Rng& rng, std::size_t n, std::size_t width) {
  std::vector<std::vector<double>> out(n, std::vector<double>(width));
  for (auto& row : out)
    for (auto& x : row) x = rng.normal();
  return out;
}

}  // namespace

TEST(InitParams, ZeroBiasesAndBoundedWeights) {
  Rng rng(1);
  const auto p = init_params(3, 5, 4, 2, rng);
  EXPECT_NO_THROW(p.validate());
  const double sq = std::sqrt(6.0 / (4 + 15)), sk = std::sqrt(6.0 / (4 + 5));
  for (const auto& h : p.heads) {
    for (double b : h.bq) EXPECT_EQ(b, 0.0);
    for (double b : h.bk) EXPECT_EQ(b, 0.0);
    for (double w : h.wq.values()) EXPECT_LT(std::abs(w), sq);
    for (double w : h.wk.values()) EXPECT_LT(std::abs(w), sk);
  }
}

TEST(InitParams, SameStateSameParams) {
  Rng a(5), b(5), c(6);
  const auto pa = init_params(2, 3, 4, 3, a);
  EXPECT_EQ(pa, init_params(2, 3, 4, 3, b));
  EXPECT_FALSE(pa == init_params(2, 3, 4, 3, c));
}

TEST(Attention, SingleBackboneGivesUnitScore) {
  Rng rng(2);
  const auto p = random_params(rng, 1, 4, 3, 2);
  const auto attn = attention(p, reps_from(random_rows(rng, 3, 4), 1, 4));
  for (std::size_t h = 0; h < 2; ++h) {
    EXPECT_EQ(attn.stacked(h, 0), 1.0);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(attn.heads[h].class_scores(0, c), 1.0);
  }
}

TEST(Attention, ConstantKeysGiveUniformScores) {
  Rng rng(3);
  auto p = random_params(rng, 4, 3, 5, 2);
  for (auto& h : p.heads) {
    for (auto& x : h.wk.values()) x = 0;
    for (auto& x : h.bk) x = 0;
  }
  const auto attn = attention(p, reps_from(random_rows(rng, 3, 12), 4, 3));
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(attn.stacked(h, i), 0.25);
}

TEST(Attention, MatchesBruteForceOnSmallInstance) {
  Rng rng(4);
  const auto p = random_params(rng, 3, 4, 2, 1, 1.0);
  const auto rc = random_rows(rng, 2, 12);
  const auto attn = attention(p, reps_from(rc, 3, 4));
  const auto oracle = brute_force_alpha(p, rc);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(attn.stacked(0, i), oracle[0][i], 1e-12);
}

TEST(Attention, PropertyMatchesBruteForceAndStaysOnSimplex) {
  Rng rng(5);
  for (int t = 0; t < 300; ++t) {
    const auto m = rng.uniform_int(1, 5), d = rng.uniform_int(1, 6), l = rng.uniform_int(1, 7);
    const auto H = rng.uniform_int(1, 3), N = rng.uniform_int(1, 5);
    const auto p = random_params(rng, m, d, l, H, 1.0);
    const auto rc = random_rows(rng, N, m * d);
    const auto attn = attention(p, reps_from(rc, m, d));
    const auto oracle = brute_force_alpha(p, rc);
    for (std::size_t h = 0; h < H; ++h) {
      double s = 0;
      for (std::size_t i = 0; i < m; ++i) {
        ASSERT_NEAR(attn.stacked(h, i), oracle[h][i], 1e-12);
        EXPECT_GT(attn.stacked(h, i), 0.0);
        s += attn.stacked(h, i);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
      for (std::size_t c = 0; c < N; ++c) {
        double sc = 0;
        for (std::size_t i = 0; i < m; ++i) sc += attn.heads[h].class_scores(i, c);
        EXPECT_NEAR(sc, 1.0, 1e-12);
      }
    }
  }
}

TEST(Attention, DimensionMismatchIsRejected) {
  Rng rng(6);
  const auto p = random_params(rng, 2, 3, 2, 1);
  try {
    attention(p, reps_from(random_rows(rng, 2, 8), 2, 4));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::dimension);
  }
}

TEST(Attention, WithoutSetRepInputScoresAreInputIndependent) {
  Rng rng(7);
  auto p = random_params(rng, 3, 2, 4, 2);
  p.set_rep_input = false;
  const auto a = attention(p, reps_from(random_rows(rng, 2, 6), 3, 2));
  const auto b = attention(p, reps_from(random_rows(rng, 4, 6), 3, 2));
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a.stacked(h, i), b.stacked(h, i), 1e-15);
}

namespace {

AttentionResult fixed_scores(const std::vector<std::vector<double>>& rows) {
  AttentionResult r;
  r.stacked = DenseMatrix(rows.size(), rows.front().size());
  for (std::size_t h = 0; h < rows.size(); ++h)
    for (std::size_t i = 0; i < rows[h].size(); ++i) r.stacked(h, i) = rows[h][i];
  return r;
}

}  // namespace

TEST(Adapt, OneHotSelectsBackbone) {
  const UrtParams p{3, 2, 1, {}, true};
  const DenseVector x{1, 2, 3, 4, 5, 6};
  EXPECT_EQ(adapt(p, fixed_scores({{0, 1, 0}}), x), (DenseVector{3, 4}));
}

TEST(Adapt, UniformAveragesBackbones) {
  const UrtParams p{3, 2, 1, {}, true};
  const DenseVector x{1, 2, 3, 4, 5, 6};
  const auto out = adapt(p, fixed_scores({{1.0 / 3, 1.0 / 3, 1.0 / 3}}), x);
  EXPECT_NEAR(out[0], 3.0, 1e-15);
  EXPECT_NEAR(out[1], 4.0, 1e-15);
}

TEST(Adapt, IdenticalHeadsRepeatOutput) {
  const UrtParams p{2, 3, 1, {}, true};
  const DenseVector x{1, -2, 0.5, 4, 0, 3};
  const auto out = adapt(p, fixed_scores({{0.3, 0.7}, {0.3, 0.7}}), x);
  ASSERT_EQ(out.size(), 6u);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(out[j], out[3 + j]);
}

TEST(Adapt, WrongLengthIsDimensionError) {
  const UrtParams p{2, 3, 1, {}, true};
  EXPECT_THROW(adapt(p, fixed_scores({{0.5, 0.5}}), DenseVector{1, 2, 3}), Error);
}

TEST(ForwardEpisode, Shapes) {
  Rng rng(8);
  const auto s = random_store(rng, 3, 4, 4, 10);
  const auto p = random_params(rng, 3, 4, 5, 2);
  const auto ep = fixed_episode(s, {1, 2, 3, 4}, 3);
  const auto emb = forward_episode(p, s, ep);
  EXPECT_EQ(emb.support.rows(), 10u);
  EXPECT_EQ(emb.query.rows(), 12u);
  EXPECT_EQ(emb.support.cols(), 8u);
  EXPECT_EQ(emb.attention.stacked.rows(), 2u);
}

TEST(ForwardEpisode, QueryPermutationPermutesOutputs) {
  Rng rng(9);
  const auto s = random_store(rng, 2, 3, 3, 8);
  const auto p = random_params(rng, 2, 3, 4, 2);
  auto ep = fixed_episode(s, {2, 2, 2}, 4);
  const auto a = forward_episode(p, s, ep);
  for (auto& q : ep.query) std::reverse(q.begin(), q.end());
  const auto b = forward_episode(p, s, ep);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t k = 0; k < 4; ++k) {
      const auto ra = a.query.row(c * 4 + k), rb = b.query.row(c * 4 + 3 - k);
      EXPECT_TRUE(std::equal(ra.begin(), ra.end(), rb.begin()));
    }
}

TEST(ForwardEpisode, AttentionIgnoresQuerySet) {
  Rng rng(10);
  const auto s = random_store(rng, 3, 2, 3, 10);
  const auto p = random_params(rng, 3, 2, 3, 3);
  auto ep = fixed_episode(s, {2, 3, 1}, 2);
  const auto a = forward_episode(p, s, ep);
  for (std::size_t c = 0; c < 3; ++c) {
    const auto& g = s.classes(Split::train, 0)[c];
    ep.query[c] = {s.records()[g.rows[9]].sample_id};
  }
  const auto b = forward_episode(p, s, ep);
  EXPECT_EQ(a.attention.stacked, b.attention.stacked);
}
