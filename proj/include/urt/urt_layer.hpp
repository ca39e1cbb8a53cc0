#pragma once

// Universal Representation Transformer layer: per-class scaled dot-product
// attention over backbones, task-level score aggregation, and the single- and
// multi-head adapted representations.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "urt/core_math.hpp"
#include "urt/error.hpp"
#include "urt/feature_store.hpp"
#include "urt/rng.hpp"
#include "urt/sampler.hpp"

namespace urt {

/// One attention head. Queries: wq (l x m*d), bq (l). Keys: wk (l x d), bk (l).
struct HeadParams {
  DenseMatrix wq;
  DenseVector bq;
  DenseMatrix wk;
  DenseVector bk;

  bool operator==(const HeadParams&) const = default;
};

struct UrtParams {
  std::size_t backbones = 0;
  std::size_t dim = 0;
  std::size_t key_dim = 0;
  std::vector<HeadParams> heads;
  /// When false the linear maps see zero vectors instead of r(S_c), r_i(S_c).
  bool set_rep_input = true;

  std::size_t head_count() const noexcept { return heads.size(); }

  void validate() const {
    require(!heads.empty(), ErrorKind::dimension, "URT layer needs at least one head");
    const std::size_t m = backbones, d = dim, l = key_dim;
    for (std::size_t h = 0; h < heads.size(); ++h) {
      const auto& p = heads[h];
      const bool ok = p.wq.rows() == l && p.wq.cols() == m * d && p.bq.size() == l &&
                      p.wk.rows() == l && p.wk.cols() == d && p.bk.size() == l;
      require(ok, ErrorKind::dimension,
              "head " + std::to_string(h) + " shapes do not match (m=" + std::to_string(m) +
                  ", d=" + std::to_string(d) + ", l=" + std::to_string(l) + ")");
    }
  }

  bool operator==(const UrtParams&) const = default;
};

/// Xavier-uniform weights, zero biases.
inline UrtParams init_params(std::size_t backbones, std::size_t dim, std::size_t key_dim,
                             std::size_t heads, Rng& rng) {
  require(backbones >= 1 && dim >= 1 && key_dim >= 1 && heads >= 1, ErrorKind::config,
          "init_params: all dimensions must be >= 1");
  auto xavier = [&rng](std::size_t rows, std::size_t cols) {
    DenseMatrix w(rows, cols);
    const double s = std::sqrt(6.0 / static_cast<double>(rows + cols));
    for (auto& x : w.values()) x = rng.uniform(-s, s);
    return w;
  };
  UrtParams p{backbones, dim, key_dim, {}, true};
  for (std::size_t h = 0; h < heads; ++h) {
    HeadParams head;
    head.wq = xavier(key_dim, backbones * dim);
    head.bq.assign(key_dim, 0.0);
    head.wk = xavier(key_dim, dim);
    head.bk.assign(key_dim, 0.0);
    p.heads.push_back(std::move(head));
  }
  return p;
}

template <std::floating_point Real>
struct BasicHeadAttention {
  Matrix<Real> queries;       // N x l, q_c
  Matrix<Real> keys;          // (N*m) x l, row c*m + i holds k_{i,c}
  Matrix<Real> logits;        // m x N, beta_{i,c}
  Matrix<Real> class_scores;  // m x N, alpha_{i,c}
  std::vector<Real> scores;   // m, alpha_i
};

template <std::floating_point Real>
struct BasicAttentionResult {
  std::vector<BasicHeadAttention<Real>> heads;
  Matrix<Real> stacked;  // H x m, row h = alpha^(h)

  std::span<const Real> scores(std::size_t head) const { return stacked.row(head); }
};

using HeadAttention = BasicHeadAttention<double>;
using AttentionResult = BasicAttentionResult<double>;

/// beta_{i,c} = q_c . k_{i,c} / sqrt(l); alpha_{.,c} = softmax_i; alpha_i = mean_c.
template <std::floating_point Real>
BasicAttentionResult<Real> attention(const UrtParams& params, const BasicSetReps<Real>& reps) {
  params.validate();
  require(reps.backbones == params.backbones && reps.dim == params.dim, ErrorKind::dimension,
          "set representations (m=" + std::to_string(reps.backbones) +
              ", d=" + std::to_string(reps.dim) + ") do not match URT params (m=" +
              std::to_string(params.backbones) + ", d=" + std::to_string(params.dim) + ")");
  const std::size_t m = params.backbones, d = params.dim, l = params.key_dim;
  const std::size_t N = reps.classes();
  require(N >= 1, ErrorKind::contract, "attention needs at least one class");
  const Real inv_sqrt_l = Real(1) / std::sqrt(Real(l));
  const std::vector<Real> zeros(m * d, Real(0));

  BasicAttentionResult<Real> out;
  out.stacked = Matrix<Real>(params.head_count(), m);
  for (std::size_t h = 0; h < params.head_count(); ++h) {
    const auto& p = params.heads[h];
    BasicHeadAttention<Real> head{Matrix<Real>(N, l), Matrix<Real>(N * m, l),
                                  Matrix<Real>(m, N), Matrix<Real>(m, N),
                                  std::vector<Real>(m, Real(0))};
    for (std::size_t c = 0; c < N; ++c) {
      const std::span<const Real> rc =
          params.set_rep_input ? reps.concat(c) : std::span<const Real>(zeros);
      affine<Real>(p.wq, p.bq, rc, head.queries.row(c));
      std::vector<Real> column(m);
      for (std::size_t i = 0; i < m; ++i) {
        const std::span<const Real> ri =
            params.set_rep_input ? reps.backbone(c, i) : std::span<const Real>(zeros).first(d);
        affine<Real>(p.wk, p.bk, ri, head.keys.row(c * m + i));
        column[i] = dot<Real>(std::span<const Real>(head.queries.row(c)),
                              std::span<const Real>(head.keys.row(c * m + i))) *
                    inv_sqrt_l;
        head.logits(i, c) = column[i];
      }
      softmax_inplace<Real>(column);
      for (std::size_t i = 0; i < m; ++i) {
        head.class_scores(i, c) = column[i];
        head.scores[i] += column[i];
      }
    }
    for (std::size_t i = 0; i < m; ++i) {
      head.scores[i] /= Real(N);
      out.stacked(h, i) = head.scores[i];
    }
    out.heads.push_back(std::move(head));
  }
  return out;
}

/// phi(x) = concat_h sum_i alpha_i^(h) r_i(x). `universal` is r(x), length m*d.
template <std::floating_point Real, class In>
std::vector<Real> adapt(const UrtParams& params, const BasicAttentionResult<Real>& attn,
                        std::span<const In> universal) {
  const std::size_t m = params.backbones, d = params.dim, H = attn.stacked.rows();
  require(universal.size() == m * d, ErrorKind::dimension,
          "adapt: sample representation has length " + std::to_string(universal.size()) +
              ", expected " + std::to_string(m * d));
  require(attn.stacked.cols() == m, ErrorKind::dimension,
          "adapt: attention scores cover " + std::to_string(attn.stacked.cols()) +
              " backbones, expected " + std::to_string(m));
  std::vector<Real> out(H * d, Real(0));
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t i = 0; i < m; ++i) {
      const Real a = attn.stacked(h, i);
      for (std::size_t j = 0; j < d; ++j) out[h * d + j] += a * Real(universal[i * d + j]);
    }
  return out;
}

inline DenseVector adapt(const UrtParams& params, const AttentionResult& attn,
                         const DenseVector& universal) {
  return adapt<double, double>(params, attn, std::span<const double>(universal));
}

template <std::floating_point Real>
struct BasicEpisodeEmbedding {
  BasicSetReps<Real> set_reps;
  BasicAttentionResult<Real> attention;
  Matrix<Real> support;  // one row per support sample, class-major episode order
  Matrix<Real> query;    // one row per query sample, class-major episode order
  std::vector<std::size_t> support_class;
  std::vector<std::size_t> query_class;
  std::vector<std::uint64_t> support_ids;
  std::vector<std::uint64_t> query_ids;

  std::size_t ways() const noexcept { return set_reps.classes(); }
};

using EpisodeEmbedding = BasicEpisodeEmbedding<double>;

/// Attention is computed once from the support set and applied to every
/// support and query sample of the episode.
template <std::floating_point Real = double>
BasicEpisodeEmbedding<Real> forward_episode(const UrtParams& params, const FeatureStore& store,
                                            const Episode& episode) {
  BasicEpisodeEmbedding<Real> out;
  out.set_reps = set_representations<Real>(store, episode);
  out.attention = attention<Real>(params, out.set_reps);
  const std::size_t width = params.head_count() * params.dim;
  out.support = Matrix<Real>(episode.support_size(), width);
  out.query = Matrix<Real>(episode.query_size(), width);
  std::size_t s = 0, q = 0;
  for (std::size_t c = 0; c < episode.ways(); ++c) {
    for (auto id : episode.support[c]) {
      const auto r = universal_representation(store, id);
      const auto phi = adapt<Real, double>(params, out.attention, std::span<const double>(r));
      std::copy(phi.begin(), phi.end(), out.support.row(s++).begin());
      out.support_class.push_back(c);
      out.support_ids.push_back(id);
    }
    for (auto id : episode.query[c]) {
      const auto r = universal_representation(store, id);
      const auto phi = adapt<Real, double>(params, out.attention, std::span<const double>(r));
      std::copy(phi.begin(), phi.end(), out.query.row(q++).begin());
      out.query_class.push_back(c);
      out.query_ids.push_back(id);
    }
  }
  return out;
}

}  // namespace urt
