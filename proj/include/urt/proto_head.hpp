#pragma once

// Prototype classifier over adapted representations and the episodic loss.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "urt/core_math.hpp"
#include "urt/error.hpp"
#include "urt/urt_layer.hpp"

namespace urt {

inline constexpr double kDefaultLogitScale = 10.0;

template <std::floating_point Real>
struct BasicPrototypes {
  Matrix<Real> centroids;  // N x (H*d), aligned with episode.classes

  std::size_t count() const noexcept { return centroids.rows(); }
};

using Prototypes = BasicPrototypes<double>;

/// p_c = mean of the support embeddings of class c.
template <std::floating_point Real>
BasicPrototypes<Real> prototypes(const BasicEpisodeEmbedding<Real>& emb) {
  const std::size_t N = emb.ways();
  const std::size_t width = emb.support.cols();
  std::vector<std::vector<std::size_t>> members(N);
  for (std::size_t s = 0; s < emb.support_class.size(); ++s)
    members[emb.support_class[s]].push_back(s);

  BasicPrototypes<Real> out{Matrix<Real>(N, width)};
  for (std::size_t c = 0; c < N; ++c) {
    auto& rows = members[c];
    require(!rows.empty(), ErrorKind::contract,
            "class index " + std::to_string(c) + " has no support embeddings");
    std::stable_sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) {
      return emb.support_ids[a] < emb.support_ids[b];
    });
    auto dst = out.centroids.row(c);
    for (std::size_t s : rows) {
      auto src = emb.support.row(s);
      for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
    }
    for (auto& x : dst) x /= Real(rows.size());
  }
  return out;
}

/// p(y = c | x) = softmax_c(scale * cos(phi(x), p_c)).
template <std::floating_point Real>
std::vector<Real> classify(std::span<const Real> embedding, const BasicPrototypes<Real>& protos,
                           Real scale = Real(kDefaultLogitScale)) {
  require(embedding.size() == protos.centroids.cols(), ErrorKind::dimension,
          "classify: embedding length " + std::to_string(embedding.size()) +
              " vs prototype length " + std::to_string(protos.centroids.cols()));
  std::vector<Real> logits(protos.count());
  for (std::size_t c = 0; c < logits.size(); ++c)
    logits[c] = scale * cosine_similarity<Real>(embedding, protos.centroids.row(c));
  softmax_inplace<Real>(logits);
  return logits;
}

/// Argmax with ties resolved toward the lowest class index.
template <class Real>
std::size_t predict(std::span<const Real> probs) {
  return static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

template <std::floating_point Real>
struct BasicLossBreakdown {
  Real cross_entropy = 0;
  Real penalty = 0;
  Real total = 0;
  Real lambda = 0;
};

using LossBreakdown = BasicLossBreakdown<double>;

template <std::floating_point Real>
BasicLossBreakdown<Real> loss_from_embedding(const BasicEpisodeEmbedding<Real>& emb,
                                             double lambda, double scale) {
  const auto protos = prototypes(emb);
  Real ce = 0;
  for (std::size_t x = 0; x < emb.query.rows(); ++x) {
    const auto probs = classify<Real>(emb.query.row(x), protos, Real(scale));
    ce -= std::log(probs[emb.query_class[x]]);
  }
  ce /= Real(emb.query.rows());
  const Real penalty = head_diversity_penalty(emb.attention.stacked);
  return {ce, penalty, ce + Real(lambda) * penalty, Real(lambda)};
}

/// Mean query cross-entropy plus lambda * ||A A^T - I||_F^2.
template <std::floating_point Real = double>
BasicLossBreakdown<Real> episode_loss(const UrtParams& params, const FeatureStore& store,
                                      const Episode& episode, double lambda,
                                      double scale = kDefaultLogitScale) {
  require(episode.query_size() > 0, ErrorKind::contract, "episode has no query samples");
  return loss_from_embedding(forward_episode<Real>(params, store, episode), lambda, scale);
}

/// Fraction of queries whose argmax prediction is correct.
inline double episode_accuracy(const EpisodeEmbedding& emb, double scale = kDefaultLogitScale) {
  const auto protos = prototypes(emb);
  std::size_t correct = 0;
  for (std::size_t x = 0; x < emb.query.rows(); ++x) {
    const auto probs = classify<double>(emb.query.row(x), protos, scale);
    if (predict<double>(probs) == emb.query_class[x]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(emb.query.rows());
}

}  // namespace urt

namespace urt {

inline double episode_accuracy(const UrtParams& params, const FeatureStore& store,
                               const Episode& episode, double scale = kDefaultLogitScale) {
  return episode_accuracy(forward_episode<double>(params, store, episode), scale);
}

}  // namespace urt
