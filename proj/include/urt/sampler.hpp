#pragma once

// Variable-way, variable-shot episode sampling and per-class set
// representations.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "urt/core_math.hpp"
#include "urt/error.hpp"
#include "urt/feature_store.hpp"
#include "urt/rng.hpp"

namespace urt {

struct SamplerPolicy {
  std::uint32_t n_min = 3;
  std::uint32_t n_max = 8;
  std::uint32_t k_max = 10;
  std::uint32_t q_per_class = 10;
  std::uint32_t primary_domain = 0;
  double primary_domain_prob = 0.5;

  void validate() const {
    require(n_min >= 2 && n_min <= n_max, ErrorKind::config,
            "sampler requires 2 <= n_min <= n_max");
    require(k_max >= 1, ErrorKind::config, "sampler.k_max must be >= 1");
    require(q_per_class >= 1, ErrorKind::config, "sampler.q_per_class must be >= 1");
    require(primary_domain_prob >= 0.0 && primary_domain_prob <= 1.0, ErrorKind::config,
            "sampler.primary_domain_prob must lie in [0, 1]");
  }
};

struct Episode {
  std::uint32_t domain_id = 0;
  Split split = Split::train;
  std::vector<std::uint64_t> classes;
  std::vector<std::vector<std::uint64_t>> support;  // per class
  std::vector<std::vector<std::uint64_t>> query;    // per class

  std::size_t ways() const noexcept { return classes.size(); }
  std::size_t support_size() const {
    std::size_t n = 0;
    for (const auto& s : support) n += s.size();
    return n;
  }
  std::size_t query_size() const {
    std::size_t n = 0;
    for (const auto& q : query) n += q.size();
    return n;
  }

  bool operator==(const Episode&) const = default;
};

namespace detail {

inline std::vector<const ClassGroup*> eligible_classes(const FeatureStore& store, Split split,
                                                       std::uint32_t domain,
                                                       const SamplerPolicy& policy) {
  std::vector<const ClassGroup*> out;
  for (const auto& g : store.classes(split, domain))
    if (g.rows.size() >= std::size_t{policy.q_per_class} + 1) out.push_back(&g);
  return out;
}

}  // namespace detail

/// Domains of `split` that can host an episode under `policy`, ascending.
inline std::vector<std::uint32_t> eligible_domains(const FeatureStore& store, Split split,
                                                   const SamplerPolicy& policy) {
  std::vector<std::uint32_t> out;
  for (std::uint32_t t = 0; t < store.domains(); ++t)
    if (detail::eligible_classes(store, split, t, policy).size() >= policy.n_min)
      out.push_back(t);
  return out;
}

/// Episode drawn from a fixed domain.
inline Episode sample_episode_in_domain(const FeatureStore& store, const SamplerPolicy& policy,
                                        Rng& rng, Split split, std::uint32_t domain) {
  policy.validate();
  const auto candidates = detail::eligible_classes(store, split, domain, policy);
  if (candidates.size() < policy.n_min)
    throw Error(ErrorKind::sampling,
                "domain " + std::to_string(domain) + " of split '" +
                    std::string(to_string(split)) + "' has " + std::to_string(candidates.size()) +
                    " classes with >= q_per_class+1 samples, n_min is " +
                    std::to_string(policy.n_min));

  Episode ep;
  ep.domain_id = domain;
  ep.split = split;
  const auto hi = std::min<std::uint64_t>(policy.n_max, candidates.size());
  const auto ways = static_cast<std::size_t>(rng.uniform_int(policy.n_min, hi));
  const auto picked = rng.choose(candidates, ways);
  for (const ClassGroup* g : picked) {
    const std::size_t available = g->rows.size();
    const auto k_hi = std::min<std::uint64_t>(policy.k_max, available - policy.q_per_class);
    const auto shots = static_cast<std::size_t>(rng.uniform_int(1, k_hi));
    const auto rows = rng.choose(g->rows, shots + policy.q_per_class);
    std::vector<std::uint64_t> support, query;
    for (std::size_t j = 0; j < rows.size(); ++j)
      (j < shots ? support : query).push_back(store.records()[rows[j]].sample_id);
    ep.classes.push_back(g->class_id);
    ep.support.push_back(std::move(support));
    ep.query.push_back(std::move(query));
  }
  return ep;
}

/// Domain = policy.primary_domain with probability primary_domain_prob, else
/// uniform over the remaining eligible domains.
inline Episode sample_episode(const FeatureStore& store, const SamplerPolicy& policy, Rng& rng,
                              Split split) {
  policy.validate();
  const auto domains = eligible_domains(store, split, policy);
  if (domains.empty())
    throw Error(ErrorKind::sampling, "split '" + std::string(to_string(split)) +
                                         "' has no domain with >= n_min (" +
                                         std::to_string(policy.n_min) +
                                         ") classes of >= q_per_class+1 samples");
  const bool primary_ok =
      std::find(domains.begin(), domains.end(), policy.primary_domain) != domains.end();
  std::vector<std::uint32_t> others;
  for (auto t : domains)
    if (!primary_ok || t != policy.primary_domain) others.push_back(t);

  std::uint32_t domain;
  if (primary_ok && (others.empty() || rng.bernoulli(policy.primary_domain_prob)))
    domain = policy.primary_domain;
  else
    domain = others[static_cast<std::size_t>(rng.uniform_int(0, others.size() - 1))];
  return sample_episode_in_domain(store, policy, rng, split, domain);
}

/// Per-class mean of the universal representation. Row c is r(S_c); its
/// block i (entries [i*d, (i+1)*d)) is r_i(S_c).
template <std::floating_point Real>
struct BasicSetReps {
  std::size_t backbones = 0;
  std::size_t dim = 0;
  Matrix<Real> reps;

  std::size_t classes() const noexcept { return reps.rows(); }
  std::span<const Real> concat(std::size_t c) const { return reps.row(c); }
  std::span<const Real> backbone(std::size_t c, std::size_t i) const {
    return reps.row(c).subspan(i * dim, dim);
  }
};

using SetReps = BasicSetReps<double>;

/// Samples are summed in ascending sample_id order, so any reordering within a
/// class yields bit-identical means.
template <std::floating_point Real = double>
BasicSetReps<Real> set_representations(const FeatureStore& store, const Episode& episode) {
  const std::size_t m = store.backbones();
  const std::size_t d = store.dim();
  BasicSetReps<Real> out{m, d, Matrix<Real>(episode.ways(), m * d)};
  for (std::size_t c = 0; c < episode.ways(); ++c) {
    require(!episode.support[c].empty(), ErrorKind::contract,
            "class " + std::to_string(episode.classes[c]) + " has an empty support set");
    std::vector<std::size_t> rows;
    for (auto id : episode.support[c]) rows.push_back(store.row_of(id));
    std::sort(rows.begin(), rows.end());
    auto dst = out.reps.row(c);
    for (std::size_t row : rows)
      for (std::size_t i = 0; i < m; ++i) {
        auto f = store.feature(row, i);
        for (std::size_t j = 0; j < d; ++j) dst[i * d + j] += Real(f[j]);
      }
    const Real inv = Real(1) / Real(rows.size());
    for (auto& x : dst) x *= inv;
  }
  return out;
}

}  // namespace urt
