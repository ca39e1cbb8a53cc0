#pragma once

// Random small problems for checking analytic gradients against finite
// differences.

#include <algorithm>
#include <cstdint>
#include <vector>

#include "urt/feature_store.hpp"
#include "urt/rng.hpp"
#include "urt/sampler.hpp"
#include "urt/training.hpp"
#include "urt/urt_layer.hpp"

namespace urt {

struct GradcheckCase {
  FeatureStore store;
  UrtParams params;
  Episode episode;
  double lambda = 0;
  double scale = 1;
};

/// m <= 4, d <= 8, l <= 6, H <= 3, N <= 4 with per-class shot counts drawn
/// independently (imbalanced support sets).
inline GradcheckCase random_gradcheck_case(Rng& rng) {
  const auto m = static_cast<std::size_t>(rng.uniform_int(1, 4));
  const auto d = static_cast<std::size_t>(rng.uniform_int(2, 8));
  const auto l = static_cast<std::size_t>(rng.uniform_int(1, 6));
  const auto H = static_cast<std::size_t>(rng.uniform_int(1, 3));
  const auto N = static_cast<std::size_t>(rng.uniform_int(2, 4));

  std::vector<SampleRecord> records;
  std::vector<std::vector<double>> features(m);
  Episode ep;
  ep.split = Split::train;
  std::uint64_t next_id = 0;
  for (std::size_t c = 0; c < N; ++c) {
    const auto shots = rng.uniform_int(1, 4);
    const auto queries = rng.uniform_int(1, 3);
    ep.classes.push_back(c);
    ep.support.emplace_back();
    ep.query.emplace_back();
    for (std::uint64_t s = 0; s < shots + queries; ++s) {
      const std::uint64_t id = next_id++;
      records.push_back({id, 0, c, Split::train});
      (s < shots ? ep.support.back() : ep.query.back()).push_back(id);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) features[i].push_back(rng.normal());
    }
  }

  UrtParams params{m, d, l, {}, true};
  auto fill = [&rng](std::span<double> v, double s) {
    for (auto& x : v) x = rng.uniform(-s, s);
  };
  for (std::size_t h = 0; h < H; ++h) {
    HeadParams p{DenseMatrix(l, m * d), DenseVector(l), DenseMatrix(l, d), DenseVector(l)};
    fill(p.wq.values(), 0.5);
    fill(p.bq, 0.5);
    fill(p.wk.values(), 0.5);
    fill(p.bk, 0.5);
    params.heads.push_back(std::move(p));
  }
  GradcheckCase out{FeatureStore(m, d, false, std::move(records), std::move(features)),
                    std::move(params), std::move(ep), rng.uniform(0.0, 1.0),
                    rng.uniform(1.0, 10.0)};
  return out;
}

struct GradcheckSummary {
  std::size_t trials = 0;
  std::size_t coordinates = 0;
  double max_relative_error = 0;
};

inline GradcheckSummary run_gradcheck(std::uint64_t seed, std::size_t trials, double h = 1e-5) {
  GradcheckSummary summary;
  summary.trials = trials;
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng = Rng::derive(seed, {0x47, t});
    const auto gc = random_gradcheck_case(rng);
    const auto analytic =
        loss_and_gradients(gc.params, gc.store, gc.episode, gc.lambda, gc.scale).second;
    const auto numeric =
        finite_diff_gradients(gc.params, gc.store, gc.episode, gc.lambda, gc.scale, h);
    summary.max_relative_error =
        std::max(summary.max_relative_error, max_relative_error(analytic, numeric));
    for_each_scalar(analytic.heads, [&](double) { ++summary.coordinates; });
  }
  return summary;
}

}  // namespace urt
