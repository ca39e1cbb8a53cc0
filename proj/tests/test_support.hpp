#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "urt/urt.hpp"

namespace urt::testing {

/// Store built from explicit per-sample features. `rows[s][i]` is backbone i
/// of sample s; sample ids are 0..n-1.
inline FeatureStore explicit_store(const std::vector<SampleRecord>& records,
                                   const std::vector<std::vector<std::vector<double>>>& rows,
                                   bool normalized = false) {
  const std::size_t m = rows.front().size(), d = rows.front().front().size();
  std::vector<std::vector<double>> blocks(m);
  for (const auto& sample : rows)
    for (std::size_t i = 0; i < m; ++i)
      blocks[i].insert(blocks[i].end(), sample[i].begin(), sample[i].end());
  return FeatureStore(m, d, normalized, records, std::move(blocks));
}

/// Random-feature store with `classes` classes of `per_class` samples each in
/// one domain and split.
inline FeatureStore random_store(Rng& rng, std::size_t m, std::size_t d, std::size_t classes,
                                 std::size_t per_class, Split split = Split::train) {
  std::vector<SampleRecord> records;
  std::vector<std::vector<double>> blocks(m);
  std::uint64_t id = 0;
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t s = 0; s < per_class; ++s) {
      records.push_back({id++, 0, c, split});
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) blocks[i].push_back(rng.normal());
    }
  return FeatureStore(m, d, false, std::move(records), std::move(blocks));
}

inline UrtParams random_params(Rng& rng, std::size_t m, std::size_t d, std::size_t l,
                               std::size_t H, double s = 0.5) {
  UrtParams p{m, d, l, {}, true};
  for (std::size_t h = 0; h < H; ++h) {
    HeadParams hp{DenseMatrix(l, m * d), DenseVector(l), DenseMatrix(l, d), DenseVector(l)};
    for (auto& x : hp.wq.values()) x = rng.uniform(-s, s);
    for (auto& x : hp.bq) x = rng.uniform(-s, s);
    for (auto& x : hp.wk.values()) x = rng.uniform(-s, s);
    for (auto& x : hp.bk) x = rng.uniform(-s, s);
    p.heads.push_back(std::move(hp));
  }
  return p;
}

/// Episode over classes 0..N-1 of `store` using the first k support and
/// following q query samples of each class.
inline Episode fixed_episode(const FeatureStore& store, const std::vector<std::size_t>& shots,
                             std::size_t queries) {
  Episode ep;
  const auto& groups = store.classes(Split::train, 0);
  for (std::size_t c = 0; c < shots.size(); ++c) {
    const auto& g = groups.at(c);
    ep.classes.push_back(g.class_id);
    ep.support.emplace_back();
    ep.query.emplace_back();
    for (std::size_t k = 0; k < shots[c] + queries; ++k)
      (k < shots[c] ? ep.support.back() : ep.query.back())
          .push_back(store.records()[g.rows.at(k)].sample_id);
  }
  return ep;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("urt_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  static std::uint64_t& counter() {
    static std::uint64_t n = 0;
    return n;
  }
  std::filesystem::path path_;
};

}  // namespace urt::testing
