#pragma once

// Frozen per-backbone features: the in-memory store, the synthetic
// multi-domain generator that stands in for pre-trained backbones, and the
// on-disk format (manifest.json + backbone_<i>.feat).

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "urt/core_math.hpp"
#include "urt/error.hpp"
#include "urt/rng.hpp"

namespace urt {

enum class Split : std::uint8_t { train, valid, test };

inline constexpr std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  throw Error(ErrorKind::config, "unknown split '" + std::string(s) + "'");
}

struct SampleRecord {
  std::uint64_t sample_id = 0;
  std::uint32_t domain_id = 0;
  std::uint64_t class_id = 0;
  Split split = Split::train;

  bool operator==(const SampleRecord&) const = default;
};

/// Store rows of one class, ascending by sample_id.
struct ClassGroup {
  std::uint64_t class_id = 0;
  std::uint32_t domain_id = 0;
  Split split = Split::train;
  std::vector<std::size_t> rows;
};

class FeatureStore {
 public:
  FeatureStore() = default;

  /// `features[i]` holds backbone i as a records.size() x dim row-major block,
  /// rows in record order. Records must be strictly ascending by sample_id.
  FeatureStore(std::size_t backbones, std::size_t dim, bool normalized,
               std::vector<SampleRecord> records, std::vector<std::vector<double>> features)
      : backbones_(backbones),
        dim_(dim),
        normalized_(normalized),
        records_(std::move(records)),
        features_(std::move(features)) {
    validate();
    build_index();
  }

  std::size_t backbones() const noexcept { return backbones_; }
  std::size_t dim() const noexcept { return dim_; }
  bool normalized() const noexcept { return normalized_; }
  std::size_t size() const noexcept { return records_.size(); }
  std::size_t domains() const noexcept { return domain_count_; }
  const std::vector<SampleRecord>& records() const noexcept { return records_; }

  std::span<const double> feature(std::size_t row, std::size_t backbone) const {
    return {features_[backbone].data() + row * dim_, dim_};
  }
  const std::vector<double>& backbone_block(std::size_t backbone) const {
    return features_[backbone];
  }

  std::size_t row_of(std::uint64_t sample_id) const {
    auto it = row_by_id_.find(sample_id);
    if (it == row_by_id_.end())
      throw Error(ErrorKind::lookup, "unknown sample " + std::to_string(sample_id));
    return it->second;
  }

  const SampleRecord& record(std::uint64_t sample_id) const {
    return records_[row_of(sample_id)];
  }

  /// Classes of one domain within one split, ascending by class_id.
  const std::vector<ClassGroup>& classes(Split split, std::uint32_t domain) const {
    static const std::vector<ClassGroup> kNone;
    auto it = groups_.find({split, domain});
    return it == groups_.end() ? kNone : it->second;
  }

  bool operator==(const FeatureStore& other) const {
    return backbones_ == other.backbones_ && dim_ == other.dim_ &&
           normalized_ == other.normalized_ && records_ == other.records_ &&
           features_ == other.features_;
  }

 private:
  void validate() const {
    require(backbones_ >= 1 && dim_ >= 1, ErrorKind::format,
            "store needs at least one backbone and dim >= 1");
    require(features_.size() == backbones_, ErrorKind::format,
            "store has " + std::to_string(features_.size()) + " feature blocks for " +
                std::to_string(backbones_) + " backbones");
    for (std::size_t i = 0; i < records_.size(); ++i) {
      if (i > 0 && records_[i].sample_id <= records_[i - 1].sample_id)
        throw Error(ErrorKind::format, "sample ids must be strictly ascending (sample " +
                                           std::to_string(records_[i].sample_id) + ")");
    }
    std::unordered_map<std::uint64_t, std::pair<std::uint32_t, Split>> owner;
    for (const auto& r : records_) {
      auto [it, inserted] = owner.emplace(r.class_id, std::pair{r.domain_id, r.split});
      if (inserted) continue;
      if (it->second.first != r.domain_id)
        throw Error(ErrorKind::format,
                    "class " + std::to_string(r.class_id) + " spans more than one domain");
      if (it->second.second != r.split)
        throw Error(ErrorKind::format,
                    "class " + std::to_string(r.class_id) + " appears in more than one split");
    }
    for (std::size_t b = 0; b < backbones_; ++b) {
      require(features_[b].size() == records_.size() * dim_, ErrorKind::format,
              "backbone " + std::to_string(b) + " has " + std::to_string(features_[b].size()) +
                  " values, expected " + std::to_string(records_.size() * dim_));
      const std::span<const double> block(features_[b]);
      require(all_finite(block), ErrorKind::format,
              "backbone " + std::to_string(b) + " contains non-finite values");
      if (!normalized_) continue;
      for (std::size_t row = 0; row < records_.size(); ++row) {
        const double n = norm2(block.subspan(row * dim_, dim_));
        if (n != 0.0 && std::abs(n - 1.0) > 1e-6)
          throw Error(ErrorKind::format, "store flagged normalized but backbone " +
                                             std::to_string(b) + " row " +
                                             std::to_string(row) + " has norm " +
                                             std::to_string(n));
      }
    }
  }

  void build_index() {
    row_by_id_.reserve(records_.size());
    std::map<std::uint64_t, ClassGroup> by_class;
    for (std::size_t row = 0; row < records_.size(); ++row) {
      const auto& r = records_[row];
      row_by_id_.emplace(r.sample_id, row);
      auto& g = by_class[r.class_id];
      g.class_id = r.class_id;
      g.domain_id = r.domain_id;
      g.split = r.split;
      g.rows.push_back(row);
      domain_count_ = std::max<std::size_t>(domain_count_, r.domain_id + 1);
    }
    for (auto& [id, g] : by_class) groups_[{g.split, g.domain_id}].push_back(std::move(g));
  }

  std::size_t backbones_ = 0;
  std::size_t dim_ = 0;
  bool normalized_ = false;
  std::vector<SampleRecord> records_;
  std::vector<std::vector<double>> features_;
  std::unordered_map<std::uint64_t, std::size_t> row_by_id_;
  std::map<std::pair<Split, std::uint32_t>, std::vector<ClassGroup>> groups_;
  std::size_t domain_count_ = 0;
};

/// r(x) = concat(r_1(x), ..., r_m(x)).
inline DenseVector universal_representation(const FeatureStore& store, std::uint64_t sample_id) {
  const std::size_t row = store.row_of(sample_id);
  DenseVector out;
  out.reserve(store.backbones() * store.dim());
  for (std::size_t b = 0; b < store.backbones(); ++b) {
    auto f = store.feature(row, b);
    out.insert(out.end(), f.begin(), f.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic backbones

struct SynthConfig {
  std::uint32_t domains = 4;
  std::uint32_t classes_train = 20;
  std::uint32_t classes_valid = 10;
  std::uint32_t classes_test = 10;
  std::uint32_t samples_per_class = 80;
  std::uint32_t dim = 64;
  double sigma_in = 0.1;
  double sigma_out = 0.3;
  /// Class information for domain t is also carried by backbone (t+1) mod D,
  /// under an independent signature.
  bool split_signal = false;
  std::uint64_t seed = 0;

  void validate() const {
    require(domains >= 2, ErrorKind::config, "synth.domains must be >= 2");
    require(dim >= 2, ErrorKind::config, "synth.dim must be >= 2");
    require(sigma_in > 0 && sigma_out > 0, ErrorKind::config,
            "synth.sigma_in and synth.sigma_out must be > 0");
    require(samples_per_class >= 1, ErrorKind::config, "synth.samples_per_class must be >= 1");
  }
};

namespace detail {

inline DenseVector random_unit(Rng& rng, std::size_t dim) {
  DenseVector v(dim);
  for (auto& x : v) x = rng.normal();
  return l2_normalize(v);
}

inline void write_noisy_unit(Rng& rng, std::span<const double> center, double sigma,
                             std::span<double> out) {
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = center[j] + sigma * rng.normal();
  const double n = norm2(std::span<const double>(out));
  if (n > kNormEps)
    for (auto& x : out) x /= n;
}

}  // namespace detail

/// Backbone i = domain i. For a sample of class c in domain t, the in-domain
/// backbone outputs normalize(u_{t,c} + sigma_in * eps); every other backbone i
/// outputs normalize(v_{i,t} + sigma_out * eps), a domain-level signal with no
/// class information.
inline FeatureStore generate_synthetic_store(const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t D = cfg.domains;
  const std::size_t d = cfg.dim;
  Rng rng(cfg.seed);

  std::vector<DenseVector> domain_signal(D * D);  // [backbone * D + domain]
  for (std::size_t i = 0; i < D; ++i)
    for (std::size_t t = 0; t < D; ++t)
      if (i != t) domain_signal[i * D + t] = detail::random_unit(rng, d);

  std::vector<SampleRecord> records;
  std::vector<std::vector<double>> features(D);
  std::uint64_t next_class = 0;
  std::uint64_t next_sample = 0;
  const std::pair<Split, std::uint32_t> layout[] = {
      {Split::train, cfg.classes_train},
      {Split::valid, cfg.classes_valid},
      {Split::test, cfg.classes_test}};

  for (const auto& [split, class_count] : layout) {
    for (std::uint32_t t = 0; t < D; ++t) {
      for (std::uint32_t k = 0; k < class_count; ++k) {
        const std::uint64_t class_id = next_class++;
        const DenseVector signature = detail::random_unit(rng, d);
        const DenseVector second =
            cfg.split_signal ? detail::random_unit(rng, d) : DenseVector{};
        const std::size_t partner = (t + 1) % D;
        for (std::uint32_t s = 0; s < cfg.samples_per_class; ++s) {
          records.push_back({next_sample++, t, class_id, split});
          for (std::size_t i = 0; i < D; ++i) {
            auto& block = features[i];
            block.resize(block.size() + d);
            std::span<double> out(block.data() + block.size() - d, d);
            if (i == t) {
              detail::write_noisy_unit(rng, signature, cfg.sigma_in, out);
            } else if (cfg.split_signal && i == partner) {
              detail::write_noisy_unit(rng, second, cfg.sigma_in, out);
            } else {
              detail::write_noisy_unit(rng, domain_signal[i * D + t], cfg.sigma_out, out);
            }
          }
        }
      }
    }
  }
  return FeatureStore(D, d, true, std::move(records), std::move(features));
}

// ---------------------------------------------------------------------------
// On-disk format
//
// backbone_<i>.feat: "URTF" | version u32 | n_samples u64 | dim u32 |
//                    n_samples rows of dim little-endian float32, ascending sample_id.
// manifest.json:     backbone count, dim, normalized flag and the sample table.

inline constexpr std::uint32_t kFeatureFormatVersion = 1;
inline constexpr char kFeatureMagic[4] = {'U', 'R', 'T', 'F'};
inline constexpr std::size_t kFeatureHeaderBytes = 4 + 4 + 8 + 4;

namespace detail {

template <class T>
void put_le(std::string& out, T value) {
  using U = std::make_unsigned_t<
      std::conditional_t<std::is_floating_point_v<T>,
                         std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>, T>>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i)
    out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

template <class T>
T get_le(const unsigned char* p) {
  using U = std::make_unsigned_t<
      std::conditional_t<std::is_floating_point_v<T>,
                         std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>, T>>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(p[i]) << (8 * i);
  return std::bit_cast<T>(bits);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, path.string() + ": cannot open");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, path.string() + ": cannot open for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::io, path.string() + ": write failed");
}

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = kDigits[v & 0xf];
  return s;
}

}  // namespace detail

inline std::string feature_file_name(std::size_t backbone) {
  return "backbone_" + std::to_string(backbone) + ".feat";
}

inline std::string manifest_text(const FeatureStore& store) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& r : store.records())
    samples.push_back({r.sample_id, r.domain_id, r.class_id, to_string(r.split)});
  nlohmann::json doc = {
      {"format", "urt-feature-store"},
      {"version", kFeatureFormatVersion},
      {"backbones", store.backbones()},
      {"dim", store.dim()},
      {"normalized", store.normalized()},
      {"normalization", "l2 per sample per backbone"},
      {"columns", {"sample_id", "domain_id", "class_id", "split"}},
      {"samples", std::move(samples)},
  };
  return doc.dump(1) + "\n";
}

/// Hash of the manifest; models record it to detect a mismatched store.
inline std::string store_fingerprint(const FeatureStore& store) {
  return detail::hex64(detail::fnv1a64(manifest_text(store)));
}

inline void save_store(const FeatureStore& store, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::io, dir.string() + ": " + ec.message());
  detail::write_file(dir / "manifest.json", manifest_text(store));
  const std::size_t n = store.size();
  for (std::size_t b = 0; b < store.backbones(); ++b) {
    std::string bytes;
    bytes.reserve(kFeatureHeaderBytes + n * store.dim() * 4);
    bytes.append(kFeatureMagic, 4);
    detail::put_le<std::uint32_t>(bytes, kFeatureFormatVersion);
    detail::put_le<std::uint64_t>(bytes, n);
    detail::put_le<std::uint32_t>(bytes, static_cast<std::uint32_t>(store.dim()));
    for (double v : store.backbone_block(b)) detail::put_le<float>(bytes, static_cast<float>(v));
    detail::write_file(dir / feature_file_name(b), bytes);
  }
}

inline FeatureStore load_store(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  const std::string text = detail::read_file(manifest_path);
  const std::string mname = manifest_path.string();
  auto fail = [](const std::string& file, const std::string& what) -> Error {
    return Error(ErrorKind::format, file + ": " + what);
  };

  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw fail(mname, std::string("malformed manifest: ") + e.what());
  }

  std::size_t m = 0, d = 0;
  bool normalized = false;
  std::vector<SampleRecord> records;
  try {
    if (doc.value("format", std::string()) != "urt-feature-store")
      throw fail(mname, "not a feature-store manifest");
    if (doc.at("version").get<std::uint32_t>() != kFeatureFormatVersion)
      throw fail(mname, "version mismatch (found " + doc.at("version").dump() + ", expected " +
                            std::to_string(kFeatureFormatVersion) + ")");
    m = doc.at("backbones").get<std::size_t>();
    d = doc.at("dim").get<std::size_t>();
    normalized = doc.at("normalized").get<bool>();
    for (const auto& row : doc.at("samples")) {
      if (!row.is_array() || row.size() != 4) throw fail(mname, "sample rows must have 4 fields");
      records.push_back({row[0].get<std::uint64_t>(), row[1].get<std::uint32_t>(),
                         row[2].get<std::uint64_t>(), parse_split(row[3].get<std::string>())});
    }
  } catch (const nlohmann::json::exception& e) {
    throw fail(mname, std::string("malformed manifest: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::format) throw;
    throw fail(mname, e.what());
  }
  if (m == 0 || d == 0) throw fail(mname, "backbones and dim must be >= 1");

  const std::size_t n = records.size();
  std::vector<std::vector<double>> features(m);
  for (std::size_t b = 0; b < m; ++b) {
    const auto path = dir / feature_file_name(b);
    const std::string fname = path.string();
    const std::string bytes = detail::read_file(path);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 4 || std::memcmp(p, kFeatureMagic, 4) != 0)
      throw fail(fname, "bad magic");
    if (bytes.size() < kFeatureHeaderBytes) throw fail(fname, "truncated header");
    const auto version = detail::get_le<std::uint32_t>(p + 4);
    if (version != kFeatureFormatVersion)
      throw fail(fname, "version mismatch (found " + std::to_string(version) + ", expected " +
                            std::to_string(kFeatureFormatVersion) + ")");
    const auto rows = detail::get_le<std::uint64_t>(p + 8);
    const auto dim = detail::get_le<std::uint32_t>(p + 16);
    if (dim != d)
      throw fail(fname, "dimension mismatch (file " + std::to_string(dim) + ", manifest " +
                            std::to_string(d) + ")");
    const std::size_t payload = bytes.size() - kFeatureHeaderBytes;
    if (rows > payload / (std::size_t{4} * dim) || payload < rows * dim * 4)
      throw fail(fname, "truncated (header declares " + std::to_string(rows) + " rows, file holds " +
                            std::to_string(payload / (std::size_t{4} * dim)) + ")");
    if (payload != rows * dim * 4) throw fail(fname, "trailing bytes after last row");
    if (rows != n)
      throw fail(fname, "count mismatch (manifest declares " + std::to_string(n) +
                            " samples, file has " + std::to_string(rows) + " rows)");
    auto& block = features[b];
    block.resize(n * d);
    for (std::size_t k = 0; k < n * d; ++k)
      block[k] = detail::get_le<float>(p + kFeatureHeaderBytes + 4 * k);
  }
  try {
    return FeatureStore(m, d, normalized, std::move(records), std::move(features));
  } catch (const Error& e) {
    throw fail(mname, e.what());
  }
}

}  // namespace urt
