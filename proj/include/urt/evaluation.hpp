#pragma once

// Task-level accuracy with 95% confidence intervals, average ranks, the
// head-count sweep, ablations and attention heatmaps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"
#include "urt/error.hpp"
#include "urt/feature_store.hpp"
#include "urt/parallel.hpp"
#include "urt/proto_head.hpp"
#include "urt/sampler.hpp"
#include "urt/training.hpp"
#include "urt/urt_layer.hpp"

namespace urt {

struct DomainReport {
  std::uint32_t domain_id = 0;
  std::size_t tasks = 0;
  double mean_accuracy = 0;
  double ci95 = 0;  // 1.96 * sample std / sqrt(tasks)

  bool operator==(const DomainReport&) const = default;
};

inline DomainReport summarize_accuracies(std::uint32_t domain, const std::vector<double>& acc) {
  require(!acc.empty(), ErrorKind::contract, "a domain report needs at least one task");
  const double n = static_cast<double>(acc.size());
  const double mean = std::accumulate(acc.begin(), acc.end(), 0.0) / n;
  double ss = 0;
  for (double a : acc) ss += (a - mean) * (a - mean);
  const double std_dev = acc.size() > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
  return {domain, acc.size(), mean, 1.96 * std_dev / std::sqrt(n)};
}

struct EvalSettings {
  Split split = Split::test;
  std::size_t tasks_per_domain = 600;
  std::uint64_t seed = 0;
  unsigned threads = 0;
};

namespace detail {
inline constexpr std::uint64_t kEvalStream = 0x10;
inline constexpr std::uint64_t kHeatmapStream = 0x11;
}  // namespace detail

/// Scores tasks_per_domain episodes of every eligible domain with `score`,
/// which maps (episode, task rng) to an accuracy in [0, 1]. Task streams are
/// keyed by (seed, domain, task index).
template <class Scorer>
std::vector<DomainReport> evaluate_tasks(const FeatureStore& store, const SamplerPolicy& policy,
                                         const EvalSettings& settings, Scorer&& score) {
  require(settings.tasks_per_domain >= 1, ErrorKind::config, "eval.tasks must be >= 1");
  const auto domains = eligible_domains(store, settings.split, policy);
  if (domains.empty())
    throw Error(ErrorKind::sampling, "split '" + std::string(to_string(settings.split)) +
                                         "' has no domain that satisfies the sampler policy");
  const std::size_t T = settings.tasks_per_domain;
  std::vector<double> acc(domains.size() * T);
  parallel_for(acc.size(), settings.threads, [&](std::size_t k) {
    const std::uint32_t domain = domains[k / T];
    Rng rng = Rng::derive(settings.seed, {detail::kEvalStream, domain, k % T});
    const auto ep = sample_episode_in_domain(store, policy, rng, settings.split, domain);
    acc[k] = score(ep, rng);
  });
  std::vector<DomainReport> out;
  for (std::size_t t = 0; t < domains.size(); ++t)
    out.push_back(summarize_accuracies(
        domains[t], std::vector<double>(acc.begin() + t * T, acc.begin() + (t + 1) * T)));
  return out;
}

inline std::vector<DomainReport> evaluate(const UrtParams& params, const FeatureStore& store,
                                          const SamplerPolicy& policy,
                                          const EvalSettings& settings,
                                          double scale = kDefaultLogitScale) {
  return evaluate_tasks(store, policy, settings, [&](const Episode& ep, Rng&) {
    return episode_accuracy(params, store, ep, scale);
  });
}

inline std::vector<DomainReport> evaluate(const TrainedModel& model, const FeatureStore& store,
                                          const EvalSettings& settings, bool use_best = false) {
  return evaluate(model.checkpoint_params(use_best), store, model.config.policy, settings,
                  model.config.scale);
}

inline double average_accuracy(const std::vector<DomainReport>& reports) {
  double s = 0;
  for (const auto& r : reports) s += r.mean_accuracy;
  return reports.empty() ? 0.0 : s / static_cast<double>(reports.size());
}

/// `table[method][domain]`. Per domain, methods are ranked by descending
/// accuracy (rank 1 = best) and tied methods share the mean of their ranks.
inline std::vector<double> average_rank(const std::vector<std::vector<double>>& table) {
  require(!table.empty() && !table.front().empty(), ErrorKind::dimension,
          "average_rank needs at least one method and one domain");
  const std::size_t methods = table.size(), domains = table.front().size();
  for (const auto& row : table)
    require(row.size() == domains, ErrorKind::dimension, "average_rank: ragged accuracy table");
  std::vector<double> total(methods, 0.0);
  std::vector<std::size_t> order(methods);
  for (std::size_t t = 0; t < domains; ++t) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return table[a][t] > table[b][t]; });
    for (std::size_t start = 0; start < methods;) {
      std::size_t end = start + 1;
      while (end < methods && table[order[end]][t] == table[order[start]][t]) ++end;
      const double rank = (static_cast<double>(start + 1) + static_cast<double>(end)) / 2.0;
      for (std::size_t k = start; k < end; ++k) total[order[k]] += rank;
      start = end;
    }
  }
  for (auto& r : total) r /= static_cast<double>(domains);
  return total;
}

// ---------------------------------------------------------------------------
// Head sweep

struct SweepRow {
  std::size_t heads = 0;
  std::vector<DomainReport> domains;
  double average_accuracy = 0;
  double average_rank = 0;
};

struct SweepReport {
  std::vector<SweepRow> rows;
  std::size_t selected_heads = 0;  // highest average accuracy, ties to fewer heads
};

/// Trains one model per head count and scores each on the validation split.
inline SweepReport head_sweep(const FeatureStore& store, const TrainConfig& base,
                              const std::vector<std::size_t>& head_counts, EvalSettings eval,
                              const TrainOptions& options = {}) {
  require(!head_counts.empty(), ErrorKind::config, "head sweep needs at least one head count");
  SweepReport report;
  for (std::size_t H : head_counts) {
    TrainConfig cfg = base;
    cfg.heads = H;
    if (options.log) options.log("sweep: training H=" + std::to_string(H));
    const auto model = train(store, cfg, options);
    SweepRow row;
    row.heads = H;
    row.domains = evaluate(model, store, eval);
    row.average_accuracy = average_accuracy(row.domains);
    report.rows.push_back(std::move(row));
  }
  std::vector<std::vector<double>> table;
  for (const auto& row : report.rows) {
    table.emplace_back();
    for (const auto& d : row.domains) table.back().push_back(d.mean_accuracy);
  }
  const auto ranks = average_rank(table);
  std::size_t best = 0;
  for (std::size_t k = 0; k < report.rows.size(); ++k) {
    report.rows[k].average_rank = ranks[k];
    if (report.rows[k].average_accuracy > report.rows[best].average_accuracy) best = k;
  }
  report.selected_heads = report.rows[best].heads;
  return report;
}

// ---------------------------------------------------------------------------
// Ablations

/// Trains `cfg` with one element of the layer removed and evaluates it.
inline std::vector<DomainReport> ablate(const FeatureStore& store, TrainConfig cfg, Ablation mode,
                                        const EvalSettings& eval,
                                        const TrainOptions& options = {}) {
  require(mode != Ablation::none, ErrorKind::config, "ablate needs a mode other than none");
  cfg.ablation = mode;
  return evaluate(train(store, cfg, options), store, eval);
}

/// Copy of `params` with constant keys (W^k = 0, b^k = 0): every head then
/// blends all backbones uniformly.
inline UrtParams with_constant_keys(UrtParams params) {
  for (auto& h : params.heads) {
    std::fill(h.wk.storage().begin(), h.wk.storage().end(), 0.0);
    std::fill(h.bk.begin(), h.bk.end(), 0.0);
  }
  return params;
}

// ---------------------------------------------------------------------------
// Attention heatmaps

struct HeatmapReport {
  std::size_t heads = 0;
  std::size_t backbones = 0;
  std::vector<std::uint32_t> domains;
  std::vector<std::size_t> task_counts;  // per domain
  std::vector<double> values;            // [head][domain index][backbone]

  double at(std::size_t head, std::size_t domain_index, std::size_t backbone) const {
    return values[(head * domains.size() + domain_index) * backbones + backbone];
  }
};

/// Mean alpha_i per head over episodes of each domain of `settings.split`.
inline HeatmapReport attention_heatmap(const UrtParams& params, const FeatureStore& store,
                                       const SamplerPolicy& policy,
                                       const EvalSettings& settings) {
  require(settings.tasks_per_domain >= 1, ErrorKind::config, "heatmap needs >= 1 task per domain");
  const auto domains = eligible_domains(store, settings.split, policy);
  if (domains.empty())
    throw Error(ErrorKind::sampling, "split '" + std::string(to_string(settings.split)) +
                                         "' has no domain that satisfies the sampler policy");
  const std::size_t T = settings.tasks_per_domain, H = params.head_count(),
                    m = params.backbones;
  std::vector<Matrix<double>> per_task(domains.size() * T);
  parallel_for(per_task.size(), settings.threads, [&](std::size_t k) {
    const std::uint32_t domain = domains[k / T];
    Rng rng = Rng::derive(settings.seed, {detail::kHeatmapStream, domain, k % T});
    const auto ep = sample_episode_in_domain(store, policy, rng, settings.split, domain);
    per_task[k] = attention<double>(params, set_representations<double>(store, ep)).stacked;
  });
  HeatmapReport out{H, m, domains, std::vector<std::size_t>(domains.size(), T),
                    std::vector<double>(H * domains.size() * m, 0.0)};
  for (std::size_t t = 0; t < domains.size(); ++t)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < m; ++i) {
        double s = 0;
        for (std::size_t k = 0; k < T; ++k) s += per_task[t * T + k](h, i);
        out.values[(h * domains.size() + t) * m + i] = s / static_cast<double>(T);
      }
  return out;
}

inline std::string heatmap_csv(const HeatmapReport& r) {
  std::string out = "head,domain,backbone,value\n";
  char buf[96];
  for (std::size_t h = 0; h < r.heads; ++h)
    for (std::size_t t = 0; t < r.domains.size(); ++t)
      for (std::size_t i = 0; i < r.backbones; ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%u,%zu,%.9f\n", h, r.domains[t], i, r.at(h, t, i));
        out += buf;
      }
  return out;
}

/// Binary 8-bit graymap for one head: rows are domains, columns backbones,
/// each cell `cell_px` pixels square; 0 -> black, 1 -> white.
inline std::string heatmap_pgm(const HeatmapReport& r, std::size_t head, std::size_t cell_px = 16) {
  require(head < r.heads && cell_px >= 1, ErrorKind::contract, "heatmap_pgm: bad head or cell size");
  const std::size_t width = r.backbones * cell_px, height = r.domains.size() * cell_px;
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const double v = std::clamp(r.at(head, y / cell_px, x / cell_px), 0.0, 1.0);
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
  return out;
}

// ---------------------------------------------------------------------------
// JSON helpers for report files

inline nlohmann::json to_json(const std::vector<DomainReport>& reports) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : reports)
    out.push_back({{"domain", r.domain_id},
                   {"tasks", r.tasks},
                   {"mean_accuracy", r.mean_accuracy},
                   {"ci95", r.ci95}});
  return out;
}

inline nlohmann::json to_json(const SweepReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : report.rows)
    rows.push_back({{"heads", row.heads},
                    {"domains", to_json(row.domains)},
                    {"average_accuracy", row.average_accuracy},
                    {"average_rank", row.average_rank}});
  return {{"rows", std::move(rows)}, {"selected_heads", report.selected_heads}};
}

inline nlohmann::json to_json(const HeatmapReport& r) {
  nlohmann::json heads = nlohmann::json::array();
  for (std::size_t h = 0; h < r.heads; ++h) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t t = 0; t < r.domains.size(); ++t) {
      std::vector<double> row(r.backbones);
      for (std::size_t i = 0; i < r.backbones; ++i) row[i] = r.at(h, t, i);
      rows.push_back(row);
    }
    heads.push_back(std::move(rows));
  }
  return {{"domains", r.domains}, {"task_counts", r.task_counts}, {"scores", std::move(heads)}};
}

}  // namespace urt
