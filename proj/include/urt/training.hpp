#pragma once

// Gradients of the episodic loss with respect to the URT parameters (the
// backbones stay frozen), the finite-difference oracle, optimizers with a
// cosine schedule, the episodic training loop and model files.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "urt/config_fields.hpp"
#include "urt/core_math.hpp"
#include "urt/error.hpp"
#include "urt/feature_store.hpp"
#include "urt/parallel.hpp"
#include "urt/proto_head.hpp"
#include "urt/rng.hpp"
#include "urt/sampler.hpp"
#include "urt/urt_layer.hpp"

namespace urt {

/// Per-head gradients; each HeadParams entry holds d(loss)/d(parameter).
struct GradientSet {
  std::vector<HeadParams> heads;

  bool operator==(const GradientSet&) const = default;
};

inline GradientSet zero_gradients(const UrtParams& params) {
  GradientSet g;
  for (const auto& p : params.heads)
    g.heads.push_back({DenseMatrix(p.wq.rows(), p.wq.cols()), DenseVector(p.bq.size(), 0.0),
                       DenseMatrix(p.wk.rows(), p.wk.cols()), DenseVector(p.bk.size(), 0.0)});
  return g;
}

/// Visits every scalar parameter in a fixed order: per head wq, bq, wk, bk.
template <class Heads, class Fn>
void for_each_scalar(Heads& heads, Fn&& fn) {
  for (auto& h : heads) {
    for (auto& x : h.wq.values()) fn(x);
    for (auto& x : h.bq) fn(x);
    for (auto& x : h.wk.values()) fn(x);
    for (auto& x : h.bk) fn(x);
  }
}

// ---------------------------------------------------------------------------
// Analytic gradients

namespace detail {

/// d cos(u, v) / du and / dv for the guarded, clamped cosine.
inline void cosine_grads(std::span<const double> u, std::span<const double> v, double weight,
                         std::span<double> gu, std::span<double> gv) {
  const double nu = norm2(u), nv = norm2(v);
  const double uv = dot(u, v);
  const double n = nu * nv;
  const double denom = std::max(n, kNormEps);
  const double raw = uv / denom;
  if (raw > 1.0 || raw < -1.0) return;  // clamped: flat
  if (n > kNormEps) {
    const double cu = raw / (nu * nu), cv = raw / (nv * nv);
    for (std::size_t j = 0; j < u.size(); ++j) {
      gu[j] += weight * (v[j] / denom - cu * u[j]);
      gv[j] += weight * (u[j] / denom - cv * v[j]);
    }
  } else {
    for (std::size_t j = 0; j < u.size(); ++j) {
      gu[j] += weight * v[j] / denom;
      gv[j] += weight * u[j] / denom;
    }
  }
}

}  // namespace detail

/// Loss and gradients of LossBreakdown::total. Chain: cross-entropy over
/// cosine logits -> prototypes and query embeddings -> per-head scores alpha
/// (plus the diversity penalty) -> per-class softmax -> logits -> q, k -> W, b.
inline std::pair<LossBreakdown, GradientSet> loss_and_gradients(const UrtParams& params,
                                                                const FeatureStore& store,
                                                                const Episode& episode,
                                                                double lambda,
                                                                double scale = kDefaultLogitScale) {
  require(episode.query_size() > 0, ErrorKind::contract, "episode has no query samples");
  const auto emb = forward_episode<double>(params, store, episode);
  const auto protos = prototypes(emb);
  const std::size_t m = params.backbones, d = params.dim, l = params.key_dim;
  const std::size_t H = params.head_count(), N = emb.ways(), width = H * d;
  const std::size_t nq = emb.query.rows(), ns = emb.support.rows();

  // Cross-entropy and its gradient w.r.t. query embeddings and prototypes.
  DenseMatrix g_query(nq, width), g_proto(N, width);
  double ce = 0;
  for (std::size_t x = 0; x < nq; ++x) {
    const auto probs = classify<double>(emb.query.row(x), protos, scale);
    const std::size_t y = emb.query_class[x];
    ce -= std::log(probs[y]);
    for (std::size_t c = 0; c < N; ++c) {
      const double gz = (probs[c] - (c == y ? 1.0 : 0.0)) / static_cast<double>(nq);
      detail::cosine_grads(emb.query.row(x), protos.centroids.row(c), gz * scale,
                           g_query.row(x), g_proto.row(c));
    }
  }
  ce /= static_cast<double>(nq);

  std::vector<std::size_t> shots(N, 0);
  for (auto c : emb.support_class) ++shots[c];

  // d loss / d A (H x m): embeddings are linear in A.
  const auto& A = emb.attention.stacked;
  DenseMatrix gA(H, m);
  auto accumulate = [&](std::uint64_t id, std::span<const double> g_phi) {
    const std::size_t row = store.row_of(id);
    for (std::size_t i = 0; i < m; ++i) {
      auto r = store.feature(row, i);
      for (std::size_t h = 0; h < H; ++h) gA(h, i) += dot(g_phi.subspan(h * d, d), r);
    }
  };
  for (std::size_t x = 0; x < nq; ++x) accumulate(emb.query_ids[x], g_query.row(x));
  DenseVector g_support(width);
  for (std::size_t s = 0; s < ns; ++s) {
    const std::size_t c = emb.support_class[s];
    const auto gp = g_proto.row(c);
    for (std::size_t j = 0; j < width; ++j) g_support[j] = gp[j] / static_cast<double>(shots[c]);
    accumulate(emb.support_ids[s], g_support);
  }

  // Penalty ||A A^T - I||_F^2 has gradient 4 (A A^T - I) A.
  const double penalty = head_diversity_penalty(A);
  if (lambda != 0.0) {
    for (std::size_t a = 0; a < H; ++a)
      for (std::size_t b = 0; b < H; ++b) {
        double g = dot(A.row(a), A.row(b)) - (a == b ? 1.0 : 0.0);
        g *= 4.0 * lambda;
        for (std::size_t i = 0; i < m; ++i) gA(a, i) += g * A(b, i);
      }
  }

  // b^k shifts every logit of a class by the same amount, which the softmax
  // over backbones ignores: its gradient is identically zero and stays so here.
  GradientSet grads = zero_gradients(params);
  const double inv_sqrt_l = 1.0 / std::sqrt(static_cast<double>(l));
  const DenseVector zeros(m * d, 0.0);
  DenseVector g_q(l), g_k(l);
  for (std::size_t h = 0; h < H; ++h) {
    const auto& head = emb.attention.heads[h];
    auto& gh = grads.heads[h];
    for (std::size_t c = 0; c < N; ++c) {
      // alpha_i = mean_c alpha_{i,c}; softmax backward per class.
      double mean_term = 0;
      for (std::size_t i = 0; i < m; ++i) mean_term += head.class_scores(i, c) * gA(h, i);
      std::fill(g_q.begin(), g_q.end(), 0.0);
      const auto q = head.queries.row(c);
      const auto rc = params.set_rep_input ? emb.set_reps.concat(c) : std::span<const double>(zeros);
      for (std::size_t i = 0; i < m; ++i) {
        const double g_beta =
            head.class_scores(i, c) * (gA(h, i) - mean_term) / static_cast<double>(N);
        const auto k = head.keys.row(c * m + i);
        const double gb = g_beta * inv_sqrt_l;
        for (std::size_t t = 0; t < l; ++t) {
          g_q[t] += gb * k[t];
          g_k[t] = gb * q[t];
        }
        const auto ri = params.set_rep_input ? emb.set_reps.backbone(c, i)
                                             : std::span<const double>(zeros).first(d);
        for (std::size_t t = 0; t < l; ++t) {
          auto wrow = gh.wk.row(t);
          for (std::size_t j = 0; j < d; ++j) wrow[j] += g_k[t] * ri[j];
        }
      }
      for (std::size_t t = 0; t < l; ++t) {
        gh.bq[t] += g_q[t];
        if (!params.set_rep_input) continue;
        auto wrow = gh.wq.row(t);
        for (std::size_t j = 0; j < rc.size(); ++j) wrow[j] += g_q[t] * rc[j];
      }
    }
  }
  return {LossBreakdown{ce, penalty, ce + lambda * penalty, lambda}, std::move(grads)};
}

// ---------------------------------------------------------------------------
// Finite-difference oracle

/// Central differences (f(theta + h) - f(theta - h)) / (2h) of an arbitrary
/// scalar function of the parameters. The divisor is the step actually taken
/// in double arithmetic.
template <class LossFn>
GradientSet finite_diff_gradients(UrtParams params, LossFn&& loss, double h) {
  GradientSet out = zero_gradients(params);
  std::vector<double*> coords;
  for_each_scalar(params.heads, [&](double& x) { coords.push_back(&x); });
  std::vector<double*> targets;
  for_each_scalar(out.heads, [&](double& x) { targets.push_back(&x); });
  for (std::size_t k = 0; k < coords.size(); ++k) {
    const double saved = *coords[k];
    const double up = saved + h, down = saved - h;
    *coords[k] = up;
    const auto f_up = loss(static_cast<const UrtParams&>(params));
    *coords[k] = down;
    const auto f_down = loss(static_cast<const UrtParams&>(params));
    *coords[k] = saved;
    *targets[k] = static_cast<double>((f_up - f_down) / (up - down));
  }
  return out;
}

/// Finite differences of the episode loss, evaluated with `Real` accumulation
/// (long double by default keeps cancellation noise far below the step).
template <std::floating_point Real = long double>
GradientSet finite_diff_gradients(const UrtParams& params, const FeatureStore& store,
                                  const Episode& episode, double lambda, double scale,
                                  double h = 1e-5) {
  return finite_diff_gradients(
      params,
      [&](const UrtParams& p) {
        return episode_loss<Real>(p, store, episode, lambda, scale).total;
      },
      h);
}

/// max over entries of |a - b| / max(|a|, |b|, floor).
inline double max_relative_error(const GradientSet& a, const GradientSet& b,
                                 double floor = 1e-8) {
  std::vector<double> va, vb;
  for_each_scalar(a.heads, [&](double x) { va.push_back(x); });
  for_each_scalar(b.heads, [&](double x) { vb.push_back(x); });
  require_same_length(va.size(), vb.size(), "max_relative_error");
  double worst = 0;
  for (std::size_t k = 0; k < va.size(); ++k) {
    const double denom = std::max({std::abs(va[k]), std::abs(vb[k]), floor});
    worst = std::max(worst, std::abs(va[k] - vb[k]) / denom);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Optimizers

inline double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double lr0) {
  require(total_steps >= 1 && step <= total_steps, ErrorKind::contract,
          "cosine_lr: step must lie in [0, total_steps]");
  return lr0 * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                         static_cast<double>(total_steps)));
}

namespace detail {

inline void require_matching(const UrtParams& params, const GradientSet& grads) {
  bool ok = grads.heads.size() == params.heads.size();
  for (std::size_t h = 0; ok && h < grads.heads.size(); ++h) {
    const auto &p = params.heads[h], &g = grads.heads[h];
    ok = p.wq.rows() == g.wq.rows() && p.wq.cols() == g.wq.cols() && p.wk.rows() == g.wk.rows() &&
         p.wk.cols() == g.wk.cols() && p.bq.size() == g.bq.size() && p.bk.size() == g.bk.size();
  }
  require(ok, ErrorKind::dimension, "gradient shapes do not match parameters");
}

}  // namespace detail

/// theta <- theta - lr * (g + weight_decay * theta) on weight matrices;
/// biases take theta - lr * g.
inline UrtParams sgd_step(UrtParams params, const GradientSet& grads, double lr,
                          double weight_decay) {
  detail::require_matching(params, grads);
  auto weights = [&](DenseMatrix& w, const DenseMatrix& g) {
    auto wv = w.values();
    auto gv = g.values();
    for (std::size_t k = 0; k < wv.size(); ++k) wv[k] -= lr * (gv[k] + weight_decay * wv[k]);
  };
  auto biases = [&](DenseVector& b, const DenseVector& g) {
    for (std::size_t k = 0; k < b.size(); ++k) b[k] -= lr * g[k];
  };
  for (std::size_t h = 0; h < params.heads.size(); ++h) {
    auto& p = params.heads[h];
    const auto& g = grads.heads[h];
    weights(p.wq, g.wq);
    biases(p.bq, g.bq);
    weights(p.wk, g.wk);
    biases(p.bk, g.bk);
  }
  return params;
}

enum class OptimizerKind { adam, sgd };

inline constexpr std::string_view to_string(OptimizerKind k) {
  return k == OptimizerKind::adam ? "adam" : "sgd";
}

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  throw Error(ErrorKind::config, "unknown optimizer '" + std::string(s) + "'");
}

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::adam;
  double momentum = 0.0;  // sgd only
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Stateful update rule. SGD with zero momentum reduces exactly to sgd_step;
/// Adam applies weight decay decoupled from the moment estimates.
class Optimizer {
 public:
  Optimizer(const UrtParams& params, OptimizerSettings settings)
      : settings_(settings), first_(zero_gradients(params)), second_(zero_gradients(params)) {}

  void step(UrtParams& params, const GradientSet& grads, double lr, double weight_decay) {
    detail::require_matching(params, grads);
    ++steps_;
    if (settings_.kind == OptimizerKind::sgd && settings_.momentum == 0.0) {
      params = sgd_step(std::move(params), grads, lr, weight_decay);
      return;
    }
    for (std::size_t h = 0; h < params.heads.size(); ++h) {
      auto& p = params.heads[h];
      const auto& g = grads.heads[h];
      update(p.wq.values(), g.wq.values(), first_.heads[h].wq.values(),
             second_.heads[h].wq.values(), lr, weight_decay);
      update(p.bq, g.bq, first_.heads[h].bq, second_.heads[h].bq, lr, 0.0);
      update(p.wk.values(), g.wk.values(), first_.heads[h].wk.values(),
             second_.heads[h].wk.values(), lr, weight_decay);
      update(p.bk, g.bk, first_.heads[h].bk, second_.heads[h].bk, lr, 0.0);
    }
  }

 private:
  void update(std::span<double> theta, std::span<const double> g, std::span<double> m1,
              std::span<double> m2, double lr, double decay) {
    if (settings_.kind == OptimizerKind::sgd) {
      for (std::size_t k = 0; k < theta.size(); ++k) {
        m1[k] = settings_.momentum * m1[k] + g[k] + decay * theta[k];
        theta[k] -= lr * m1[k];
      }
      return;
    }
    const double b1 = settings_.beta1, b2 = settings_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
    for (std::size_t k = 0; k < theta.size(); ++k) {
      m1[k] = b1 * m1[k] + (1.0 - b1) * g[k];
      m2[k] = b2 * m2[k] + (1.0 - b2) * g[k] * g[k];
      const double step = (m1[k] / c1) / (std::sqrt(m2[k] / c2) + settings_.epsilon);
      theta[k] -= lr * (step + decay * theta[k]);
    }
  }

  OptimizerSettings settings_;
  GradientSet first_;
  GradientSet second_;
  std::uint64_t steps_ = 0;
};

// ---------------------------------------------------------------------------
// Configuration and the training loop

enum class Ablation { none, no_wq, no_wk, no_setrep, no_reg };

inline constexpr std::string_view to_string(Ablation a) {
  switch (a) {
    case Ablation::none: return "none";
    case Ablation::no_wq: return "no_wq";
    case Ablation::no_wk: return "no_wk";
    case Ablation::no_setrep: return "no_setrep";
    case Ablation::no_reg: return "no_reg";
  }
  return "?";
}

inline Ablation parse_ablation(std::string_view s) {
  for (auto a : {Ablation::none, Ablation::no_wq, Ablation::no_wk, Ablation::no_setrep,
                 Ablation::no_reg})
    if (s == to_string(a)) return a;
  throw Error(ErrorKind::config, "unknown ablation mode '" + std::string(s) +
                                     "' (expected no_wq, no_wk, no_setrep or no_reg)");
}

struct TrainConfig {
  std::uint64_t episodes = 2000;
  double lr0 = 0.01;
  double lambda = 0.1;
  double weight_decay = 1e-5;
  double scale = kDefaultLogitScale;
  SamplerPolicy policy;
  std::size_t heads = 2;
  std::size_t key_dim = 1024;
  std::uint64_t seed = 0;
  OptimizerSettings optimizer;
  Ablation ablation = Ablation::none;
  std::uint64_t validate_every = 500;
  std::uint32_t validation_tasks = 60;
  std::uint64_t log_every = 100;

  double effective_lambda() const { return ablation == Ablation::no_reg ? 0.0 : lambda; }

  void validate() const {
    require(episodes >= 1, ErrorKind::config, "train.episodes must be >= 1");
    require(lr0 > 0, ErrorKind::config, "train.lr0 must be > 0");
    require(lambda >= 0, ErrorKind::config, "train.lambda must be >= 0");
    require(weight_decay >= 0, ErrorKind::config, "train.weight_decay must be >= 0");
    require(scale > 0, ErrorKind::config, "train.scale must be > 0");
    require(heads >= 1 && key_dim >= 1, ErrorKind::config, "urt.heads and urt.key_dim must be >= 1");
    require(optimizer.momentum >= 0 && optimizer.momentum < 1, ErrorKind::config,
            "train.momentum must lie in [0, 1)");
    require(optimizer.beta1 >= 0 && optimizer.beta1 < 1 && optimizer.beta2 >= 0 &&
                optimizer.beta2 < 1 && optimizer.epsilon > 0,
            ErrorKind::config, "adam settings out of range");
    policy.validate();
  }

  static std::vector<ConfigField<TrainConfig>> fields() {
    using C = TrainConfig;
    return {
        bind_field<C>("sampler.n_min", [](C& c) -> auto& { return c.policy.n_min; }),
        bind_field<C>("sampler.n_max", [](C& c) -> auto& { return c.policy.n_max; }),
        bind_field<C>("sampler.k_max", [](C& c) -> auto& { return c.policy.k_max; }),
        bind_field<C>("sampler.q_per_class", [](C& c) -> auto& { return c.policy.q_per_class; }),
        bind_field<C>("sampler.primary_domain",
                      [](C& c) -> auto& { return c.policy.primary_domain; }),
        bind_field<C>("sampler.primary_domain_prob",
                      [](C& c) -> auto& { return c.policy.primary_domain_prob; }),
        bind_field<C>("train.episodes", [](C& c) -> auto& { return c.episodes; }),
        bind_field<C>("train.lr0", [](C& c) -> auto& { return c.lr0; }),
        bind_field<C>("train.lambda", [](C& c) -> auto& { return c.lambda; }),
        bind_field<C>("train.weight_decay", [](C& c) -> auto& { return c.weight_decay; }),
        bind_field<C>("train.scale", [](C& c) -> auto& { return c.scale; }),
        bind_field<C>("train.seed", [](C& c) -> auto& { return c.seed; }),
        bind_enum<C>("train.optimizer", [](C& c) -> auto& { return c.optimizer.kind; },
                     [](OptimizerKind k) { return to_string(k); }, parse_optimizer),
        bind_field<C>("train.momentum", [](C& c) -> auto& { return c.optimizer.momentum; }),
        bind_field<C>("train.adam_beta1", [](C& c) -> auto& { return c.optimizer.beta1; }),
        bind_field<C>("train.adam_beta2", [](C& c) -> auto& { return c.optimizer.beta2; }),
        bind_field<C>("train.adam_epsilon", [](C& c) -> auto& { return c.optimizer.epsilon; }),
        bind_enum<C>("train.ablation", [](C& c) -> auto& { return c.ablation; },
                     [](Ablation a) { return to_string(a); }, parse_ablation),
        bind_field<C>("train.validate_every", [](C& c) -> auto& { return c.validate_every; }),
        bind_field<C>("train.validation_tasks",
                      [](C& c) -> auto& { return c.validation_tasks; }),
        bind_field<C>("train.log_every", [](C& c) -> auto& { return c.log_every; }),
        bind_field<C>("urt.heads", [](C& c) -> auto& { return c.heads; }),
        bind_field<C>("urt.key_dim", [](C& c) -> auto& { return c.key_dim; }),
    };
  }
};

struct Checkpoint {
  UrtParams params;
  std::uint64_t episode = 0;  // episodes completed when taken
  double validation_accuracy = 0;

  bool operator==(const Checkpoint&) const = default;
};

inline constexpr std::uint32_t kModelFormatVersion = 1;

struct TrainedModel {
  std::uint32_t format_version = kModelFormatVersion;
  UrtParams params;  // final
  std::optional<Checkpoint> best;
  TrainConfig config;
  std::string store_fingerprint;
  double initial_cross_entropy = 0;  // mean over the first min(100, episodes) episodes
  double final_cross_entropy = 0;    // mean over the last min(100, episodes) episodes
  double final_loss = 0;             // same window, total loss

  const UrtParams& checkpoint_params(bool use_best) const {
    return use_best && best ? best->params : params;
  }
};

struct TrainOptions {
  unsigned threads = 0;
  std::function<void(std::string_view)> log;
};

namespace detail {

inline constexpr std::uint64_t kInitStream = 0x1;
inline constexpr std::uint64_t kTrainStream = 0x2;
inline constexpr std::uint64_t kValidStream = 0x3;

inline void apply_pins(const TrainConfig& cfg, UrtParams& params) {
  for (auto& h : params.heads) {
    if (cfg.ablation == Ablation::no_wq) std::fill(h.wq.storage().begin(), h.wq.storage().end(), 0.0);
    if (cfg.ablation == Ablation::no_wk) std::fill(h.wk.storage().begin(), h.wk.storage().end(), 0.0);
  }
  params.set_rep_input = cfg.ablation != Ablation::no_setrep;
}

inline void mask_pinned(const TrainConfig& cfg, GradientSet& grads) {
  for (auto& h : grads.heads) {
    if (cfg.ablation == Ablation::no_wq) std::fill(h.wq.storage().begin(), h.wq.storage().end(), 0.0);
    if (cfg.ablation == Ablation::no_wk) std::fill(h.wk.storage().begin(), h.wk.storage().end(), 0.0);
  }
}

inline std::string format_double(double v, int precision = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", precision, v);
  return buf;
}

}  // namespace detail

/// Mean accuracy of `params` on `tasks` episodes of `split`, round-robin over
/// its eligible domains. Task i draws from its own stream, so the result does
/// not depend on the thread count.
inline double validation_accuracy(const UrtParams& params, const FeatureStore& store,
                                  const SamplerPolicy& policy, Split split, std::uint32_t tasks,
                                  std::uint64_t seed, double scale, unsigned threads) {
  const auto domains = eligible_domains(store, split, policy);
  if (domains.empty() || tasks == 0) return 0.0;
  std::vector<double> acc(tasks);
  parallel_for(tasks, threads, [&](std::size_t i) {
    Rng rng = Rng::derive(seed, {detail::kValidStream, i});
    const auto ep = sample_episode_in_domain(store, policy, rng, split, domains[i % domains.size()]);
    acc[i] = episode_accuracy(params, store, ep, scale);
  });
  double total = 0;
  for (double a : acc) total += a;
  return total / static_cast<double>(tasks);
}

/// Episodic training: sample -> forward -> loss and gradients -> update with a
/// cosine-annealed learning rate, one episode per update.
inline TrainedModel train(const FeatureStore& store, const TrainConfig& cfg,
                          const TrainOptions& options = {}) {
  cfg.validate();
  Rng init_rng = Rng::derive(cfg.seed, {detail::kInitStream});
  UrtParams params = init_params(store.backbones(), store.dim(), cfg.key_dim, cfg.heads, init_rng);
  detail::apply_pins(cfg, params);
  Optimizer optimizer(params, cfg.optimizer);

  TrainedModel model;
  model.config = cfg;
  model.store_fingerprint = store_fingerprint(store);
  const bool can_validate = !eligible_domains(store, Split::valid, cfg.policy).empty() &&
                            cfg.validate_every > 0 && cfg.validation_tasks > 0;

  const std::uint64_t window = std::min<std::uint64_t>(100, cfg.episodes);
  std::vector<double> ce_history, total_history;
  ce_history.reserve(cfg.episodes);
  total_history.reserve(cfg.episodes);
  const double lambda = cfg.effective_lambda();

  for (std::uint64_t step = 0; step < cfg.episodes; ++step) {
    Rng rng = Rng::derive(cfg.seed, {detail::kTrainStream, step});
    Episode ep;
    try {
      ep = sample_episode(store, cfg.policy, rng, Split::train);
    } catch (const Error& e) {
      throw Error(e.kind(), "training episode " + std::to_string(step) + ": " + e.what());
    }
    auto [loss, grads] = loss_and_gradients(params, store, ep, lambda, cfg.scale);
    detail::mask_pinned(cfg, grads);
    optimizer.step(params, grads, cosine_lr(step, cfg.episodes, cfg.lr0), cfg.weight_decay);
    ce_history.push_back(loss.cross_entropy);
    total_history.push_back(loss.total);

    const std::uint64_t done = step + 1;
    if (options.log && cfg.log_every > 0 && done % cfg.log_every == 0) {
      double ce = 0, total = 0;
      for (std::uint64_t k = done - cfg.log_every; k < done; ++k) {
        ce += ce_history[k];
        total += total_history[k];
      }
      const double n = static_cast<double>(cfg.log_every);
      options.log("episode " + std::to_string(done) + "/" + std::to_string(cfg.episodes) +
                  " lr " + detail::format_double(cosine_lr(step, cfg.episodes, cfg.lr0)) +
                  " loss " + detail::format_double(total / n) + " ce " +
                  detail::format_double(ce / n));
    }
    if (can_validate && (done % cfg.validate_every == 0 || done == cfg.episodes)) {
      const double acc = validation_accuracy(params, store, cfg.policy, Split::valid,
                                             cfg.validation_tasks, cfg.seed, cfg.scale,
                                             options.threads);
      if (!model.best || acc > model.best->validation_accuracy)
        model.best = Checkpoint{params, done, acc};
      if (options.log)
        options.log("validation after " + std::to_string(done) + " episodes: accuracy " +
                    detail::format_double(acc));
    }
  }

  auto mean = [](const std::vector<double>& v, std::size_t from, std::size_t to) {
    double s = 0;
    for (std::size_t k = from; k < to; ++k) s += v[k];
    return s / static_cast<double>(to - from);
  };
  model.params = std::move(params);
  model.initial_cross_entropy = mean(ce_history, 0, window);
  model.final_cross_entropy = mean(ce_history, cfg.episodes - window, cfg.episodes);
  model.final_loss = mean(total_history, cfg.episodes - window, cfg.episodes);
  return model;
}

// ---------------------------------------------------------------------------
// Model file: one JSON document, parameters as shortest round-trip decimals.

namespace detail {

inline nlohmann::json params_to_json(const UrtParams& p) {
  nlohmann::json heads = nlohmann::json::array();
  for (const auto& h : p.heads)
    heads.push_back({{"wq", h.wq.storage()}, {"bq", h.bq}, {"wk", h.wk.storage()}, {"bk", h.bk}});
  return {{"heads", std::move(heads)}, {"set_rep_input", p.set_rep_input}};
}

inline UrtParams params_from_json(const nlohmann::json& j, std::size_t m, std::size_t d,
                                  std::size_t l) {
  UrtParams p{m, d, l, {}, j.at("set_rep_input").get<bool>()};
  for (const auto& h : j.at("heads")) {
    HeadParams head;
    head.wq = DenseMatrix(l, m * d, h.at("wq").get<std::vector<double>>());
    head.bq = h.at("bq").get<DenseVector>();
    head.wk = DenseMatrix(l, d, h.at("wk").get<std::vector<double>>());
    head.bk = h.at("bk").get<DenseVector>();
    p.heads.push_back(std::move(head));
  }
  p.validate();
  return p;
}

}  // namespace detail

inline nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  return fields_to_json(cfg, TrainConfig::fields());
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  const auto fields = TrainConfig::fields();
  for (const auto& [key, value] : j.items())
    if (!apply_field(cfg, fields, key, value))
      throw Error(ErrorKind::config, "unknown config key '" + key + "'");
  return cfg;
}

inline std::string model_text(const TrainedModel& model) {
  const auto& p = model.params;
  nlohmann::json doc = {
      {"format", "urt-model"},
      {"version", model.format_version},
      {"store_fingerprint", model.store_fingerprint},
      {"backbones", p.backbones},
      {"dim", p.dim},
      {"key_dim", p.key_dim},
      {"heads", p.head_count()},
      {"config", train_config_to_json(model.config)},
      {"initial_cross_entropy", model.initial_cross_entropy},
      {"final_cross_entropy", model.final_cross_entropy},
      {"final_loss", model.final_loss},
      {"final", detail::params_to_json(p)},
      {"best", nullptr},
  };
  if (model.best) {
    auto best = detail::params_to_json(model.best->params);
    best["episode"] = model.best->episode;
    best["validation_accuracy"] = model.best->validation_accuracy;
    doc["best"] = std::move(best);
  }
  return doc.dump() + "\n";
}

inline void save_model(const TrainedModel& model, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  detail::write_file(path, model_text(model));
}

inline TrainedModel load_model(const std::filesystem::path& path) {
  const std::string text = detail::read_file(path);
  const std::string name = path.string();
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::format, name + ": malformed model file: " + e.what());
  }
  if (!doc.is_object() || doc.value("format", std::string()) != "urt-model")
    throw Error(ErrorKind::format, name + ": not a URT model file");
  try {
    const auto version = doc.at("version").get<std::uint32_t>();
    if (version != kModelFormatVersion)
      throw Error(ErrorKind::version, name + ": unsupported model format version " +
                                          std::to_string(version) + " (expected " +
                                          std::to_string(kModelFormatVersion) + ")");
    TrainedModel model;
    model.format_version = version;
    model.store_fingerprint = doc.at("store_fingerprint").get<std::string>();
    model.config = train_config_from_json(doc.at("config"));
    const auto m = doc.at("backbones").get<std::size_t>();
    const auto d = doc.at("dim").get<std::size_t>();
    const auto l = doc.at("key_dim").get<std::size_t>();
    model.params = detail::params_from_json(doc.at("final"), m, d, l);
    require(model.params.head_count() == doc.at("heads").get<std::size_t>(),
            ErrorKind::dimension, name + ": head count disagrees with parameter arrays");
    model.initial_cross_entropy = doc.at("initial_cross_entropy").get<double>();
    model.final_cross_entropy = doc.at("final_cross_entropy").get<double>();
    model.final_loss = doc.at("final_loss").get<double>();
    if (!doc.at("best").is_null()) {
      const auto& b = doc.at("best");
      model.best = Checkpoint{detail::params_from_json(b, m, d, l),
                              b.at("episode").get<std::uint64_t>(),
                              b.at("validation_accuracy").get<double>()};
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::format, name + ": malformed model file: " + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::version) throw;
    throw Error(e.kind(), name + ": " + e.what());
  }
}

/// Rejects a model whose shapes or store fingerprint do not match `store`.
inline void check_compatible(const TrainedModel& model, const FeatureStore& store) {
  const auto& p = model.params;
  require(p.backbones == store.backbones() && p.dim == store.dim(), ErrorKind::dimension,
          "model expects m=" + std::to_string(p.backbones) + ", d=" + std::to_string(p.dim) +
              " but store has m=" + std::to_string(store.backbones()) +
              ", d=" + std::to_string(store.dim()));
  const auto fp = store_fingerprint(store);
  require(fp == model.store_fingerprint, ErrorKind::contract,
          "store fingerprint " + fp + " does not match the model's training store " +
              model.store_fingerprint);
}

}  // namespace urt
