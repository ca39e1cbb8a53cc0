// urt: command-line driver for synthetic store generation, training,
// evaluation, head sweeps, ablations, gradient checks and heatmap export.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "urt/urt.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;

struct ConfigInputs {
  std::string path;
  std::vector<std::string> overrides;
};

urt::RunConfig resolve_config(const ConfigInputs& in) {
  urt::RunConfig cfg = in.path.empty() ? urt::RunConfig{} : urt::load_run_config(in.path);
  for (const auto& o : in.overrides) cfg.set_override(o);
  return cfg;
}

void add_config_options(CLI::App* cmd, ConfigInputs& in, bool required) {
  auto* opt = cmd->add_option("--config", in.path, "JSON run-config file");
  if (required) opt->required();
  cmd->add_option("--set", in.overrides, "override a config key (key=value), repeatable");
}

void log_line(std::string_view line) { std::cerr << line << '\n'; }

urt::TrainOptions train_options(unsigned threads) { return {threads, log_line}; }

std::string file_fingerprint(const fs::path& path) {
  return urt::detail::hex64(urt::detail::fnv1a64(urt::detail::read_file(path)));
}

void write_report(const fs::path& path, const json& doc) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  urt::detail::write_file(path, doc.dump(2) + "\n");
}

urt::FeatureStore load_store_checked(const std::string& dir) {
  return urt::load_store(dir);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Universal Representation Transformer: episodic training over frozen backbones"};
  app.require_subcommand(1);
  app.fallthrough();
  unsigned threads = 0;
  app.add_option("--threads", threads, "worker threads (0 = all cores); outputs do not depend on it");

  ConfigInputs gen_cfg, train_cfg, sweep_cfg, ablate_cfg;
  std::string store_dir, out_path, model_path, report_path, split_name, mode_name, checkpoint = "final";
  std::optional<std::uint64_t> seed, tasks;
  std::uint64_t gc_seed = 0;
  std::size_t gc_trials = 20, sweep_min = 1, sweep_max = 8;
  std::vector<std::size_t> sweep_heads;
  double gc_tolerance = 1e-4;

  auto* gen = app.add_subcommand("gen-synth", "generate a synthetic multi-domain feature store");
  add_config_options(gen, gen_cfg, false);
  gen->add_option("--out", out_path, "output store directory")->required();
  gen->add_option("--seed", seed, "overrides synth.seed");

  auto* trn = app.add_subcommand("train", "train a URT layer on a feature store");
  trn->add_option("--store", store_dir, "feature store directory")->required();
  add_config_options(trn, train_cfg, false);
  trn->add_option("--out", out_path, "output model file")->required();
  trn->add_option("--seed", seed, "overrides train.seed");

  auto* ev = app.add_subcommand("eval", "per-domain accuracy with 95% confidence intervals");
  ev->add_option("--store", store_dir)->required();
  ev->add_option("--model", model_path)->required();
  ev->add_option("--split", split_name, "train, valid or test (default test)");
  ev->add_option("--tasks", tasks, "tasks per domain (default 600)");
  ev->add_option("--seed", seed, "evaluation seed");
  ev->add_option("--checkpoint", checkpoint, "final or best")->check(CLI::IsMember({"final", "best"}));
  ev->add_option("--report", report_path, "output JSON report")->required();

  auto* gc = app.add_subcommand("gradcheck", "analytic vs finite-difference gradients");
  gc->add_option("--seed", gc_seed);
  gc->add_option("--trials", gc_trials, "random configurations (default 20)");
  gc->add_option("--tolerance", gc_tolerance, "max relative error (default 1e-4)");
  gc->add_option("--report", report_path, "optional JSON report");

  auto* sw = app.add_subcommand("sweep-heads", "train and validate one model per head count");
  sw->add_option("--store", store_dir)->required();
  add_config_options(sw, sweep_cfg, false);
  sw->add_option("--min", sweep_min, "smallest head count (default 1)");
  sw->add_option("--max", sweep_max, "largest head count (default 8)");
  sw->add_option("--heads", sweep_heads, "explicit head counts, overrides --min/--max")->delimiter(',');
  sw->add_option("--tasks", tasks, "validation tasks per domain");
  sw->add_option("--report", report_path)->required();

  auto* ab = app.add_subcommand("ablate", "train without one element of the layer");
  ab->add_option("--store", store_dir)->required();
  add_config_options(ab, ablate_cfg, false);
  ab->add_option("--mode", mode_name, "no_wq, no_wk, no_setrep or no_reg")->required();
  ab->add_option("--tasks", tasks, "test tasks per domain");
  ab->add_option("--report", report_path)->required();

  auto* hm = app.add_subcommand("heatmap", "average attention scores per head and domain");
  hm->add_option("--store", store_dir)->required();
  hm->add_option("--model", model_path)->required();
  hm->add_option("--out", out_path, "output prefix: PREFIX.csv, PREFIX.json, PREFIX_head<h>.pgm")
      ->required();
  hm->add_option("--split", split_name);
  hm->add_option("--tasks", tasks, "tasks per domain (default 100)");
  hm->add_option("--seed", seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    for (auto& ch : msg)
      if (ch == '\n') ch = ' ';
    std::cerr << "error: usage: " << msg << '\n';
    return kExitUsage;
  }

  try {
    if (*gen) {
      auto cfg = resolve_config(gen_cfg);
      if (seed) cfg.synth.seed = *seed;
      cfg.validate();
      const auto store = urt::generate_synthetic_store(cfg.synth);
      urt::save_store(store, out_path);
      std::cout << "store " << out_path << ": " << store.size() << " samples, "
                << store.backbones() << " backbones, dim " << store.dim() << ", fingerprint "
                << urt::store_fingerprint(store) << '\n';
      return 0;
    }

    if (*trn) {
      auto cfg = resolve_config(train_cfg);
      if (seed) cfg.train.seed = *seed;
      cfg.validate();
      const auto store = load_store_checked(store_dir);
      const auto model = urt::train(store, cfg.train, train_options(threads));
      urt::save_model(model, out_path);
      std::cout << "model " << out_path << ": initial ce "
                << urt::detail::format_double(model.initial_cross_entropy) << ", final ce "
                << urt::detail::format_double(model.final_cross_entropy) << '\n';
      return 0;
    }

    if (*ev) {
      const auto store = load_store_checked(store_dir);
      const auto model = urt::load_model(model_path);
      urt::check_compatible(model, store);
      urt::RunConfig cfg;
      cfg.train = model.config;
      if (!split_name.empty()) cfg.eval.split = urt::parse_split(split_name);
      if (tasks) cfg.eval.tasks_per_domain = *tasks;
      if (seed) cfg.eval.seed = *seed;
      cfg.eval.threads = threads;
      cfg.validate();
      const auto reports = urt::evaluate(model, store, cfg.eval, checkpoint == "best");
      json doc = {{"command", "eval"},
                  {"config", cfg.to_json()},
                  {"checkpoint", checkpoint},
                  {"model_fingerprint", file_fingerprint(model_path)},
                  {"store_fingerprint", urt::store_fingerprint(store)},
                  {"domains", urt::to_json(reports)},
                  {"average_accuracy", urt::average_accuracy(reports)}};
      write_report(report_path, doc);
      for (const auto& r : reports)
        std::printf("domain %u: %.2f +- %.2f (%zu tasks)\n", r.domain_id,
                    100.0 * r.mean_accuracy, 100.0 * r.ci95, r.tasks);
      return 0;
    }

    if (*gc) {
      if (gc_trials < 1) throw urt::Error(urt::ErrorKind::config, "--trials must be >= 1");
      const auto summary = urt::run_gradcheck(gc_seed, gc_trials);
      std::printf("gradcheck: %zu trials, %zu coordinates, max relative error %.3e (tolerance %.1e)\n",
                  summary.trials, summary.coordinates, summary.max_relative_error, gc_tolerance);
      if (!report_path.empty())
        write_report(report_path, {{"command", "gradcheck"},
                                   {"seed", gc_seed},
                                   {"trials", summary.trials},
                                   {"coordinates", summary.coordinates},
                                   {"step", 1e-5},
                                   {"tolerance", gc_tolerance},
                                   {"max_relative_error", summary.max_relative_error}});
      if (summary.max_relative_error > gc_tolerance) {
        std::cerr << "error: gradcheck: max relative error " << summary.max_relative_error
                  << " exceeds " << gc_tolerance << '\n';
        return kExitRuntime;
      }
      return 0;
    }

    if (*sw) {
      auto cfg = resolve_config(sweep_cfg);
      cfg.eval.split = urt::Split::valid;
      if (tasks) cfg.eval.tasks_per_domain = *tasks;
      cfg.eval.threads = threads;
      cfg.validate();
      if (sweep_heads.empty()) {
        if (sweep_min < 1 || sweep_min > sweep_max)
          throw urt::Error(urt::ErrorKind::config, "sweep requires 1 <= --min <= --max");
        for (std::size_t h = sweep_min; h <= sweep_max; ++h) sweep_heads.push_back(h);
      }
      for (auto h : sweep_heads)
        if (h < 1) throw urt::Error(urt::ErrorKind::config, "head counts must be >= 1");
      const auto store = load_store_checked(store_dir);
      const auto report =
          urt::head_sweep(store, cfg.train, sweep_heads, cfg.eval, train_options(threads));
      auto doc = urt::to_json(report);
      doc["command"] = "sweep-heads";
      doc["config"] = cfg.to_json();
      doc["store_fingerprint"] = urt::store_fingerprint(store);
      write_report(report_path, doc);
      std::printf("%-6s %-18s %s\n", "heads", "average accuracy", "average rank");
      for (const auto& row : report.rows)
        std::printf("%-6zu %-18.3f %.3f\n", row.heads, 100.0 * row.average_accuracy,
                    row.average_rank);
      std::printf("selected: %zu heads\n", report.selected_heads);
      return 0;
    }

    if (*ab) {
      const auto mode = urt::parse_ablation(mode_name);
      if (mode == urt::Ablation::none)
        throw urt::Error(urt::ErrorKind::config, "ablation mode must not be none");
      auto cfg = resolve_config(ablate_cfg);
      if (tasks) cfg.eval.tasks_per_domain = *tasks;
      cfg.eval.threads = threads;
      cfg.train.ablation = urt::Ablation::none;
      cfg.validate();
      const auto store = load_store_checked(store_dir);
      const auto baseline =
          urt::evaluate(urt::train(store, cfg.train, train_options(threads)), store, cfg.eval);
      const auto ablated = urt::ablate(store, cfg.train, mode, cfg.eval, train_options(threads));
      json deltas = json::array();
      for (std::size_t k = 0; k < ablated.size(); ++k)
        deltas.push_back({{"domain", ablated[k].domain_id},
                          {"delta_accuracy", ablated[k].mean_accuracy - baseline[k].mean_accuracy}});
      json doc = {{"command", "ablate"},
                  {"mode", std::string(urt::to_string(mode))},
                  {"config", cfg.to_json()},
                  {"store_fingerprint", urt::store_fingerprint(store)},
                  {"baseline", urt::to_json(baseline)},
                  {"ablated", urt::to_json(ablated)},
                  {"deltas", deltas},
                  {"average_delta",
                   urt::average_accuracy(ablated) - urt::average_accuracy(baseline)}};
      write_report(report_path, doc);
      for (std::size_t k = 0; k < ablated.size(); ++k)
        std::printf("domain %u: %+.2f\n", ablated[k].domain_id,
                    100.0 * (ablated[k].mean_accuracy - baseline[k].mean_accuracy));
      return 0;
    }

    if (*hm) {
      const auto store = load_store_checked(store_dir);
      const auto model = urt::load_model(model_path);
      urt::check_compatible(model, store);
      urt::RunConfig cfg;
      cfg.train = model.config;
      cfg.eval.split = split_name.empty() ? urt::Split::test : urt::parse_split(split_name);
      if (tasks) cfg.heatmap_tasks = *tasks;
      if (seed) cfg.eval.seed = *seed;
      cfg.validate();
      urt::EvalSettings settings = cfg.eval;
      settings.tasks_per_domain = cfg.heatmap_tasks;
      settings.threads = threads;
      const auto report =
          urt::attention_heatmap(model.params, store, model.config.policy, settings);
      urt::detail::write_file(out_path + ".csv", urt::heatmap_csv(report));
      auto doc = urt::to_json(report);
      doc["command"] = "heatmap";
      doc["config"] = cfg.to_json();
      doc["model_fingerprint"] = file_fingerprint(model_path);
      write_report(out_path + ".json", doc);
      for (std::size_t h = 0; h < report.heads; ++h)
        urt::detail::write_file(out_path + "_head" + std::to_string(h) + ".pgm",
                                urt::heatmap_pgm(report, h, cfg.heatmap_cell_px));
      for (std::size_t h = 0; h < report.heads; ++h) {
        std::printf("head %zu\n", h);
        for (std::size_t t = 0; t < report.domains.size(); ++t) {
          std::printf("  domain %u:", report.domains[t]);
          for (std::size_t i = 0; i < report.backbones; ++i)
            std::printf(" %.3f", report.at(h, t, i));
          std::printf("\n");
        }
      }
      return 0;
    }
  } catch (const urt::Error& e) {
    std::cerr << "error: " << e.category() << ": " << e.what() << '\n';
    return e.kind() == urt::ErrorKind::config ? kExitConfig : kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: runtime: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
