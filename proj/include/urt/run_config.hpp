#pragma once

// Whole-run configuration: one flat JSON document with namespaced keys
// (synth.*, sampler.*, train.*, urt.*, eval.*, heatmap.*).

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "urt/config_fields.hpp"
#include "urt/evaluation.hpp"
#include "urt/feature_store.hpp"
#include "urt/training.hpp"

namespace urt {

struct RunConfig {
  SynthConfig synth;
  TrainConfig train;
  EvalSettings eval;
  std::size_t heatmap_tasks = 100;
  std::size_t heatmap_cell_px = 16;

  static const std::vector<ConfigField<RunConfig>>& fields() {
    static const auto table = [] {
      using C = RunConfig;
      std::vector<ConfigField<C>> f = {
          bind_field<C>("synth.domains", [](C& c) -> auto& { return c.synth.domains; }),
          bind_field<C>("synth.classes_train", [](C& c) -> auto& { return c.synth.classes_train; }),
          bind_field<C>("synth.classes_valid", [](C& c) -> auto& { return c.synth.classes_valid; }),
          bind_field<C>("synth.classes_test", [](C& c) -> auto& { return c.synth.classes_test; }),
          bind_field<C>("synth.samples_per_class",
                        [](C& c) -> auto& { return c.synth.samples_per_class; }),
          bind_field<C>("synth.dim", [](C& c) -> auto& { return c.synth.dim; }),
          bind_field<C>("synth.sigma_in", [](C& c) -> auto& { return c.synth.sigma_in; }),
          bind_field<C>("synth.sigma_out", [](C& c) -> auto& { return c.synth.sigma_out; }),
          bind_field<C>("synth.split_signal", [](C& c) -> auto& { return c.synth.split_signal; }),
          bind_field<C>("synth.seed", [](C& c) -> auto& { return c.synth.seed; }),
          bind_enum<C>("eval.split", [](C& c) -> auto& { return c.eval.split; },
                       [](Split s) { return to_string(s); }, parse_split),
          bind_field<C>("eval.tasks", [](C& c) -> auto& { return c.eval.tasks_per_domain; }),
          bind_field<C>("eval.seed", [](C& c) -> auto& { return c.eval.seed; }),
          bind_field<C>("heatmap.tasks", [](C& c) -> auto& { return c.heatmap_tasks; }),
          bind_field<C>("heatmap.cell_px", [](C& c) -> auto& { return c.heatmap_cell_px; }),
      };
      for (auto& tf : TrainConfig::fields())
        f.push_back({tf.key, [g = tf.get](const C& c) { return g(c.train); },
                     [s = tf.set](C& c, const nlohmann::json& j) { s(c.train, j); }});
      return f;
    }();
    return table;
  }

  void set(const std::string& key, const nlohmann::json& value) {
    if (!apply_field(*this, fields(), key, value))
      throw Error(ErrorKind::config, "unknown config key '" + key + "'");
  }

  /// "key=value"; value is parsed as JSON, falling back to a bare string.
  void set_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    require(eq != std::string::npos && eq > 0, ErrorKind::config,
            "override '" + assignment + "' is not of the form key=value");
    const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
    auto value = nlohmann::json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    set(key, value);
  }

  void merge(const nlohmann::json& doc) {
    require(doc.is_object(), ErrorKind::config, "config file must hold one JSON object");
    for (const auto& [key, value] : doc.items()) set(key, value);
  }

  void validate() const {
    synth.validate();
    train.validate();
    require(eval.tasks_per_domain >= 1, ErrorKind::config, "eval.tasks must be >= 1");
    require(heatmap_tasks >= 1 && heatmap_cell_px >= 1, ErrorKind::config,
            "heatmap.tasks and heatmap.cell_px must be >= 1");
  }

  nlohmann::json to_json() const { return fields_to_json(*this, fields()); }
};

inline RunConfig load_run_config(const std::filesystem::path& path) {
  RunConfig cfg;
  std::string text;
  try {
    text = detail::read_file(path);
  } catch (const Error& e) {
    throw Error(ErrorKind::config, e.what());
  }
  auto doc = nlohmann::json::parse(text, nullptr, false);
  if (doc.is_discarded()) throw Error(ErrorKind::config, path.string() + ": malformed JSON");
  try {
    cfg.merge(doc);
  } catch (const Error& e) {
    throw Error(ErrorKind::config, path.string() + ": " + e.what());
  }
  return cfg;
}

}  // namespace urt
