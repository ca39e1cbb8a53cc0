#pragma once

// Flat, namespaced key <-> struct member bindings ("sampler.n_max") used for
// config files, report echoes and the model file.

#include <functional>
#include <limits>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "urt/error.hpp"

namespace urt {

template <class Cfg>
struct ConfigField {
  std::string key;
  std::function<nlohmann::json(const Cfg&)> get;
  std::function<void(Cfg&, const nlohmann::json&)> set;
};

namespace detail {

template <class T>
T json_to(const std::string& key, const nlohmann::json& j) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!j.is_boolean()) throw Error(ErrorKind::config, key + ": expected a boolean");
    return j.get<bool>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!j.is_number_integer())
      throw Error(ErrorKind::config, key + ": expected an integer, got " + j.dump());
    if constexpr (std::is_unsigned_v<T>) {
      if (j.is_number_unsigned()) {
        const auto v = j.get<std::uint64_t>();
        if (v > std::numeric_limits<T>::max())
          throw Error(ErrorKind::config, key + ": value out of range");
        return static_cast<T>(v);
      }
      const auto v = j.get<std::int64_t>();
      if (v < 0) throw Error(ErrorKind::config, key + ": must be non-negative");
      return static_cast<T>(v);
    } else {
      return j.get<T>();
    }
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!j.is_number()) throw Error(ErrorKind::config, key + ": expected a number");
    return j.get<T>();
  } else {
    if (!j.is_string()) throw Error(ErrorKind::config, key + ": expected a string");
    return j.get<std::string>();
  }
}

}  // namespace detail

/// Binds `key` to the member reached through `access(cfg)`.
template <class Cfg, class Access>
ConfigField<Cfg> bind_field(std::string key, Access access) {
  using T = std::remove_reference_t<decltype(access(std::declval<Cfg&>()))>;
  return {key,
          [access](const Cfg& c) { return nlohmann::json(access(const_cast<Cfg&>(c))); },
          [access, key](Cfg& c, const nlohmann::json& j) {
            access(c) = detail::json_to<T>(key, j);
          }};
}

/// Enum member stored as a string.
template <class Cfg, class Access, class ToString, class Parse>
ConfigField<Cfg> bind_enum(std::string key, Access access, ToString to_str, Parse parse) {
  return {key,
          [access, to_str](const Cfg& c) {
            return nlohmann::json(std::string(to_str(access(const_cast<Cfg&>(c)))));
          },
          [access, parse, key](Cfg& c, const nlohmann::json& j) {
            access(c) = parse(detail::json_to<std::string>(key, j));
          }};
}

template <class Cfg>
nlohmann::json fields_to_json(const Cfg& cfg, const std::vector<ConfigField<Cfg>>& fields) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& f : fields) out[f.key] = f.get(cfg);
  return out;
}

/// Applies every key of `doc` that `fields` knows; returns false for an unknown key.
template <class Cfg>
bool apply_field(Cfg& cfg, const std::vector<ConfigField<Cfg>>& fields, const std::string& key,
                 const nlohmann::json& value) {
  for (const auto& f : fields)
    if (f.key == key) {
      f.set(cfg, value);
      return true;
    }
  return false;
}

}  // namespace urt
