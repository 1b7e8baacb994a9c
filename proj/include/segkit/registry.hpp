#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "segkit/component.hpp"
#include "segkit/config.hpp"
#include "segkit/layers.hpp"

namespace segkit {

inline std::size_t edit_distance(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// Re-throws the in-flight segkit error with `prefix` prepended, keeping its
/// dynamic type so exit-code mapping still works. Messages that already start
/// with the prefix pass through unchanged.
[[noreturn]] inline void rethrow_with_prefix(const std::string& prefix) {
  try {
    throw;
  } catch (const Error& e) {
    const std::string msg = e.what();
    if (prefix.empty() || msg.rfind(prefix, 0) == 0) throw;
    const std::string full = prefix + ": " + msg;
    if (dynamic_cast<const config::ParseError*>(&e)) throw;
    if (dynamic_cast<const RegistrationError*>(&e)) throw RegistrationError(full);
    if (dynamic_cast<const ParameterError*>(&e)) throw ParameterError(full);
    if (dynamic_cast<const GeometryError*>(&e)) throw GeometryError(full);
    if (dynamic_cast<const ConfigError*>(&e)) throw ConfigError(full);
    if (dynamic_cast<const DataError*>(&e)) throw DataError(full);
    if (dynamic_cast<const EnvironmentError*>(&e)) throw EnvironmentError(full);
    if (dynamic_cast<const FormatError*>(&e)) throw FormatError(full);
    if (dynamic_cast<const DegenerateBatchError*>(&e)) throw DegenerateBatchError(full);
    if (dynamic_cast<const MetricError*>(&e)) throw MetricError(full);
    if (dynamic_cast<const TrainingError*>(&e)) throw TrainingError(full);
    throw Error(full);
  }
}

/// Typed, strict access to one component's parameter mapping. Lookups fall back
/// to the registered defaults; finish() rejects keys nobody asked for.
class ParamReader {
 public:
  ParamReader(const config::Value& params, const config::Value& defaults, std::string path)
      : params_(params), defaults_(defaults), path_(std::move(path)) {
    if (!params_.is_null() && !params_.is_mapping()) {
      throw ConfigError(path_ + ": parameters must be a mapping, got " + params_.type_name());
    }
  }

  const std::string& path() const { return path_; }
  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) {
    seen_.insert(key);
    return params_.is_mapping() && params_.find(key) != nullptr;
  }

  const config::Value& value(const std::string& key) {
    seen_.insert(key);
    if (params_.is_mapping())
      if (const auto* v = params_.find(key)) return *v;
    if (defaults_.is_mapping())
      if (const auto* v = defaults_.find(key)) return *v;
    throw ConfigError(field(key) + ": required parameter is missing");
  }

  std::int64_t integer(const std::string& key, std::int64_t lo = std::numeric_limits<std::int64_t>::min(),
                       std::int64_t hi = std::numeric_limits<std::int64_t>::max()) {
    const auto& v = value(key);
    if (!v.is_int()) type_error(key, "integer", v);
    const std::int64_t x = v.as_int();
    if (x < lo || x > hi) range_error(key, std::to_string(x), lo, hi);
    return x;
  }

  std::size_t size(const std::string& key, std::size_t lo = 0) {
    return static_cast<std::size_t>(integer(key, static_cast<std::int64_t>(lo)));
  }

  double real(const std::string& key, double lo = -std::numeric_limits<double>::infinity(),
              double hi = std::numeric_limits<double>::infinity()) {
    const auto& v = value(key);
    if (!v.is_number()) type_error(key, "number", v);
    const double x = v.as_double();
    if (!(x >= lo && x <= hi)) range_error(key, config::detail::emit_scalar(v), lo, hi);
    return x;
  }

  bool boolean(const std::string& key) {
    const auto& v = value(key);
    if (!v.is_bool()) type_error(key, "bool", v);
    return v.as_bool();
  }

  std::string string(const std::string& key) {
    const auto& v = value(key);
    if (!v.is_string()) type_error(key, "string", v);
    return v.as_string();
  }

  std::string choice(const std::string& key, std::initializer_list<std::string_view> options) {
    const std::string s = string(key);
    if (std::find(options.begin(), options.end(), s) == options.end()) {
      std::string list;
      for (auto o : options) list += (list.empty() ? "" : ", ") + std::string(o);
      throw ConfigError(field(key) + ": '" + s + "' is not one of {" + list + "}");
    }
    return s;
  }

  std::vector<std::size_t> size_list(const std::string& key, std::size_t lo = 0) {
    std::vector<std::size_t> out;
    for (const auto& e : sequence(key)) {
      if (!e.is_int() || e.as_int() < static_cast<std::int64_t>(lo)) {
        throw ConfigError(field(key) + ": expected a list of integers >= " + std::to_string(lo));
      }
      out.push_back(static_cast<std::size_t>(e.as_int()));
    }
    return out;
  }

  std::vector<float> float_list(const std::string& key) {
    std::vector<float> out;
    for (const auto& e : sequence(key)) {
      if (!e.is_number()) throw ConfigError(field(key) + ": expected a list of numbers");
      out.push_back(static_cast<float>(e.as_double()));
    }
    return out;
  }

  const config::Value::Sequence& sequence(const std::string& key) {
    const auto& v = value(key);
    if (!v.is_sequence()) type_error(key, "list", v);
    return v.as_sequence();
  }

  void finish() const {
    if (!params_.is_mapping()) return;
    for (const auto& [k, v] : params_.as_mapping()) {
      if (seen_.count(k)) continue;
      std::string accepted;
      for (const auto& s : seen_) accepted += (accepted.empty() ? "" : ", ") + s;
      throw ConfigError(field(k) + ": unknown parameter" + where(v) + " (accepted: " + accepted + ")");
    }
  }

 private:
  static std::string where(const config::Value& v) {
    const auto loc = v.location();
    return loc.line ? " at line " + std::to_string(loc.line) : "";
  }
  [[noreturn]] void type_error(const std::string& key, const char* want, const config::Value& v) const {
    throw ConfigError(field(key) + ": expected " + want + ", got " + v.type_name() + where(v));
  }
  template <typename N>
  [[noreturn]] void range_error(const std::string& key, const std::string& got, N lo, N hi) const {
    std::string range;
    if (lo != std::numeric_limits<N>::lowest() && lo != -std::numeric_limits<N>::infinity()) range += ">= " + fmt(lo);
    if (hi != std::numeric_limits<N>::max() && hi != std::numeric_limits<N>::infinity()) {
      range += (range.empty() ? "" : " and ") + std::string("<= ") + fmt(hi);
    }
    throw ConfigError(field(key) + ": value " + got + " out of range (must be " + range + ")");
  }
  template <typename N>
  static std::string fmt(N x) {
    if constexpr (std::is_floating_point_v<N>) return config::detail::emit_scalar(config::Value(static_cast<double>(x)));
    else return std::to_string(x);
  }

  const config::Value& params_;
  const config::Value& defaults_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename T>
class ComponentRegistry;

/// What a builder sees besides its parameters.
template <typename T>
struct BuildContext {
  const ComponentRegistry<T>& registry;
  Rng& rng;
  std::filesystem::path base_dir;  // relative paths in parameters resolve here
  std::string path;                // dotted config path of the component being built

  std::string resolve_path(const std::string& p) const {
    const std::filesystem::path fp(p);
    return fp.is_absolute() || base_dir.empty() ? fp.string() : (base_dir / fp).string();
  }
};

/// Per-kind name -> builder maps. Append-only; read-only once startup is done.
template <typename T>
class ComponentRegistry {
 public:
  using Builder = std::function<std::shared_ptr<Component>(ParamReader&, BuildContext<T>&)>;

  void register_builder(ComponentKind kind, const std::string& name, Builder builder, config::Value defaults = config::Value::mapping(),
                        std::string registrant = "user") {
    if (name.empty()) throw RegistrationError("component name must be non-empty");
    auto& table = tables_[index(kind)];
    if (auto it = table.find(name); it != table.end()) {
      throw RegistrationError(std::string(to_string(kind)) + " '" + name + "' is already registered by " + it->second.registrant);
    }
    if (!defaults.is_mapping()) throw RegistrationError("defaults for '" + name + "' must be a mapping");
    table.emplace(name, Entry{std::move(builder), std::move(defaults), std::move(registrant)});
  }

  bool contains(ComponentKind kind, const std::string& name) const { return tables_[index(kind)].count(name) > 0; }

  std::vector<std::string> list(ComponentKind kind) const {
    std::vector<std::string> out;
    for (const auto& [name, e] : tables_[index(kind)]) out.push_back(name);
    return out;  // std::map keeps them sorted
  }

  const config::Value& default_params(ComponentKind kind, const std::string& name) const { return entry(kind, name, "").defaults; }

  std::vector<std::string> suggestions(ComponentKind kind, const std::string& name) const {
    std::vector<std::pair<std::size_t, std::string>> scored;
    for (const auto& [n, e] : tables_[index(kind)]) {
      const std::size_t d = edit_distance(name, n);
      if (d <= 2) scored.emplace_back(d, n);
    }
    std::sort(scored.begin(), scored.end());
    std::vector<std::string> out;
    for (auto& [d, n] : scored) out.push_back(n);
    return out;
  }

  std::shared_ptr<Component> create(ComponentKind kind, const std::string& name, const config::Value& params, Rng& rng,
                                    const std::string& path = "", const std::filesystem::path& base_dir = {}) const {
    const Entry& e = entry(kind, name, path);
    BuildContext<T> ctx{*this, rng, base_dir, path};
    try {
      ParamReader reader(params, e.defaults, path);
      auto component = e.builder(reader, ctx);
      reader.finish();
      return component;
    } catch (const Error&) {
      rethrow_with_prefix(path);
    }
  }

  /// A spec is either a bare name or a mapping with "type" plus parameters.
  std::shared_ptr<Component> create_spec(ComponentKind kind, const config::Value& spec, Rng& rng, const std::string& path = "",
                                         const std::filesystem::path& base_dir = {}) const {
    auto [name, params] = split_spec(spec, path);
    return create(kind, name, params, rng, path, base_dir);
  }

  template <typename C>
  std::shared_ptr<C> create_as(ComponentKind kind, const config::Value& spec, Rng& rng, const std::string& path = "",
                               const std::filesystem::path& base_dir = {}) const {
    auto c = std::dynamic_pointer_cast<C>(create_spec(kind, spec, rng, path, base_dir));
    if (!c) throw ConfigError(path + ": component does not provide the expected interface");
    return c;
  }

  static std::pair<std::string, config::Value> split_spec(const config::Value& spec, const std::string& path) {
    if (spec.is_string()) return {spec.as_string(), config::Value::mapping()};
    if (!spec.is_mapping()) throw ConfigError(path + ": expected a component name or a mapping with 'type'");
    const auto* type = spec.find("type");
    if (!type || !type->is_string()) throw ConfigError(path + ": component spec needs a string 'type' field");
    config::Value params = config::Value::mapping();
    for (const auto& [k, v] : spec.as_mapping())
      if (k != "type") params.set(k, v);
    return {type->as_string(), params};
  }

 private:
  struct Entry {
    Builder builder;
    config::Value defaults;
    std::string registrant;
  };

  static std::size_t index(ComponentKind kind) { return static_cast<std::size_t>(kind); }

  const Entry& entry(ComponentKind kind, const std::string& name, const std::string& path) const {
    const auto& table = tables_[index(kind)];
    if (auto it = table.find(name); it != table.end()) return it->second;
    std::string msg = (path.empty() ? "" : path + ": ") + "unknown " + std::string(to_string(kind)) + " '" + name + "'";
    const auto near = suggestions(kind, name);
    if (!near.empty()) {
      msg += "; did you mean ";
      for (std::size_t i = 0; i < near.size(); ++i) msg += (i ? ", '" : "'") + near[i] + "'";
      msg += "?";
    }
    throw ConfigError(msg);
  }

  std::array<std::map<std::string, Entry>, kComponentKinds.size()> tables_;
};

}  // namespace segkit
