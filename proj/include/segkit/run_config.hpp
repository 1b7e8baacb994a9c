#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "segkit/builtins.hpp"

namespace segkit {

struct OptimizerConfig {
  double base_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 4e-5;
  double power = 0.9;
};

struct ScheduleConfig {
  std::size_t max_iter = 500;
  std::size_t batch_size = 8;
  std::size_t crop_h = 64;
  std::size_t crop_w = 64;
  std::size_t eval_interval = 100;  // 0 evaluates only at the end
  std::size_t log_interval = 10;
  std::size_t workers = 1;
};

/// A validated run description. `tree` is the canonical resolved document:
/// defaults filled in, component specs in mapping form, paths absolute. It is
/// what the snapshot stores, so resolving a snapshot reproduces it exactly.
struct RunConfig {
  config::Value tree;
  config::Value model;  // spec handed to the registry (schedule knobs removed)
  config::Value train_dataset;
  config::Value val_dataset;
  config::Value train_transforms;
  config::Value val_transforms;
  config::Value loss;
  double aux_weight = 0.4;
  OptimizerConfig optimizer;
  ScheduleConfig schedule;
  std::uint64_t seed = 0;
  std::string output_dir;
  std::string init_weights;
  std::size_t num_classes = 0;

  std::string snapshot() const { return config::emit(tree); }
};

namespace detail {

inline config::Value default_train_transforms() {
  config::Value::Sequence s;
  for (const char* name : {"random_scale", "random_hflip", "random_brightness", "random_crop_pad", "normalize"}) s.emplace_back(name);
  return s;
}

// {type: name} followed by the registered defaults overlaid with the given params.
template <typename T>
config::Value normalize_spec(const ComponentRegistry<T>& reg, ComponentKind kind, const config::Value& spec, const std::string& path) {
  auto [name, params] = ComponentRegistry<T>::split_spec(spec, path);
  if (!reg.contains(kind, name)) {
    Rng scratch(0);
    reg.create(kind, name, params, scratch, path);  // throws the suggestion-bearing error
  }
  config::Value out = config::Value::mapping();
  out.set("type", name);
  for (const auto& [k, v] : reg.default_params(kind, name).as_mapping()) out.set(k, v);
  for (const auto& [k, v] : params.as_mapping()) out.set(k, v);
  return out;
}

inline std::string absolute_path(const std::filesystem::path& base, const std::string& p) {
  if (p.empty()) return p;
  std::filesystem::path fp(p);
  if (fp.is_relative()) fp = base / fp;
  return fp.lexically_normal().string();
}

}  // namespace detail

/// Resolves and validates a parsed document. Relative paths are taken against
/// base_dir (the config file's directory).
template <typename T>
RunConfig resolve_config(const config::Value& root, const std::filesystem::path& base_dir, const ComponentRegistry<T>& reg) {
  if (!root.is_mapping()) throw ConfigError("config: top level must be a mapping");
  static const config::Value top_defaults = [] {
    config::Value d = config::Value::mapping();
    d.set("model", config::Value());
    d.set("train_dataset", config::Value());
    d.set("val_dataset", config::Value());
    d.set("loss", "cross_entropy");
    d.set("aux_weight", 0.4);
    d.set("optimizer", config::Value::mapping());
    d.set("schedule", config::Value::mapping());
    d.set("seed", 0);
    d.set("output_dir", "output");
    d.set("init_weights", "");
    return d;
  }();
  const std::filesystem::path base = std::filesystem::absolute(base_dir.empty() ? std::filesystem::path(".") : base_dir);
  ParamReader top(root, top_defaults, "");
  RunConfig rc;
  config::Value tree = config::Value::mapping();

  // schedule and optimizer blocks
  const config::Value schedule_defaults = detail::map({{"max_iter", 500}, {"batch_size", 8}, {"crop_h", 64}, {"crop_w", 64},
                                                       {"eval_interval", 100}, {"log_interval", 10}, {"workers", 1}});
  {
    ParamReader r(top.value("schedule"), schedule_defaults, "schedule");
    auto& s = rc.schedule;
    s.max_iter = r.size("max_iter");
    s.batch_size = r.size("batch_size", 1);
    s.crop_h = r.size("crop_h", 1);
    s.crop_w = r.size("crop_w", 1);
    s.eval_interval = r.size("eval_interval");
    s.log_interval = r.size("log_interval", 1);
    s.workers = r.size("workers", 1);
    r.finish();
  }
  {
    const config::Value defaults = detail::map({{"base_lr", 0.01}, {"momentum", 0.9}, {"weight_decay", 4e-5}, {"power", 0.9}});
    ParamReader r(top.value("optimizer"), defaults, "optimizer");
    auto& o = rc.optimizer;
    o.base_lr = r.real("base_lr", 0.0);
    if (!(o.base_lr > 0)) throw ConfigError("optimizer.base_lr: must be positive");
    o.momentum = r.real("momentum", 0.0, 0.999999);
    o.weight_decay = r.real("weight_decay", 0.0);
    o.power = r.real("power", 0.0);
    if (!(o.power > 0)) throw ConfigError("optimizer.power: must be positive");
    r.finish();
  }
  rc.aux_weight = top.real("aux_weight", 0.0);
  rc.seed = static_cast<std::uint64_t>(top.integer("seed", 0));
  rc.output_dir = detail::absolute_path(base, top.string("output_dir"));
  if (rc.output_dir.empty()) throw ConfigError("output_dir: must be non-empty");
  // Fine-tune source: matching tensors are loaded before the first iteration.
  rc.init_weights = detail::absolute_path(base, top.string("init_weights"));

  // datasets
  auto dataset_block = [&](const config::Value& spec, const std::string& path, config::Value& transforms, bool train) {
    if (spec.is_null()) throw ConfigError(path + ": required block is missing");
    config::Value stripped = config::Value::mapping();
    transforms = train ? detail::default_train_transforms() : config::Value::Sequence{config::Value("normalize")};
    if (spec.is_string()) stripped = spec;
    else if (spec.is_mapping()) {
      for (const auto& [k, v] : spec.as_mapping()) {
        if (k == "transforms") transforms = v;
        else stripped.set(k, v);
      }
      if (!stripped.find("type")) stripped.set("type", "file_list");
    }
    config::Value norm = detail::normalize_spec(reg, ComponentKind::dataset, stripped, path);
    if (const auto* list = norm.find("list"); list && list->is_string()) norm.set("list", detail::absolute_path(base, list->as_string()));
    if (!transforms.is_sequence()) throw ConfigError(path + ".transforms: expected a list");
    config::Value::Sequence specs;
    for (std::size_t i = 0; i < transforms.as_sequence().size(); ++i) {
      const std::string tpath = path + ".transforms[" + std::to_string(i) + "]";
      config::Value t = detail::normalize_spec(reg, ComponentKind::transform, transforms.as_sequence()[i], tpath);
      if (t.find("type")->as_string() == "random_crop_pad") {
        const auto& given = transforms.as_sequence()[i];
        const bool mapping = given.is_mapping();
        if (!mapping || !given.find("crop_h")) t.set("crop_h", static_cast<std::int64_t>(rc.schedule.crop_h));
        if (!mapping || !given.find("crop_w")) t.set("crop_w", static_cast<std::int64_t>(rc.schedule.crop_w));
      }
      specs.push_back(std::move(t));
    }
    transforms = specs;
    config::Value full = norm;
    full.set("transforms", transforms);
    return std::pair{norm, full};
  };
  auto [train_ds, train_full] = dataset_block(top.value("train_dataset"), "train_dataset", rc.train_transforms, true);
  const config::Value& val_spec = top.value("val_dataset");
  auto [val_ds, val_full] = dataset_block(val_spec.is_null() ? train_full : val_spec, "val_dataset", rc.val_transforms, false);
  if (val_spec.is_null()) {
    // Validation defaults to the training list with evaluation-time transforms.
    config::Value::Sequence keep;
    for (const auto& t : rc.train_transforms.as_sequence())
      if (t.find("type")->as_string() == "normalize") keep.push_back(t);
    rc.val_transforms = keep;
    val_full.set("transforms", rc.val_transforms);
  }
  rc.train_dataset = train_ds;
  rc.val_dataset = val_ds;
  rc.loss = detail::normalize_spec(reg, ComponentKind::loss, top.value("loss"), "loss");

  // model: schedule knobs come out, num_classes flows in from the dataset
  const config::Value& model_given = top.value("model");
  if (model_given.is_null()) throw ConfigError("model: required block is missing");
  auto [model_name, model_params] = ComponentRegistry<T>::split_spec(model_given, "model");
  config::Value model_tree = config::Value::mapping();
  model_tree.set("type", model_name);
  config::Value build_params = config::Value::mapping();
  for (const auto& [k, v] : model_params.as_mapping()) {
    if (k == "max_iter" || k == "batch_size") {
      if (!v.is_int() || v.as_int() < (k == "max_iter" ? 0 : 1)) throw ConfigError("model." + k + ": expected a valid integer");
      (k == "max_iter" ? rc.schedule.max_iter : rc.schedule.batch_size) = static_cast<std::size_t>(v.as_int());
    } else {
      build_params.set(k, v);
    }
  }
  const std::size_t ds_classes = static_cast<std::size_t>(train_ds.find("num_classes")->as_int());
  if (const auto* k = build_params.find("num_classes")) {
    if (!k->is_int() || k->as_int() < 1) throw ConfigError("model.num_classes: expected a positive integer");
    if (ds_classes && static_cast<std::size_t>(k->as_int()) != ds_classes) {
      throw ConfigError("model.num_classes: " + std::to_string(k->as_int()) + " disagrees with train_dataset.num_classes " +
                        std::to_string(ds_classes));
    }
    rc.num_classes = static_cast<std::size_t>(k->as_int());
  } else {
    if (!ds_classes) throw ConfigError("train_dataset.num_classes: required to size the model");
    rc.num_classes = ds_classes;
  }
  build_params.set("num_classes", static_cast<std::int64_t>(rc.num_classes));
  config::Value model_spec = config::Value::mapping();
  model_spec.set("type", model_name);
  for (const auto& [k, v] : build_params.as_mapping()) model_spec.set(k, v);
  rc.model = detail::normalize_spec(reg, ComponentKind::model, model_spec, "model");
  for (const auto& [k, v] : rc.model.as_mapping()) model_tree.set(k, v);
  for (const auto& [k, v] : model_params.as_mapping())
    if (k == "max_iter" || k == "batch_size") model_tree.set(k, v);
  top.finish();

  // Build everything once so unknown names and bad parameters fail here.
  {
    Rng scratch(rc.seed);
    reg.create_spec(ComponentKind::model, rc.model, scratch, "model", base);
    reg.create_spec(ComponentKind::loss, rc.loss, scratch, "loss", base);
    reg.create_spec(ComponentKind::dataset, rc.train_dataset, scratch, "train_dataset", base);
    reg.create_spec(ComponentKind::dataset, rc.val_dataset, scratch, "val_dataset", base);
    for (const auto& [spec, path] : {std::pair{&rc.train_transforms, "train_dataset"}, std::pair{&rc.val_transforms, "val_dataset"}}) {
      const auto& seq = spec->as_sequence();
      for (std::size_t i = 0; i < seq.size(); ++i)
        reg.create_spec(ComponentKind::transform, seq[i], scratch, std::string(path) + ".transforms[" + std::to_string(i) + "]", base);
    }
  }

  tree.set("model", model_tree);
  tree.set("train_dataset", train_full);
  tree.set("val_dataset", val_full);
  tree.set("loss", rc.loss);
  tree.set("aux_weight", rc.aux_weight);
  tree.set("optimizer", detail::map({{"base_lr", rc.optimizer.base_lr},
                                     {"momentum", rc.optimizer.momentum},
                                     {"weight_decay", rc.optimizer.weight_decay},
                                     {"power", rc.optimizer.power}}));
  // Per-model overrides stay in the model block; the schedule block keeps the
  // values as written so a snapshot resolves to the same tree.
  config::Value sched = config::Value::mapping();
  {
    const config::Value block = root.find("schedule") ? *root.find("schedule") : config::Value::mapping();
    ParamReader r(block, schedule_defaults, "schedule");
    for (const char* k : {"max_iter", "batch_size", "crop_h", "crop_w", "eval_interval", "log_interval", "workers"}) sched.set(k, r.value(k));
  }
  tree.set("schedule", sched);
  tree.set("seed", static_cast<std::int64_t>(rc.seed));
  tree.set("output_dir", rc.output_dir);
  tree.set("init_weights", rc.init_weights);
  rc.tree = std::move(tree);
  return rc;
}

template <typename T>
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides, const ComponentRegistry<T>& reg) {
  config::Value root = config::parse_file(path);
  for (const auto& o : overrides) config::apply_override(root, o);
  return resolve_config(root, std::filesystem::path(path).parent_path(), reg);
}

template <typename T>
TransformList build_transforms(const ComponentRegistry<T>& reg, const config::Value& specs, Rng& rng, const std::string& path) {
  TransformList out;
  const auto& seq = specs.as_sequence();
  for (std::size_t i = 0; i < seq.size(); ++i) {
    out.push_back(reg.template create_as<Transform>(ComponentKind::transform, seq[i], rng, path + "[" + std::to_string(i) + "]"));
  }
  return out;
}

}  // namespace segkit
