#pragma once

#include <algorithm>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "segkit/trainer.hpp"

namespace segkit {

/// 0 success, 1 domain failure, 2 environment failure.
enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitEnvironment = 2 };

struct CommandStreams {
  std::ostream& out = std::cout;
  std::ostream& err = std::cerr;
};

inline std::string one_line(std::string msg) {
  std::replace(msg.begin(), msg.end(), '\n', ' ');
  while (!msg.empty() && msg.back() == ' ') msg.pop_back();
  return msg;
}

/// Runs body, mapping exceptions to an exit code and exactly one line on err.
inline int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const EnvironmentError& e) {
    err << "error: " << one_line(e.what()) << '\n';
    return kExitEnvironment;
  } catch (const std::exception& e) {
    err << "error: " << one_line(e.what()) << '\n';
    return kExitFailure;
  }
}

/// An inference-only view of a trained model: the model, its evaluation
/// transforms, and the ignore label.
template <typename T>
struct InferenceModel {
  std::shared_ptr<SegModel<T>> model;
  TransformList transforms;
  std::int32_t ignore_index = kDefaultIgnoreIndex;
};

inline constexpr std::int64_t kBundleVersion = 1;

/// Model spec and eval transforms only; nothing path-like goes into a bundle.
inline config::Value bundle_config(const RunConfig& rc, std::int32_t ignore_index) {
  config::Value v = config::Value::mapping();
  v.set("model", rc.model);
  v.set("transforms", rc.val_transforms);
  v.set("ignore_index", static_cast<std::int64_t>(ignore_index));
  return v;
}

template <typename T>
InferenceModel<T> inference_from_config(const RunConfig& rc, const ComponentRegistry<T>& reg, const std::string& weights) {
  Session<T> s = build_session(rc, reg, false);
  load_tensors_strict(Checkpoint::load(weights), "model.", s.model->state());
  return {s.model, s.val_transforms, s.loss->ignore_index()};
}

template <typename T>
InferenceModel<T> inference_from_bundle(const std::string& path, const ComponentRegistry<T>& reg) {
  const Checkpoint ck = Checkpoint::load(path);
  if (!ck.find("bundle.version")) throw FormatError(path + " is not an export bundle (no bundle.version entry)");
  const std::int64_t version = ck.get_int("bundle.version");
  if (version != kBundleVersion) throw FormatError(path + ": unsupported bundle version " + std::to_string(version));
  const config::Value cfg = config::parse(ck.get_bytes("bundle.config"), path + ":bundle.config");
  Rng rng(0);
  InferenceModel<T> m;
  m.model = reg.template create_as<SegModel<T>>(ComponentKind::model, *cfg.find("model"), rng, "model");
  m.transforms = build_transforms(reg, *cfg.find("transforms"), rng, "transforms");
  m.ignore_index = static_cast<std::int32_t>(cfg.find("ignore_index")->as_int());
  load_tensors_strict(ck, "model.", m.model->state());
  return m;
}

// ---- subcommands ----

struct TrainArgs {
  std::string config;
  bool resume = false;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
};

template <typename T>
int cmd_train(const TrainArgs& a, const ComponentRegistry<T>& reg, CommandStreams io = {}) {
  return guarded(io.err, [&] {
    auto overrides = a.overrides;
    if (a.seed) overrides.push_back("seed=" + std::to_string(*a.seed));
    const RunConfig rc = load_config(a.config, overrides, reg);
    TrainOptions opts;
    opts.resume = a.resume;
    opts.on_iteration = [&](const IterationRecord& r) {
      if (r.iter % rc.schedule.log_interval == 0 || r.iter == rc.schedule.max_iter)
        io.out << "iter " << r.iter << " lr " << format_number(r.lr) << " loss " << format_number(r.loss) << '\n';
    };
    const TrainResult result = train(rc, reg, opts);
    if (result.finetune) io.out << result.finetune->format();
    if (result.last_metrics) io.out << result.last_metrics->format();
    io.out << "output: " << rc.output_dir << '\n';
    return kExitOk;
  });
}

template <typename T>
int cmd_val(const std::string& config, const std::string& weights, const ComponentRegistry<T>& reg, CommandStreams io = {}) {
  return guarded(io.err, [&] {
    const RunConfig rc = load_config(config, {}, reg);
    auto m = inference_from_config(rc, reg, weights);
    Rng rng(rc.seed);
    const auto records = reg.template create_as<Dataset>(ComponentKind::dataset, rc.val_dataset, rng, "val_dataset")->records();
    io.out << evaluate(*m.model, records, m.transforms, m.ignore_index).format();
    return kExitOk;
  });
}

struct PredictArgs {
  std::string config;
  std::string weights;
  std::string bundle;
  std::string image;
  std::string out;
};

template <typename T>
int cmd_predict(const PredictArgs& a, const ComponentRegistry<T>& reg, CommandStreams io = {}) {
  return guarded(io.err, [&] {
    const bool from_bundle = !a.bundle.empty();
    if (from_bundle == (!a.config.empty() || !a.weights.empty()))
      throw ConfigError("predict needs either --bundle or both --config and --weights");
    if (!from_bundle && (a.config.empty() || a.weights.empty())) throw ConfigError("predict needs both --config and --weights");
    auto m = from_bundle ? inference_from_bundle(a.bundle, reg) : inference_from_config(load_config(a.config, {}, reg), reg, a.weights);
    const auto files = predict_to_files(*m.model, m.transforms, a.image, a.out);
    io.out << files.label_path << '\n' << files.color_path << '\n';
    return kExitOk;
  });
}

template <typename T>
int cmd_check_data(const std::string& config, const ComponentRegistry<T>& reg, CommandStreams io = {}) {
  return guarded(io.err, [&] {
    const RunConfig rc = load_config(config, {}, reg);
    const std::int32_t ignore = static_cast<std::int32_t>(rc.loss.find("ignore_index")->as_int());
    Rng rng(rc.seed);
    std::size_t errors = 0;
    std::string seen;
    for (const auto& [label, spec] : {std::pair{"train", &rc.train_dataset}, std::pair{"val", &rc.val_dataset}}) {
      const std::string list = spec->find("list") ? spec->find("list")->as_string() : "";
      if (!list.empty() && list == seen) continue;
      seen = list;
      const auto records = reg.template create_as<Dataset>(ComponentKind::dataset, *spec, rng, std::string(label) + "_dataset")->records();
      const CheckReport report = check_dataset(records, rc.num_classes, ignore);
      io.out << label << ": " << list << '\n' << report.format();
      errors += report.entries.size();
    }
    if (errors) throw DataError("check-data found " + std::to_string(errors) + " violation" + (errors == 1 ? "" : "s"));
    return kExitOk;
  });
}

template <typename T>
int cmd_export(const std::string& config, const std::string& weights, const std::string& out, const ComponentRegistry<T>& reg,
               CommandStreams io = {}) {
  return guarded(io.err, [&] {
    const RunConfig rc = load_config(config, {}, reg);
    auto m = inference_from_config(rc, reg, weights);
    Checkpoint bundle;
    bundle.put_int("bundle.version", kBundleVersion);
    bundle.put_bytes("bundle.config", config::emit(bundle_config(rc, m.ignore_index)));
    put_tensors(bundle, "model.", m.model->state());
    bundle.save(out);
    io.out << "wrote " << out << '\n';
    return kExitOk;
  });
}

}  // namespace segkit
