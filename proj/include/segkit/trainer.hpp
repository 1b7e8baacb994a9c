#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>

#include "segkit/checkpoint.hpp"
#include "segkit/evaluation.hpp"
#include "segkit/optim.hpp"
#include "segkit/run_config.hpp"

namespace segkit {

struct TrainState {
  std::size_t iter = 0;
  std::uint64_t seed = 0;
  double best_metric = -1.0;  // best validation mIoU so far; -1 before any evaluation
};

/// The components a run config describes, built in a fixed order from the seed.
template <typename T>
struct Session {
  std::shared_ptr<SegModel<T>> model;
  std::shared_ptr<CrossEntropyLoss> loss;
  TransformList train_transforms;
  TransformList val_transforms;
  std::vector<SampleRecord> train_records;
  std::vector<SampleRecord> val_records;
};

template <typename T>
Session<T> build_session(const RunConfig& rc, const ComponentRegistry<T>& reg, bool with_data = true) {
  Session<T> s;
  Rng rng(rc.seed);
  s.model = reg.template create_as<SegModel<T>>(ComponentKind::model, rc.model, rng, "model");
  s.loss = reg.template create_as<CrossEntropyLoss>(ComponentKind::loss, rc.loss, rng, "loss");
  s.train_transforms = build_transforms(reg, rc.train_transforms, rng, "train_dataset.transforms");
  s.val_transforms = build_transforms(reg, rc.val_transforms, rng, "val_dataset.transforms");
  if (with_data) {
    s.train_records = reg.template create_as<Dataset>(ComponentKind::dataset, rc.train_dataset, rng, "train_dataset")->records();
    s.val_records = reg.template create_as<Dataset>(ComponentKind::dataset, rc.val_dataset, rng, "val_dataset")->records();
  }
  return s;
}

template <typename T>
Checkpoint make_checkpoint(const SegModel<T>& model, std::type_identity_t<const Sgd<T>*> opt, const TrainState& state) {
  Checkpoint ck;
  put_tensors(ck, "model.", model.state());
  if (opt) put_tensors(ck, "optimizer.velocity.", opt->velocity());
  ck.put_int("state.iter", static_cast<std::int64_t>(state.iter));
  ck.put_int("state.seed", static_cast<std::int64_t>(state.seed));
  ck.put_real("state.best_metric", state.best_metric);
  return ck;
}

/// Resume: parameters, buffers, optimizer velocity, and counters.
template <typename T>
TrainState restore_checkpoint(const Checkpoint& ck, SegModel<T>& model, Sgd<T>& opt) {
  load_tensors_strict(ck, "model.", model.state());
  load_tensors_strict(ck, "optimizer.velocity.", opt.velocity());
  TrainState st;
  st.iter = static_cast<std::size_t>(ck.get_int("state.iter"));
  st.seed = static_cast<std::uint64_t>(ck.get_int("state.seed"));
  st.best_metric = ck.get_real("state.best_metric");
  return st;
}

inline void write_text_atomic(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw EnvironmentError("cannot write " + tmp);
    out << text;
    if (!out) throw EnvironmentError("write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw EnvironmentError("cannot move " + tmp + " into place: " + ec.message());
}

struct IterationRecord {
  std::size_t iter;  // 1-based count of completed iterations
  double lr;
  double loss;
};

struct TrainOptions {
  bool resume = false;  // continue from output_dir/latest.ckpt
  std::function<void(const IterationRecord&)> on_iteration;
};

struct TrainResult {
  TrainState state;
  std::optional<Metrics> last_metrics;
  std::optional<FinetuneReport> finetune;
};

inline std::string format_number(double v) {
  std::ostringstream os;
  os.precision(std::numeric_limits<double>::max_digits10);
  os << v;
  return os.str();
}

/// Runs the schedule in rc. Outputs in rc.output_dir: config.snapshot,
/// metrics.csv, latest.ckpt, best.ckpt.
template <typename T>
TrainResult train(const RunConfig& rc, const ComponentRegistry<T>& reg, const TrainOptions& opts = {}) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(rc.output_dir, ec);
  if (ec) throw EnvironmentError("cannot create output_dir " + rc.output_dir + ": " + ec.message());
  const fs::path out_dir(rc.output_dir);
  const std::string latest = (out_dir / "latest.ckpt").string();
  const std::string best = (out_dir / "best.ckpt").string();
  const std::string csv = (out_dir / "metrics.csv").string();

  Session<T> s = build_session(rc, reg);
  SegModel<T>& model = *s.model;
  model.train();
  Sgd<T> opt(model.named_parameters(), {rc.optimizer.momentum, rc.optimizer.weight_decay});
  TrainResult result;
  TrainState& state = result.state;
  state.seed = rc.seed;

  std::string log_rows = "iter,lr,loss,miou\n";
  if (opts.resume) {
    if (!fs::exists(latest)) throw EnvironmentError("cannot resume: " + latest + " does not exist");
    state = restore_checkpoint(Checkpoint::load(latest), model, opt);
    if (state.seed != rc.seed) {
      throw ConfigError("cannot resume: checkpoint was trained with seed " + std::to_string(state.seed) + ", config has " +
                        std::to_string(rc.seed));
    }
    if (state.iter > rc.schedule.max_iter) {
      throw ConfigError("cannot resume: checkpoint is at iter " + std::to_string(state.iter) + ", past max_iter " +
                        std::to_string(rc.schedule.max_iter));
    }
    // Keep the log rows up to the restored iteration.
    std::ifstream in(csv);
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
      if (header) {
        header = false;
        continue;
      }
      if (!line.empty() && std::stoull(line.substr(0, line.find(','))) <= state.iter) log_rows += line + "\n";
    }
  } else if (!rc.init_weights.empty()) {
    result.finetune = load_tensors_matching(Checkpoint::load(rc.init_weights), "model.", model.state());
  }
  write_text_atomic((out_dir / "config.snapshot").string(), rc.snapshot());
  write_text_atomic(csv, log_rows);

  auto save = [&](const std::string& path) { make_checkpoint(model, &opt, state).save(path); };
  if (rc.schedule.max_iter == 0 || state.iter == rc.schedule.max_iter) {
    save(latest);
    return result;
  }

  DataLoader<T> loader(s.train_records, s.train_transforms, {rc.schedule.batch_size, rc.seed, rc.schedule.workers, true});
  const std::size_t per_epoch = loader.batches_per_epoch();
  std::ofstream log(csv, std::ios::app);
  if (!log) throw EnvironmentError("cannot append to " + csv);

  for (std::size_t it = state.iter; it < rc.schedule.max_iter; ++it) {
    const Batch<T> batch = loader.batch(it / per_epoch, it % per_epoch);
    const double lr = poly_lr(it, rc.schedule.max_iter, rc.optimizer.base_lr, rc.optimizer.power);
    double loss_value = 0;
    {
      Graph<T> g;
      const SegOutput<T> out = model.forward(g, batch.images);
      const Tensor<T> loss = total_loss(g, out, batch.labels, *s.loss, rc.aux_weight);
      loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value)) {
        throw TrainingError("non-finite loss at iter " + std::to_string(it + 1) + " (lr " + format_number(lr) + "): " +
                            format_number(loss_value));
      }
      g.backward(loss);
    }
    opt.step(lr);
    state.iter = it + 1;
    if (opts.on_iteration) opts.on_iteration({state.iter, lr, loss_value});

    const bool last = state.iter == rc.schedule.max_iter;
    const bool eval_now = last || (rc.schedule.eval_interval && state.iter % rc.schedule.eval_interval == 0);
    std::string miou;
    if (eval_now) {
      result.last_metrics = evaluate(model, s.val_records, s.val_transforms, s.loss->ignore_index());
      miou = format_number(result.last_metrics->miou);
      const bool improved = result.last_metrics->miou > state.best_metric;
      if (improved) state.best_metric = result.last_metrics->miou;
      save(latest);
      if (improved) save(best);
    }
    if (eval_now || state.iter % rc.schedule.log_interval == 0) {
      log << state.iter << ',' << format_number(lr) << ',' << format_number(loss_value) << ',' << miou << '\n';
      log.flush();
      if (!log) throw EnvironmentError("write failed for " + csv);
    }
  }
  return result;
}

}  // namespace segkit
