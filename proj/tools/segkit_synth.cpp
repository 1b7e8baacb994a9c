#include <CLI11.hpp>

#include <filesystem>
#include <fstream>

#include "segkit/commands.hpp"
#include "segkit/synthetic.hpp"

// Writes the shapes dataset plus a ready-to-run config.yaml next to it.
int main(int argc, char** argv) {
  using namespace segkit;
  CLI::App app{"segkit-synth: generate the synthetic shapes dataset"};
  std::string out_dir, model = "fcn";
  SyntheticOptions opts;
  std::size_t max_iter = 500;
  double base_lr = 0.05;
  app.add_option("--out", out_dir, "output directory")->required();
  app.add_option("--count", opts.count, "number of images")->capture_default_str();
  app.add_option("--size", opts.size, "image side in pixels")->capture_default_str();
  app.add_option("--seed", opts.seed, "generator seed")->capture_default_str();
  app.add_option("--noise", opts.noise, "per-pixel colour noise amplitude")->capture_default_str();
  app.add_option("--model", model, "model written into config.yaml")->capture_default_str();
  app.add_option("--max-iter", max_iter, "schedule.max_iter in config.yaml")->capture_default_str();
  app.add_option("--base-lr", base_lr, "optimizer.base_lr in config.yaml")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  return guarded(std::cerr, [&] {
    write_synthetic_dataset(out_dir, opts);
    config::Value cfg = config::Value::mapping();
    cfg.set("model", model);
    config::Value train = config::Value::mapping();
    train.set("list", "train.txt");
    train.set("num_classes", 3);
    train.set("transforms", config::Value::Sequence{"normalize"});
    cfg.set("train_dataset", train);
    config::Value optimizer = config::Value::mapping();
    optimizer.set("base_lr", base_lr);
    cfg.set("optimizer", optimizer);
    config::Value schedule = config::Value::mapping();
    schedule.set("max_iter", static_cast<std::uint64_t>(max_iter));
    schedule.set("crop_h", static_cast<std::uint64_t>(opts.size));
    schedule.set("crop_w", static_cast<std::uint64_t>(opts.size));
    cfg.set("schedule", schedule);
    cfg.set("output_dir", "run");
    const std::string path = (std::filesystem::path(out_dir) / "config.yaml").string();
    write_text_atomic(path, config::emit(cfg));
    std::cout << path << '\n';
    return kExitOk;
  });
}
