#include <CLI11.hpp>

#include "segkit/commands.hpp"

int main(int argc, char** argv) {
  using namespace segkit;
  CLI::App app{"segkit: config-driven semantic segmentation"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "train a model from a config file");
  train_cmd->add_option("--config", train.config, "run config")->required();
  train_cmd->add_flag("--resume", train.resume, "continue from output_dir/latest.ckpt");
  train_cmd->add_option("--seed", train.seed, "override the config seed");
  train_cmd->add_option("overrides", train.overrides, "key.path=value overrides");

  std::string val_config, val_weights;
  auto* val_cmd = app.add_subcommand("val", "evaluate a checkpoint on the validation list");
  val_cmd->add_option("--config", val_config)->required();
  val_cmd->add_option("--weights", val_weights)->required();

  PredictArgs predict;
  auto* predict_cmd = app.add_subcommand("predict", "write label and colour PNGs for one image");
  auto* p_config = predict_cmd->add_option("--config", predict.config);
  auto* p_weights = predict_cmd->add_option("--weights", predict.weights);
  auto* p_bundle = predict_cmd->add_option("--bundle", predict.bundle);
  p_bundle->excludes(p_config)->excludes(p_weights);
  p_config->needs(p_weights);
  p_weights->needs(p_config);
  predict_cmd->add_option("--image", predict.image)->required();
  predict_cmd->add_option("--out", predict.out)->required();

  std::string check_config;
  auto* check_cmd = app.add_subcommand("check-data", "validate the train and val lists");
  check_cmd->add_option("--config", check_config)->required();

  std::string export_config, export_weights, export_out;
  auto* export_cmd = app.add_subcommand("export", "write a self-contained inference bundle");
  export_cmd->add_option("--config", export_config)->required();
  export_cmd->add_option("--weights", export_weights)->required();
  export_cmd->add_option("--out", export_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << one_line(e.what()) << '\n';
    return kExitFailure;
  }

  const auto reg = builtin_registry<float>();
  if (*train_cmd) return cmd_train(train, reg);
  if (*val_cmd) return cmd_val(val_config, val_weights, reg);
  if (*predict_cmd) return cmd_predict(predict, reg);
  if (*check_cmd) return cmd_check_data(check_config, reg);
  return cmd_export(export_config, export_weights, export_out, reg);
}
