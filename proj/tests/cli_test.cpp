#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "segkit/commands.hpp"
#include "segkit/synthetic.hpp"
#include "support/corpus.hpp"
#include "support/tempdir.hpp"

namespace segkit {
namespace {

using testing::TempDir;
using testing::CorpusRecord;
using testing::write_check_corpus;

std::vector<std::uint8_t> file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream(path, std::ios::binary) << text;
}

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

// A small synthetic run: 4 images of 32x32, no augmentation.
struct Fixture {
  TempDir tmp;
  std::string config;
  std::ostringstream out, err;
  const ComponentRegistry<float> reg = builtin_registry<float>();

  explicit Fixture(std::size_t max_iter = 4) {
    SyntheticOptions opts;
    opts.count = 4;
    opts.size = 32;
    write_synthetic_dataset(tmp.str("data"), opts);
    config = tmp.str("data/config.yaml");
    write_file(config,
               "model: {type: fcn, channels: 8}\n"
               "train_dataset:\n  list: train.txt\n  num_classes: 3\n  transforms: [normalize]\n"
               "schedule: {max_iter: " + std::to_string(max_iter) + ", batch_size: 4, crop_h: 32, crop_w: 32}\n"
               "output_dir: run\n");
  }
  CommandStreams io() { return {out, err}; }
  std::string ckpt() const { return tmp.str("data/run/latest.ckpt"); }
  int train() { return cmd_train(TrainArgs{config, false, std::nullopt, {}}, reg, io()); }
};

TEST(CliTrain, WritesArtifactsQuietly) {
  Fixture f;
  EXPECT_EQ(f.train(), kExitOk);
  EXPECT_EQ(f.err.str(), "");
  for (const char* name : {"config.snapshot", "metrics.csv", "latest.ckpt"})
    EXPECT_TRUE(std::filesystem::exists(f.tmp.str(std::string("data/run/") + name))) << name;
  EXPECT_NE(f.out.str().find("mIoU: "), std::string::npos);
}

TEST(CliTrain, MissingListIsEnvironmentFailure) {
  Fixture f;
  std::filesystem::remove(f.tmp.str("data/train.txt"));
  EXPECT_EQ(f.train(), kExitEnvironment);
  EXPECT_EQ(line_count(f.err.str()), 1u);
  EXPECT_NE(f.err.str().find("train.txt"), std::string::npos);
}

TEST(CliTrain, ResumeAndSeedOverride) {
  Fixture f;
  ASSERT_EQ(f.train(), kExitOk);
  EXPECT_EQ(cmd_train(TrainArgs{f.config, true, std::nullopt, {"schedule.max_iter=6"}}, f.reg, f.io()), kExitOk);
  EXPECT_EQ(Checkpoint::load(f.ckpt()).get_int("state.iter"), 6);
  // The checkpoint belongs to seed 0; resuming under another seed is refused.
  EXPECT_EQ(cmd_train(TrainArgs{f.config, true, 99, {"schedule.max_iter=8"}}, f.reg, f.io()), kExitFailure);
  EXPECT_EQ(line_count(f.err.str()), 1u);
}

TEST(CliTrain, BadOverrideAndUnknownModel) {
  Fixture f;
  EXPECT_EQ(cmd_train(TrainArgs{f.config, false, std::nullopt, {"model.type=unet2"}}, f.reg, f.io()), kExitFailure);
  EXPECT_NE(f.err.str().find("did you mean 'unet'"), std::string::npos) << f.err.str();
  EXPECT_EQ(line_count(f.err.str()), 1u);
}

TEST(CliVal, PrintsMetricsAndRejectsBadCheckpoints) {
  Fixture f;
  ASSERT_EQ(f.train(), kExitOk);
  f.out.str("");
  EXPECT_EQ(cmd_val(f.config, f.ckpt(), f.reg, f.io()), kExitOk);
  const std::string text = f.out.str();
  EXPECT_EQ(text.rfind("mIoU: ", 0), 0u);
  EXPECT_NE(text.find("\nclass 2: "), std::string::npos);
  EXPECT_EQ(f.err.str(), "");

  auto bytes = file_bytes(f.ckpt());
  bytes[bytes.size() / 2] ^= 0x5a;
  const std::string corrupt = f.tmp.str("corrupt.ckpt");
  std::ofstream(corrupt, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  EXPECT_EQ(cmd_val(f.config, corrupt, f.reg, f.io()), kExitFailure);

  // Same weights, different topology.
  EXPECT_EQ(cmd_val(f.config, f.ckpt(), f.reg, f.io()), kExitOk);
  write_file(f.config, "model: {type: fcn, channels: 4}\ntrain_dataset: {list: train.txt, num_classes: 3}\n");
  EXPECT_EQ(cmd_val(f.config, f.ckpt(), f.reg, f.io()), kExitFailure);
  EXPECT_NE(f.err.str().find("first mismatch"), std::string::npos);
  EXPECT_EQ(line_count(f.err.str()), 2u);

  EXPECT_EQ(cmd_val(f.config, f.tmp.str("nope.ckpt"), f.reg, f.io()), kExitEnvironment);
}

TEST(CliPredict, BundleMatchesDirectBytes) {
  Fixture f;
  ASSERT_EQ(f.train(), kExitOk);
  const std::string image = f.tmp.str("data/images/002.png");
  const std::string bundle = f.tmp.str("model.bundle");
  ASSERT_EQ(cmd_export(f.config, f.ckpt(), bundle, f.reg, f.io()), kExitOk);
  ASSERT_EQ(cmd_predict(PredictArgs{f.config, f.ckpt(), "", image, f.tmp.str("direct")}, f.reg, f.io()), kExitOk);
  ASSERT_EQ(cmd_predict(PredictArgs{"", "", bundle, image, f.tmp.str("bundled")}, f.reg, f.io()), kExitOk);
  ASSERT_EQ(cmd_predict(PredictArgs{f.config, f.ckpt(), "", image, f.tmp.str("again")}, f.reg, f.io()), kExitOk);
  for (const char* name : {"002_label.png", "002_color.png"}) {
    const auto direct = file_bytes(f.tmp.str(std::string("direct/") + name));
    ASSERT_FALSE(direct.empty());
    EXPECT_EQ(direct, file_bytes(f.tmp.str(std::string("bundled/") + name))) << name;
    EXPECT_EQ(direct, file_bytes(f.tmp.str(std::string("again/") + name))) << name;
  }
  EXPECT_EQ(f.err.str(), "");
}

TEST(CliExport, BundleIsRelocatableAndVersioned) {
  Fixture f;
  ASSERT_EQ(f.train(), kExitOk);
  const std::string bundle = f.tmp.str("model.bundle");
  ASSERT_EQ(cmd_export(f.config, f.ckpt(), bundle, f.reg, f.io()), kExitOk);
  const Checkpoint ck = Checkpoint::load(bundle);
  EXPECT_EQ(ck.get_int("bundle.version"), kBundleVersion);
  const std::string cfg = ck.get_bytes("bundle.config");
  EXPECT_EQ(cfg.find(f.tmp.path().string()), std::string::npos) << cfg;
  for (const auto& e : ck.entries) EXPECT_TRUE(e.name.rfind("model.", 0) == 0 || e.name.rfind("bundle.", 0) == 0) << e.name;

  // Move the bundle and delete the training tree; predict still works.
  TempDir elsewhere;
  const std::string moved = elsewhere.str("m.bundle");
  std::filesystem::copy_file(bundle, moved);
  const std::string image = elsewhere.str("img.png");
  std::filesystem::copy_file(f.tmp.str("data/images/000.png"), image);
  std::filesystem::remove_all(f.tmp.str("data"));
  EXPECT_EQ(cmd_predict(PredictArgs{"", "", moved, image, elsewhere.str("out")}, f.reg, f.io()), kExitOk);
  EXPECT_TRUE(std::filesystem::exists(elsewhere.str("out/img_label.png")));
}

TEST(CliPredict, ErrorPaths) {
  Fixture f;
  ASSERT_EQ(f.train(), kExitOk);
  EXPECT_EQ(cmd_predict(PredictArgs{f.config, f.ckpt(), "", f.tmp.str("missing.png"), f.tmp.str("o")}, f.reg, f.io()),
            kExitEnvironment);
  EXPECT_EQ(cmd_predict(PredictArgs{f.config, "", "", f.tmp.str("data/images/000.png"), f.tmp.str("o")}, f.reg, f.io()),
            kExitFailure);
  EXPECT_EQ(cmd_predict(PredictArgs{f.config, f.ckpt(), f.ckpt(), f.tmp.str("data/images/000.png"), f.tmp.str("o")}, f.reg, f.io()),
            kExitFailure);
  // A training checkpoint is not a bundle.
  EXPECT_EQ(cmd_predict(PredictArgs{"", "", f.ckpt(), f.tmp.str("data/images/000.png"), f.tmp.str("o")}, f.reg, f.io()),
            kExitFailure);
  EXPECT_EQ(line_count(f.err.str()), 4u);
}

TEST(CliCheckData, CleanCorruptAndMissing) {
  TempDir tmp;
  std::vector<CorpusRecord> truth;
  const std::string clean_list = write_check_corpus(tmp.str("clean"), 5, 0, truth);
  const std::string bad_list = write_check_corpus(tmp.str("bad"), 5, 4, truth);
  const auto reg = builtin_registry<float>();
  const std::string config = tmp.str("config.yaml");
  auto write_config = [&](const std::string& list) {
    write_file(config, "model: fcn\ntrain_dataset: {list: " + list + ", num_classes: 3}\n");
  };

  std::ostringstream out, err;
  write_config(clean_list);
  EXPECT_EQ(cmd_check_data(config, reg, {out, err}), kExitOk);
  EXPECT_NE(out.str().find("\nOK\n"), std::string::npos) << out.str();
  EXPECT_EQ(err.str(), "");

  out.str("");
  write_config(bad_list);
  EXPECT_EQ(cmd_check_data(config, reg, {out, err}), kExitFailure);
  EXPECT_NE(out.str().find("FAILED (4 errors)"), std::string::npos) << out.str();
  for (const char* cat : {"missing-file", "undecodable", "size-mismatch", "label-out-of-range"})
    EXPECT_NE(out.str().find(cat), std::string::npos) << cat;
  EXPECT_EQ(line_count(err.str()), 1u);

  write_config(tmp.str("absent.txt"));
  EXPECT_EQ(cmd_check_data(config, reg, {out, err}), kExitEnvironment);
  EXPECT_EQ(line_count(err.str()), 2u);
}

// The real binary: exit codes and the single stderr line.
int run(const std::string& args, const std::string& err_file) {
  const int status = std::system((std::string(SEGKIT_CLI_PATH) + " " + args + " >/dev/null 2>" + err_file).c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(CliBinary, ExitCodes) {
  Fixture f;
  const std::string err = f.tmp.str("err.txt");
  auto err_lines = [&] {
    std::ifstream in(err);
    return line_count({std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()});
  };
  EXPECT_EQ(run("check-data --config " + f.config, err), 0);
  EXPECT_EQ(err_lines(), 0u);
  EXPECT_EQ(run("train --config " + f.config + " --seed 3 schedule.max_iter=2", err), 0);
  EXPECT_EQ(err_lines(), 0u);
  EXPECT_EQ(run("val --config " + f.config + " --weights " + f.tmp.str("none.ckpt"), err), 2);
  EXPECT_EQ(err_lines(), 1u);
  EXPECT_EQ(run("train --config " + f.config + " optimizer.base_lr=-1", err), 1);
  EXPECT_EQ(err_lines(), 1u);
  EXPECT_EQ(run("frobnicate", err), 1);
  EXPECT_EQ(err_lines(), 1u);
  EXPECT_EQ(run("predict --bundle x --config y --weights z --image i --out o", err), 1);
  EXPECT_EQ(err_lines(), 1u);
}

}  // namespace
}  // namespace segkit
