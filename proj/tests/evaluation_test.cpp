#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "segkit/evaluation.hpp"
#include "segkit/synthetic.hpp"
#include "support/tempdir.hpp"

namespace segkit {
namespace {

using testing::TempDir;

std::vector<std::uint8_t> file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Straight from the definition: per class, count intersection and union pixel
// by pixel, skipping ignored ground truth.
std::vector<std::optional<double>> brute_force_iou(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& gt,
                                                   std::int32_t classes, std::int32_t ignore) {
  std::vector<std::optional<double>> out(static_cast<std::size_t>(classes));
  for (std::int32_t c = 0; c < classes; ++c) {
    std::uint64_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == ignore) continue;
      if (pred[i] == c && gt[i] == c) ++inter;
      if (pred[i] == c || gt[i] == c) ++uni;
    }
    if (uni) out[static_cast<std::size_t>(c)] = static_cast<double>(inter) / static_cast<double>(uni);
  }
  return out;
}

TEST(ConfusionMatrix, WorkedExample) {
  ConfusionMatrix cm(2);
  cm.update(std::vector<std::int32_t>{0, 1, 1, 1}, std::vector<std::int32_t>{0, 0, 1, 1});
  EXPECT_EQ(cm.count(0, 0), 1u);
  EXPECT_EQ(cm.count(0, 1), 1u);
  EXPECT_EQ(cm.count(1, 0), 0u);
  EXPECT_EQ(cm.count(1, 1), 2u);
  const auto iou = iou_per_class(cm);
  EXPECT_NEAR(*iou[0], 0.5, 1e-12);
  EXPECT_NEAR(*iou[1], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(mean_iou(cm), 0.58333333333, 1e-9);
  EXPECT_NEAR(pixel_accuracy(cm), 0.75, 1e-12);
}

TEST(ConfusionMatrix, MatchesBruteForceOnRandomGrids) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const auto h = 1 + rng() % 8, w = 1 + rng() % 8;
    const auto classes = static_cast<std::int32_t>(1 + rng() % 4);
    std::vector<std::int32_t> gt(h * w), pred(h * w);
    for (std::size_t i = 0; i < gt.size(); ++i) {
      gt[i] = rng() % 5 == 0 ? 255 : static_cast<std::int32_t>(rng() % static_cast<std::uint64_t>(classes));
      pred[i] = static_cast<std::int32_t>(rng() % static_cast<std::uint64_t>(classes));
    }
    ConfusionMatrix cm(static_cast<std::size_t>(classes));
    cm.update(pred, gt);
    const auto expected = brute_force_iou(pred, gt, classes, 255);
    ASSERT_EQ(iou_per_class(cm), expected) << "trial " << trial;
    double sum = 0;
    int present = 0;
    for (const auto& v : expected)
      if (v) {
        sum += *v;
        ++present;
      }
    if (present) {
      const double m = mean_iou(cm);
      EXPECT_EQ(m, sum / present);
      EXPECT_GE(m, 0.0);
      EXPECT_LE(m, 1.0);
    } else {
      EXPECT_THROW(mean_iou(cm), MetricError);
    }
  }
}

TEST(ConfusionMatrix, AccumulationIsAdditive) {
  std::mt19937_64 rng(5);
  ConfusionMatrix joint(3), a(3), b(3);
  for (int part = 0; part < 2; ++part) {
    std::vector<std::int32_t> gt(30), pred(30);
    for (std::size_t i = 0; i < gt.size(); ++i) {
      gt[i] = static_cast<std::int32_t>(rng() % 3);
      pred[i] = static_cast<std::int32_t>(rng() % 3);
    }
    (part ? b : a).update(pred, gt);
    joint.update(pred, gt);
  }
  a += b;
  EXPECT_EQ(a, joint);
  EXPECT_THROW(a += ConfusionMatrix(2), ParameterError);
}

TEST(ConfusionMatrix, IgnoreAbsentAndErrors) {
  ConfusionMatrix cm(3);
  cm.update(std::vector<std::int32_t>{2, 2}, std::vector<std::int32_t>{255, 255});
  EXPECT_EQ(cm.total(), 0u);
  EXPECT_THROW(mean_iou(cm), MetricError);
  EXPECT_THROW(pixel_accuracy(cm), MetricError);

  cm.update(std::vector<std::int32_t>{0, 0}, std::vector<std::int32_t>{0, 0});
  const auto iou = iou_per_class(cm);
  EXPECT_EQ(iou[0], 1.0);
  EXPECT_FALSE(iou[1]);
  EXPECT_FALSE(iou[2]);
  EXPECT_EQ(mean_iou(cm), 1.0);

  EXPECT_THROW(cm.update(std::vector<std::int32_t>{0}, std::vector<std::int32_t>{0, 1}), ParameterError);
  EXPECT_THROW(cm.update(std::vector<std::int32_t>{0}, std::vector<std::int32_t>{7}), DataError);
  EXPECT_THROW(ConfusionMatrix(0), ParameterError);
}

TEST(Metrics, FormatLayout) {
  ConfusionMatrix cm(3);
  cm.update(std::vector<std::int32_t>{0, 1, 1, 1}, std::vector<std::int32_t>{0, 0, 1, 1});
  EXPECT_EQ(Metrics::from(cm).format(),
            "mIoU: 0.583333 pixel_acc: 0.750000\n"
            "class 0: 0.500000\n"
            "class 1: 0.666667\n"
            "class 2: absent\n");
}

TEST(Palette, VocColours) {
  using Rgb = std::array<std::uint8_t, 3>;
  EXPECT_EQ(palette_color(0), (Rgb{0, 0, 0}));
  EXPECT_EQ(palette_color(1), (Rgb{128, 0, 0}));
  EXPECT_EQ(palette_color(2), (Rgb{0, 128, 0}));
  EXPECT_EQ(palette_color(3), (Rgb{128, 128, 0}));
  EXPECT_EQ(palette_color(4), (Rgb{0, 0, 128}));
  EXPECT_EQ(palette_color(8), (Rgb{64, 0, 0}));
  EXPECT_EQ(palette_color(15), (Rgb{192, 128, 128}));
  EXPECT_EQ(palette_color(255), (Rgb{224, 224, 192}));
}

std::shared_ptr<FcnModel<float>> small_fcn(std::size_t classes, std::uint64_t seed) {
  Rng rng(seed);
  auto bb = std::make_shared<TinyVgg<float>>(std::vector<std::size_t>{4, 4, 4}, PoolMode::max, rng);
  return std::make_shared<FcnModel<float>>(classes, bb, 4, HeadOptions{}, rng);
}

std::vector<SampleRecord> synthetic_records(const std::string& dir, std::size_t count) {
  SyntheticOptions opts;
  opts.count = count;
  opts.size = 32;
  return parse_file_list(write_synthetic_dataset(dir, opts));
}

TEST(Evaluate, DuplicatedRecordsLeaveMetricsUnchanged) {
  TempDir tmp;
  const auto records = synthetic_records(tmp.str("data"), 3);
  auto model = small_fcn(3, 1);
  auto doubled = records;
  doubled.insert(doubled.end(), records.begin(), records.end());
  const Metrics once = evaluate<float>(*model, records, {});
  const Metrics twice = evaluate<float>(*model, doubled, {});
  EXPECT_EQ(once.miou, twice.miou);
  EXPECT_EQ(once.pixel_acc, twice.pixel_acc);
  EXPECT_EQ(once.per_class, twice.per_class);
}

TEST(Evaluate, ConstantClassifierClosedForm) {
  TempDir tmp;
  const auto records = synthetic_records(tmp.str("data"), 2);
  auto model = small_fcn(3, 2);
  Tensor<float> weight = model->head().classifier().weight();
  std::ranges::fill(weight.data(), 0.0f);
  Tensor<float> bias_t = model->head().classifier().bias();
  auto bias = bias_t.data();
  bias[0] = 0;
  bias[1] = 0;
  bias[2] = 9;

  std::uint64_t n2 = 0, total = 0;
  std::vector<bool> present(3, false);
  for (const auto& r : records) {
    const auto lab = read_label_png(r.label_path);
    for (auto v : lab.data) {
      ++total;
      n2 += v == 2;
      present[static_cast<std::size_t>(v)] = true;
    }
  }
  ASSERT_TRUE(present[0] && present[1] && present[2]);
  const double iou2 = static_cast<double>(n2) / static_cast<double>(total);
  const Metrics m = evaluate<float>(*model, records, {});
  EXPECT_EQ(*m.per_class[2], iou2);
  EXPECT_EQ(*m.per_class[0], 0.0);
  EXPECT_EQ(*m.per_class[1], 0.0);
  EXPECT_NEAR(m.miou, iou2 / 3.0, 1e-15);
  EXPECT_EQ(m.pixel_acc, iou2);
}

TEST(Evaluate, RestoresTrainingMode) {
  TempDir tmp;
  const auto records = synthetic_records(tmp.str("data"), 1);
  auto model = small_fcn(3, 3);
  model->train();
  evaluate<float>(*model, records, {});
  EXPECT_TRUE(model->is_training());
}

TEST(Predict, WritesDeterministicFiles) {
  TempDir tmp;
  const auto records = synthetic_records(tmp.str("data"), 1);
  auto model = small_fcn(3, 4);
  const TransformList transforms{std::make_shared<Normalize>(std::vector<float>{0.5f, 0.5f, 0.5f},
                                                             std::vector<float>{0.25f, 0.25f, 0.25f})};
  const auto a = predict_to_files<float>(*model, transforms, records[0].image_path, tmp.str("a"));
  const auto b = predict_to_files<float>(*model, transforms, records[0].image_path, tmp.str("b"));
  EXPECT_EQ(std::filesystem::path(a.label_path).filename(), "000_label.png");
  EXPECT_EQ(std::filesystem::path(a.color_path).filename(), "000_color.png");
  EXPECT_EQ(file_bytes(a.label_path), file_bytes(b.label_path));
  EXPECT_EQ(file_bytes(a.color_path), file_bytes(b.color_path));

  const LabelMap label = read_label_png(a.label_path);
  EXPECT_EQ(label.height, 32u);
  EXPECT_EQ(label.width, 32u);
  for (auto v : label.data) EXPECT_TRUE(v >= 0 && v < 3);
  const Image color = read_image_png(a.color_path);
  ASSERT_EQ(color.channels, 3u);
  const auto expected = colorize(label);
  for (std::size_t i = 0; i < label.data.size(); ++i)
    for (std::size_t ch = 0; ch < 3; ++ch)
      ASSERT_NEAR(color.data[ch * label.data.size() + i] * 255.0f, expected[3 * i + ch], 1e-3);
}

}  // namespace
}  // namespace segkit
