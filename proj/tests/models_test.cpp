#include <gtest/gtest.h>

#include <random>

#include "segkit/models.hpp"
#include "support/gradcheck.hpp"

namespace segkit {
namespace {

using testing::check_gradients;
using testing::random_tensor;

constexpr double kGradTol = 1e-5;
const testing::GradCheckOptions kHeadCheck{1e-3, true, 1e-3};

void fill(const Tensor<double>& t, double v) {
  Tensor<double> h = t;
  for (auto& x : h.data()) x = v;
}

template <typename T>
Tensor<T> random_image(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(0.0, 1.0);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(d(rng));
  return t;
}

std::size_t conv_bn_count(std::size_t in, std::size_t out, std::size_t k) { return in * out * k * k + 2 * out; }

// ---- backbones -------------------------------------------------------------

TEST(TinyVgg, PyramidShapesAt64) {
  Rng rng(1);
  std::mt19937_64 data(2);
  TinyVgg<double> vgg({16, 32, 64}, PoolMode::max, rng);
  Graph<double> g;
  auto p = vgg.forward(g, random_image<double>({2, 3, 64, 64}, data));
  ASSERT_EQ(p.levels.size(), 2u);
  EXPECT_EQ(p.levels[0].stride, 4u);
  EXPECT_EQ(p.levels[0].feature.shape(), (Shape{2, 32, 16, 16}));
  EXPECT_EQ(p.levels[1].stride, 8u);
  EXPECT_EQ(p.levels[1].feature.shape(), (Shape{2, 64, 8, 8}));

  TinyVgg<double> five({4, 4, 4, 4, 4}, PoolMode::max, rng);
  std::vector<std::size_t> strides;
  for (const auto& l : five.levels()) strides.push_back(l.stride);
  EXPECT_EQ(strides, (std::vector<std::size_t>{4, 8, 16, 32}));
  EXPECT_THROW(TinyVgg<double>({16, 32}, PoolMode::max, rng), ParameterError);
  EXPECT_THROW(TinyVgg<double>({1, 1, 1, 1, 1, 1}, PoolMode::max, rng), ParameterError);
}

TEST(TinyVgg, ParameterCountClosedForm) {
  Rng rng(3);
  const std::vector<std::size_t> widths{8, 16, 24, 32};
  TinyVgg<float> vgg(widths, PoolMode::max, rng);
  std::size_t expect = 0, in = 3;
  for (std::size_t w : widths) {
    expect += conv_bn_count(in, w, 3) + conv_bn_count(w, w, 3);
    in = w;
  }
  EXPECT_EQ(vgg.parameter_count(), expect);
}

TEST(TinyVgg, ZeroInputGivesZeroFeatures) {
  Rng rng(4);
  TinyVgg<double> vgg({4, 8, 8}, PoolMode::max, rng);
  Graph<double> g;
  auto p = vgg.forward(g, Tensor<double>::zeros({2, 3, 16, 16}));
  for (const auto& l : p.levels)
    for (double v : l.feature.data()) EXPECT_EQ(v, 0.0);
}

TEST(TinyVgg, AvgPoolVariantIsFlipEquivariant) {
  Rng rng(5);
  std::mt19937_64 data(6);
  TinyVgg<double> vgg({4, 6, 8}, PoolMode::avg, rng);
  // Mirror-symmetric kernels make each conv commute with a horizontal flip.
  for (const auto& [name, p] : vgg.named_parameters()) {
    if (p.rank() != 4) continue;
    Tensor<double> w = p;
    const std::size_t k = w.dim(3);
    for (std::size_t row = 0; row < w.numel() / k; ++row)
      for (std::size_t x = 0; x < k / 2; ++x) w.data()[row * k + (k - 1 - x)] = w.data()[row * k + x];
  }
  auto img = random_image<double>({2, 3, 16, 16}, data);
  Tensor<double> flipped(img.shape());
  for (std::size_t r = 0; r < 2 * 3 * 16; ++r)
    for (std::size_t x = 0; x < 16; ++x) flipped.data()[r * 16 + x] = img.data()[r * 16 + 15 - x];
  Graph<double> g;
  const auto a = vgg.forward(g, img).levels[0].feature;
  const auto b = vgg.forward(g, flipped).levels[0].feature;
  const std::size_t w = a.dim(3);
  for (std::size_t r = 0; r < a.numel() / w; ++r)
    for (std::size_t x = 0; x < w; ++x) EXPECT_NEAR(a.data()[r * w + x], b.data()[r * w + w - 1 - x], 1e-10);
}

TEST(TinyResNet, OutputStrideControlsDeepestSize) {
  Rng rng(7);
  std::mt19937_64 data(8);
  auto img = random_image<float>({2, 3, 64, 64}, data);
  const std::pair<std::size_t, std::size_t> cases[] = {{8, 8}, {16, 4}, {32, 2}};
  for (auto [os, side] : cases) {
    TinyResNet<float> net({4, 8, 8, 16}, os, rng);
    Graph<float> g(GraphMode::inference);
    auto p = net.forward(g, img);
    EXPECT_EQ(p.deepest().stride, os);
    EXPECT_EQ(p.deepest().feature.shape(), (Shape{2, 16, side, side})) << "os " << os;
    EXPECT_EQ(net.output_stride(), os);
  }
  EXPECT_THROW(TinyResNet<float>({4, 8, 8, 16}, 4, rng), ParameterError);
  EXPECT_THROW(TinyResNet<float>({4, 8, 16}, 8, rng), ParameterError);
}

TEST(TinyResNet, DilationPreservesParameterTally) {
  Rng a(9), b(9);
  TinyResNet<float> os8({16, 32, 64, 128}, 8, a), os32({16, 32, 64, 128}, 32, b);
  EXPECT_EQ(os8.parameter_count(), os32.parameter_count());
  auto pa = os8.named_parameters(), pb = os32.named_parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].first, pb[i].first);
    EXPECT_EQ(pa[i].second.values(), pb[i].second.values());
  }
}

TEST(TinyResNet, ImpulseReachesMoreOutputsAtStride8) {
  auto influenced = [](std::size_t os) {
    Rng rng(10);
    TinyResNet<double> net({4, 4, 4, 4}, os, rng);
    net.eval();
    Graph<double> g(GraphMode::inference);
    Tensor<double> base = Tensor<double>::zeros({1, 3, 32, 32});
    Tensor<double> impulse = Tensor<double>::zeros({1, 3, 32, 32});
    for (std::size_t c = 0; c < 3; ++c) impulse.data()[(c * 32 + 11) * 32 + 9] = 1.0;
    auto fa = net.forward(g, base).deepest().feature;
    auto fb = net.forward(g, impulse).deepest().feature;
    std::set<std::size_t> positions;
    const std::size_t hw = fa.dim(2) * fa.dim(3);
    for (std::size_t i = 0; i < fa.numel(); ++i)
      if (fa.data()[i] != fb.data()[i]) positions.insert(i % hw);
    return positions.size();
  };
  const std::size_t at8 = influenced(8), at32 = influenced(32);
  EXPECT_GT(at8, at32);
  EXPECT_GE(at32, 1u);
}

TEST(Backbones, RejectInputsSmallerThanOutputStride) {
  Rng rng(11);
  TinyResNet<float> net({4, 4, 4, 4}, 16, rng);
  Graph<float> g;
  EXPECT_THROW(net.forward(g, Tensor<float>::zeros({1, 3, 15, 40})), GeometryError);
  TinyVgg<float> vgg({4, 4, 4}, PoolMode::max, rng);
  EXPECT_THROW(vgg.forward(g, Tensor<float>::zeros({1, 3, 7, 7})), GeometryError);
  EXPECT_THROW(vgg.forward(g, Tensor<float>::zeros({1, 1, 16, 16})), ParameterError);
}

TEST(Backbones, PyramidInvariantsOverRandomSizes) {
  Rng rng(12);
  std::mt19937_64 data(13);
  TinyVgg<float> vgg({4, 4, 4, 4}, PoolMode::max, rng);
  TinyResNet<float> res8({4, 4, 4, 4}, 8, rng), res32({4, 4, 4, 4}, 32, rng);
  const Backbone<float>* nets[] = {&vgg, &res8, &res32};
  std::uniform_int_distribution<std::size_t> side(32, 96);
  for (int trial = 0; trial < 6; ++trial) {
    const std::size_t h = side(data), w = side(data);
    auto img = random_image<float>({1, 3, h, w}, data);
    for (const auto* net : nets) {
      Graph<float> g(GraphMode::inference);
      auto p = net->forward(g, img);
      ASSERT_GE(p.levels.size(), 2u);
      for (std::size_t i = 0; i < p.levels.size(); ++i) {
        const std::size_t s = p.levels[i].stride;
        EXPECT_EQ(s & (s - 1), 0u);
        if (i) {
          EXPECT_GT(s, p.levels[i - 1].stride);
        }
        EXPECT_EQ(p.levels[i].feature.dim(2), ceil_div(h, s)) << net->component_name() << " " << h << "x" << w;
        EXPECT_EQ(p.levels[i].feature.dim(3), ceil_div(w, s)) << net->component_name() << " " << h << "x" << w;
        EXPECT_EQ(p.levels[i].feature.dim(1), net->levels()[i].channels);
      }
    }
  }
}

TEST(Backbones, Deterministic) {
  Rng rng(14);
  std::mt19937_64 data(15);
  TinyResNet<float> net({4, 4, 8, 8}, 16, rng);
  auto img = random_image<float>({2, 3, 32, 32}, data);
  Graph<float> g;
  auto a = net.forward(g, img), b = net.forward(g, img);
  for (std::size_t i = 0; i < a.levels.size(); ++i) EXPECT_EQ(a.levels[i].feature.values(), b.levels[i].feature.values());
}

// ---- heads -----------------------------------------------------------------

TEST(FcnHead, ShapeAndBiasDominance) {
  Rng rng(20);
  std::mt19937_64 data(21);
  FcnHead<double> head(8, 8, 3, false, rng);
  Graph<double> g;
  auto feat = random_tensor({2, 8, 8, 8}, data, false);
  EXPECT_EQ(head.forward(g, feat, 64, 64).shape(), (Shape{2, 3, 64, 64}));
  fill(head.classifier().weight(), 0.0);
  Tensor<double> bias = head.classifier().bias();
  bias.data()[0] = 0;
  bias.data()[1] = 5;
  bias.data()[2] = 0;
  for (int label : argmax_channel(head.forward(g, feat, 64, 64))) EXPECT_EQ(label, 1);
}

TEST(FcnModel, GradientReachesBackbone) {
  Rng rng(22);
  std::mt19937_64 data(23);
  auto bb = std::make_shared<TinyVgg<double>>(std::vector<std::size_t>{4, 4, 4}, PoolMode::max, rng);
  FcnModel<double> model(3, bb, 4, {}, rng);
  Graph<double> g;
  auto out = model.forward(g, random_image<double>({2, 3, 16, 16}, data));
  g.backward(reduce_sum(g, mul(g, out.main_logits, random_tensor(out.main_logits.shape(), data, false))));
  bool any = false;
  for (const auto& [name, p] : model.named_parameters()) {
    if (name.rfind("backbone.", 0) != 0 || !p.has_grad()) continue;
    for (double v : p.grad()) any = any || v != 0.0;
  }
  EXPECT_TRUE(any);
  // Spot check one backbone weight against a finite difference.
  Tensor<double> w = model.backbone().named_parameters().front().second;
  const double analytic = w.grad()[0];
  w.clear_grad();
  const double saved = w.data()[0];
  auto eval = [&](double v) {
    w.data()[0] = v;
    Graph<double> gi(GraphMode::inference);
    std::mt19937_64 same(23);
    auto img = random_image<double>({2, 3, 16, 16}, same);
    auto o = model.forward(gi, img);
    auto weights = random_tensor(o.main_logits.shape(), same, false);
    return reduce_sum(gi, mul(gi, o.main_logits, weights)).item();
  };
  const double h = 1e-5;
  const double numeric = (eval(saved + h) - eval(saved - h)) / (2 * h);
  w.data()[0] = saved;
  EXPECT_LT(testing::rel_error(analytic, numeric), 1e-4);
}

TEST(UNetDecoder, WalksPyramidAndUsesSkips) {
  Rng rng(24);
  std::mt19937_64 data(25);
  const std::vector<LevelInfo> levels{{4, 6}, {8, 8}, {16, 10}};
  UNetDecoder<double> dec(levels, 3, false, rng);
  FeaturePyramid<double> p;
  p.levels = {{4, random_tensor({2, 6, 16, 16}, data, false)},
              {8, random_tensor({2, 8, 8, 8}, data, false)},
              {16, random_tensor({2, 10, 4, 4}, data, false)}};
  Graph<double> g;
  auto out = dec.forward(g, p, 64, 64);
  EXPECT_EQ(out.shape(), (Shape{2, 3, 64, 64}));
  FeaturePyramid<double> no_skip = p;
  no_skip.levels[0].feature = Tensor<double>::zeros({2, 6, 16, 16});
  no_skip.levels[1].feature = Tensor<double>::zeros({2, 8, 8, 8});
  EXPECT_NE(dec.forward(g, no_skip, 64, 64).values(), out.values());

  FeaturePyramid<double> missing = p;
  missing.levels[1].stride = 2;
  EXPECT_THROW(dec.forward(g, missing, 64, 64), ConfigError);
  missing.levels.pop_back();
  EXPECT_THROW(dec.forward(g, missing, 64, 64), ConfigError);
}

TEST(UNetDecoder, SingleLevelIsFcnTopology) {
  Rng a(26), b(26);
  std::mt19937_64 data(27);
  UNetDecoder<double> dec({{8, 5}}, 3, false, a);
  FcnHead<double> fcn(5, 5, 3, false, b);
  EXPECT_EQ(dec.parameter_count(), fcn.parameter_count());
  auto feat = random_tensor({2, 5, 4, 4}, data, false);
  FeaturePyramid<double> p;
  p.levels = {{8, feat}};
  Graph<double> g;
  EXPECT_EQ(dec.forward(g, p, 32, 32).values(), fcn.forward(g, feat, 32, 32).values());
}

TEST(PyramidPooling, ChannelBookkeeping) {
  Rng rng(30);
  std::mt19937_64 data(31);
  PyramidPooling<float> ppm(128, {1, 2, 3, 6}, 32, false, rng);
  EXPECT_EQ(ppm.out_channels(), 256u);
  Graph<float> g;
  auto out = ppm.forward(g, random_image<float>({2, 128, 6, 6}, data));
  EXPECT_EQ(out.shape(), (Shape{2, 256, 6, 6}));
  EXPECT_THROW(ppm.forward(g, random_image<float>({2, 128, 5, 5}, data)), ParameterError);
}

TEST(PyramidPooling, ConstantInputGivesSpatiallyConstantOutput) {
  Rng rng(32);
  PyramidPooling<double> ppm(3, {1, 2, 3}, 2, false, rng);
  ppm.eval();
  Tensor<double> x({1, 3, 6, 6});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 36; ++i) x.data()[c * 36 + i] = 0.3 * static_cast<double>(c) - 0.2;
  Graph<double> g(GraphMode::inference);
  auto out = ppm.forward(g, x);
  for (std::size_t c = 0; c < out.dim(1); ++c)
    for (std::size_t i = 1; i < 36; ++i) EXPECT_NEAR(out.data()[c * 36 + i], out.data()[c * 36], 1e-12);
}

TEST(PyramidPooling, GlobalBinBroadcastsMean) {
  Rng rng(33);
  PyramidPooling<double> ppm(2, {1}, 2, false, rng);
  ppm.eval();
  Tensor<double> w = ppm.branch(0).conv().weight();
  std::fill(w.data().begin(), w.data().end(), 0.0);
  w.data()[0] = 1.0;  // (0,0)
  w.data()[3] = 1.0;  // (1,1)
  Tensor<double> x({1, 2, 2, 2}, {1, 2, 3, 6, 4, 0, 8, 4});
  Graph<double> g(GraphMode::inference);
  auto out = ppm.forward(g, x);
  ASSERT_EQ(out.shape(), (Shape{1, 4, 2, 2}));
  const double s = 1.0 / std::sqrt(1.0 + 1e-5);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(out.data()[i], x.data()[i]);
    EXPECT_NEAR(out.data()[8 + i], 3.0 * s, 1e-12);
    EXPECT_NEAR(out.data()[12 + i], 4.0 * s, 1e-12);
  }
}

TEST(Aspp, BranchBookkeeping) {
  Rng rng(40);
  std::mt19937_64 data(41);
  Aspp<float> aspp(16, {1, 2, 3}, 8, false, rng);
  EXPECT_EQ(aspp.branch_count(), 5u);
  EXPECT_EQ(aspp.concat_channels(), 40u);
  Graph<float> g;
  auto x = random_image<float>({2, 16, 8, 8}, data);
  EXPECT_EQ(aspp.branches(g, x).shape(), (Shape{2, 40, 8, 8}));
  EXPECT_EQ(aspp.forward(g, x).shape(), (Shape{2, 8, 8, 8}));
  EXPECT_THROW(Aspp<float>(16, {}, 8, false, rng), ParameterError);
}

TEST(Aspp, ConstantInputWithEqualCenterTapsIsConstant) {
  Rng rng(42);
  Aspp<double> aspp(2, {1, 2, 3}, 2, false, rng);
  aspp.eval();
  for (const auto& [name, p] : aspp.named_parameters()) {
    if (p.rank() != 4) continue;
    Tensor<double> w = p;
    const std::size_t k = w.dim(2);
    for (std::size_t i = 0; i < w.numel(); ++i) w.data()[i] = (i % (k * k) == (k * k) / 2) ? 0.25 : 0.0;
  }
  Graph<double> g(GraphMode::inference);
  auto out = aspp.forward(g, Tensor<double>::full({1, 2, 7, 7}, 0.8));
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 1; i < 49; ++i) EXPECT_NEAR(out.data()[c * 49 + i], out.data()[c * 49], 1e-12);
  EXPECT_GT(out.data()[0], 0.0);
}

TEST(Aspp, RateTwoBranchEqualsInterleavedFiveByFive) {
  Rng rng(43);
  std::mt19937_64 data(44);
  Aspp<double> aspp(3, {1, 2, 3}, 2, false, rng);
  Tensor<double> w3;
  for (const auto& [name, p] : aspp.named_parameters())
    if (name == "branch2.conv.weight") w3 = p;
  ASSERT_TRUE(w3.defined());
  Tensor<double> w5({2, 3, 5, 5});
  for (std::size_t oc = 0; oc < 6; ++oc)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) w5.data()[oc * 25 + 2 * ky * 5 + 2 * kx] = w3.data()[oc * 9 + ky * 3 + kx];
  auto x = random_tensor({2, 3, 9, 9}, data, false);
  Graph<double> g;
  auto dilated = conv2d(g, x, w3, Tensor<double>(), {1, 2, 2, 1});
  auto dense = conv2d(g, x, w5, Tensor<double>(), {1, 2, 1, 1});
  for (std::size_t i = 0; i < dense.numel(); ++i) EXPECT_NEAR(dilated.data()[i], dense.data()[i], 1e-12);
}

TEST(DeepLabV3PlusDecoder, ShapesAblationAndConnectivity) {
  Rng rng(50);
  std::mt19937_64 data(51);
  DeepLabV3PlusDecoder<double> dec(64, 16, 16, 8, 3, false, rng);
  auto aspp_out = random_tensor({2, 64, 4, 4}, data);
  auto low = random_tensor({2, 16, 16, 16}, data);
  Graph<double> g;
  auto out = dec.forward(g, aspp_out, low, 64, 64);
  EXPECT_EQ(out.shape(), (Shape{2, 3, 64, 64}));
  g.backward(reduce_sum(g, mul(g, out, random_tensor(out.shape(), data, false))));
  auto nonzero = [](const Tensor<double>& t) {
    return t.has_grad() && std::any_of(t.grad().begin(), t.grad().end(), [](double v) { return v != 0.0; });
  };
  EXPECT_TRUE(nonzero(aspp_out));
  EXPECT_TRUE(nonzero(low));

  // With the reduction silenced the low-level input no longer matters.
  fill(dec.reduce().conv().weight(), 0.0);
  Graph<double> gi;
  auto a = dec.forward(gi, aspp_out, low, 64, 64);
  auto b = dec.forward(gi, aspp_out, random_tensor({2, 16, 16, 16}, data), 64, 64);
  EXPECT_EQ(a.values(), b.values());
}

TEST(DeepLabV3Plus, LowLevelStrideMustExist) {
  Rng rng(52);
  auto bb = std::make_shared<TinyResNet<float>>(std::vector<std::size_t>{4, 4, 4, 4}, 16, rng);
  EXPECT_THROW(DeepLabV3PlusModel<float>(3, bb, {1, 2}, 8, 2, 4, 8, {}, rng), ConfigError);
  EXPECT_THROW(DeepLabV3PlusModel<float>(3, bb, {1, 2}, 8, 16, 4, 8, {}, rng), ConfigError);
  EXPECT_NO_THROW(DeepLabV3PlusModel<float>(3, bb, {1, 2}, 8, 4, 4, 8, {}, rng));
}

TEST(Ocr, HardAssignmentRegionIsBlockMean) {
  // 2x2 feature, 2 channels; class 0 owns the top row.
  Tensor<double> feat({1, 2, 2, 2}, {1, 3, 5, 7, 2, 4, 6, 8});
  Tensor<double> soft({1, 2, 2, 2}, {20, 20, -20, -20, -20, -20, 20, 20});
  Graph<double> g;
  auto r = ocr_regions(g, feat, soft);
  ASSERT_EQ(r.shape(), (Shape{1, 2, 2}));
  EXPECT_NEAR(r.data()[0], 2.0, 1e-9);
  EXPECT_NEAR(r.data()[1], 3.0, 1e-9);
  EXPECT_NEAR(r.data()[2], 6.0, 1e-9);
  EXPECT_NEAR(r.data()[3], 7.0, 1e-9);
}

TEST(Ocr, AttentionRowsAreDistributions) {
  std::mt19937_64 data(53);
  Graph<double> g;
  auto q = random_tensor({2, 12, 4}, data, false, -3, 3);
  auto k = random_tensor({2, 3, 4}, data, false, -3, 3);
  auto a = ocr_attention(g, q, k);
  ASSERT_EQ(a.shape(), (Shape{2, 12, 3}));
  for (std::size_t row = 0; row < 24; ++row) {
    double s = 0;
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_GE(a.data()[row * 3 + j], 0.0);
      s += a.data()[row * 3 + j];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  // One region: every pixel attends fully to it.
  auto one = ocr_attention(g, q, random_tensor({2, 1, 4}, data, false));
  for (double v : one.data()) EXPECT_DOUBLE_EQ(v, 1.0);
  auto region = random_tensor({2, 1, 5}, data, false);
  auto ctx = matmul(g, one, region);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t p = 0; p < 12; ++p)
      for (std::size_t c = 0; c < 5; ++c) EXPECT_DOUBLE_EQ(ctx.data()[(b * 12 + p) * 5 + c], region.data()[b * 5 + c]);
}

TEST(Ocr, HeadContractAndChannelCheck) {
  Rng rng(54);
  std::mt19937_64 data(55);
  OcrHead<double> head(6, 4, 3, 2, false, rng);
  Graph<double> g;
  auto feat = random_tensor({2, 6, 4, 4}, data, false);
  auto out = head.forward(g, feat, 16, 16);
  EXPECT_EQ(out.main_logits.shape(), (Shape{2, 2, 16, 16}));
  ASSERT_EQ(out.aux_logits.size(), 1u);
  EXPECT_EQ(out.aux_logits[0].shape(), (Shape{2, 2, 16, 16}));
  EXPECT_THROW(head.context_fused(g, feat, random_tensor({2, 3, 4, 4}, data, false)), ConfigError);
}

TEST(AuxHead, IndependentOfMainPath) {
  Rng rng(60);
  std::mt19937_64 data(61);
  auto bb = std::make_shared<TinyVgg<double>>(std::vector<std::size_t>{4, 4, 4, 4}, PoolMode::max, rng);
  HeadOptions opts;
  opts.aux = true;
  opts.aux_channels = 4;
  FcnModel<double> model(3, bb, 4, opts, rng);
  auto img = random_image<double>({2, 3, 32, 32}, data);
  Graph<double> g;
  auto with = model.forward(g, img);
  ASSERT_EQ(with.aux_logits.size(), 1u);
  EXPECT_EQ(with.aux_logits[0].shape(), (Shape{2, 3, 32, 32}));
  g.backward(reduce_sum(g, with.aux_logits[0]));
  EXPECT_FALSE(model.head().classifier().weight().has_grad());
  model.disable_aux_head();
  Graph<double> g2;
  auto without = model.forward(g2, img);
  EXPECT_TRUE(without.aux_logits.empty());
  EXPECT_EQ(without.main_logits.values(), with.main_logits.values());
}

// Small double-precision heads against finite differences of every input and
// parameter. Stencils that straddle a relu switch are skipped, at most 5%,
// and errors are relative to max(|g|, 1e-3) since these gradients are O(1).
TEST(Heads, GradientsMatchFiniteDifferences) {
  std::mt19937_64 data(62);
  auto params_of = [](const Tensor<double>& x, const Module<double>& m) {
    std::vector<Tensor<double>> v{x};
    for (const auto& [n, p] : m.named_parameters()) v.push_back(p);
    return v;
  };
  for (int trial = 0; trial < 2; ++trial) {
    Rng rng(70 + trial);
    {
      OcrHead<double> head(3, 3, 2, 2, false, rng);
      auto x = random_tensor({2, 3, 3, 3}, data);
      auto r = check_gradients([&](Graph<double>& g) { return head.forward(g, x, 5, 5).main_logits; }, params_of(x, head), data, kHeadCheck);
      EXPECT_LT(r.max_rel_error, kGradTol) << "ocr: " << r.worst;
      EXPECT_LT(r.skipped * 20, r.checked) << "ocr";
    }
    {
      PyramidPooling<double> ppm(2, {1, 2}, 2, false, rng);
      auto x = random_tensor({2, 2, 4, 4}, data);
      auto r = check_gradients([&](Graph<double>& g) { return ppm.forward(g, x); }, params_of(x, ppm), data, kHeadCheck);
      EXPECT_LT(r.max_rel_error, kGradTol) << "ppm: " << r.worst;
      EXPECT_LT(r.skipped * 20, r.checked) << "ppm";
    }
    {
      Aspp<double> aspp(2, {1, 2}, 2, false, rng);
      auto x = random_tensor({4, 2, 4, 4}, data);
      auto r = check_gradients([&](Graph<double>& g) { return aspp.forward(g, x); }, params_of(x, aspp), data, kHeadCheck);
      EXPECT_LT(r.max_rel_error, kGradTol) << "aspp: " << r.worst;
      EXPECT_LT(r.skipped * 20, r.checked) << "aspp";
    }
  }
}

// Every model, any valid input size: full-resolution logits with num_classes
// channels.
TEST(Models, FullResolutionLogitsOverRandomSizes) {
  Rng rng(80);
  std::mt19937_64 data(81);
  const std::vector<std::size_t> w4{4, 4, 4, 4};
  HeadOptions aux;
  aux.aux = true;
  aux.aux_channels = 4;
  std::vector<std::shared_ptr<SegModel<float>>> models{
      std::make_shared<FcnModel<float>>(3, std::make_shared<TinyVgg<float>>(w4, PoolMode::max, rng), 4, aux, rng),
      std::make_shared<UNetModel<float>>(3, std::make_shared<TinyVgg<float>>(w4, PoolMode::max, rng), HeadOptions{}, rng),
      std::make_shared<PspNetModel<float>>(3, std::make_shared<TinyResNet<float>>(w4, 8, rng), std::vector<std::size_t>{1, 2, 3},
                                           4, 4, aux, rng),
      std::make_shared<DeepLabV3Model<float>>(3, std::make_shared<TinyResNet<float>>(w4, 16, rng),
                                              std::vector<std::size_t>{1, 2}, 4, HeadOptions{}, rng),
      std::make_shared<DeepLabV3PlusModel<float>>(3, std::make_shared<TinyResNet<float>>(w4, 16, rng),
                                                  std::vector<std::size_t>{1, 2}, 4, 4, 4, 4, HeadOptions{}, rng),
      std::make_shared<OcrNetModel<float>>(3, std::make_shared<TinyResNet<float>>(w4, 8, rng), 4, 4, HeadOptions{}, rng)};
  std::uniform_int_distribution<std::size_t> side(32, 70);
  for (int trial = 0; trial < 3; ++trial) {
    const std::size_t h = side(data), w = side(data);
    auto img = random_image<float>({2, 3, h, w}, data);
    for (const auto& m : models) {
      Graph<float> g;
      auto out = m->forward(g, img);
      EXPECT_EQ(out.main_logits.shape(), (Shape{2, 3, h, w})) << m->component_name();
      for (const auto& a : out.aux_logits) EXPECT_EQ(a.shape(), (Shape{2, 3, h, w})) << m->component_name();
    }
  }
  EXPECT_EQ(models[5]->component_name(), "ocrnet");
}

}  // namespace
}  // namespace segkit
