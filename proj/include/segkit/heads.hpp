#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "segkit/backbones.hpp"

namespace segkit {

template <typename T>
struct SegOutput {
  Tensor<T> main_logits;
  std::vector<Tensor<T>> aux_logits;
};

/// conv-bn-relu 3x3, 1x1 classifier with bias, bilinear upsample. Serves as the
/// FCN head and as the auxiliary head.
template <typename T>
class FcnHead : public Module<T> {
 public:
  FcnHead(std::size_t in_ch, std::size_t mid_ch, std::size_t num_classes, bool align_corners, Rng& rng)
      : align_corners_(align_corners) {
    conv_ = this->register_module("conv", std::make_shared<ConvBnRelu<T>>(in_ch, mid_ch, 3, 1, 1, rng));
    classifier_ = this->register_module(
        "classifier", std::make_shared<Conv2d<T>>(ConvSpec{mid_ch, num_classes, 1, 1, 0, 1, 1, true}, rng));
  }

  // Class logits at the feature resolution.
  Tensor<T> logits(Graph<T>& g, const Tensor<T>& feat) const { return classifier_->forward(g, conv_->forward(g, feat)); }

  Tensor<T> forward(Graph<T>& g, const Tensor<T>& feat, std::size_t out_h, std::size_t out_w) const {
    return bilinear_upsample(g, logits(g, feat), out_h, out_w, align_corners_);
  }

  Conv2d<T>& classifier() const { return *classifier_; }

 private:
  bool align_corners_;
  std::shared_ptr<ConvBnRelu<T>> conv_;
  std::shared_ptr<Conv2d<T>> classifier_;
};

/// Decoder that climbs the pyramid from the deepest level: upsample to the next
/// shallower level, concatenate its feature, two conv-bn-relu units. Each
/// encoder level is used once; a single level degenerates to the FCN head.
template <typename T>
class UNetDecoder : public Module<T> {
 public:
  UNetDecoder(std::vector<LevelInfo> levels, std::size_t num_classes, bool align_corners, Rng& rng)
      : levels_(std::move(levels)), align_corners_(align_corners) {
    if (levels_.empty()) throw ConfigError("unet decoder needs at least one pyramid level");
    std::size_t ch = levels_.back().channels;
    bottleneck_ = this->register_module("bottleneck", std::make_shared<ConvBnRelu<T>>(ch, ch, 3, 1, 1, rng));
    for (std::size_t i = levels_.size() - 1; i-- > 0;) {
      const std::size_t skip = levels_[i].channels;
      const std::string name = "up_s" + std::to_string(levels_[i].stride);
      auto a = this->register_module(name + "_conv1", std::make_shared<ConvBnRelu<T>>(ch + skip, skip, 3, 1, 1, rng));
      auto b = this->register_module(name + "_conv2", std::make_shared<ConvBnRelu<T>>(skip, skip, 3, 1, 1, rng));
      stages_.push_back({a, b});
      ch = skip;
    }
    classifier_ = this->register_module(
        "classifier", std::make_shared<Conv2d<T>>(ConvSpec{ch, num_classes, 1, 1, 0, 1, 1, true}, rng));
  }

  Tensor<T> forward(Graph<T>& g, const FeaturePyramid<T>& pyramid, std::size_t out_h, std::size_t out_w) const {
    if (pyramid.levels.size() != levels_.size()) {
      throw ConfigError("unet decoder expects " + std::to_string(levels_.size()) + " pyramid levels, got " +
                        std::to_string(pyramid.levels.size()));
    }
    for (std::size_t i = 0; i < levels_.size(); ++i) {
      if (pyramid.levels[i].stride != levels_[i].stride) {
        throw ConfigError("unet decoder has no encoder level matching stride " + std::to_string(levels_[i].stride));
      }
    }
    Tensor<T> x = bottleneck_->forward(g, pyramid.deepest().feature);
    std::size_t stage = 0;
    for (std::size_t i = levels_.size() - 1; i-- > 0; ++stage) {
      const Tensor<T>& skip = pyramid.levels[i].feature;
      Tensor<T> up = bilinear_upsample(g, x, skip.dim(2), skip.dim(3), align_corners_);
      x = stages_[stage][1]->forward(g, stages_[stage][0]->forward(g, skip_fuse(g, up, skip, FuseMode::concat)));
    }
    return bilinear_upsample(g, classifier_->forward(g, x), out_h, out_w, align_corners_);
  }

 private:
  std::vector<LevelInfo> levels_;
  bool align_corners_;
  std::shared_ptr<ConvBnRelu<T>> bottleneck_;
  std::vector<std::array<std::shared_ptr<ConvBnRelu<T>>, 2>> stages_;
  std::shared_ptr<Conv2d<T>> classifier_;
};

/// Pyramid pooling: per bin b, pool to b x b, 1x1 conv-bn-relu, upsample back;
/// concatenated after the input feature.
template <typename T>
class PyramidPooling : public Module<T> {
 public:
  PyramidPooling(std::size_t in_ch, std::vector<std::size_t> bins, std::size_t proj_ch, bool align_corners, Rng& rng)
      : in_ch_(in_ch), bins_(std::move(bins)), proj_ch_(proj_ch), align_corners_(align_corners) {
    if (bins_.empty()) throw ParameterError("pyramid pooling needs at least one bin");
    for (std::size_t i = 0; i < bins_.size(); ++i) {
      if (bins_[i] == 0) throw ParameterError("pyramid pooling bins must be positive");
      branches_.push_back(this->register_module("branch" + std::to_string(i),
                                                std::make_shared<ConvBnRelu<T>>(in_ch, proj_ch, 1, 1, 1, rng)));
    }
  }

  std::size_t out_channels() const { return in_ch_ + bins_.size() * proj_ch_; }
  ConvBnRelu<T>& branch(std::size_t i) const { return *branches_.at(i); }

  Tensor<T> forward(Graph<T>& g, const Tensor<T>& feat) const {
    const std::size_t h = feat.dim(2), w = feat.dim(3);
    std::vector<Tensor<T>> parts{feat};
    for (std::size_t i = 0; i < bins_.size(); ++i) {
      if (bins_[i] > h || bins_[i] > w) {
        throw ParameterError("pyramid pooling bin " + std::to_string(bins_[i]) + " exceeds the " + std::to_string(h) + "x" +
                             std::to_string(w) + " feature");
      }
      Tensor<T> pooled = branches_[i]->forward(g, adaptive_avg_pool(g, feat, bins_[i], bins_[i]));
      parts.push_back(bilinear_upsample(g, pooled, h, w, align_corners_));
    }
    return concat_channel(g, parts);
  }

 private:
  std::size_t in_ch_;
  std::vector<std::size_t> bins_;
  std::size_t proj_ch_;
  bool align_corners_;
  std::vector<std::shared_ptr<ConvBnRelu<T>>> branches_;
};

/// Atrous spatial pyramid pooling: a 1x1 branch, a dilated 3x3 branch per rate,
/// and an image-level pooling branch, concatenated and projected by 1x1.
template <typename T>
class Aspp : public Module<T> {
 public:
  Aspp(std::size_t in_ch, std::vector<std::size_t> rates, std::size_t proj_ch, bool align_corners, Rng& rng)
      : rates_(std::move(rates)), proj_ch_(proj_ch), align_corners_(align_corners) {
    if (rates_.empty()) throw ParameterError("aspp needs at least one rate");
    branches_.push_back(this->register_module("branch0", std::make_shared<ConvBnRelu<T>>(in_ch, proj_ch, 1, 1, 1, rng)));
    for (std::size_t i = 0; i < rates_.size(); ++i) {
      if (rates_[i] == 0) throw ParameterError("aspp rates must be positive");
      branches_.push_back(this->register_module("branch" + std::to_string(i + 1),
                                                std::make_shared<ConvBnRelu<T>>(in_ch, proj_ch, 3, 1, rates_[i], rng)));
    }
    image_pool_ = this->register_module("image_pool", std::make_shared<ConvBnRelu<T>>(in_ch, proj_ch, 1, 1, 1, rng));
    project_ = this->register_module("project",
                                     std::make_shared<ConvBnRelu<T>>(branch_count() * proj_ch, proj_ch, 1, 1, 1, rng));
  }

  std::size_t branch_count() const { return 2 + rates_.size(); }
  std::size_t concat_channels() const { return branch_count() * proj_ch_; }
  std::size_t out_channels() const { return proj_ch_; }

  // The branch outputs before projection, concatenated.
  Tensor<T> branches(Graph<T>& g, const Tensor<T>& feat) const {
    std::vector<Tensor<T>> parts;
    for (const auto& b : branches_) parts.push_back(b->forward(g, feat));
    Tensor<T> pooled = image_pool_->forward(g, adaptive_avg_pool(g, feat, 1, 1));
    parts.push_back(bilinear_upsample(g, pooled, feat.dim(2), feat.dim(3), align_corners_));
    return concat_channel(g, parts);
  }

  Tensor<T> forward(Graph<T>& g, const Tensor<T>& feat) const { return project_->forward(g, branches(g, feat)); }

 private:
  std::vector<std::size_t> rates_;
  std::size_t proj_ch_;
  bool align_corners_;
  std::vector<std::shared_ptr<ConvBnRelu<T>>> branches_;
  std::shared_ptr<ConvBnRelu<T>> image_pool_, project_;
};

/// Low-level feature reduced by 1x1, concatenated with the upsampled ASPP
/// output, refined by two 3x3 conv-bn-relu units and classified.
template <typename T>
class DeepLabV3PlusDecoder : public Module<T> {
 public:
  DeepLabV3PlusDecoder(std::size_t aspp_ch, std::size_t low_ch, std::size_t reduce_ch, std::size_t mid_ch,
                       std::size_t num_classes, bool align_corners, Rng& rng)
      : align_corners_(align_corners) {
    reduce_ = this->register_module("reduce", std::make_shared<ConvBnRelu<T>>(low_ch, reduce_ch, 1, 1, 1, rng));
    fuse1_ = this->register_module("fuse1", std::make_shared<ConvBnRelu<T>>(aspp_ch + reduce_ch, mid_ch, 3, 1, 1, rng));
    fuse2_ = this->register_module("fuse2", std::make_shared<ConvBnRelu<T>>(mid_ch, mid_ch, 3, 1, 1, rng));
    classifier_ = this->register_module(
        "classifier", std::make_shared<Conv2d<T>>(ConvSpec{mid_ch, num_classes, 1, 1, 0, 1, 1, true}, rng));
  }

  Tensor<T> forward(Graph<T>& g, const Tensor<T>& aspp_out, const Tensor<T>& low, std::size_t out_h,
                    std::size_t out_w) const {
    Tensor<T> reduced = reduce_->forward(g, low);
    Tensor<T> up = bilinear_upsample(g, aspp_out, low.dim(2), low.dim(3), align_corners_);
    Tensor<T> x = fuse2_->forward(g, fuse1_->forward(g, skip_fuse(g, up, reduced, FuseMode::concat)));
    return bilinear_upsample(g, classifier_->forward(g, x), out_h, out_w, align_corners_);
  }

  ConvBnRelu<T>& reduce() const { return *reduce_; }

 private:
  bool align_corners_;
  std::shared_ptr<ConvBnRelu<T>> reduce_, fuse1_, fuse2_;
  std::shared_ptr<Conv2d<T>> classifier_;
};

/// Per-class region vectors: softmax of each soft-region channel over pixels,
/// used as weights over the pixel features. feat (N,C,H,W), soft (N,K,H,W) ->
/// (N,K,C).
template <typename T>
Tensor<T> ocr_regions(Graph<T>& g, const Tensor<T>& feat, const Tensor<T>& soft) {
  const std::size_t n = feat.dim(0), c = feat.dim(1), p = feat.dim(2) * feat.dim(3);
  if (soft.rank() != 4 || soft.dim(0) != n || soft.dim(2) * soft.dim(3) != p) {
    throw ParameterError("ocr: soft regions " + to_string(soft.shape()) + " do not match feature " + to_string(feat.shape()));
  }
  Tensor<T> weights = softmax_lastdim(g, reshape(g, soft, {n, soft.dim(1), p}));
  Tensor<T> pixels = transpose_last2(g, reshape(g, feat, {n, c, p}));
  return matmul(g, weights, pixels);
}

/// Scaled dot-product relation between pixel queries (N,P,D) and region keys
/// (N,K,D); each row is a distribution over the K regions.
template <typename T>
Tensor<T> ocr_attention(Graph<T>& g, const Tensor<T>& queries, const Tensor<T>& keys) {
  const T s = static_cast<T>(1.0 / std::sqrt(static_cast<double>(keys.dim(2))));
  return softmax_lastdim(g, scale(g, matmul(g, queries, transpose_last2(g, keys)), s));
}

/// Object-contextual head: soft class regions from an auxiliary classifier,
/// region vectors pooled under them, a pixel-to-region attention whose values
/// are the region vectors, and a 1x1 fusion of context and pixel feature.
template <typename T>
class OcrHead : public Module<T> {
 public:
  OcrHead(std::size_t in_ch, std::size_t mid_ch, std::size_t key_ch, std::size_t num_classes, bool align_corners, Rng& rng)
      : num_classes_(num_classes), align_corners_(align_corners) {
    soft_ = this->register_module("soft_region", std::make_shared<FcnHead<T>>(in_ch, mid_ch, num_classes, align_corners, rng));
    pixel_ = this->register_module("pixel", std::make_shared<ConvBnRelu<T>>(in_ch, mid_ch, 3, 1, 1, rng));
    query_ = this->register_module("query",
                                   std::make_shared<Conv2d<T>>(ConvSpec{mid_ch, key_ch, 1, 1, 0, 1, 1, false}, rng));
    key_proj_ = this->register_parameter("key_proj", init::kaiming_normal<T>({mid_ch, key_ch}, mid_ch, rng));
    fuse_ = this->register_module("fuse", std::make_shared<ConvBnRelu<T>>(2 * mid_ch, mid_ch, 1, 1, 1, rng));
    classifier_ = this->register_module(
        "classifier", std::make_shared<Conv2d<T>>(ConvSpec{mid_ch, num_classes, 1, 1, 0, 1, 1, true}, rng));
  }

  // Fused pixel representation given explicit soft-region logits.
  Tensor<T> context_fused(Graph<T>& g, const Tensor<T>& feat, const Tensor<T>& soft) const {
    if (soft.dim(1) != num_classes_) {
      throw ConfigError("ocr: soft regions have " + std::to_string(soft.dim(1)) + " channels, expected num_classes " +
                        std::to_string(num_classes_));
    }
    const std::size_t n = feat.dim(0), h = feat.dim(2), w = feat.dim(3), p = h * w;
    Tensor<T> pix = pixel_->forward(g, feat);
    const std::size_t c = pix.dim(1);
    Tensor<T> regions = ocr_regions(g, pix, soft);
    Tensor<T> q = query_->forward(g, pix);
    Tensor<T> queries = transpose_last2(g, reshape(g, q, {n, q.dim(1), p}));
    Tensor<T> keys = matmul(g, regions, key_proj_);
    Tensor<T> attn = ocr_attention(g, queries, keys);
    Tensor<T> context = reshape(g, transpose_last2(g, matmul(g, attn, regions)), {n, c, h, w});
    return fuse_->forward(g, concat_channel(g, std::vector<Tensor<T>>{context, pix}));
  }

  SegOutput<T> forward(Graph<T>& g, const Tensor<T>& feat, std::size_t out_h, std::size_t out_w) const {
    Tensor<T> soft = soft_->logits(g, feat);
    Tensor<T> main = classifier_->forward(g, context_fused(g, feat, soft));
    return {bilinear_upsample(g, main, out_h, out_w, align_corners_),
            {bilinear_upsample(g, soft, out_h, out_w, align_corners_)}};
  }

 private:
  std::size_t num_classes_;
  bool align_corners_;
  std::shared_ptr<FcnHead<T>> soft_;
  std::shared_ptr<ConvBnRelu<T>> pixel_, fuse_;
  std::shared_ptr<Conv2d<T>> query_, classifier_;
  Tensor<T> key_proj_;
};

}  // namespace segkit
