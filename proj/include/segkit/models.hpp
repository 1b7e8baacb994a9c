#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "segkit/heads.hpp"

namespace segkit {

struct HeadOptions {
  bool align_corners = false;
  bool aux = false;             // auxiliary FCN head on the second-deepest level
  std::size_t aux_channels = 32;
};

/// Backbone plus head. forward returns logits at the input resolution.
template <typename T>
class SegModel : public Module<T>, public Component {
 public:
  virtual SegOutput<T> forward(Graph<T>& g, const Tensor<T>& image) const = 0;

  std::string component_name() const override { return name_; }
  std::size_t num_classes() const { return num_classes_; }
  const Backbone<T>& backbone() const { return *backbone_; }
  bool has_aux_head() const { return aux_ != nullptr; }
  // Detaches the auxiliary head; its parameters stay registered.
  void disable_aux_head() { aux_.reset(); }

 protected:
  SegModel(std::string name, std::size_t num_classes, std::shared_ptr<Backbone<T>> backbone, const HeadOptions& opts,
           Rng& rng)
      : name_(std::move(name)), num_classes_(num_classes) {
    if (num_classes < 1) throw ParameterError(name_ + ": num_classes must be positive");
    if (!backbone) throw ConfigError(name_ + ": missing backbone");
    backbone_ = this->register_module("backbone", std::move(backbone));
    const auto levels = backbone_->levels();
    if (opts.aux) {
      if (levels.size() < 2) throw ConfigError(name_ + ": auxiliary head needs at least two pyramid levels");
      aux_level_ = levels[levels.size() - 2].stride;
      aux_ = this->register_module("aux_head", std::make_shared<FcnHead<T>>(levels[levels.size() - 2].channels,
                                                                            opts.aux_channels, num_classes, opts.align_corners, rng));
    }
  }

  void append_aux(Graph<T>& g, const FeaturePyramid<T>& pyramid, SegOutput<T>& out, const Tensor<T>& image) const {
    if (aux_) out.aux_logits.push_back(aux_->forward(g, pyramid.at_stride(aux_level_), image.dim(2), image.dim(3)));
  }

 private:
  std::string name_;
  std::size_t num_classes_;
  std::shared_ptr<Backbone<T>> backbone_;
  std::shared_ptr<FcnHead<T>> aux_;
  std::size_t aux_level_ = 0;
};

template <typename T>
class FcnModel : public SegModel<T> {
 public:
  FcnModel(std::size_t num_classes, std::shared_ptr<Backbone<T>> backbone, std::size_t mid_ch, const HeadOptions& opts,
           Rng& rng)
      : SegModel<T>("fcn", num_classes, backbone, opts, rng) {
    head_ = this->register_module("head", std::make_shared<FcnHead<T>>(backbone->levels().back().channels, mid_ch,
                                                                       num_classes, opts.align_corners, rng));
  }

  SegOutput<T> forward(Graph<T>& g, const Tensor<T>& image) const override {
    auto pyramid = this->backbone().forward(g, image);
    SegOutput<T> out{head_->forward(g, pyramid.deepest().feature, image.dim(2), image.dim(3)), {}};
    this->append_aux(g, pyramid, out, image);
    return out;
  }

  FcnHead<T>& head() const { return *head_; }

 private:
  std::shared_ptr<FcnHead<T>> head_;
};

template <typename T>
class UNetModel : public SegModel<T> {
 public:
  UNetModel(std::size_t num_classes, std::shared_ptr<Backbone<T>> backbone, const HeadOptions& opts, Rng& rng)
      : SegModel<T>("unet", num_classes, backbone, opts, rng) {
    decoder_ = this->register_module("decoder",
                                     std::make_shared<UNetDecoder<T>>(backbone->levels(), num_classes, opts.align_corners, rng));
  }

  SegOutput<T> forward(Graph<T>& g, const Tensor<T>& image) const override {
    auto pyramid = this->backbone().forward(g, image);
    SegOutput<T> out{decoder_->forward(g, pyramid, image.dim(2), image.dim(3)), {}};
    this->append_aux(g, pyramid, out, image);
    return out;
  }

 private:
  std::shared_ptr<UNetDecoder<T>> decoder_;
};

template <typename T>
class PspNetModel : public SegModel<T> {
 public:
  PspNetModel(std::size_t num_classes, std::shared_ptr<Backbone<T>> backbone, std::vector<std::size_t> bins,
              std::size_t proj_ch, std::size_t mid_ch, const HeadOptions& opts, Rng& rng)
      : SegModel<T>("pspnet", num_classes, backbone, opts, rng) {
    ppm_ = this->register_module("ppm", std::make_shared<PyramidPooling<T>>(backbone->levels().back().channels,
                                                                            std::move(bins), proj_ch, opts.align_corners, rng));
    head_ = this->register_module("head", std::make_shared<FcnHead<T>>(ppm_->out_channels(), mid_ch, num_classes,
                                                                       opts.align_corners, rng));
  }

  SegOutput<T> forward(Graph<T>& g, const Tensor<T>& image) const override {
    auto pyramid = this->backbone().forward(g, image);
    SegOutput<T> out{head_->forward(g, ppm_->forward(g, pyramid.deepest().feature), image.dim(2), image.dim(3)), {}};
    this->append_aux(g, pyramid, out, image);
    return out;
  }

 private:
  std::shared_ptr<PyramidPooling<T>> ppm_;
  std::shared_ptr<FcnHead<T>> head_;
};

template <typename T>
class DeepLabV3Model : public SegModel<T> {
 public:
  DeepLabV3Model(std::size_t num_classes, std::shared_ptr<Backbone<T>> backbone, std::vector<std::size_t> rates,
                 std::size_t aspp_ch, const HeadOptions& opts, Rng& rng)
      : SegModel<T>("deeplabv3", num_classes, backbone, opts, rng), align_corners_(opts.align_corners) {
    aspp_ = this->register_module(
        "aspp", std::make_shared<Aspp<T>>(backbone->levels().back().channels, std::move(rates), aspp_ch, opts.align_corners, rng));
    classifier_ = this->register_module(
        "classifier", std::make_shared<Conv2d<T>>(ConvSpec{aspp_ch, num_classes, 1, 1, 0, 1, 1, true}, rng));
  }

  SegOutput<T> forward(Graph<T>& g, const Tensor<T>& image) const override {
    auto pyramid = this->backbone().forward(g, image);
    Tensor<T> logits = classifier_->forward(g, aspp_->forward(g, pyramid.deepest().feature));
    SegOutput<T> out{bilinear_upsample(g, logits, image.dim(2), image.dim(3), align_corners_), {}};
    this->append_aux(g, pyramid, out, image);
    return out;
  }

 private:
  bool align_corners_;
  std::shared_ptr<Aspp<T>> aspp_;
  std::shared_ptr<Conv2d<T>> classifier_;
};

template <typename T>
class DeepLabV3PlusModel : public SegModel<T> {
 public:
  DeepLabV3PlusModel(std::size_t num_classes, std::shared_ptr<Backbone<T>> backbone, std::vector<std::size_t> rates,
                     std::size_t aspp_ch, std::size_t low_level_stride, std::size_t reduce_ch, std::size_t mid_ch,
                     const HeadOptions& opts, Rng& rng)
      : SegModel<T>("deeplabv3p", num_classes, backbone, opts, rng), low_stride_(low_level_stride) {
    if (low_level_stride >= backbone->output_stride()) {
      throw ConfigError("deeplabv3p: low_level_stride " + std::to_string(low_level_stride) +
                        " must be shallower than the backbone output stride " + std::to_string(backbone->output_stride()));
    }
    const std::size_t low_ch = backbone->level_channels(low_level_stride);
    aspp_ = this->register_module(
        "aspp", std::make_shared<Aspp<T>>(backbone->levels().back().channels, std::move(rates), aspp_ch, opts.align_corners, rng));
    decoder_ = this->register_module("decoder", std::make_shared<DeepLabV3PlusDecoder<T>>(
                                                    aspp_ch, low_ch, reduce_ch, mid_ch, num_classes, opts.align_corners, rng));
  }

  SegOutput<T> forward(Graph<T>& g, const Tensor<T>& image) const override {
    auto pyramid = this->backbone().forward(g, image);
    Tensor<T> context = aspp_->forward(g, pyramid.deepest().feature);
    SegOutput<T> out{decoder_->forward(g, context, pyramid.at_stride(low_stride_), image.dim(2), image.dim(3)), {}};
    this->append_aux(g, pyramid, out, image);
    return out;
  }

  DeepLabV3PlusDecoder<T>& decoder() const { return *decoder_; }

 private:
  std::size_t low_stride_;
  std::shared_ptr<Aspp<T>> aspp_;
  std::shared_ptr<DeepLabV3PlusDecoder<T>> decoder_;
};

template <typename T>
class OcrNetModel : public SegModel<T> {
 public:
  OcrNetModel(std::size_t num_classes, std::shared_ptr<Backbone<T>> backbone, std::size_t mid_ch, std::size_t key_ch,
              const HeadOptions& opts, Rng& rng)
      : SegModel<T>("ocrnet", num_classes, backbone, opts, rng) {
    head_ = this->register_module("ocr", std::make_shared<OcrHead<T>>(backbone->levels().back().channels, mid_ch, key_ch,
                                                                      num_classes, opts.align_corners, rng));
  }

  SegOutput<T> forward(Graph<T>& g, const Tensor<T>& image) const override {
    auto pyramid = this->backbone().forward(g, image);
    SegOutput<T> out = head_->forward(g, pyramid.deepest().feature, image.dim(2), image.dim(3));
    this->append_aux(g, pyramid, out, image);
    return out;
  }

 private:
  std::shared_ptr<OcrHead<T>> head_;
};

}  // namespace segkit
