#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "segkit/component.hpp"
#include "segkit/layers.hpp"

namespace segkit {

template <typename T>
struct FeatureLevel {
  std::size_t stride;
  Tensor<T> feature;
};

/// Backbone features ordered by strictly increasing stride.
template <typename T>
struct FeaturePyramid {
  std::vector<FeatureLevel<T>> levels;

  const FeatureLevel<T>& deepest() const { return levels.back(); }

  const Tensor<T>& at_stride(std::size_t stride) const {
    for (const auto& l : levels)
      if (l.stride == stride) return l.feature;
    throw ConfigError("feature pyramid has no level at stride " + std::to_string(stride));
  }
};

struct LevelInfo {
  std::size_t stride;
  std::size_t channels;
};

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

template <typename T>
class Backbone : public Module<T>, public Component {
 public:
  virtual FeaturePyramid<T> forward(Graph<T>& g, const Tensor<T>& image) const = 0;
  // Stride and channel count of each emitted level, shallow to deep.
  virtual std::vector<LevelInfo> levels() const = 0;
  virtual std::size_t in_channels() const = 0;

  std::size_t output_stride() const { return levels().back().stride; }

  std::size_t level_channels(std::size_t stride) const {
    for (const auto& l : levels())
      if (l.stride == stride) return l.channels;
    throw ConfigError(component_name() + " has no level at stride " + std::to_string(stride));
  }

 protected:
  void check_input(const Tensor<T>& image) const {
    if (!image.defined() || image.rank() != 4) throw ParameterError(component_name() + ": input must be (N,C,H,W)");
    if (image.dim(1) != in_channels()) {
      throw ParameterError(component_name() + ": expected " + std::to_string(in_channels()) + " input channels, got " +
                           std::to_string(image.dim(1)));
    }
    const std::size_t os = output_stride();
    if (image.dim(2) < os || image.dim(3) < os) {
      throw GeometryError(component_name() + ": input " + std::to_string(image.dim(2)) + "x" + std::to_string(image.dim(3)) +
                          " is smaller than the output stride " + std::to_string(os));
    }
  }
};

/// Stages of two 3x3 conv-bn-relu units followed by a 2x2 stride-2 pool. Odd
/// extents are padded by one so every pool rounds up. Stages from stride 4 on
/// are emitted.
template <typename T>
class TinyVgg : public Backbone<T> {
 public:
  TinyVgg(std::vector<std::size_t> widths, PoolMode pool, Rng& rng, std::size_t in_channels = 3)
      : widths_(std::move(widths)), pool_(pool), in_channels_(in_channels) {
    if (widths_.size() < 3 || widths_.size() > 5) {
      throw ParameterError("tiny_vgg needs 3 to 5 stage widths, got " + std::to_string(widths_.size()));
    }
    std::size_t in = in_channels;
    for (std::size_t s = 0; s < widths_.size(); ++s) {
      auto a = this->register_module("stage" + std::to_string(s + 1) + "_conv1",
                                     std::make_shared<ConvBnRelu<T>>(in, widths_[s], 3, 1, 1, rng));
      auto b = this->register_module("stage" + std::to_string(s + 1) + "_conv2",
                                     std::make_shared<ConvBnRelu<T>>(widths_[s], widths_[s], 3, 1, 1, rng));
      stages_.push_back({a, b});
      in = widths_[s];
    }
  }

  std::string component_name() const override { return "tiny_vgg"; }
  std::size_t in_channels() const override { return in_channels_; }

  std::vector<LevelInfo> levels() const override {
    std::vector<LevelInfo> out;
    for (std::size_t s = 1; s < widths_.size(); ++s) out.push_back({std::size_t{2} << s, widths_[s]});
    return out;
  }

  FeaturePyramid<T> forward(Graph<T>& g, const Tensor<T>& image) const override {
    this->check_input(image);
    FeaturePyramid<T> out;
    Tensor<T> x = image;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      x = stages_[s][1]->forward(g, stages_[s][0]->forward(g, x));
      x = pool2d(g, x, Pool2dOptions{pool_, 2, 2, x.dim(2) % 2, x.dim(3) % 2});
      if (s >= 1) out.levels.push_back({std::size_t{2} << s, x});
    }
    return out;
  }

 private:
  std::vector<std::size_t> widths_;
  PoolMode pool_;
  std::size_t in_channels_;
  std::vector<std::array<std::shared_ptr<ConvBnRelu<T>>, 2>> stages_;
};

/// Strided 3x3 stem and four stages of two residual blocks at nominal strides
/// 4, 8, 16, 32. For output stride 8 or 16 the stages past that stride keep
/// their resolution and dilate instead (2 then 4).
template <typename T>
class TinyResNet : public Backbone<T> {
 public:
  TinyResNet(std::vector<std::size_t> widths, std::size_t output_stride, Rng& rng, std::size_t in_channels = 3)
      : widths_(std::move(widths)), in_channels_(in_channels) {
    if (widths_.size() != 4) throw ParameterError("tiny_resnet needs 4 stage widths, got " + std::to_string(widths_.size()));
    if (output_stride != 8 && output_stride != 16 && output_stride != 32) {
      throw ParameterError("tiny_resnet output_stride must be 8, 16, or 32, got " + std::to_string(output_stride));
    }
    stem_ = this->register_module("stem", std::make_shared<ConvBnRelu<T>>(in_channels, widths_[0], 3, 2, 1, rng));
    std::size_t in = widths_[0];
    std::size_t stride = 2;
    std::size_t dilation = 1;
    for (std::size_t s = 0; s < 4; ++s) {
      std::size_t block_stride = 2;
      if (stride * 2 > output_stride) {
        block_stride = 1;
        dilation *= 2;
      } else {
        stride *= 2;
      }
      const std::string prefix = "stage" + std::to_string(s + 1) + "_block";
      auto b1 = this->register_module(prefix + "1", std::make_shared<ResidualBlock<T>>(in, widths_[s], block_stride, dilation, rng));
      auto b2 = this->register_module(prefix + "2", std::make_shared<ResidualBlock<T>>(widths_[s], widths_[s], 1, dilation, rng));
      stages_.push_back({b1, b2});
      stage_strides_.push_back(stride);
      in = widths_[s];
    }
  }

  std::string component_name() const override { return "tiny_resnet"; }
  std::size_t in_channels() const override { return in_channels_; }

  // The deepest stage at each distinct stride.
  std::vector<LevelInfo> levels() const override {
    std::vector<LevelInfo> out;
    for (std::size_t s = 0; s < 4; ++s) {
      if (!out.empty() && out.back().stride == stage_strides_[s]) out.back() = {stage_strides_[s], widths_[s]};
      else out.push_back({stage_strides_[s], widths_[s]});
    }
    return out;
  }

  FeaturePyramid<T> forward(Graph<T>& g, const Tensor<T>& image) const override {
    this->check_input(image);
    FeaturePyramid<T> out;
    Tensor<T> x = stem_->forward(g, image);
    for (std::size_t s = 0; s < 4; ++s) {
      x = stages_[s][1]->forward(g, stages_[s][0]->forward(g, x));
      if (!out.levels.empty() && out.levels.back().stride == stage_strides_[s]) out.levels.back().feature = x;
      else out.levels.push_back({stage_strides_[s], x});
    }
    return out;
  }

 private:
  std::vector<std::size_t> widths_;
  std::size_t in_channels_;
  std::shared_ptr<ConvBnRelu<T>> stem_;
  std::vector<std::array<std::shared_ptr<ResidualBlock<T>>, 2>> stages_;
  std::vector<std::size_t> stage_strides_;
};

}  // namespace segkit
