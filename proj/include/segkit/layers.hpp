#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "segkit/ops.hpp"

namespace segkit {

using Rng = std::mt19937_64;

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

/// Owner of named parameters, buffers, and child modules. Names compose into
/// dot-separated paths ("stage1.block0.conv1.weight").
template <typename T>
class Module {
 public:
  virtual ~Module() = default;

  NamedTensors<T> named_parameters() const {
    NamedTensors<T> out;
    collect(out, "", true);
    return out;
  }

  NamedTensors<T> named_buffers() const {
    NamedTensors<T> out;
    collect(out, "", false);
    return out;
  }

  // Parameters followed by buffers: everything a checkpoint stores.
  NamedTensors<T> state() const {
    auto out = named_parameters();
    auto bufs = named_buffers();
    out.insert(out.end(), bufs.begin(), bufs.end());
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_parameters()) n += t.numel();
    return n;
  }

  void train(bool on = true) {
    training_ = on;
    for (auto& [name, child] : children_) child->train(on);
  }
  void eval() { train(false); }
  bool is_training() const { return training_; }

  void zero_grad() const {
    for (const auto& [name, t] : named_parameters()) t.clear_grad();
  }

 protected:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  Tensor<T> register_parameter(std::string name, Tensor<T> t) {
    claim(name);
    t.set_requires_grad(true);
    params_.emplace_back(std::move(name), t);
    return t;
  }

  Tensor<T> register_buffer(std::string name, Tensor<T> t) {
    claim(name);
    t.set_requires_grad(false);
    buffers_.emplace_back(std::move(name), t);
    return t;
  }

  template <typename M>
  std::shared_ptr<M> register_module(std::string name, std::shared_ptr<M> child) {
    claim(name);
    child->train(training_);
    children_.emplace_back(std::move(name), child);
    return child;
  }

 private:
  void claim(const std::string& name) {
    if (name.empty() || name.find('.') != std::string::npos) throw ParameterError("invalid member name '" + name + "'");
    if (!names_.insert(name).second) throw ParameterError("duplicate member name '" + name + "'");
  }

  void collect(NamedTensors<T>& out, const std::string& prefix, bool parameters) const {
    for (const auto& [name, t] : parameters ? params_ : buffers_) out.emplace_back(prefix + name, t);
    for (const auto& [name, child] : children_) child->collect(out, prefix + name + ".", parameters);
  }

  NamedTensors<T> params_;
  NamedTensors<T> buffers_;
  std::vector<std::pair<std::string, std::shared_ptr<Module<T>>>> children_;
  std::set<std::string> names_;
  bool training_ = true;
};

namespace init {

// Fan-in scaled normal, std = sqrt(2 / fan_in).
template <typename T>
Tensor<T> kaiming_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace init

struct ConvSpec {
  std::size_t in_ch = 1;
  std::size_t out_ch = 1;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
  std::size_t groups = 1;
  bool bias = false;
};

template <typename T>
class Conv2d : public Module<T> {
 public:
  Conv2d(const ConvSpec& spec, Rng& rng) : spec_(spec) {
    if (spec.in_ch == 0 || spec.out_ch == 0) throw ParameterError("Conv2d: channel counts must be positive");
    if (spec.in_ch % spec.groups != 0 || spec.out_ch % spec.groups != 0) {
      throw ParameterError("Conv2d: channels " + std::to_string(spec.in_ch) + "->" + std::to_string(spec.out_ch) +
                           " not divisible by groups " + std::to_string(spec.groups));
    }
    const std::size_t cg = spec.in_ch / spec.groups;
    weight_ = this->register_parameter(
        "weight", init::kaiming_normal<T>({spec.out_ch, cg, spec.kernel, spec.kernel}, cg * spec.kernel * spec.kernel, rng));
    if (spec.bias) bias_ = this->register_parameter("bias", Tensor<T>::zeros({spec.out_ch}));
  }

  Tensor<T> forward(Graph<T>& g, const Tensor<T>& x) const {
    return conv2d(g, x, weight_, bias_, {spec_.stride, spec_.padding, spec_.dilation, spec_.groups});
  }

  const ConvSpec& spec() const { return spec_; }
  const Tensor<T>& weight() const { return weight_; }
  const Tensor<T>& bias() const { return bias_; }

 private:
  ConvSpec spec_;
  Tensor<T> weight_;
  Tensor<T> bias_;
};

template <typename T>
class BatchNorm2d : public Module<T> {
 public:
  explicit BatchNorm2d(std::size_t channels, double momentum = 0.1, double epsilon = 1e-5)
      : momentum_(momentum), epsilon_(epsilon) {
    gamma_ = this->register_parameter("gamma", Tensor<T>::full({channels}, T{1}));
    beta_ = this->register_parameter("beta", Tensor<T>::zeros({channels}));
    running_mean_ = this->register_buffer("running_mean", Tensor<T>::zeros({channels}));
    running_var_ = this->register_buffer("running_var", Tensor<T>::full({channels}, T{1}));
  }

  Tensor<T> forward(Graph<T>& g, const Tensor<T>& x) const {
    Tensor<T> rm = running_mean_, rv = running_var_;
    return batch_norm(g, x, gamma_, beta_, rm, rv,
                      {this->is_training() ? NormMode::training : NormMode::inference, momentum_, epsilon_});
  }

  const Tensor<T>& gamma() const { return gamma_; }
  const Tensor<T>& beta() const { return beta_; }

 private:
  double momentum_, epsilon_;
  Tensor<T> gamma_, beta_, running_mean_, running_var_;
};

inline std::size_t same_padding(std::size_t kernel, std::size_t dilation) {
  if (kernel % 2 == 0) {
    throw ParameterError("kernel size " + std::to_string(kernel) + " is even; size-preserving padding needs an odd kernel");
  }
  return dilation * (kernel - 1) / 2;
}

/// conv (no bias) -> batch norm -> optional relu, padded so stride 1 keeps the
/// spatial size.
template <typename T>
class ConvBnRelu : public Module<T> {
 public:
  ConvBnRelu(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride, std::size_t dilation, Rng& rng,
             bool with_relu = true)
      : relu_(with_relu) {
    if (in_ch == 0 || out_ch == 0) throw ParameterError("ConvBnRelu: channel counts must be positive");
    const std::size_t pad = same_padding(kernel, dilation);
    conv_ = this->register_module("conv", std::make_shared<Conv2d<T>>(
                                              ConvSpec{in_ch, out_ch, kernel, stride, pad, dilation, 1, false}, rng));
    bn_ = this->register_module("bn", std::make_shared<BatchNorm2d<T>>(out_ch));
  }

  Tensor<T> forward(Graph<T>& g, const Tensor<T>& x) const {
    Tensor<T> y = bn_->forward(g, conv_->forward(g, x));
    return relu_ ? relu(g, y) : y;
  }

  Conv2d<T>& conv() { return *conv_; }
  BatchNorm2d<T>& bn() { return *bn_; }

 private:
  bool relu_;
  std::shared_ptr<Conv2d<T>> conv_;
  std::shared_ptr<BatchNorm2d<T>> bn_;
};

/// relu(F(x) + shortcut(x)) with F two 3x3 conv-bn units. The shortcut is the
/// identity when shapes agree and a strided 1x1 conv-bn projection otherwise.
template <typename T>
class ResidualBlock : public Module<T> {
 public:
  ResidualBlock(std::size_t in_ch, std::size_t out_ch, std::size_t stride, std::size_t dilation, Rng& rng) {
    conv1_ = this->register_module("conv1", std::make_shared<ConvBnRelu<T>>(in_ch, out_ch, 3, stride, dilation, rng));
    conv2_ = this->register_module("conv2", std::make_shared<ConvBnRelu<T>>(out_ch, out_ch, 3, 1, dilation, rng, false));
    if (in_ch != out_ch || stride != 1) {
      shortcut_ = this->register_module("shortcut", std::make_shared<ConvBnRelu<T>>(in_ch, out_ch, 1, stride, 1, rng, false));
    }
  }

  Tensor<T> forward(Graph<T>& g, const Tensor<T>& x) const {
    Tensor<T> f = conv2_->forward(g, conv1_->forward(g, x));
    Tensor<T> s = shortcut_ ? shortcut_->forward(g, x) : x;
    return relu(g, add(g, f, s));
  }

  bool has_projection() const { return shortcut_ != nullptr; }
  ConvBnRelu<T>& conv1() { return *conv1_; }
  ConvBnRelu<T>& conv2() { return *conv2_; }

 private:
  std::shared_ptr<ConvBnRelu<T>> conv1_, conv2_, shortcut_;
};

/// Depthwise kxk convolution (one filter per input channel) followed by a 1x1
/// pointwise mix. Neither carries a bias.
template <typename T>
class SeparableConv : public Module<T> {
 public:
  SeparableConv(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t dilation, Rng& rng) {
    const std::size_t pad = same_padding(kernel, dilation);
    depthwise_ = this->register_module(
        "depthwise", std::make_shared<Conv2d<T>>(ConvSpec{in_ch, in_ch, kernel, 1, pad, dilation, in_ch, false}, rng));
    pointwise_ = this->register_module(
        "pointwise", std::make_shared<Conv2d<T>>(ConvSpec{in_ch, out_ch, 1, 1, 0, 1, 1, false}, rng));
  }

  Tensor<T> forward(Graph<T>& g, const Tensor<T>& x) const {
    return pointwise_->forward(g, depthwise_->forward(g, x));
  }

  Conv2d<T>& depthwise() { return *depthwise_; }
  Conv2d<T>& pointwise() { return *pointwise_; }

 private:
  std::shared_ptr<Conv2d<T>> depthwise_, pointwise_;
};

enum class FuseMode { concat, add };

/// Merges an (already upsampled) decoder feature with an encoder feature.
template <typename T>
Tensor<T> skip_fuse(Graph<T>& g, const Tensor<T>& decoder_feat, const Tensor<T>& encoder_feat, FuseMode mode) {
  const Shape& d = decoder_feat.shape();
  const Shape& e = encoder_feat.shape();
  if (d.size() != 4 || e.size() != 4 || d[0] != e[0] || d[2] != e[2] || d[3] != e[3]) {
    throw ParameterError("skip_fuse: decoder feature " + to_string(d) + " and encoder feature " + to_string(e) +
                         " differ spatially; upsample the decoder feature to the encoder resolution first");
  }
  if (mode == FuseMode::concat) return concat_channel(g, std::vector<Tensor<T>>{decoder_feat, encoder_feat});
  if (d[1] != e[1]) {
    throw ParameterError("skip_fuse: add needs equal channel counts, got " + std::to_string(d[1]) + " and " +
                         std::to_string(e[1]));
  }
  return add(g, decoder_feat, encoder_feat);
}

}  // namespace segkit
