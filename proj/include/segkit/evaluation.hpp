#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "segkit/data.hpp"
#include "segkit/metrics.hpp"
#include "segkit/models.hpp"

namespace segkit {

/// PASCAL VOC colour map: the bits of the index spread across R, G, B from the
/// most significant bit down.
inline std::array<std::uint8_t, 3> palette_color(std::uint32_t index) {
  std::array<std::uint8_t, 3> rgb{0, 0, 0};
  std::uint32_t c = index;
  for (int j = 0; j < 8; ++j) {
    rgb[0] |= static_cast<std::uint8_t>(((c >> 0) & 1u) << (7 - j));
    rgb[1] |= static_cast<std::uint8_t>(((c >> 1) & 1u) << (7 - j));
    rgb[2] |= static_cast<std::uint8_t>(((c >> 2) & 1u) << (7 - j));
    c >>= 3;
  }
  return rgb;
}

inline std::vector<std::uint8_t> colorize(const LabelMap& label) {
  std::vector<std::uint8_t> rgb(label.data.size() * 3);
  for (std::size_t i = 0; i < label.data.size(); ++i) {
    const auto c = palette_color(static_cast<std::uint32_t>(label.data[i]) & 0xffu);
    std::copy(c.begin(), c.end(), rgb.begin() + static_cast<std::ptrdiff_t>(3 * i));
  }
  return rgb;
}

template <typename T>
Tensor<T> image_tensor(const Image& img) {
  Tensor<T> t(Shape{1, img.channels, img.height, img.width});
  std::transform(img.data.begin(), img.data.end(), t.data().begin(), [](float v) { return static_cast<T>(v); });
  return t;
}

/// Whole-image inference-mode argmax.
template <typename T>
LabelMap predict_label(const SegModel<T>& model, const Image& img) {
  Graph<T> g(GraphMode::inference);
  const auto pred = argmax_channel(model.forward(g, image_tensor<T>(img)).main_logits);
  LabelMap out(img.height, img.width);
  out.data = pred;
  return out;
}

/// Restores the module's train/eval flag on scope exit.
template <typename T>
class EvalModeGuard {
 public:
  explicit EvalModeGuard(Module<T>& m) : m_(m), was_training_(m.is_training()) { m_.eval(); }
  ~EvalModeGuard() { m_.train(was_training_); }
  EvalModeGuard(const EvalModeGuard&) = delete;
  EvalModeGuard& operator=(const EvalModeGuard&) = delete;

 private:
  Module<T>& m_;
  bool was_training_;
};

/// Whole-image evaluation with one global confusion matrix. Only the
/// non-augmenting transforms are applied.
template <typename T>
Metrics evaluate(SegModel<T>& model, const std::vector<SampleRecord>& records, const TransformList& transforms,
                 std::int32_t ignore_index = kDefaultIgnoreIndex) {
  EvalModeGuard<T> guard(model);
  ConfusionMatrix cm(model.num_classes());
  for (const auto& r : records) {
    const Sample s = apply_transforms(load_sample(r), transforms, 0, false);
    cm.update(predict_label(model, s.image).data, s.label.data, ignore_index);
  }
  return Metrics::from(cm);
}

struct PredictionFiles {
  std::string label_path;
  std::string color_path;
};

/// Writes <stem>_label.png (class indices) and <stem>_color.png (palette).
template <typename T>
PredictionFiles predict_to_files(SegModel<T>& model, const TransformList& transforms, const std::string& image_path,
                                 const std::string& out_dir) {
  EvalModeGuard<T> guard(model);
  Sample s{read_image_png(image_path), {}};
  s.label = LabelMap(s.image.height, s.image.width);
  s = apply_transforms(std::move(s), transforms, 0, false);
  const LabelMap label = predict_label(model, s.image);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw EnvironmentError("cannot create output directory " + out_dir + ": " + ec.message());
  const std::string stem = std::filesystem::path(image_path).stem().string();
  PredictionFiles files{(std::filesystem::path(out_dir) / (stem + "_label.png")).string(),
                        (std::filesystem::path(out_dir) / (stem + "_color.png")).string()};
  write_label_png(files.label_path, label);
  write_rgb_png(files.color_path, label.width, label.height, colorize(label));
  return files;
}

}  // namespace segkit
