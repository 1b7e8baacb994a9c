#pragma once

#include <cstdint>
#include <iomanip>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "segkit/error.hpp"

namespace segkit {

/// counts(g, p): pixels with ground truth g predicted as p. Ignored pixels are
/// never counted.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes) : c_(num_classes), counts_(num_classes * num_classes, 0) {
    if (num_classes < 1) throw ParameterError("confusion matrix needs at least one class");
  }

  std::size_t num_classes() const { return c_; }
  std::uint64_t count(std::size_t gt, std::size_t pred) const { return counts_.at(gt * c_ + pred); }

  void update(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt, std::int32_t ignore_index = 255) {
    if (pred.size() != gt.size()) {
      throw ParameterError("confusion update: " + std::to_string(pred.size()) + " predictions vs " + std::to_string(gt.size()) + " labels");
    }
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const std::int32_t g = gt[i], p = pred[i];
      if (g == ignore_index) continue;
      if (p < 0 || static_cast<std::size_t>(p) >= c_) throw ParameterError("prediction " + std::to_string(p) + " out of range");
      if (g < 0 || static_cast<std::size_t>(g) >= c_) {
        throw DataError("label " + std::to_string(g) + " at pixel " + std::to_string(i) + " is outside [0, " + std::to_string(c_) + ")");
      }
      ++counts_[static_cast<std::size_t>(g) * c_ + static_cast<std::size_t>(p)];
    }
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.c_ != c_) throw ParameterError("cannot merge confusion matrices of different sizes");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    return *this;
  }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto v : counts_) t += v;
    return t;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t c_;
  std::vector<std::uint64_t> counts_;
};

/// TP / (TP + FP + FN); empty when the class has zero union.
inline std::vector<std::optional<double>> iou_per_class(const ConfusionMatrix& cm) {
  const std::size_t c = cm.num_classes();
  std::vector<std::optional<double>> out(c);
  for (std::size_t k = 0; k < c; ++k) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < c; ++j) {
      row += cm.count(k, j);
      col += cm.count(j, k);
    }
    const std::uint64_t tp = cm.count(k, k);
    const std::uint64_t uni = row + col - tp;
    if (uni) out[k] = static_cast<double>(tp) / static_cast<double>(uni);
  }
  return out;
}

/// Mean over present classes only.
inline double mean_iou(const ConfusionMatrix& cm) {
  double sum = 0;
  std::size_t present = 0;
  for (const auto& v : iou_per_class(cm)) {
    if (!v) continue;
    sum += *v;
    ++present;
  }
  if (!present) throw MetricError("mIoU is undefined: no class is present in ground truth or prediction");
  return sum / static_cast<double>(present);
}

inline double pixel_accuracy(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (!total) throw MetricError("pixel accuracy is undefined: no labelled pixels");
  std::uint64_t trace = 0;
  for (std::size_t k = 0; k < cm.num_classes(); ++k) trace += cm.count(k, k);
  return static_cast<double>(trace) / static_cast<double>(total);
}

struct Metrics {
  double miou = 0;
  double pixel_acc = 0;
  std::vector<std::optional<double>> per_class;

  static Metrics from(const ConfusionMatrix& cm) { return {mean_iou(cm), pixel_accuracy(cm), iou_per_class(cm)}; }

  // "mIoU: <v> pixel_acc: <v>" then one "class <i>: <IoU|absent>" line per class.
  std::string format() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(6);
    os << "mIoU: " << miou << " pixel_acc: " << pixel_acc << '\n';
    for (std::size_t k = 0; k < per_class.size(); ++k) {
      os << "class " << k << ": ";
      if (per_class[k]) os << *per_class[k];
      else os << "absent";
      os << '\n';
    }
    return os.str();
  }
};

}  // namespace segkit
