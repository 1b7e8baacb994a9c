#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "segkit/component.hpp"
#include "segkit/data.hpp"
#include "segkit/heads.hpp"

namespace segkit {

/// Mean over non-ignored pixels of -log softmax(logits)[label]. Labels are
/// (N,H,W) row-major. All pixels ignored gives 0 with zero gradient.
template <typename T>
Tensor<T> cross_entropy_ignore(Graph<T>& g, const Tensor<T>& logits, std::span<const std::int32_t> labels,
                               std::int32_t ignore_index = kDefaultIgnoreIndex) {
  detail::require_rank(logits.shape(), 4, "cross_entropy", "logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  if (labels.size() != n * plane) {
    throw ParameterError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits of shape " +
                         to_string(logits.shape()));
  }
  const T* x = logits.data().data();
  // Softmax probabilities kept for the backward pass.
  std::vector<T> prob(logits.numel());
  double total = 0;
  std::size_t valid = 0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < plane; ++p) {
      const std::int32_t lab = labels[b * plane + p];
      if (lab == ignore_index) continue;
      if (lab < 0 || static_cast<std::size_t>(lab) >= c) {
        throw DataError("cross_entropy: label " + std::to_string(lab) + " at pixel " + std::to_string(b * plane + p) +
                        " is outside [0, " + std::to_string(c) + ")");
      }
      const std::size_t base = b * c * plane + p;
      T mx = x[base];
      for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, x[base + k * plane]);
      double s = 0;
      for (std::size_t k = 0; k < c; ++k) s += std::exp(static_cast<double>(x[base + k * plane] - mx));
      const double log_s = std::log(s);
      for (std::size_t k = 0; k < c; ++k)
        prob[base + k * plane] = static_cast<T>(std::exp(static_cast<double>(x[base + k * plane] - mx) - log_s));
      total += log_s - static_cast<double>(x[base + static_cast<std::size_t>(lab) * plane] - mx);
      ++valid;
    }
  Tensor<T> out = Tensor<T>::scalar(valid ? static_cast<T>(total / static_cast<double>(valid)) : T{0});
  if (!g.needs_grad({&logits})) return out;
  std::vector<std::int32_t> lab_copy(labels.begin(), labels.end());
  return g.record("cross_entropy", {logits}, out,
                  [logits, prob = std::move(prob), lab_copy = std::move(lab_copy), n, c, plane, valid, ignore_index](std::span<const T> go) {
                    auto gx = logits.mutable_grad();
                    if (!valid) return;
                    const T scale = static_cast<T>(go[0] / static_cast<double>(valid));
                    for (std::size_t b = 0; b < n; ++b)
                      for (std::size_t p = 0; p < plane; ++p) {
                        const std::int32_t lab = lab_copy[b * plane + p];
                        if (lab == ignore_index) continue;
                        const std::size_t base = b * c * plane + p;
                        for (std::size_t k = 0; k < c; ++k) {
                          const T target = static_cast<std::size_t>(lab) == k ? T{1} : T{0};
                          gx[base + k * plane] += scale * (prob[base + k * plane] - target);
                        }
                      }
                  });
}

/// Loss component as built by the registry.
class CrossEntropyLoss : public Component {
 public:
  explicit CrossEntropyLoss(std::int32_t ignore_index = kDefaultIgnoreIndex) : ignore_index_(ignore_index) {}
  std::string component_name() const override { return "cross_entropy"; }
  std::int32_t ignore_index() const { return ignore_index_; }

  template <typename T>
  Tensor<T> operator()(Graph<T>& g, const Tensor<T>& logits, std::span<const std::int32_t> labels) const {
    return cross_entropy_ignore(g, logits, labels, ignore_index_);
  }

 private:
  std::int32_t ignore_index_;
};

/// Main loss plus aux_weight times the sum of auxiliary losses.
template <typename T>
Tensor<T> total_loss(Graph<T>& g, const SegOutput<T>& out, std::span<const std::int32_t> labels, const CrossEntropyLoss& loss,
                     double aux_weight = 0.4) {
  Tensor<T> total = loss(g, out.main_logits, labels);
  if (aux_weight == 0.0) return total;
  for (const auto& aux : out.aux_logits) total = add(g, total, scale(g, loss(g, aux, labels), static_cast<T>(aux_weight)));
  return total;
}

}  // namespace segkit
