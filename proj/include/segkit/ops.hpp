#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "segkit/kernels.hpp"
#include "segkit/tensor.hpp"

// Differentiable primitives over Tensor<T>. Every op takes the graph it records
// onto as its first argument; outputs of ops whose inputs need no gradient (or
// that run on an inference-mode graph) are plain constants.
namespace segkit {

namespace detail {

inline void require(bool ok, const std::string& message) {
  if (!ok) throw ParameterError(message);
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op, const char* what) {
  if (s.size() != rank) {
    throw ParameterError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got shape " +
                         to_string(s));
  }
}

}  // namespace detail

/// Spatial span covered by a k-tap kernel whose taps sit `dilation` apart.
inline std::size_t effective_kernel_extent(long long kernel, long long dilation) {
  if (kernel < 1) throw ParameterError("effective_kernel_extent: kernel must be >= 1, got " + std::to_string(kernel));
  if (dilation < 1) {
    throw ParameterError("effective_kernel_extent: dilation must be >= 1, got " + std::to_string(dilation));
  }
  return static_cast<std::size_t>(kernel + (kernel - 1) * (dilation - 1));
}

// floor((in + 2*padding - extent) / stride) + 1, or GeometryError if that is not positive.
inline std::size_t window_output_extent(std::size_t in, std::size_t extent, std::size_t stride, std::size_t padding,
                                        const char* axis) {
  const long long padded = static_cast<long long>(in + 2 * padding);
  const long long span = padded - static_cast<long long>(extent);
  if (span < 0) {
    throw GeometryError(std::string("window of extent ") + std::to_string(extent) + " does not fit padded " + axis +
                        " extent " + std::to_string(padded));
  }
  return static_cast<std::size_t>(span) / stride + 1;
}

// ---------------------------------------------------------------------------
// Elementwise family

namespace detail {

// Operand layout for binary elementwise ops. The smaller operand may only be
// broadcast across singleton leading axes, so it repeats as a contiguous block.
struct Broadcast {
  Shape out;
  bool a_small = false;
  bool b_small = false;
  std::size_t block = 0;
};

inline Broadcast broadcast_leading(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.block = numel(a);
    return bc;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank - a.size(), 1), pb(rank - b.size(), 1);
  pa.insert(pa.end(), a.begin(), a.end());
  pb.insert(pb.end(), b.begin(), b.end());
  std::size_t split = rank;
  while (split > 0 && pa[split - 1] == pb[split - 1]) --split;
  bool a_ones = true, b_ones = true;
  for (std::size_t i = 0; i < split; ++i) {
    a_ones = a_ones && pa[i] == 1;
    b_ones = b_ones && pb[i] == 1;
  }
  if (!a_ones && !b_ones) {
    throw ParameterError(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) +
                         " differ outside singleton leading axes");
  }
  bc.a_small = a_ones;
  bc.b_small = !a_ones;
  bc.out = a_ones ? pb : pa;
  bc.block = 1;
  for (std::size_t i = split; i < rank; ++i) bc.block *= pa[i];
  return bc;
}

template <typename T>
void reduce_blocks_into(const Tensor<T>& target, std::span<const T> grad, std::size_t block) {
  if (!target.requires_grad()) return;
  auto g = target.mutable_grad();
  for (std::size_t i = 0; i < grad.size(); ++i) g[i % block] += grad[i];
}

}  // namespace detail

template <typename T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  const auto bc = detail::broadcast_leading(a.shape(), b.shape(), "add");
  Tensor<T> out(bc.out);
  auto o = out.data();
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[bc.a_small ? i % bc.block : i] + bv[bc.b_small ? i % bc.block : i];
  if (!g.needs_grad({&a, &b})) return out;
  return g.record("add", {a, b}, out, [a, b, bc](std::span<const T> go) {
    if (bc.a_small) detail::reduce_blocks_into(a, go, bc.block); else accumulate_grad(a, go);
    if (bc.b_small) detail::reduce_blocks_into(b, go, bc.block); else accumulate_grad(b, go);
  });
}

template <typename T>
Tensor<T> sub(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  const auto bc = detail::broadcast_leading(a.shape(), b.shape(), "sub");
  Tensor<T> out(bc.out);
  auto o = out.data();
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[bc.a_small ? i % bc.block : i] - bv[bc.b_small ? i % bc.block : i];
  if (!g.needs_grad({&a, &b})) return out;
  return g.record("sub", {a, b}, out, [a, b, bc](std::span<const T> go) {
    if (bc.a_small) detail::reduce_blocks_into(a, go, bc.block); else accumulate_grad(a, go);
    std::vector<T> neg(go.begin(), go.end());
    for (auto& v : neg) v = -v;
    if (bc.b_small) detail::reduce_blocks_into(b, std::span<const T>(neg), bc.block); else accumulate_grad(b, std::span<const T>(neg));
  });
}

template <typename T>
Tensor<T> mul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  const auto bc = detail::broadcast_leading(a.shape(), b.shape(), "mul");
  Tensor<T> out(bc.out);
  auto o = out.data();
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[bc.a_small ? i % bc.block : i] * bv[bc.b_small ? i % bc.block : i];
  if (!g.needs_grad({&a, &b})) return out;
  return g.record("mul", {a, b}, out, [a, b, bc](std::span<const T> go) {
    auto av = a.data(), bv = b.data();
    std::vector<T> ga(go.size()), gb(go.size());
    for (std::size_t i = 0; i < go.size(); ++i) {
      ga[i] = go[i] * bv[bc.b_small ? i % bc.block : i];
      gb[i] = go[i] * av[bc.a_small ? i % bc.block : i];
    }
    if (bc.a_small) detail::reduce_blocks_into(a, std::span<const T>(ga), bc.block); else accumulate_grad(a, std::span<const T>(ga));
    if (bc.b_small) detail::reduce_blocks_into(b, std::span<const T>(gb), bc.block); else accumulate_grad(b, std::span<const T>(gb));
  });
}

template <typename T>
Tensor<T> scale(Graph<T>& g, const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto av = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * factor;
  if (!g.needs_grad({&a})) return out;
  return g.record("scale", {a}, out, [a, factor](std::span<const T> go) {
    auto ga = a.mutable_grad();
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * factor;
  });
}

template <typename T>
Tensor<T> add_scalar(Graph<T>& g, const Tensor<T>& a, T value) {
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto av = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + value;
  if (!g.needs_grad({&a})) return out;
  return g.record("add_scalar", {a}, out, [a](std::span<const T> go) { accumulate_grad(a, go); });
}

template <typename T>
Tensor<T> relu(Graph<T>& g, const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto av = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] > T{0} ? av[i] : T{0};
  if (!g.needs_grad({&a})) return out;
  return g.record("relu", {a}, out, [a](std::span<const T> go) {
    auto av = a.data();
    auto ga = a.mutable_grad();
    for (std::size_t i = 0; i < go.size(); ++i)
      if (av[i] > T{0}) ga[i] += go[i];
  });
}

template <typename T>
Tensor<T> reshape(Graph<T>& g, const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw ParameterError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  Tensor<T> out(std::move(shape), a.values());
  if (!g.needs_grad({&a})) return out;
  return g.record("reshape", {a}, out, [a](std::span<const T> go) { accumulate_grad(a, go); });
}

// Swaps the last two axes.
template <typename T>
Tensor<T> transpose_last2(Graph<T>& g, const Tensor<T>& a) {
  if (a.rank() < 2) throw ParameterError("transpose_last2: rank must be >= 2, got " + to_string(a.shape()));
  Shape s = a.shape();
  const std::size_t rows = s[s.size() - 2], cols = s[s.size() - 1];
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  Tensor<T> out(s);
  const std::size_t batch = a.numel() / (rows * cols);
  for (std::size_t b = 0; b < batch; ++b)
    kernels::transpose(rows, cols, a.data().data() + b * rows * cols, out.data().data() + b * rows * cols);
  if (!g.needs_grad({&a})) return out;
  return g.record("transpose_last2", {a}, out, [a, rows, cols, batch](std::span<const T> go) {
    auto ga = a.mutable_grad();
    std::vector<T> tmp(rows * cols);
    for (std::size_t b = 0; b < batch; ++b) {
      kernels::transpose(cols, rows, go.data() + b * rows * cols, tmp.data());
      for (std::size_t i = 0; i < tmp.size(); ++i) ga[b * rows * cols + i] += tmp[i];
    }
  });
}

/// Batched product over the last two axes. Leading axes must match, or one
/// operand may be a plain matrix shared across the other's batch.
template <typename T>
Tensor<T> matmul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ParameterError("matmul: operands need rank >= 2, got " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const std::size_t m = sa[sa.size() - 2], k = sa[sa.size() - 1];
  const std::size_t k2 = sb[sb.size() - 2], n = sb[sb.size() - 1];
  if (k != k2) {
    throw ParameterError("matmul: inner dimension mismatch " + std::to_string(k) + " vs " + std::to_string(k2) + " for " +
                         to_string(sa) + " x " + to_string(sb));
  }
  Shape batch_shape;
  if (sa.size() == sb.size() && std::equal(sa.begin(), sa.end() - 2, sb.begin())) {
    batch_shape.assign(sa.begin(), sa.end() - 2);
  } else if (sb.size() == 2) {
    batch_shape.assign(sa.begin(), sa.end() - 2);
  } else if (sa.size() == 2) {
    batch_shape.assign(sb.begin(), sb.end() - 2);
  } else {
    throw ParameterError("matmul: batch axes of " + to_string(sa) + " and " + to_string(sb) + " do not match");
  }
  const std::size_t batch = numel(batch_shape);
  const bool a_shared = sa.size() == 2 && batch_shape.size() > 0;
  const bool b_shared = sb.size() == 2 && batch_shape.size() > 0;
  Shape so = batch_shape;
  so.push_back(m);
  so.push_back(n);
  Tensor<T> out(so);
  for (std::size_t i = 0; i < batch; ++i) {
    kernels::gemm_acc(m, n, k, a.data().data() + (a_shared ? 0 : i * m * k), b.data().data() + (b_shared ? 0 : i * k * n),
                      out.data().data() + i * m * n);
  }
  if (!g.needs_grad({&a, &b})) return out;
  return g.record("matmul", {a, b}, out, [a, b, m, n, k, batch, a_shared, b_shared](std::span<const T> go) {
    if (a.requires_grad()) {
      auto ga = a.mutable_grad();
      std::vector<T> bt(n * k);
      for (std::size_t i = 0; i < batch; ++i) {
        kernels::transpose(k, n, b.data().data() + (b_shared ? 0 : i * k * n), bt.data());
        kernels::gemm_acc(m, k, n, go.data() + i * m * n, bt.data(), ga.data() + (a_shared ? 0 : i * m * k));
      }
    }
    if (b.requires_grad()) {
      auto gb = b.mutable_grad();
      std::vector<T> at(k * m);
      for (std::size_t i = 0; i < batch; ++i) {
        kernels::transpose(m, k, a.data().data() + (a_shared ? 0 : i * m * k), at.data());
        kernels::gemm_acc(k, n, m, at.data(), go.data() + i * m * n, gb.data() + (b_shared ? 0 : i * k * n));
      }
    }
  });
}

/// Joins tensors along axis 1; every other axis must agree.
template <typename T>
Tensor<T> concat_channel(Graph<T>& g, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ParameterError("concat_channel: nothing to concatenate");
  const Shape& first = parts.front().shape();
  if (first.size() < 2) throw ParameterError("concat_channel: rank must be >= 2, got " + to_string(first));
  std::size_t channels = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size() && s[0] == first[0];
    for (std::size_t i = 2; ok && i < s.size(); ++i) ok = s[i] == first[i];
    if (!ok) {
      throw ParameterError("concat_channel: shape " + to_string(s) + " does not match " + to_string(first) +
                           " outside the channel axis");
    }
    channels += s[1];
  }
  Shape so = first;
  so[1] = channels;
  Tensor<T> out(so);
  const std::size_t batch = first[0];
  const std::size_t inner = numel(first) / (first[0] * first[1]);
  auto o = out.data();
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t c = p.dim(1);
    auto pv = p.data();
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(b * c * inner), c * inner,
                  o.begin() + static_cast<std::ptrdiff_t>((b * channels + offset) * inner));
    offset += c;
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (!g.recording() || !any) return out;
  return g.record("concat_channel", parts, out,
                  [parts, offsets, batch, inner, channels](std::span<const T> go) {
                    for (std::size_t i = 0; i < parts.size(); ++i) {
                      auto& p = parts[i];
                      if (!p.requires_grad()) continue;
                      const std::size_t c = p.dim(1);
                      auto gp = p.mutable_grad();
                      for (std::size_t b = 0; b < batch; ++b)
                        for (std::size_t j = 0; j < c * inner; ++j)
                          gp[b * c * inner + j] += go[(b * channels + offsets[i]) * inner + j];
                    }
                  });
}

template <typename T>
Tensor<T> reduce_sum(Graph<T>& g, const Tensor<T>& a) {
  double total = 0;
  for (T v : a.data()) total += v;
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total));
  if (!g.needs_grad({&a})) return out;
  return g.record("reduce_sum", {a}, out, [a](std::span<const T> go) {
    auto ga = a.mutable_grad();
    for (auto& v : ga) v += go[0];
  });
}

template <typename T>
Tensor<T> reduce_mean(Graph<T>& g, const Tensor<T>& a) {
  double total = 0;
  for (T v : a.data()) total += v;
  const T count = static_cast<T>(a.numel());
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(a.numel())));
  if (!g.needs_grad({&a})) return out;
  return g.record("reduce_mean", {a}, out, [a, count](std::span<const T> go) {
    auto ga = a.mutable_grad();
    for (auto& v : ga) v += go[0] / count;
  });
}

// ---------------------------------------------------------------------------
// Convolution

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
  std::size_t groups = 1;
};

/// Zero-padded 2-D cross-correlation over NCHW input with a square kernel.
/// `bias` may be an undefined tensor.
template <typename T>
Tensor<T> conv2d(Graph<T>& g, const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dOptions opt) {
  detail::require_rank(input.shape(), 4, "conv2d", "input");
  detail::require_rank(weight.shape(), 4, "conv2d", "weight");
  const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = weight.dim(0), cg = weight.dim(1), k = weight.dim(2);
  detail::require(weight.dim(3) == k, "conv2d: kernel must be square, weight shape " + to_string(weight.shape()));
  detail::require(opt.stride >= 1, "conv2d: stride must be >= 1");
  detail::require(opt.dilation >= 1, "conv2d: dilation must be >= 1");
  detail::require(opt.groups >= 1, "conv2d: groups must be >= 1");
  detail::require(cin % opt.groups == 0, "conv2d: input channels " + std::to_string(cin) + " not divisible by groups " +
                                             std::to_string(opt.groups));
  detail::require(cout % opt.groups == 0, "conv2d: output channels " + std::to_string(cout) +
                                              " not divisible by groups " + std::to_string(opt.groups));
  detail::require(cg == cin / opt.groups, "conv2d: weight dim 1 is " + std::to_string(cg) + " but input channels/groups is " +
                                              std::to_string(cin / opt.groups));
  if (bias.defined()) {
    detail::require(bias.rank() == 1 && bias.dim(0) == cout,
                    "conv2d: bias shape " + to_string(bias.shape()) + " does not match output channels " + std::to_string(cout));
  }
  const std::size_t extent = effective_kernel_extent(static_cast<long long>(k), static_cast<long long>(opt.dilation));
  const std::size_t oh = window_output_extent(h, extent, opt.stride, opt.padding, "height");
  const std::size_t ow = window_output_extent(w, extent, opt.stride, opt.padding, "width");

  const kernels::ConvGeometry geo{cg, h, w, k, opt.stride, opt.padding, opt.dilation, oh, ow};
  const std::size_t plane = oh * ow;
  const std::size_t og = cout / opt.groups;
  const std::size_t ckk = cg * k * k;
  const bool direct = k == 1 && opt.stride == 1 && opt.padding == 0;

  Tensor<T> out(Shape{n, cout, oh, ow});
  std::vector<T> col(direct ? 0 : ckk * plane);
  const T* x = input.data().data();
  const T* wt = weight.data().data();
  T* y = out.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t grp = 0; grp < opt.groups; ++grp) {
      const T* src = x + (b * cin + grp * cg) * h * w;
      const T* cols = src;
      if (!direct) {
        kernels::im2col(geo, src, col.data());
        cols = col.data();
      }
      kernels::gemm_acc(og, plane, ckk, wt + grp * og * ckk, cols, y + (b * cout + grp * og) * plane);
    }
    if (bias.defined()) {
      const T* bv = bias.data().data();
      for (std::size_t c = 0; c < cout; ++c) {
        T* row = y + (b * cout + c) * plane;
        for (std::size_t p = 0; p < plane; ++p) row[p] += bv[c];
      }
    }
  }
  if (!g.needs_grad({&input, &weight, &bias})) return out;
  std::vector<Tensor<T>> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  return g.record("conv2d", std::move(inputs), out,
                  [input, weight, bias, geo, opt, n, cin, cout, og, ckk, plane, direct](std::span<const T> go) {
                    const std::size_t cg = geo.channels, hw = geo.height * geo.width;
                    std::vector<T> col(direct ? 0 : ckk * plane);
                    if (weight.requires_grad()) {
                      auto gw = weight.mutable_grad();
                      std::vector<T> colt(ckk * plane);
                      for (std::size_t b = 0; b < n; ++b) {
                        for (std::size_t grp = 0; grp < opt.groups; ++grp) {
                          const T* src = input.data().data() + (b * cin + grp * cg) * hw;
                          const T* cols = src;
                          if (!direct) {
                            kernels::im2col(geo, src, col.data());
                            cols = col.data();
                          }
                          kernels::transpose(ckk, plane, cols, colt.data());
                          kernels::gemm_acc(og, ckk, plane, go.data() + (b * cout + grp * og) * plane, colt.data(),
                                            gw.data() + grp * og * ckk);
                        }
                      }
                    }
                    if (input.requires_grad()) {
                      auto gx = input.mutable_grad();
                      std::vector<T> wt(ckk * og);
                      std::vector<T> dcol(ckk * plane);
                      for (std::size_t grp = 0; grp < opt.groups; ++grp) {
                        kernels::transpose(og, ckk, weight.data().data() + grp * og * ckk, wt.data());
                        for (std::size_t b = 0; b < n; ++b) {
                          std::fill(dcol.begin(), dcol.end(), T{0});
                          kernels::gemm_acc(ckk, plane, og, wt.data(), go.data() + (b * cout + grp * og) * plane,
                                            dcol.data());
                          T* dst = gx.data() + (b * cin + grp * cg) * hw;
                          if (direct) {
                            for (std::size_t i = 0; i < dcol.size(); ++i) dst[i] += dcol[i];
                          } else {
                            kernels::col2im_acc(geo, dcol.data(), dst);
                          }
                        }
                      }
                    }
                    if (bias.defined() && bias.requires_grad()) {
                      auto gb = bias.mutable_grad();
                      for (std::size_t b = 0; b < n; ++b)
                        for (std::size_t c = 0; c < cout; ++c) {
                          const T* row = go.data() + (b * cout + c) * plane;
                          T s{0};
                          for (std::size_t p = 0; p < plane; ++p) s += row[p];
                          gb[c] += s;
                        }
                    }
                  });
}

// ---------------------------------------------------------------------------
// Normalization

enum class NormMode { training, inference };

struct BatchNormOptions {
  NormMode mode = NormMode::training;
  double momentum = 0.1;
  double epsilon = 1e-5;
};

/// Per-channel batch normalization over NCHW input. In training mode the batch
/// statistics normalize the input and are blended into the running buffers.
template <typename T>
Tensor<T> batch_norm(Graph<T>& g, const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, BatchNormOptions opt) {
  detail::require_rank(input.shape(), 4, "batch_norm", "input");
  const std::size_t n = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  for (const Tensor<T>* p : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &running_mean, &running_var}) {
    if (p->rank() != 1 || p->dim(0) != c) {
      throw ParameterError("batch_norm: per-channel parameter of shape " + to_string(p->shape()) +
                           " does not match channel count " + std::to_string(c));
    }
  }
  detail::require(opt.epsilon > 0, "batch_norm: epsilon must be positive");
  const std::size_t count = n * plane;
  const bool training = opt.mode == NormMode::training;
  if (training && count < 2) {
    throw DegenerateBatchError("batch_norm: training statistics need N*H*W >= 2 values per channel, got " +
                               std::to_string(count));
  }

  std::vector<T> mean(c), invstd(c);
  const T* x = input.data().data();
  if (training) {
    auto rm = running_mean.data();
    auto rv = running_var.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* row = x + (b * c + ch) * plane;
        for (std::size_t p = 0; p < plane; ++p) s += row[p];
      }
      const double mu = s / static_cast<double>(count);
      double ss = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* row = x + (b * c + ch) * plane;
        for (std::size_t p = 0; p < plane; ++p) {
          const double d = row[p] - mu;
          ss += d * d;
        }
      }
      const double var = ss / static_cast<double>(count);
      mean[ch] = static_cast<T>(mu);
      invstd[ch] = static_cast<T>(1.0 / std::sqrt(var + opt.epsilon));
      const double unbiased = ss / static_cast<double>(count - 1);
      rm[ch] = static_cast<T>((1.0 - opt.momentum) * rm[ch] + opt.momentum * mu);
      rv[ch] = static_cast<T>((1.0 - opt.momentum) * rv[ch] + opt.momentum * unbiased);
    }
  } else {
    auto rm = running_mean.data();
    auto rv = running_var.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = rm[ch];
      invstd[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[ch]) + opt.epsilon));
    }
  }

  Tensor<T> out(input.shape());
  T* y = out.data().data();
  auto gm = gamma.data();
  auto bt = beta.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* row = x + (b * c + ch) * plane;
      T* orow = y + (b * c + ch) * plane;
      const T sc = gm[ch] * invstd[ch];
      const T sh = bt[ch] - mean[ch] * sc;
      for (std::size_t p = 0; p < plane; ++p) orow[p] = row[p] * sc + sh;
    }
  if (!g.needs_grad({&input, &gamma, &beta})) return out;
  return g.record("batch_norm", {input, gamma, beta}, out,
                  [input, gamma, beta, mean, invstd, n, c, plane, count, training](std::span<const T> go) {
                    const T* x = input.data().data();
                    auto gm = gamma.data();
                    std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
                    for (std::size_t b = 0; b < n; ++b)
                      for (std::size_t ch = 0; ch < c; ++ch) {
                        const T* row = x + (b * c + ch) * plane;
                        const T* grow = go.data() + (b * c + ch) * plane;
                        for (std::size_t p = 0; p < plane; ++p) {
                          const double xhat = (static_cast<double>(row[p]) - mean[ch]) * invstd[ch];
                          sum_dy[ch] += grow[p];
                          sum_dy_xhat[ch] += grow[p] * xhat;
                        }
                      }
                    if (gamma.requires_grad()) {
                      auto gg = gamma.mutable_grad();
                      for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += static_cast<T>(sum_dy_xhat[ch]);
                    }
                    if (beta.requires_grad()) {
                      auto gb = beta.mutable_grad();
                      for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += static_cast<T>(sum_dy[ch]);
                    }
                    if (!input.requires_grad()) return;
                    auto gx = input.mutable_grad();
                    const double m = static_cast<double>(count);
                    for (std::size_t b = 0; b < n; ++b)
                      for (std::size_t ch = 0; ch < c; ++ch) {
                        const T* row = x + (b * c + ch) * plane;
                        const T* grow = go.data() + (b * c + ch) * plane;
                        T* dst = gx.data() + (b * c + ch) * plane;
                        const double k = static_cast<double>(gm[ch]) * invstd[ch];
                        if (!training) {
                          for (std::size_t p = 0; p < plane; ++p) dst[p] += static_cast<T>(k * grow[p]);
                          continue;
                        }
                        const double mdy = sum_dy[ch] / m;
                        const double mdyx = sum_dy_xhat[ch] / m;
                        for (std::size_t p = 0; p < plane; ++p) {
                          const double xhat = (static_cast<double>(row[p]) - mean[ch]) * invstd[ch];
                          dst[p] += static_cast<T>(k * (grow[p] - mdy - xhat * mdyx));
                        }
                      }
                  });
}

// ---------------------------------------------------------------------------
// Resampling

namespace detail {

struct LerpTap {
  std::size_t lo, hi;
  double frac;
};

inline std::vector<LerpTap> lerp_taps(std::size_t src, std::size_t dst, bool align_corners) {
  std::vector<LerpTap> taps(dst);
  for (std::size_t i = 0; i < dst; ++i) {
    double pos;
    if (align_corners) {
      pos = dst > 1 ? static_cast<double>(i) * static_cast<double>(src - 1) / static_cast<double>(dst - 1) : 0.0;
    } else {
      pos = (static_cast<double>(i) + 0.5) * static_cast<double>(src) / static_cast<double>(dst) - 0.5;
      if (pos < 0) pos = 0;
    }
    auto lo = static_cast<std::size_t>(pos);
    if (lo > src - 1) lo = src - 1;
    const std::size_t hi = std::min(lo + 1, src - 1);
    taps[i] = {lo, hi, pos - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize of the two trailing axes of NCHW input.
template <typename T>
Tensor<T> bilinear_upsample(Graph<T>& g, const Tensor<T>& input, std::size_t out_h, std::size_t out_w,
                            bool align_corners = false) {
  detail::require_rank(input.shape(), 4, "bilinear_upsample", "input");
  detail::require(out_h >= 1 && out_w >= 1, "bilinear_upsample: output size must be positive");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto ty = detail::lerp_taps(h, out_h, align_corners);
  const auto tx = detail::lerp_taps(w, out_w, align_corners);
  Tensor<T> out(Shape{n, c, out_h, out_w});
  const T* x = input.data().data();
  T* y = out.data().data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = x + plane * h * w;
    T* dst = y + plane * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const auto& a = ty[i];
      const T* r0 = src + a.lo * w;
      const T* r1 = src + a.hi * w;
      for (std::size_t j = 0; j < out_w; ++j) {
        const auto& b = tx[j];
        const double top = r0[b.lo] + (r0[b.hi] - r0[b.lo]) * b.frac;
        const double bot = r1[b.lo] + (r1[b.hi] - r1[b.lo]) * b.frac;
        dst[i * out_w + j] = static_cast<T>(top + (bot - top) * a.frac);
      }
    }
  }
  if (!g.needs_grad({&input})) return out;
  return g.record("bilinear_upsample", {input}, out, [input, ty, tx, n, c, h, w, out_h, out_w](std::span<const T> go) {
    auto gx = input.mutable_grad();
    for (std::size_t plane = 0; plane < n * c; ++plane) {
      T* dst = gx.data() + plane * h * w;
      const T* src = go.data() + plane * out_h * out_w;
      for (std::size_t i = 0; i < out_h; ++i) {
        const auto& a = ty[i];
        for (std::size_t j = 0; j < out_w; ++j) {
          const auto& b = tx[j];
          const double v = src[i * out_w + j];
          dst[a.lo * w + b.lo] += static_cast<T>(v * (1 - a.frac) * (1 - b.frac));
          dst[a.lo * w + b.hi] += static_cast<T>(v * (1 - a.frac) * b.frac);
          dst[a.hi * w + b.lo] += static_cast<T>(v * a.frac * (1 - b.frac));
          dst[a.hi * w + b.hi] += static_cast<T>(v * a.frac * b.frac);
        }
      }
    }
  });
}

enum class PoolMode { max, avg };

struct Pool2dOptions {
  PoolMode mode = PoolMode::max;
  std::size_t kernel = 2;
  std::size_t stride = 2;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;
};

/// Windowed max or average pooling. Padded positions never win a max and are
/// excluded from the average's divisor.
template <typename T>
Tensor<T> pool2d(Graph<T>& g, const Tensor<T>& input, Pool2dOptions opt) {
  detail::require_rank(input.shape(), 4, "pool2d", "input");
  detail::require(opt.kernel >= 1, "pool2d: kernel must be >= 1");
  detail::require(opt.stride >= 1, "pool2d: stride must be >= 1");
  detail::require(opt.pad_h < opt.kernel && opt.pad_w < opt.kernel, "pool2d: padding must be smaller than the kernel");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t oh = window_output_extent(h, opt.kernel, opt.stride, opt.pad_h, "height");
  const std::size_t ow = window_output_extent(w, opt.kernel, opt.stride, opt.pad_w, "width");
  Tensor<T> out(Shape{n, c, oh, ow});
  const T* x = input.data().data();
  T* y = out.data().data();
  // For max: flat source index of each winner. For avg: the window's valid count.
  std::vector<std::size_t> route(n * c * oh * ow);
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = x + plane * h * w;
    for (std::size_t i = 0; i < oh; ++i) {
      const long long y0 = static_cast<long long>(i * opt.stride) - static_cast<long long>(opt.pad_h);
      const std::size_t ys = static_cast<std::size_t>(std::max(0LL, y0));
      const std::size_t ye = static_cast<std::size_t>(std::min(static_cast<long long>(h), y0 + static_cast<long long>(opt.kernel)));
      for (std::size_t j = 0; j < ow; ++j) {
        const long long x0 = static_cast<long long>(j * opt.stride) - static_cast<long long>(opt.pad_w);
        const std::size_t xs = static_cast<std::size_t>(std::max(0LL, x0));
        const std::size_t xe =
            static_cast<std::size_t>(std::min(static_cast<long long>(w), x0 + static_cast<long long>(opt.kernel)));
        const std::size_t o = (plane * oh + i) * ow + j;
        if (opt.mode == PoolMode::max) {
          std::size_t best = ys * w + xs;
          for (std::size_t yy = ys; yy < ye; ++yy)
            for (std::size_t xx = xs; xx < xe; ++xx)
              if (src[yy * w + xx] > src[best]) best = yy * w + xx;
          y[o] = src[best];
          route[o] = plane * h * w + best;
        } else {
          double s = 0;
          for (std::size_t yy = ys; yy < ye; ++yy)
            for (std::size_t xx = xs; xx < xe; ++xx) s += src[yy * w + xx];
          const std::size_t cnt = (ye - ys) * (xe - xs);
          y[o] = static_cast<T>(s / static_cast<double>(cnt));
          route[o] = cnt;
        }
      }
    }
  }
  if (!g.needs_grad({&input})) return out;
  return g.record("pool2d", {input}, out, [input, route, opt, n, c, h, w, oh, ow](std::span<const T> go) {
    auto gx = input.mutable_grad();
    if (opt.mode == PoolMode::max) {
      for (std::size_t o = 0; o < go.size(); ++o) gx[route[o]] += go[o];
      return;
    }
    for (std::size_t plane = 0; plane < n * c; ++plane) {
      T* dst = gx.data() + plane * h * w;
      for (std::size_t i = 0; i < oh; ++i) {
        const long long y0 = static_cast<long long>(i * opt.stride) - static_cast<long long>(opt.pad_h);
        const std::size_t ys = static_cast<std::size_t>(std::max(0LL, y0));
        const std::size_t ye =
            static_cast<std::size_t>(std::min(static_cast<long long>(h), y0 + static_cast<long long>(opt.kernel)));
        for (std::size_t j = 0; j < ow; ++j) {
          const long long x0 = static_cast<long long>(j * opt.stride) - static_cast<long long>(opt.pad_w);
          const std::size_t xs = static_cast<std::size_t>(std::max(0LL, x0));
          const std::size_t xe =
              static_cast<std::size_t>(std::min(static_cast<long long>(w), x0 + static_cast<long long>(opt.kernel)));
          const std::size_t o = (plane * oh + i) * ow + j;
          const T share = go[o] / static_cast<T>(route[o]);
          for (std::size_t yy = ys; yy < ye; ++yy)
            for (std::size_t xx = xs; xx < xe; ++xx) dst[yy * w + xx] += share;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> pool2d(Graph<T>& g, const Tensor<T>& input, PoolMode mode, std::size_t kernel, std::size_t stride,
                 std::size_t padding) {
  return pool2d(g, input, Pool2dOptions{mode, kernel, stride, padding, padding});
}

namespace detail {

inline std::vector<std::pair<std::size_t, std::size_t>> adaptive_bins(std::size_t extent, std::size_t bins) {
  std::vector<std::pair<std::size_t, std::size_t>> out(bins);
  for (std::size_t b = 0; b < bins; ++b) out[b] = {b * extent / bins, (b + 1) * extent / bins};
  return out;
}

}  // namespace detail

/// Averages NCHW input over a bins_h x bins_w grid of floor-aligned bins.
template <typename T>
Tensor<T> adaptive_avg_pool(Graph<T>& g, const Tensor<T>& input, std::size_t bins_h, std::size_t bins_w) {
  detail::require_rank(input.shape(), 4, "adaptive_avg_pool", "input");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (bins_h < 1 || bins_w < 1 || bins_h > h || bins_w > w) {
    throw ParameterError("adaptive_avg_pool: bins " + std::to_string(bins_h) + "x" + std::to_string(bins_w) +
                         " must lie in [1, extent] for a " + std::to_string(h) + "x" + std::to_string(w) + " input");
  }
  const auto by = detail::adaptive_bins(h, bins_h);
  const auto bx = detail::adaptive_bins(w, bins_w);
  Tensor<T> out(Shape{n, c, bins_h, bins_w});
  const T* x = input.data().data();
  T* y = out.data().data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = x + plane * h * w;
    for (std::size_t i = 0; i < bins_h; ++i)
      for (std::size_t j = 0; j < bins_w; ++j) {
        double s = 0;
        for (std::size_t yy = by[i].first; yy < by[i].second; ++yy)
          for (std::size_t xx = bx[j].first; xx < bx[j].second; ++xx) s += src[yy * w + xx];
        const auto cnt = static_cast<double>((by[i].second - by[i].first) * (bx[j].second - bx[j].first));
        y[(plane * bins_h + i) * bins_w + j] = static_cast<T>(s / cnt);
      }
  }
  if (!g.needs_grad({&input})) return out;
  return g.record("adaptive_avg_pool", {input}, out, [input, by, bx, n, c, h, w](std::span<const T> go) {
    auto gx = input.mutable_grad();
    const std::size_t bh = by.size(), bw = bx.size();
    for (std::size_t plane = 0; plane < n * c; ++plane) {
      T* dst = gx.data() + plane * h * w;
      for (std::size_t i = 0; i < bh; ++i)
        for (std::size_t j = 0; j < bw; ++j) {
          const auto cnt = static_cast<T>((by[i].second - by[i].first) * (bx[j].second - bx[j].first));
          const T share = go[(plane * bh + i) * bw + j] / cnt;
          for (std::size_t yy = by[i].first; yy < by[i].second; ++yy)
            for (std::size_t xx = bx[j].first; xx < bx[j].second; ++xx) dst[yy * w + xx] += share;
        }
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax

namespace detail {

// Softmax over `len` values spaced `stride` apart, for `groups` independent
// groups laid out as (outer, len, inner).
template <typename T>
Tensor<T> strided_softmax(Graph<T>& g, const Tensor<T>& input, std::size_t outer, std::size_t len, std::size_t inner,
                          std::string_view name) {
  Tensor<T> out(input.shape());
  const T* x = input.data().data();
  T* y = out.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      T mx = x[base];
      for (std::size_t c = 1; c < len; ++c) mx = std::max(mx, x[base + c * inner]);
      double s = 0;
      for (std::size_t c = 0; c < len; ++c) {
        const double e = std::exp(static_cast<double>(x[base + c * inner] - mx));
        y[base + c * inner] = static_cast<T>(e);
        s += e;
      }
      for (std::size_t c = 0; c < len; ++c) y[base + c * inner] = static_cast<T>(y[base + c * inner] / s);
    }
  if (!g.needs_grad({&input})) return out;
  Tensor<T> result = out;
  return g.record(name, {input}, out, [input, result, outer, len, inner](std::span<const T> go) {
    auto gx = input.mutable_grad();
    const T* y = result.data().data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * len * inner + i;
        double dot = 0;
        for (std::size_t c = 0; c < len; ++c) dot += go[base + c * inner] * y[base + c * inner];
        for (std::size_t c = 0; c < len; ++c) {
          const std::size_t at = base + c * inner;
          gx[at] += static_cast<T>(y[at] * (go[at] - dot));
        }
      }
  });
}

}  // namespace detail

/// Per-pixel softmax across the channel axis of NCHW input.
template <typename T>
Tensor<T> softmax_channel(Graph<T>& g, const Tensor<T>& input) {
  detail::require_rank(input.shape(), 4, "softmax_channel", "input");
  return detail::strided_softmax(g, input, input.dim(0), input.dim(1), input.dim(2) * input.dim(3), "softmax_channel");
}

/// Softmax across the last axis of any tensor.
template <typename T>
Tensor<T> softmax_lastdim(Graph<T>& g, const Tensor<T>& input) {
  const std::size_t len = input.shape().back();
  return detail::strided_softmax(g, input, input.numel() / len, len, std::size_t{1}, "softmax_lastdim");
}

/// Index of the largest channel per pixel (first on ties); not differentiable.
template <typename T>
std::vector<std::int32_t> argmax_channel(const Tensor<T>& logits) {
  detail::require_rank(logits.shape(), 4, "argmax_channel", "logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  std::vector<std::int32_t> out(n * plane);
  const T* x = logits.data().data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < plane; ++p) {
      std::size_t best = 0;
      for (std::size_t ch = 1; ch < c; ++ch)
        if (x[(b * c + ch) * plane + p] > x[(b * c + best) * plane + p]) best = ch;
      out[b * plane + p] = static_cast<std::int32_t>(best);
    }
  return out;
}

}  // namespace segkit
