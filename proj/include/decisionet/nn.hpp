#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "decisionet/ops.hpp"
#include "decisionet/tensor.hpp"

namespace dnet {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t filters, kh, kw, stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kh * kw; }
  std::size_t positions() const { return out_h * out_w; }
};

// Output columns [lo, hi) whose stride-1 tap v lands inside the input row.
inline std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t v) {
  const std::size_t lo = std::min(g.out_w, g.pad > v ? g.pad - v : 0);
  const std::size_t hi = std::min(g.out_w, g.width + g.pad > v ? g.width + g.pad - v : 0);
  return {lo, std::max(lo, hi)};
}

// Unfolds the zero-padded receptive fields of one sample into a
// [C*kh*kw, H'*W'] matrix. Padding entries are never written, so `cols`
// must come from zeroed_cols.
template <typename T>
RowMat<T> zeroed_cols(const ConvGeometry& g) {
  return RowMat<T>::Zero(static_cast<Eigen::Index>(g.patch()),
                         static_cast<Eigen::Index>(g.positions()));
}

template <typename T>
void im2col(const ConvGeometry& g, const T* x, RowMat<T>& cols) {
  const std::size_t P = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* plane = x + c * g.height * g.width;
    for (std::size_t u = 0; u < g.kh; ++u) {
      for (std::size_t v = 0; v < g.kw; ++v) {
        T* row = cols.data() + ((c * g.kh + u) * g.kw + v) * P;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + u) -
                          static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
          const T* src = plane + ih * g.width;
          if (g.stride == 1) {
            const auto [lo, hi] = valid_columns(g, v);
            const T* s = src + (lo + v - g.pad);
            for (std::size_t k = 0; k < hi - lo; ++k) dst[lo + k] = s[k];
            continue;
          }
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + v) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.width)) dst[ow] = src[iw];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const RowMat<T>& cols, T* dx) {
  const std::size_t P = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* plane = dx + c * g.height * g.width;
    for (std::size_t u = 0; u < g.kh; ++u) {
      for (std::size_t v = 0; v < g.kw; ++v) {
        const T* row = cols.data() + ((c * g.kh + u) * g.kw + v) * P;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + u) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
          const T* src = row + oh * g.out_w;
          T* dst = plane + ih * g.width;
          if (g.stride == 1) {
            const auto [lo, hi] = valid_columns(g, v);
            T* d = dst + (lo + v - g.pad);
            for (std::size_t k = 0; k < hi - lo; ++k) d[k] += src[lo + k];
            continue;
          }
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + v) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.width)) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

inline std::size_t pooled_extent(std::size_t in, std::size_t window, std::size_t stride,
                                 const char* op) {
  if (window == 0 || stride == 0) throw std::invalid_argument(std::string(op) + ": zero window or stride");
  if (window > in) {
    throw std::invalid_argument(std::string(op) + ": window " + std::to_string(window) +
                                " larger than input extent " + std::to_string(in));
  }
  return (in - window) / stride + 1;
}

}  // namespace detail

/// 2-D cross-correlation with zero padding.
/// x: [N,C,H,W], weight: [O,C,kh,kw], bias: [O] -> [N,O,H',W'].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t pad = 0) {
  if (x.rank() != 4 || weight.rank() != 4 || bias.rank() != 1) {
    throw std::invalid_argument("conv2d: expected x[N,C,H,W], weight[O,C,kh,kw], bias[O]");
  }
  if (x.dim(1) != weight.dim(1)) {
    throw std::invalid_argument("conv2d: input has " + std::to_string(x.dim(1)) +
                                " channels, layer expects " + std::to_string(weight.dim(1)));
  }
  if (bias.dim(0) != weight.dim(0)) throw std::invalid_argument("conv2d: bias size mismatch");
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0),
                         weight.dim(2), weight.dim(3), stride, pad, 0, 0};
  if (g.height + 2 * pad < g.kh || g.width + 2 * pad < g.kw) {
    throw std::invalid_argument("conv2d: non-positive output size for input " +
                                to_string(x.shape()) + " and kernel " +
                                std::to_string(g.kh) + "x" + std::to_string(g.kw));
  }
  g.out_h = (g.height + 2 * pad - g.kh) / stride + 1;
  g.out_w = (g.width + 2 * pad - g.kw) / stride + 1;

  using Mat = detail::RowMat<T>;
  using MapC = Eigen::Map<const Mat>;
  const auto O = static_cast<Eigen::Index>(g.filters);
  const auto K = static_cast<Eigen::Index>(g.patch());
  const std::size_t P = g.positions();
  const auto Pi = static_cast<Eigen::Index>(P);
  const std::size_t in_size = g.channels * g.height * g.width;
  const bool pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;

  Buffer<T> out(g.batch * g.filters * P);
  MapC w(weight.data().data(), O, K);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias.data().data(), O);
  Mat cols = pointwise ? Mat() : detail::zeroed_cols<T>(g);
  for (std::size_t n = 0; n < g.batch; ++n) {
    const T* xn = x.data().data() + n * in_size;
    Eigen::Map<Mat> y(out.data() + n * g.filters * P, O, Pi);
    if (pointwise) {
      y.noalias() = w * MapC(xn, K, Pi);
    } else {
      detail::im2col<T>(g, xn, cols);
      y.noalias() = w * cols;
    }
    y.colwise() += b;
  }

  return detail::make_result<T>(
      "conv2d", Shape{g.batch, g.filters, g.out_h, g.out_w}, std::move(out),
      {x.node(), weight.node(), bias.node()}, [g, O, K, P, Pi, in_size, pointwise](auto& self) {
        auto& xn = *self.inputs[0];
        auto& wn = *self.inputs[1];
        auto& bn = *self.inputs[2];
        MapC w(wn.data.data(), O, K);
        if (bn.requires_grad) {
          auto gb = bn.grad_buffer();
          for (std::size_t n = 0; n < g.batch; ++n) {
            MapC dy(self.grad.data() + n * g.filters * P, O, Pi);
            for (Eigen::Index o = 0; o < O; ++o) gb[static_cast<std::size_t>(o)] += dy.row(o).sum();
          }
        }
        Mat cols = pointwise || !wn.requires_grad ? Mat() : detail::zeroed_cols<T>(g);
        Mat dcols;
        for (std::size_t n = 0; n < g.batch; ++n) {
          MapC dy(self.grad.data() + n * g.filters * P, O, Pi);
          const T* xs = xn.data.data() + n * in_size;
          if (wn.requires_grad) {
            Eigen::Map<Mat> gw(wn.grad_buffer().data(), O, K);
            if (pointwise) {
              gw.noalias() += dy * MapC(xs, K, Pi).transpose();
            } else {
              detail::im2col<T>(g, xs, cols);
              gw.noalias() += dy * cols.transpose();
            }
          }
          if (xn.requires_grad) {
            T* dx = xn.grad_buffer().data() + n * in_size;
            if (pointwise) {
              Eigen::Map<Mat>(dx, K, Pi).noalias() += w.transpose() * dy;
            } else {
              dcols.noalias() = w.transpose() * dy;
              detail::col2im_add<T>(g, dcols, dx);
            }
          }
        }
      });
}

/// Max pooling; the gradient goes to the first maximal element of each
/// window in row-major order.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t window, std::size_t stride) {
  if (x.rank() != 4) throw std::invalid_argument("max_pool2d: expected [N,C,H,W]");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = detail::pooled_extent(H, window, stride, "max_pool2d");
  const std::size_t Wo = detail::pooled_extent(W, window, stride, "max_pool2d");
  Buffer<T> out(N * C * Ho * Wo);
  std::vector<std::size_t> argmax(out.size());
  const auto xs = x.data();
  for (std::size_t plane = 0; plane < N * C; ++plane) {
    const std::size_t base = plane * H * W;
    for (std::size_t i = 0; i < Ho; ++i) {
      for (std::size_t j = 0; j < Wo; ++j) {
        std::size_t best = base + (i * stride) * W + j * stride;
        for (std::size_t u = 0; u < window; ++u) {
          for (std::size_t v = 0; v < window; ++v) {
            const std::size_t idx = base + (i * stride + u) * W + (j * stride + v);
            if (xs[idx] > xs[best]) best = idx;
          }
        }
        const std::size_t o = (plane * Ho + i) * Wo + j;
        out[o] = xs[best];
        argmax[o] = best;
      }
    }
  }
  return detail::make_result<T>("max_pool2d", Shape{N, C, Ho, Wo}, std::move(out),
                                {x.node()}, [argmax = std::move(argmax)](auto& self) {
                                  auto g = self.inputs[0]->grad_buffer();
                                  for (std::size_t o = 0; o < argmax.size(); ++o)
                                    g[argmax[o]] += self.grad[o];
                                });
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t window, std::size_t stride) {
  if (x.rank() != 4) throw std::invalid_argument("avg_pool2d: expected [N,C,H,W]");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = detail::pooled_extent(H, window, stride, "avg_pool2d");
  const std::size_t Wo = detail::pooled_extent(W, window, stride, "avg_pool2d");
  const T inv = T{1} / static_cast<T>(window * window);
  Buffer<T> out(N * C * Ho * Wo);
  const auto xs = x.data();
  for (std::size_t plane = 0; plane < N * C; ++plane) {
    for (std::size_t i = 0; i < Ho; ++i) {
      for (std::size_t j = 0; j < Wo; ++j) {
        T acc{0};
        for (std::size_t u = 0; u < window; ++u)
          for (std::size_t v = 0; v < window; ++v)
            acc += xs[plane * H * W + (i * stride + u) * W + j * stride + v];
        out[(plane * Ho + i) * Wo + j] = acc * inv;
      }
    }
  }
  return detail::make_result<T>(
      "avg_pool2d", Shape{N, C, Ho, Wo}, std::move(out), {x.node()},
      [N, C, H, W, Ho, Wo, window, stride, inv](auto& self) {
        auto g = self.inputs[0]->grad_buffer();
        for (std::size_t plane = 0; plane < N * C; ++plane)
          for (std::size_t i = 0; i < Ho; ++i)
            for (std::size_t j = 0; j < Wo; ++j) {
              const T d = self.grad[(plane * Ho + i) * Wo + j] * inv;
              for (std::size_t u = 0; u < window; ++u)
                for (std::size_t v = 0; v < window; ++v)
                  g[plane * H * W + (i * stride + u) * W + j * stride + v] += d;
            }
      });
}

/// Mean over spatial positions: [N,C,H,W] -> [N,C].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw std::invalid_argument("global_avg_pool: expected [N,C,H,W]");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t HW = H * W;
  Buffer<T> out(N * C);
  const auto xs = x.data();
  for (std::size_t plane = 0; plane < N * C; ++plane) {
    T acc{0};
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) acc += xs[plane * HW + i * W + j];
    out[plane] = acc / static_cast<T>(HW);
  }
  return detail::make_result<T>("global_avg_pool", Shape{N, C}, std::move(out), {x.node()},
                                [HW](auto& self) {
                                  auto g = self.inputs[0]->grad_buffer();
                                  const T inv = T{1} / static_cast<T>(HW);
                                  for (std::size_t plane = 0; plane < self.grad.size(); ++plane)
                                    for (std::size_t k = 0; k < HW; ++k)
                                      g[plane * HW + k] += self.grad[plane] * inv;
                                });
}

/// x: [N,F], weight: [F,G], bias: [G] -> [N,G].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || bias.rank() != 1 || x.dim(1) != weight.dim(0) ||
      bias.dim(0) != weight.dim(1)) {
    throw std::invalid_argument("linear: dimension mismatch " + to_string(x.shape()) + " x " +
                                to_string(weight.shape()) + " + " + to_string(bias.shape()));
  }
  const std::size_t N = x.dim(0), F = x.dim(1), G = weight.dim(1);
  const T* xp = x.data().data();
  const T* wp = weight.data().data();
  Buffer<T> out(N * G);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t g = 0; g < G; ++g) {
      T acc = bias[g];
      for (std::size_t f = 0; f < F; ++f) acc += xp[n * F + f] * wp[f * G + g];
      out[n * G + g] = acc;
    }
  }
  return detail::make_result<T>(
      "linear", Shape{N, G}, std::move(out), {x.node(), weight.node(), bias.node()},
      [N, F, G](auto& self) {
        auto& xn = *self.inputs[0];
        auto& wn = *self.inputs[1];
        auto& bn = *self.inputs[2];
        const T* dy = self.grad.data();
        if (xn.requires_grad) {
          auto dx = xn.grad_buffer();
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t f = 0; f < F; ++f) {
              T acc{0};
              for (std::size_t g = 0; g < G; ++g) acc += dy[n * G + g] * wn.data[f * G + g];
              dx[n * F + f] += acc;
            }
        }
        if (wn.requires_grad) {
          auto dw = wn.grad_buffer();
          for (std::size_t f = 0; f < F; ++f)
            for (std::size_t g = 0; g < G; ++g) {
              T acc{0};
              for (std::size_t n = 0; n < N; ++n) acc += xn.data[n * F + f] * dy[n * G + g];
              dw[f * G + g] += acc;
            }
        }
        if (bn.requires_grad) {
          auto db = bn.grad_buffer();
          for (std::size_t g = 0; g < G; ++g) {
            T acc{0};
            for (std::size_t n = 0; n < N; ++n) acc += dy[n * G + g];
            db[g] += acc;
          }
        }
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Buffer<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
  return detail::make_result<T>("relu", x.shape(), std::move(out), {x.node()},
                                [](auto& self) {
                                  auto& in = *self.inputs[0];
                                  auto g = in.grad_buffer();
                                  const T* x = in.data.data();
                                  const T* dy = self.grad.data();
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    g[i] += x[i] > T{0} ? dy[i] : T{0};
                                });
}

/// Row-wise softmax of [N,K] logits, stabilized by max subtraction.
template <typename T>
std::vector<T> softmax_rows(std::span<const T> logits, std::size_t rows, std::size_t cols) {
  std::vector<T> p(rows * cols);
  for (std::size_t n = 0; n < rows; ++n) {
    const T* z = logits.data() + n * cols;
    const T m = *std::max_element(z, z + cols);
    T total{0};
    for (std::size_t k = 0; k < cols; ++k) total += (p[n * cols + k] = std::exp(z[k] - m));
    for (std::size_t k = 0; k < cols; ++k) p[n * cols + k] /= total;
  }
  return p;
}

/// Mean negative log-likelihood of `labels` under softmax(logits).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw std::invalid_argument("cross_entropy: expected logits [N,K]");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (labels.size() != N) throw std::invalid_argument("cross_entropy: label count mismatch");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= K) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) +
                              " outside [0," + std::to_string(K) + ")");
    }
  }
  T loss{0};
  for (std::size_t n = 0; n < N; ++n) {
    const T* z = logits.data().data() + n * K;
    const T m = *std::max_element(z, z + K);
    T total{0};
    for (std::size_t k = 0; k < K; ++k) total += std::exp(z[k] - m);
    loss += m + std::log(total) - z[labels[n]];
  }
  loss /= static_cast<T>(N);
  std::vector<int> targets(labels.begin(), labels.end());
  return detail::make_result<T>(
      "cross_entropy", Shape{1}, {loss}, {logits.node()},
      [N, K, targets = std::move(targets)](auto& self) {
        auto& in = *self.inputs[0];
        auto p = softmax_rows<T>(in.data, N, K);
        auto g = in.grad_buffer();
        const T s = self.grad[0] / static_cast<T>(N);
        for (std::size_t n = 0; n < N; ++n) {
          p[n * K + static_cast<std::size_t>(targets[n])] -= T{1};
          for (std::size_t k = 0; k < K; ++k) g[n * K + k] += s * p[n * K + k];
        }
      });
}

/// Mean of squared differences over all elements.
template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::require_same_shape(pred, target, "mse");
  const std::size_t M = pred.numel();
  T acc{0};
  for (std::size_t i = 0; i < M; ++i) {
    const T d = pred[i] - target[i];
    acc += d * d;
  }
  return detail::make_result<T>(
      "mse", Shape{1}, {acc / static_cast<T>(M)}, {pred.node(), target.node()},
      [M](auto& self) {
        auto& p = *self.inputs[0];
        auto& t = *self.inputs[1];
        const T s = T{2} * self.grad[0] / static_cast<T>(M);
        if (p.requires_grad) {
          auto g = p.grad_buffer();
          for (std::size_t i = 0; i < M; ++i) g[i] += s * (p.data[i] - t.data[i]);
        }
        if (t.requires_grad) {
          auto g = t.grad_buffer();
          for (std::size_t i = 0; i < M; ++i) g[i] -= s * (p.data[i] - t.data[i]);
        }
      });
}

// ---------------------------------------------------------------------------
// Layers

template <typename T>
struct ConvLayer {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kh = 1, kw = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  Tensor<T> weight;  // [out, in, kh, kw]
  Tensor<T> bias;    // [out]

  ConvLayer() = default;
  ConvLayer(std::size_t in, std::size_t out, std::size_t kernel_h, std::size_t kernel_w,
            std::size_t stride_, std::size_t pad)
      : in_channels(in), out_channels(out), kh(kernel_h), kw(kernel_w), stride(stride_),
        padding(pad), weight(Shape{out, in, kernel_h, kernel_w}, T{0}, true),
        bias(Shape{out}, T{0}, true) {
    if (in == 0 || out == 0) throw std::invalid_argument("ConvLayer: channel counts must be positive");
  }

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, padding); }

  std::size_t param_count() const { return out_channels * in_channels * kh * kw + out_channels; }

  std::size_t output_extent(std::size_t in, std::size_t k) const {
    return (in + 2 * padding - k) / stride + 1;
  }
};

enum class PoolKind { Max, Average };

struct PoolLayer {
  PoolKind kind = PoolKind::Max;
  std::size_t window = 2;
  std::size_t stride = 2;

  template <typename T>
  Tensor<T> forward(const Tensor<T>& x) const {
    return kind == PoolKind::Max ? max_pool2d(x, window, stride) : avg_pool2d(x, window, stride);
  }
};

/// Fills with draws from N(0, stddev^2).
template <typename T, typename Rng>
void fill_gaussian(Tensor<T>& t, T stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  for (auto& v : t.mutable_data()) v = static_cast<T>(dist(rng));
}

}  // namespace dnet
