#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "decisionet/nn.hpp"
#include "decisionet/ops.hpp"

namespace dnet {

enum class RoutingMode { Train, Eval };

/// How often the relaxed/hard forward choice is drawn during training.
enum class ChoiceGranularity { PerCall, PerSample };

/// max(0, min(1, 1.2 sigmoid(z) - 0.1)). Saturates exactly at |z| >= ln 11.
template <typename T>
T saturating_sigmoid(T z) {
  const T s = T{1} / (T{1} + std::exp(-z));
  return std::max(T{0}, std::min(T{1}, T(1.2) * s - T(0.1)));
}

/// Derivative of saturating_sigmoid; zero in the saturated regions.
template <typename T>
T saturating_sigmoid_grad(T z) {
  const T s = T{1} / (T{1} + std::exp(-z));
  const T v = T(1.2) * s - T(0.1);
  if (v <= T{0} || v >= T{1}) return T{0};
  return T(1.2) * s * (T{1} - s);
}

/// Per-sample record of one binarizer evaluation.
template <typename T>
struct BinarizerSample {
  T z{};
  T epsilon{};
  bool hard = true;
};

/// Binarization with explicit noise and forward choice. The forward value is
/// 1(z + eps > 0) for hard samples and saturating_sigmoid(z + eps) otherwise;
/// the backward rule is always the saturating-sigmoid derivative at z + eps.
template <typename T>
Tensor<T> binarize_with(const Tensor<T>& z, std::span<const T> epsilon,
                        const std::vector<bool>& hard) {
  if (z.rank() != 1 || epsilon.size() != z.numel() || hard.size() != z.numel()) {
    throw std::invalid_argument("binarize: expected z[N] with N noise draws and choices");
  }
  const std::size_t N = z.numel();
  Buffer<T> out(N), slope(N);
  for (std::size_t i = 0; i < N; ++i) {
    const T shifted = z[i] + epsilon[i];
    out[i] = hard[i] ? (shifted > T{0} ? T{1} : T{0}) : saturating_sigmoid(shifted);
    slope[i] = saturating_sigmoid_grad(shifted);
  }
  return detail::make_result<T>("binarize", z.shape(), std::move(out), {z.node()},
                                [slope = std::move(slope)](auto& self) {
                                  auto g = self.inputs[0]->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    g[i] += self.grad[i] * slope[i];
                                });
}

/// Improved semantic hashing. Train: standard-normal noise per sample and a
/// fair coin between the hard and relaxed forward. Eval: no noise, hard only.
template <typename T, typename Rng>
Tensor<T> binarize(const Tensor<T>& z, RoutingMode mode, Rng& rng,
                   ChoiceGranularity granularity = ChoiceGranularity::PerCall,
                   std::vector<BinarizerSample<T>>* trace = nullptr) {
  const std::size_t N = z.numel();
  std::vector<T> eps(N, T{0});
  std::vector<bool> hard(N, true);
  if (mode == RoutingMode::Train) {
    std::normal_distribution<double> noise(0.0, 1.0);
    std::bernoulli_distribution coin(0.5);
    const bool call_choice = coin(rng);
    for (std::size_t i = 0; i < N; ++i) {
      eps[i] = static_cast<T>(noise(rng));
      hard[i] = granularity == ChoiceGranularity::PerCall ? call_choice : coin(rng);
    }
  }
  if (trace) {
    trace->resize(N);
    for (std::size_t i = 0; i < N; ++i) (*trace)[i] = {z[i], eps[i], static_cast<bool>(hard[i])};
  }
  return binarize_with<T>(z, eps, hard);
}

/// GAP -> single-output FC -> binarize.
template <typename T>
struct RoutingModule {
  std::size_t in_channels = 0;
  Tensor<T> weight;  // [C]
  Tensor<T> bias;    // [1]
  RoutingMode mode = RoutingMode::Train;
  ChoiceGranularity granularity = ChoiceGranularity::PerCall;

  RoutingModule() = default;
  explicit RoutingModule(std::size_t channels)
      : in_channels(channels), weight(Shape{channels}, T{0}, true), bias(Shape{1}, T{0}, true) {
    if (channels == 0) throw std::invalid_argument("RoutingModule: zero channels");
  }

  std::size_t param_count() const { return in_channels + 1; }

  /// Pre-binarization score FC(GAP(x)) per sample.
  Tensor<T> logits(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != in_channels) {
      throw std::invalid_argument("routing: input " + to_string(x.shape()) + " does not have " +
                                  std::to_string(in_channels) + " channels");
    }
    auto pooled = global_avg_pool(x);
    auto z = linear(pooled, reshape(weight, Shape{in_channels, 1}), bias);
    return reshape(z, Shape{x.dim(0)});
  }

  template <typename Rng>
  Tensor<T> forward(const Tensor<T>& x, Rng& rng,
                    std::vector<BinarizerSample<T>>* trace = nullptr) const {
    return binarize(logits(x), mode, rng, granularity, trace);
  }
};

template <typename T, typename Rng>
Tensor<T> routing_forward(const Tensor<T>& x, const RoutingModule<T>& rm, Rng& rng) {
  return rm.forward(x, rng);
}

/// Per-sample (1 - r) * left + r * right.
template <typename T>
Tensor<T> combine_branches(const Tensor<T>& r, const Tensor<T>& left, const Tensor<T>& right) {
  detail::require_same_shape(left, right, "combine_branches");
  if (r.rank() != 1 || left.rank() == 0 || left.dim(0) != r.dim(0)) {
    throw std::invalid_argument("combine_branches: routing values " + to_string(r.shape()) +
                                " do not match branch batch " + to_string(left.shape()));
  }
  const std::size_t N = r.dim(0);
  const std::size_t inner = left.numel() / N;
  Buffer<T> out(left.numel());
  for (std::size_t n = 0; n < N; ++n) {
    const T w = r[n];
    for (std::size_t k = 0; k < inner; ++k) {
      const std::size_t i = n * inner + k;
      out[i] = (T{1} - w) * left[i] + w * right[i];
    }
  }
  return detail::make_result<T>(
      "combine_branches", left.shape(), std::move(out), {r.node(), left.node(), right.node()},
      [N, inner](auto& self) {
        auto& rn = *self.inputs[0];
        auto& ln = *self.inputs[1];
        auto& rt = *self.inputs[2];
        if (rn.requires_grad) {
          auto g = rn.grad_buffer();
          for (std::size_t n = 0; n < N; ++n) {
            T acc{0};
            for (std::size_t k = 0; k < inner; ++k) {
              const std::size_t i = n * inner + k;
              acc += self.grad[i] * (rt.data[i] - ln.data[i]);
            }
            g[n] += acc;
          }
        }
        if (ln.requires_grad) {
          auto g = ln.grad_buffer();
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t k = 0; k < inner; ++k)
              g[n * inner + k] += (T{1} - rn.data[n]) * self.grad[n * inner + k];
        }
        if (rt.requires_grad) {
          auto g = rt.grad_buffer();
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t k = 0; k < inner; ++k)
              g[n * inner + k] += rn.data[n] * self.grad[n * inner + k];
        }
      });
}

}  // namespace dnet
