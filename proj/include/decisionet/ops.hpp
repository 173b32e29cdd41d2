#pragma once

#include "decisionet/tensor.hpp"

namespace dnet {

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result<T>(
      "add", a.shape(), std::move(out), {a.node(), b.node()}, [](auto& self) {
        for (auto& in : self.inputs) {
          if (!in->requires_grad) continue;
          auto g = in->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result<T>(
      "sub", a.shape(), std::move(out), {a.node(), b.node()}, [](auto& self) {
        const T sign[2] = {T{1}, T{-1}};
        for (std::size_t k = 0; k < 2; ++k) {
          auto& in = self.inputs[k];
          if (!in->requires_grad) continue;
          auto g = in->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * self.grad[i];
        }
      });
}

/// Elementwise product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result<T>(
      "mul", a.shape(), std::move(out), {a.node(), b.node()}, [](auto& self) {
        auto& x = *self.inputs[0];
        auto& y = *self.inputs[1];
        if (x.requires_grad) {
          auto g = x.grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y.data[i];
        }
        if (y.requires_grad) {
          auto g = y.grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x.data[i];
        }
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * a[i];
  return detail::make_result<T>("scale", a.shape(), std::move(out), {a.node()},
                                [factor](auto& self) {
                                  auto g = self.inputs[0]->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    g[i] += factor * self.grad[i];
                                });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total{0};
  for (T v : a.data()) total += v;
  return detail::make_result<T>("sum", Shape{1}, {total}, {a.node()}, [](auto& self) {
    auto g = self.inputs[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T{1} / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw std::invalid_argument("reshape: " + to_string(a.shape()) + " -> " +
                                to_string(shape));
  }
  Buffer<T> out(a.data().begin(), a.data().end());
  return detail::make_result<T>("reshape", std::move(shape), std::move(out), {a.node()},
                                [](auto& self) {
                                  auto g = self.inputs[0]->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    g[i] += self.grad[i];
                                });
}

/// y = A x for A of shape [m, n] and x of shape [n].
template <typename T>
Tensor<T> matvec(const Tensor<T>& a, const Tensor<T>& x) {
  if (a.rank() != 2 || x.rank() != 1 || a.dim(1) != x.dim(0)) {
    throw std::invalid_argument("matvec: incompatible shapes " + to_string(a.shape()) +
                                " and " + to_string(x.shape()));
  }
  const std::size_t m = a.dim(0), n = a.dim(1);
  Buffer<T> out(m, T{0});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += a[i * n + j] * x[j];
  return detail::make_result<T>(
      "matvec", Shape{m}, std::move(out), {a.node(), x.node()}, [m, n](auto& self) {
        auto& an = *self.inputs[0];
        auto& xn = *self.inputs[1];
        if (an.requires_grad) {
          auto g = an.grad_buffer();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i] * xn.data[j];
        }
        if (xn.requires_grad) {
          auto g = xn.grad_buffer();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i] * an.data[i * n + j];
        }
      });
}

/// Hard threshold 1(x > 0). Its derivative is zero everywhere it exists.
template <typename T>
Tensor<T> step(const Tensor<T>& a) {
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > T{0} ? T{1} : T{0};
  return detail::make_result<T>("step", a.shape(), std::move(out), {a.node()},
                                [](auto& self) { self.inputs[0]->grad_buffer(); });
}

}  // namespace dnet
