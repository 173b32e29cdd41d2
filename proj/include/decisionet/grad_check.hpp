#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "decisionet/tensor.hpp"

namespace dnet {

struct GradCheckEntry {
  std::size_t input = 0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  bool flagged = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  std::size_t flagged = 0;

  bool passed() const { return flagged == 0; }
};

using TensorFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Name of the earliest recorded operation whose output holds NaN or
/// infinity, searched over the graph that produced `t`.
inline std::optional<std::string> first_non_finite_op(const Tensor<double>& t) {
  std::vector<const detail::Node<double>*> nodes;
  std::vector<const detail::Node<double>*> stack{t.node().get()};
  std::unordered_set<const detail::Node<double>*> seen;
  while (!stack.empty()) {
    const auto* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    nodes.push_back(n);
    for (const auto& in : n->inputs) stack.push_back(in.get());
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const auto* a, const auto* b) { return a->seq < b->seq; });
  for (const auto* n : nodes) {
    for (double v : n->data) {
      if (!std::isfinite(v)) return n->op;
    }
  }
  return std::nullopt;
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences. An element is flagged when
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) > tol.
inline GradCheckReport grad_check(const TensorFn& fn, std::vector<Tensor<double>> inputs,
                                  double step = 1e-5, double tol = 1e-4,
                                  const std::string& name = "function") {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.clear_grad();
  }
  auto out = fn(inputs);
  if (out.numel() != 1) throw std::invalid_argument("grad_check: " + name + " is not scalar");
  if (!std::isfinite(out.item())) {
    auto op = first_non_finite_op(out);
    throw NumericError("grad_check(" + name + "): non-finite output from operation '" +
                       op.value_or("unknown") + "'");
  }
  out.backward();

  auto evaluate = [&]() {
    NoGradGuard guard;
    const double v = fn(inputs).item();
    if (!std::isfinite(v)) {
      throw NumericError("grad_check(" + name + "): non-finite output under perturbation");
    }
    return v;
  };

  GradCheckReport report;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& in = inputs[k];
    std::vector<double> analytic(in.numel(), 0.0);
    if (in.has_grad()) std::copy(in.grad().begin(), in.grad().end(), analytic.begin());
    auto values = in.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + step;
      const double up = evaluate();
      values[i] = original - step;
      const double down = evaluate();
      values[i] = original;

      GradCheckEntry e;
      e.input = k;
      e.index = i;
      e.analytic = analytic[i];
      e.numeric = (up - down) / (2.0 * step);
      const double denom = std::max({std::abs(e.analytic), std::abs(e.numeric), 1e-8});
      e.rel_error = std::abs(e.analytic - e.numeric) / denom;
      e.flagged = e.rel_error > tol;
      report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
      report.flagged += e.flagged ? 1 : 0;
      report.entries.push_back(e);
    }
  }
  return report;
}

}  // namespace dnet
