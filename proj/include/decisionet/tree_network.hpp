#pragma once

#include <algorithm>
#include <array>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "decisionet/arch.hpp"
#include "decisionet/nn.hpp"
#include "decisionet/routing.hpp"

namespace dnet {

struct ReluLayer {};
struct GapLayer {};

template <typename T>
using Layer = std::variant<ConvLayer<T>, PoolLayer, ReluLayer, GapLayer>;

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
};

/// Layers applied in order. Copies share parameter tensors.
template <typename T>
struct Sequential {
  std::vector<Layer<T>> layers;

  Tensor<T> forward(Tensor<T> x) const {
    for (const auto& layer : layers) {
      x = std::visit(
          [&](const auto& l) -> Tensor<T> {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, ReluLayer>) return relu(x);
            else if constexpr (std::is_same_v<L, GapLayer>) return global_avg_pool(x);
            else if constexpr (std::is_same_v<L, PoolLayer>) return l.template forward<T>(x);
            else return l.forward(x);
          },
          layer);
    }
    return x;
  }

  void append(const Sequential& other) {
    layers.insert(layers.end(), other.layers.begin(), other.layers.end());
  }
};

template <typename T>
Sequential<T> instantiate(const std::vector<ResolvedLayer>& specs) {
  Sequential<T> seq;
  for (const auto& s : specs) {
    switch (s.kind) {
      case LayerKind::Conv:
        seq.layers.emplace_back(ConvLayer<T>(s.in_channels, s.out_channels, s.kernel, s.kernel,
                                             s.stride, s.padding));
        break;
      case LayerKind::MaxPool: seq.layers.emplace_back(PoolLayer{PoolKind::Max, s.window, s.stride}); break;
      case LayerKind::AvgPool: seq.layers.emplace_back(PoolLayer{PoolKind::Average, s.window, s.stride}); break;
      case LayerKind::Relu: seq.layers.emplace_back(ReluLayer{}); break;
      case LayerKind::Gap: seq.layers.emplace_back(GapLayer{}); break;
    }
  }
  return seq;
}

template <typename T>
struct TreeNode {
  Sequential<T> stack;
  std::optional<RoutingModule<T>> router;
  std::array<int, 2> children{-1, -1};
  int depth = 0;
  int leaf_index = -1;

  bool is_leaf() const { return children[0] < 0; }
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;                 // [N, classes]
  std::vector<Tensor<T>> routing;   // one [N] tensor per routing module
  std::vector<int> router_nodes;    // tree node of each routing module

  /// Leaf reached by each sample when routing values are read as bits
  /// (> 0.5 goes right).
  std::vector<std::size_t> leaves(const std::vector<TreeNode<T>>& nodes) const {
    std::vector<std::size_t> out(logits.dim(0));
    for (std::size_t n = 0; n < out.size(); ++n) {
      int node = 0;
      while (!nodes[static_cast<std::size_t>(node)].is_leaf()) {
        const auto k = static_cast<std::size_t>(
            std::find(router_nodes.begin(), router_nodes.end(), node) - router_nodes.begin());
        const bool right = routing[k][n] > T(0.5);
        node = nodes[static_cast<std::size_t>(node)].children[right ? 1 : 0];
      }
      out[n] = static_cast<std::size_t>(nodes[static_cast<std::size_t>(node)].leaf_index);
    }
    return out;
  }
};

template <typename T>
struct SingleInference {
  Tensor<T> logits;  // [1, classes]
  std::size_t leaf = 0;
  std::vector<int> path;
};

/// Binary-tree network. Batched forward evaluates every node and mixes
/// sibling outputs with the routing value; with hard routing the unselected
/// branch is multiplied by zero. A baseline is the tree with no splits.
template <typename T>
class TreeNetwork {
 public:
  TreeNetwork(ArchSpec arch, SplitPlan plan)
      : arch_(std::move(arch)), plan_(std::move(plan)), spec_(to_decisionet(arch_, plan_)) {
    for (const auto& ns : spec_.nodes) {
      TreeNode<T> node;
      node.stack = instantiate<T>(ns.layers);
      if (ns.router_channels) node.router.emplace(*ns.router_channels);
      node.children = ns.children;
      node.depth = ns.depth;
      node.leaf_index = ns.leaf_index;
      nodes_.push_back(std::move(node));
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].router) router_nodes_.push_back(static_cast<int>(i));
  }

  const ArchSpec& arch() const { return arch_; }
  const SplitPlan& plan() const { return plan_; }
  const TreeSpec& spec() const { return spec_; }
  const std::vector<TreeNode<T>>& nodes() const { return nodes_; }
  std::vector<TreeNode<T>>& nodes() { return nodes_; }
  const std::vector<int>& router_nodes() const { return router_nodes_; }
  int depth() const { return spec_.depth; }
  std::size_t num_leaves() const { return spec_.num_leaves(); }
  std::size_t num_classes() const { return spec_.num_classes; }

  void set_mode(RoutingMode mode) {
    mode_ = mode;
    for (auto& n : nodes_)
      if (n.router) n.router->mode = mode;
  }
  RoutingMode mode() const { return mode_; }

  void set_granularity(ChoiceGranularity g) {
    for (auto& n : nodes_)
      if (n.router) n.router->granularity = g;
  }

  /// Every trainable tensor with a stable name.
  std::vector<NamedParameter<T>> parameters() const {
    std::vector<NamedParameter<T>> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const auto prefix = "n" + std::to_string(i);
      const auto& layers = nodes_[i].stack.layers;
      for (std::size_t j = 0; j < layers.size(); ++j) {
        if (const auto* c = std::get_if<ConvLayer<T>>(&layers[j])) {
          out.push_back({prefix + ".l" + std::to_string(j) + ".weight", c->weight});
          out.push_back({prefix + ".l" + std::to_string(j) + ".bias", c->bias});
        }
      }
      if (nodes_[i].router) {
        out.push_back({prefix + ".rm.weight", nodes_[i].router->weight});
        out.push_back({prefix + ".rm.bias", nodes_[i].router->bias});
      }
    }
    return out;
  }

  /// Parameter count by enumerating instantiated tensors.
  std::size_t param_count() const {
    std::size_t total = 0;
    for (const auto& p : parameters()) total += p.tensor.numel();
    return total;
  }

  /// Convolution and routing weights ~ N(0, stddev^2); biases zero.
  template <typename Rng>
  void initialize(T stddev, Rng& rng) {
    for (auto& p : parameters()) {
      auto t = p.tensor;
      if (p.name.ends_with(".weight")) fill_gaussian(t, stddev, rng);
      else std::fill(t.mutable_data().begin(), t.mutable_data().end(), T{0});
    }
  }

  /// He initialization: conv weights ~ N(0, 2 / fan_in), routing weights
  /// ~ N(0, 1 / C); biases zero.
  template <typename Rng>
  void initialize_he(Rng& rng) {
    for (auto& p : parameters()) {
      auto t = p.tensor;
      if (!p.name.ends_with(".weight")) {
        std::fill(t.mutable_data().begin(), t.mutable_data().end(), T{0});
        continue;
      }
      const bool conv = t.rank() == 4;
      const double fan_in = conv ? static_cast<double>(t.numel() / t.dim(0)) : static_cast<double>(t.numel());
      fill_gaussian(t, static_cast<T>(std::sqrt((conv ? 2.0 : 1.0) / fan_in)), rng);
    }
  }

  /// With every router in Eval mode and recording disabled, each sample only
  /// runs the nodes on its own path; logits are bit-identical to the mixed
  /// forward. Routing values of modules a sample does not reach are 0.
  template <typename Rng>
  ForwardResult<T> forward(const Tensor<T>& x, Rng& rng) const {
    check_input(x);
    ForwardResult<T> result;
    result.router_nodes = router_nodes_;
    result.routing.resize(router_nodes_.size());
    if (!grad_enabled() && all_routers_eval() && !router_nodes_.empty()) {
      const std::size_t N = x.dim(0);
      std::vector<std::vector<T>> routing(router_nodes_.size(), std::vector<T>(N, T{0}));
      std::vector<T> logits(N * spec_.num_classes);
      std::vector<std::size_t> rows(N);
      std::iota(rows.begin(), rows.end(), std::size_t{0});
      run_routed(0, x, rows, rng, routing, logits);
      for (std::size_t k = 0; k < routing.size(); ++k)
        result.routing[k] = Tensor<T>(Shape{N}, std::move(routing[k]));
      result.logits = Tensor<T>(Shape{N, spec_.num_classes}, std::move(logits));
      return result;
    }
    result.logits = run(0, x, rng, result);
    return result;
  }

  /// Single-sample inference that executes only the selected path.
  template <typename Rng>
  SingleInference<T> infer_single(const Tensor<T>& x, Rng& rng) const {
    check_input(x);
    if (x.dim(0) != 1) throw std::invalid_argument("infer_single: expected a batch of one");
    SingleInference<T> out;
    int node = 0;
    Tensor<T> h = x;
    while (true) {
      const auto& n = nodes_[static_cast<std::size_t>(node)];
      out.path.push_back(node);
      h = n.stack.forward(h);
      if (n.is_leaf()) {
        out.leaf = static_cast<std::size_t>(n.leaf_index);
        break;
      }
      const auto r = n.router->forward(h, rng);
      node = n.children[r[0] > T(0.5) ? 1 : 0];
    }
    out.logits = h;
    return out;
  }

  /// Standalone network made of the stacks on the path to `leaf`.
  Sequential<T> path_network(std::size_t leaf) const {
    Sequential<T> seq;
    for (int idx : spec_.path_to_leaf(leaf)) seq.append(nodes_[static_cast<std::size_t>(idx)].stack);
    return seq;
  }

 private:
  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != arch_.in_channels) {
      throw std::invalid_argument("network input " + to_string(x.shape()) + " does not have " +
                                  std::to_string(arch_.in_channels) + " channels");
    }
  }

  bool all_routers_eval() const {
    for (int idx : router_nodes_)
      if (nodes_[static_cast<std::size_t>(idx)].router->mode != RoutingMode::Eval) return false;
    return true;
  }

  static Tensor<T> gather_rows(const Tensor<T>& h, const std::vector<std::size_t>& pick) {
    Shape shape = h.shape();
    const std::size_t inner = h.numel() / shape[0];
    shape[0] = pick.size();
    std::vector<T> out(pick.size() * inner);
    for (std::size_t i = 0; i < pick.size(); ++i)
      std::copy_n(h.data().begin() + static_cast<std::ptrdiff_t>(pick[i] * inner), inner,
                  out.begin() + static_cast<std::ptrdiff_t>(i * inner));
    return Tensor<T>(std::move(shape), std::move(out));
  }

  // `rows` maps the rows of x to positions in the full batch.
  template <typename Rng>
  void run_routed(int idx, const Tensor<T>& x, const std::vector<std::size_t>& rows, Rng& rng,
                  std::vector<std::vector<T>>& routing, std::vector<T>& logits) const {
    const auto& node = nodes_[static_cast<std::size_t>(idx)];
    auto h = node.stack.forward(x);
    if (node.is_leaf()) {
      const std::size_t k = spec_.num_classes;
      for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy_n(h.data().begin() + static_cast<std::ptrdiff_t>(i * k), k,
                    logits.begin() + static_cast<std::ptrdiff_t>(rows[i] * k));
      return;
    }
    const auto m = static_cast<std::size_t>(
        std::find(router_nodes_.begin(), router_nodes_.end(), idx) - router_nodes_.begin());
    const auto r = node.router->forward(h, rng);
    std::array<std::vector<std::size_t>, 2> local, global;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      routing[m][rows[i]] = r[i];
      const std::size_t side = r[i] > T(0.5) ? 1 : 0;
      local[side].push_back(i);
      global[side].push_back(rows[i]);
    }
    for (std::size_t side = 0; side < 2; ++side) {
      if (local[side].empty()) continue;
      const auto sub = local[side].size() == rows.size() ? h : gather_rows(h, local[side]);
      run_routed(node.children[side], sub, global[side], rng, routing, logits);
    }
  }

  template <typename Rng>
  Tensor<T> run(int idx, const Tensor<T>& x, Rng& rng, ForwardResult<T>& result) const {
    const auto& node = nodes_[static_cast<std::size_t>(idx)];
    auto h = node.stack.forward(x);
    if (node.is_leaf()) return h;
    const auto k = static_cast<std::size_t>(
        std::find(router_nodes_.begin(), router_nodes_.end(), idx) - router_nodes_.begin());
    auto r = node.router->forward(h, rng);
    result.routing[k] = r;
    auto left = run(node.children[0], h, rng, result);
    auto right = run(node.children[1], h, rng, result);
    return combine_branches(r, left, right);
  }

  ArchSpec arch_;
  SplitPlan plan_;
  TreeSpec spec_;
  std::vector<TreeNode<T>> nodes_;
  std::vector<int> router_nodes_;
  RoutingMode mode_ = RoutingMode::Train;
};

}  // namespace dnet
