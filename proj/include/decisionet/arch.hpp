#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "decisionet/tensor.hpp"

namespace dnet {

enum class LayerKind { Conv, MaxPool, AvgPool, Gap, Relu };

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  std::size_t kernel = 0;   // conv kernel (square)
  std::size_t filters = 0;  // conv output channels
  std::size_t window = 0;   // pool window (square)
  std::size_t stride = 1;
  std::optional<std::size_t> padding;  // conv only; unset = preserve spatial size

  static LayerSpec conv(std::size_t kernel, std::size_t filters) {
    LayerSpec l;
    l.kind = LayerKind::Conv;
    l.kernel = kernel;
    l.filters = filters;
    return l;
  }
  static LayerSpec max_pool(std::size_t window, std::size_t stride) {
    LayerSpec l;
    l.kind = LayerKind::MaxPool;
    l.window = window;
    l.stride = stride;
    return l;
  }
  static LayerSpec relu() { return LayerSpec{}; }
  static LayerSpec gap() {
    LayerSpec l;
    l.kind = LayerKind::Gap;
    return l;
  }

  std::size_t conv_padding() const { return padding.value_or(kernel / 2); }
  bool operator==(const LayerSpec&) const = default;
};

/// Baseline network as an ordered layer list. The last convolution is the
/// classifier and always produces `num_classes` maps.
struct ArchSpec {
  std::vector<LayerSpec> layers;
  std::size_t in_channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_classes = 10;

  std::optional<std::size_t> classifier_index() const {
    for (std::size_t i = layers.size(); i-- > 0;)
      if (layers[i].kind == LayerKind::Conv) return i;
    return std::nullopt;
  }

  void validate() const {
    if (in_channels == 0 || height == 0 || width == 0 || num_classes == 0) {
      throw std::invalid_argument("arch: input shape and class count must be positive");
    }
    for (const auto& l : layers) {
      if (l.kind == LayerKind::Conv && (l.filters == 0 || l.kernel == 0 || l.stride == 0)) {
        throw std::invalid_argument("arch: conv layers need positive kernel, filters and stride");
      }
      if ((l.kind == LayerKind::MaxPool || l.kind == LayerKind::AvgPool) &&
          (l.window == 0 || l.stride == 0)) {
        throw std::invalid_argument("arch: pool layers need positive window and stride");
      }
    }
    if (auto c = classifier_index(); c && layers[*c].filters != num_classes) {
      throw std::invalid_argument("arch: last conv has " + std::to_string(layers[*c].filters) +
                                  " filters but there are " + std::to_string(num_classes) + " classes");
    }
  }

  bool operator==(const ArchSpec&) const = default;
};

/// Split after layers[p] for each p; layers after the i-th split carry
/// filters / 2^i.
struct SplitPlan {
  std::vector<std::size_t> positions;

  std::size_t depth() const { return positions.size(); }
  bool operator==(const SplitPlan&) const = default;
};

/// Network-in-Network: three conv blocks (spatial conv + two 1x1 convs), the
/// first two ending in 2x2 max pooling, then global average pooling.
inline ArchSpec build_nin(std::size_t num_classes, std::size_t in_channels,
                          std::size_t height = 32, std::size_t width = 32) {
  ArchSpec a;
  a.in_channels = in_channels;
  a.height = height;
  a.width = width;
  a.num_classes = num_classes;
  auto conv = [&](std::size_t k, std::size_t f) {
    a.layers.push_back(LayerSpec::conv(k, f));
    a.layers.push_back(LayerSpec::relu());
  };
  conv(5, 192);
  conv(1, 160);
  conv(1, 96);
  a.layers.push_back(LayerSpec::max_pool(2, 2));
  conv(5, 192);
  conv(1, 192);
  conv(1, 192);
  a.layers.push_back(LayerSpec::max_pool(2, 2));
  conv(3, 192);
  conv(1, 192);
  conv(1, num_classes);
  a.layers.push_back(LayerSpec::gap());
  return a;
}

/// Divides every hidden conv width by `divisor` (rounding down, minimum 1).
inline ArchSpec scale_width(ArchSpec arch, std::size_t divisor) {
  if (divisor == 0) throw std::invalid_argument("scale_width: divisor must be positive");
  const auto head = arch.classifier_index();
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    auto& l = arch.layers[i];
    if (l.kind == LayerKind::Conv && i != head) l.filters = std::max<std::size_t>(1, l.filters / divisor);
  }
  return arch;
}

enum class Variant { Baseline, DN1Early, DN1Late, DN2, DN2Slim };

inline const std::vector<std::pair<Variant, std::string>>& variant_names() {
  static const std::vector<std::pair<Variant, std::string>> names{
      {Variant::Baseline, "baseline"}, {Variant::DN1Early, "dn1-early"},
      {Variant::DN1Late, "dn1-late"},  {Variant::DN2, "dn2"},
      {Variant::DN2Slim, "dn2-slim"}};
  return names;
}

inline std::string to_string(Variant v) {
  for (const auto& [k, name] : variant_names())
    if (k == v) return name;
  return "unknown";
}

inline Variant parse_variant(const std::string& s) {
  for (const auto& [k, name] : variant_names())
    if (name == s) return k;
  throw std::invalid_argument("unknown architecture '" + s +
                              "' (expected baseline, dn1-early, dn1-late, dn2 or dn2-slim)");
}

namespace detail {

// Index of the layer closing the activation of the k-th conv (1-based).
inline std::size_t after_conv(const ArchSpec& a, std::size_t k) {
  std::size_t seen = 0;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    if (a.layers[i].kind != LayerKind::Conv || ++seen != k) continue;
    if (i + 1 < a.layers.size() && a.layers[i + 1].kind == LayerKind::Relu) return i + 1;
    return i;
  }
  throw std::invalid_argument("arch has fewer than " + std::to_string(k) + " conv layers");
}

inline std::size_t after_pool(const ArchSpec& a, std::size_t k) {
  std::size_t seen = 0;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    if (a.layers[i].kind == LayerKind::MaxPool && ++seen == k) return i;
  }
  throw std::invalid_argument("arch has fewer than " + std::to_string(k) + " pooling layers");
}

}  // namespace detail

/// Split points of the named NiN variants. Block boundaries sit after the
/// pooling layers; the slim variant splits after the second and fifth convs.
inline SplitPlan split_plan(Variant v, const ArchSpec& nin) {
  switch (v) {
    case Variant::Baseline: return {};
    case Variant::DN1Early: return {{detail::after_pool(nin, 1)}};
    case Variant::DN1Late: return {{detail::after_pool(nin, 2)}};
    case Variant::DN2: return {{detail::after_pool(nin, 1), detail::after_pool(nin, 2)}};
    case Variant::DN2Slim: return {{detail::after_conv(nin, 2), detail::after_conv(nin, 5)}};
  }
  return {};
}

// ---------------------------------------------------------------------------
// Resolved tree

struct ResolvedLayer {
  LayerKind kind = LayerKind::Relu;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t window = 0;

  std::size_t param_count() const {
    return kind == LayerKind::Conv ? out_channels * in_channels * kernel * kernel + out_channels : 0;
  }
};

struct TreeNodeSpec {
  std::vector<ResolvedLayer> layers;
  std::optional<std::size_t> router_channels;  // set on internal nodes
  std::array<int, 2> children{-1, -1};
  int depth = 0;
  int leaf_index = -1;

  bool is_leaf() const { return children[0] < 0; }
};

/// Concrete binary tree produced by splitting a baseline. Node 0 is the root;
/// nodes are stored breadth first and leaves are numbered left to right, so a
/// leaf's index read in binary is its routing path.
struct TreeSpec {
  std::vector<TreeNodeSpec> nodes;
  std::size_t in_channels = 0, height = 0, width = 0, num_classes = 0;
  int depth = 0;
  std::vector<std::string> warnings;

  std::size_t num_leaves() const { return std::size_t{1} << depth; }

  /// Node indices from the root to leaf `leaf`.
  std::vector<int> path_to_leaf(std::size_t leaf) const {
    if (leaf >= num_leaves()) {
      throw std::out_of_range("leaf index " + std::to_string(leaf) + " outside [0," +
                              std::to_string(num_leaves()) + ")");
    }
    std::vector<int> path{0};
    for (int level = depth - 1; level >= 0; --level) {
      const auto bit = (leaf >> level) & 1U;
      path.push_back(nodes[static_cast<std::size_t>(path.back())].children[bit]);
    }
    return path;
  }
};

inline TreeSpec to_decisionet(const ArchSpec& arch, const SplitPlan& plan) {
  arch.validate();
  for (std::size_t i = 0; i < plan.positions.size(); ++i) {
    if (plan.positions[i] + 1 >= arch.layers.size() ||
        (i > 0 && plan.positions[i] <= plan.positions[i - 1])) {
      throw std::invalid_argument("split plan positions must be strictly increasing and leave layers after the last split");
    }
  }
  TreeSpec tree;
  tree.in_channels = arch.in_channels;
  tree.height = arch.height;
  tree.width = arch.width;
  tree.num_classes = arch.num_classes;
  tree.depth = static_cast<int>(plan.depth());
  const auto head = arch.classifier_index();

  // Resolve each segment once; every node of a level shares its layer stack.
  std::vector<std::vector<ResolvedLayer>> segments;
  std::vector<std::size_t> segment_out;
  std::size_t width = arch.in_channels;
  std::size_t begin = 0;
  for (std::size_t level = 0; level <= plan.depth(); ++level) {
    const std::size_t end = level < plan.depth() ? plan.positions[level] + 1 : arch.layers.size();
    const std::size_t divisor = std::size_t{1} << level;
    std::vector<ResolvedLayer> seg;
    for (std::size_t i = begin; i < end; ++i) {
      const auto& l = arch.layers[i];
      ResolvedLayer r;
      r.kind = l.kind;
      r.in_channels = width;
      r.out_channels = width;
      if (l.kind == LayerKind::Conv) {
        std::size_t out = l.filters;
        if (i != head) {
          if (out % divisor != 0) {
            tree.warnings.push_back("layer " + std::to_string(i) + ": " + std::to_string(out) +
                                    " filters not divisible by " + std::to_string(divisor) +
                                    ", rounding down");
          }
          out = std::max<std::size_t>(1, out / divisor);
        }
        r.out_channels = out;
        r.kernel = l.kernel;
        r.stride = l.stride;
        r.padding = l.conv_padding();
        width = out;
      } else if (l.kind == LayerKind::MaxPool || l.kind == LayerKind::AvgPool) {
        r.window = l.window;
        r.stride = l.stride;
      }
      seg.push_back(r);
    }
    segments.push_back(std::move(seg));
    segment_out.push_back(width);
    begin = end;
  }

  tree.nodes.push_back({segments[0], std::nullopt, {-1, -1}, 0, -1});
  for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
    const int d = tree.nodes[i].depth;
    if (d == tree.depth) continue;
    tree.nodes[i].router_channels = segment_out[static_cast<std::size_t>(d)];
    for (int side = 0; side < 2; ++side) {
      tree.nodes[i].children[static_cast<std::size_t>(side)] = static_cast<int>(tree.nodes.size());
      tree.nodes.push_back({segments[static_cast<std::size_t>(d) + 1], std::nullopt, {-1, -1}, d + 1, -1});
    }
  }
  int leaf = 0;
  for (auto& n : tree.nodes)
    if (n.is_leaf()) n.leaf_index = leaf++;
  return tree;
}

// ---------------------------------------------------------------------------
// Cost accounting

inline std::size_t count_params(const TreeSpec& tree) {
  std::size_t total = 0;
  for (const auto& n : tree.nodes) {
    for (const auto& l : n.layers) total += l.param_count();
    if (n.router_channels) total += *n.router_channels + 1;
  }
  return total;
}

struct SpatialSize {
  std::size_t height = 0;
  std::size_t width = 0;
};

/// MACs of one node's layer stack plus its routing module. A conv costs
/// out * H' * W' * (k * k * in + 1); a routing module costs C for the
/// average plus C + 1 for the projection. `size` advances to the output size.
inline std::uint64_t node_macs(const TreeNodeSpec& node, SpatialSize& size) {
  std::uint64_t macs = 0;
  for (const auto& l : node.layers) {
    switch (l.kind) {
      case LayerKind::Conv: {
        if (size.height + 2 * l.padding < l.kernel || size.width + 2 * l.padding < l.kernel) {
          throw std::invalid_argument("count_macs: conv kernel larger than padded input");
        }
        size.height = (size.height + 2 * l.padding - l.kernel) / l.stride + 1;
        size.width = (size.width + 2 * l.padding - l.kernel) / l.stride + 1;
        macs += static_cast<std::uint64_t>(l.out_channels) * size.height * size.width *
                (l.kernel * l.kernel * l.in_channels + 1);
        break;
      }
      case LayerKind::MaxPool:
      case LayerKind::AvgPool:
        if (l.window > size.height || l.window > size.width) {
          throw std::invalid_argument("count_macs: pool window larger than input");
        }
        size.height = (size.height - l.window) / l.stride + 1;
        size.width = (size.width - l.window) / l.stride + 1;
        break;
      case LayerKind::Gap:
        size = {1, 1};
        break;
      case LayerKind::Relu:
        break;
    }
  }
  if (node.router_channels) macs += 2 * *node.router_channels + 1;
  return macs;
}

/// MACs of the root-to-leaf path ending at `leaf` for an H x W input.
inline std::uint64_t count_macs(const TreeSpec& tree, std::size_t height, std::size_t width,
                                std::size_t leaf = 0) {
  SpatialSize size{height, width};
  std::uint64_t macs = 0;
  for (int idx : tree.path_to_leaf(leaf)) macs += node_macs(tree.nodes[static_cast<std::size_t>(idx)], size);
  return macs;
}

struct CostReport {
  std::size_t params = 0;
  std::vector<std::uint64_t> path_macs;  // one per leaf
  std::size_t baseline_params = 0;
  std::uint64_t baseline_macs = 0;

  double params_change_pct() const {
    return 100.0 * (static_cast<double>(params) - static_cast<double>(baseline_params)) /
           static_cast<double>(baseline_params);
  }
  std::uint64_t max_path_macs() const {
    return *std::max_element(path_macs.begin(), path_macs.end());
  }
  double macs_change_pct() const {
    return 100.0 * (static_cast<double>(max_path_macs()) - static_cast<double>(baseline_macs)) /
           static_cast<double>(baseline_macs);
  }
};

inline CostReport cost_report(const ArchSpec& baseline, const SplitPlan& plan) {
  const auto tree = to_decisionet(baseline, plan);
  const auto base = to_decisionet(baseline, SplitPlan{});
  CostReport r;
  r.params = count_params(tree);
  for (std::size_t leaf = 0; leaf < tree.num_leaves(); ++leaf)
    r.path_macs.push_back(count_macs(tree, baseline.height, baseline.width, leaf));
  r.baseline_params = count_params(base);
  r.baseline_macs = count_macs(base, baseline.height, baseline.width, 0);
  return r;
}

// ---------------------------------------------------------------------------
// Text format
//
//   input 3x32x32
//   classes 10
//   conv 5x5 192 [stride=1] [pad=2]
//   relu
//   maxpool 2x2 2
//   avgpool 2x2 2
//   split
//   gap

inline std::string format_arch(const ArchSpec& arch, const SplitPlan& plan = {}) {
  std::ostringstream os;
  os << "input " << arch.in_channels << 'x' << arch.height << 'x' << arch.width << '\n';
  os << "classes " << arch.num_classes << '\n';
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const auto& l = arch.layers[i];
    switch (l.kind) {
      case LayerKind::Conv:
        os << "conv " << l.kernel << 'x' << l.kernel << ' ' << l.filters;
        if (l.stride != 1) os << " stride=" << l.stride;
        if (l.padding) os << " pad=" << *l.padding;
        break;
      case LayerKind::MaxPool: os << "maxpool " << l.window << 'x' << l.window << ' ' << l.stride; break;
      case LayerKind::AvgPool: os << "avgpool " << l.window << 'x' << l.window << ' ' << l.stride; break;
      case LayerKind::Gap: os << "gap"; break;
      case LayerKind::Relu: os << "relu"; break;
    }
    os << '\n';
    if (std::find(plan.positions.begin(), plan.positions.end(), i) != plan.positions.end()) os << "split\n";
  }
  return os.str();
}

struct ParsedArch {
  ArchSpec arch;
  SplitPlan plan;
};

namespace detail {

inline std::size_t parse_count(const std::string& token, const std::string& line) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(token, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != token.size() || token.empty() || token[0] == '-') {
    throw std::invalid_argument("arch spec: bad number '" + token + "' in line '" + line + "'");
  }
  return static_cast<std::size_t>(v);
}

inline std::size_t parse_square(const std::string& token, const std::string& line) {
  const auto x = token.find('x');
  if (x == std::string::npos) throw std::invalid_argument("arch spec: expected KxK in line '" + line + "'");
  const auto a = parse_count(token.substr(0, x), line);
  const auto b = parse_count(token.substr(x + 1), line);
  if (a != b) throw std::invalid_argument("arch spec: only square windows are supported: '" + line + "'");
  return a;
}

}  // namespace detail

inline ParsedArch parse_arch(const std::string& text) {
  ParsedArch out;
  auto& a = out.arch;
  a.layers.clear();
  std::istringstream is(text);
  std::string line;
  bool pending_split = false;
  while (std::getline(is, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.empty()) continue;
    const auto& kw = tok[0];
    if (kw == "input" && tok.size() == 2) {
      const auto& s = tok[1];
      const auto x1 = s.find('x'), x2 = s.rfind('x');
      if (x1 == std::string::npos || x1 == x2) throw std::invalid_argument("arch spec: input expects CxHxW");
      a.in_channels = detail::parse_count(s.substr(0, x1), line);
      a.height = detail::parse_count(s.substr(x1 + 1, x2 - x1 - 1), line);
      a.width = detail::parse_count(s.substr(x2 + 1), line);
    } else if (kw == "classes" && tok.size() == 2) {
      a.num_classes = detail::parse_count(tok[1], line);
    } else if (kw == "split" && tok.size() == 1) {
      if (a.layers.empty() || pending_split) throw std::invalid_argument("arch spec: misplaced split marker");
      out.plan.positions.push_back(a.layers.size() - 1);
      pending_split = true;
      continue;
    } else if (kw == "conv" && tok.size() >= 3) {
      auto l = LayerSpec::conv(detail::parse_square(tok[1], line), detail::parse_count(tok[2], line));
      for (std::size_t i = 3; i < tok.size(); ++i) {
        if (tok[i].rfind("stride=", 0) == 0) l.stride = detail::parse_count(tok[i].substr(7), line);
        else if (tok[i].rfind("pad=", 0) == 0) l.padding = detail::parse_count(tok[i].substr(4), line);
        else throw std::invalid_argument("arch spec: unknown conv option in '" + line + "'");
      }
      a.layers.push_back(l);
    } else if ((kw == "maxpool" || kw == "avgpool") && tok.size() == 3) {
      auto l = LayerSpec::max_pool(detail::parse_square(tok[1], line), detail::parse_count(tok[2], line));
      if (kw == "avgpool") l.kind = LayerKind::AvgPool;
      a.layers.push_back(l);
    } else if (kw == "gap" && tok.size() == 1) {
      a.layers.push_back(LayerSpec::gap());
    } else if (kw == "relu" && tok.size() == 1) {
      a.layers.push_back(LayerSpec::relu());
    } else {
      throw std::invalid_argument("arch spec: cannot parse line '" + line + "'");
    }
    pending_split = false;
  }
  a.validate();
  return out;
}

}  // namespace dnet
