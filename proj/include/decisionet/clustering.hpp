#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "decisionet/tensor.hpp"

namespace dnet {

/// Square matrix of class statistics, row-major.
struct ClassMatrix {
  std::size_t classes = 0;
  std::vector<double> values;

  ClassMatrix() = default;
  explicit ClassMatrix(std::size_t c, double fill = 0.0) : classes(c), values(c * c, fill) {}

  double& operator()(std::size_t i, std::size_t j) { return values[i * classes + j]; }
  double operator()(std::size_t i, std::size_t j) const { return values[i * classes + j]; }
};

/// Entry (i, j): fraction of class-i samples predicted as j.
struct ConfusionMatrix : ClassMatrix {
  using ClassMatrix::ClassMatrix;

  void validate() const {
    if (classes == 0 || values.size() != classes * classes) {
      throw std::invalid_argument("confusion matrix must be square and non-empty");
    }
    for (std::size_t i = 0; i < classes; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < classes; ++j) {
        const double v = (*this)(i, j);
        if (!(v >= 0.0 && v <= 1.0)) {
          throw std::invalid_argument("confusion matrix entry (" + std::to_string(i) + "," +
                                      std::to_string(j) + ") outside [0,1]");
        }
        row += v;
      }
      if (std::abs(row - 1.0) > 1e-6) {
        throw std::invalid_argument("confusion matrix row " + std::to_string(i) +
                                    " sums to " + std::to_string(row));
      }
    }
  }
};

/// Symmetric, zero-diagonal class distances.
struct DistanceMatrix : ClassMatrix {
  using ClassMatrix::ClassMatrix;
};

/// D_hat = 1 - F off the diagonal and 0 on it; D = (D_hat + D_hat^T) / 2.
inline DistanceMatrix build_distance_matrix(const ConfusionMatrix& f) {
  f.validate();
  const std::size_t c = f.classes;
  DistanceMatrix d(c);
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      if (i == j) continue;
      d(i, j) = 0.5 * ((1.0 - f(i, j)) + (1.0 - f(j, i)));
    }
  }
  return d;
}

/// Re-applies the symmetrization step to an existing distance matrix.
inline DistanceMatrix symmetrize(const DistanceMatrix& d) {
  DistanceMatrix out(d.classes);
  for (std::size_t i = 0; i < d.classes; ++i)
    for (std::size_t j = 0; j < d.classes; ++j) out(i, j) = 0.5 * (d(i, j) + d(j, i));
  return out;
}

enum class Linkage { Average, Complete };

/// Linkage distance between two disjoint class sets.
inline double linkage_distance(const DistanceMatrix& d, const std::vector<int>& a,
                               const std::vector<int>& b, Linkage linkage) {
  double acc = linkage == Linkage::Average ? 0.0 : -std::numeric_limits<double>::infinity();
  for (int i : a) {
    for (int j : b) {
      const double v = d(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
      acc = linkage == Linkage::Average ? acc + v : std::max(acc, v);
    }
  }
  return linkage == Linkage::Average ? acc / static_cast<double>(a.size() * b.size()) : acc;
}

/// Agglomerates `members` bottom-up until two clusters remain. The cluster
/// holding the lowest class index is returned first.
inline std::array<std::vector<int>, 2> split_two_way(const DistanceMatrix& d,
                                                     std::vector<int> members,
                                                     Linkage linkage = Linkage::Average) {
  if (members.size() < 2) throw std::invalid_argument("split_two_way: need at least two classes");
  std::sort(members.begin(), members.end());
  std::vector<std::vector<int>> clusters;
  for (int m : members) clusters.push_back({m});
  while (clusters.size() > 2) {
    std::size_t best_a = 0, best_b = 1;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < clusters.size(); ++a) {
      for (std::size_t b = a + 1; b < clusters.size(); ++b) {
        const double v = linkage_distance(d, clusters[a], clusters[b], linkage);
        if (v < best) {
          best = v;
          best_a = a;
          best_b = b;
        }
      }
    }
    auto& target = clusters[best_a];
    target.insert(target.end(), clusters[best_b].begin(), clusters[best_b].end());
    std::sort(target.begin(), target.end());
    clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(best_b));
  }
  if (clusters[1].front() < clusters[0].front()) std::swap(clusters[0], clusters[1]);
  return {clusters[0], clusters[1]};
}

struct ClusterNode {
  std::vector<int> classes;  // sorted
  std::array<int, 2> children{-1, -1};
  int depth = 0;

  bool is_leaf() const { return children[0] < 0; }
};

/// Binary hierarchy of disjoint class sets; node 0 is the root.
struct ClusterTree {
  std::vector<ClusterNode> nodes;
  std::size_t num_classes = 0;
  int max_depth = 0;

  /// Class sets of the clusters present at `level` (0 = root). Leaves that
  /// stop above `level` carry down unchanged.
  std::vector<std::vector<int>> partition_at(int level) const {
    std::vector<std::vector<int>> out;
    std::vector<int> stack{0};
    while (!stack.empty()) {
      const auto& n = nodes[static_cast<std::size_t>(stack.back())];
      stack.pop_back();
      if (n.depth == level || n.is_leaf()) {
        out.push_back(n.classes);
        continue;
      }
      stack.push_back(n.children[1]);
      stack.push_back(n.children[0]);
    }
    return out;
  }
};

/// Hierarchical 2-way clustering to `depth` levels: each cluster is split by
/// agglomerating over its own sub-matrix. Singletons are not split.
inline ClusterTree agglomerate(const DistanceMatrix& d, int depth,
                               Linkage linkage = Linkage::Average) {
  if (depth < 1) throw std::invalid_argument("agglomerate: depth must be >= 1");
  if (d.classes < 1) throw std::invalid_argument("agglomerate: empty distance matrix");
  ClusterTree tree;
  tree.num_classes = d.classes;
  tree.max_depth = depth;
  ClusterNode root;
  root.classes.resize(d.classes);
  std::iota(root.classes.begin(), root.classes.end(), 0);
  tree.nodes.push_back(root);
  for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
    if (tree.nodes[i].depth >= depth || tree.nodes[i].classes.size() < 2) continue;
    auto halves = split_two_way(d, tree.nodes[i].classes, linkage);
    const int child_depth = tree.nodes[i].depth + 1;
    for (int side = 0; side < 2; ++side) {
      ClusterNode child;
      child.classes = halves[static_cast<std::size_t>(side)];
      child.depth = child_depth;
      tree.nodes[i].children[static_cast<std::size_t>(side)] = static_cast<int>(tree.nodes.size());
      tree.nodes.push_back(std::move(child));
    }
  }
  return tree;
}

/// Per-class bit vectors, one bit per routing level (0 = left, 1 = right).
struct RoutingLabels {
  int depth = 0;
  std::vector<std::vector<int>> bits;  // [class][level]

  std::size_t num_classes() const { return bits.size(); }
  int bit(std::size_t cls, int level) const {
    return bits.at(cls).at(static_cast<std::size_t>(level));
  }
  /// Leaf reached by a class whose routing follows its labels exactly.
  std::size_t leaf_of(std::size_t cls) const {
    std::size_t leaf = 0;
    for (int level = 0; level < depth; ++level) leaf = leaf * 2 + static_cast<std::size_t>(bit(cls, level));
    return leaf;
  }
};

inline RoutingLabels routing_labels(const ClusterTree& tree) {
  RoutingLabels labels;
  labels.depth = tree.max_depth;
  labels.bits.assign(tree.num_classes, {});
  std::vector<bool> seen(tree.num_classes, false);
  struct Frame {
    int node;
    std::vector<int> path;
  };
  std::vector<Frame> stack{{0, {}}};
  while (!stack.empty()) {
    auto frame = std::move(stack.back());
    stack.pop_back();
    const auto& n = tree.nodes.at(static_cast<std::size_t>(frame.node));
    if (n.is_leaf()) {
      auto bits = frame.path;
      bits.resize(static_cast<std::size_t>(tree.max_depth), 0);
      for (int c : n.classes) {
        labels.bits.at(static_cast<std::size_t>(c)) = bits;
        seen[static_cast<std::size_t>(c)] = true;
      }
      continue;
    }
    for (int side = 1; side >= 0; --side) {
      auto path = frame.path;
      path.push_back(side);
      stack.push_back({n.children[static_cast<std::size_t>(side)], std::move(path)});
    }
  }
  for (std::size_t c = 0; c < seen.size(); ++c) {
    if (!seen[c]) throw std::invalid_argument("routing_labels: class " + std::to_string(c) + " missing from tree");
  }
  return labels;
}

// ---------------------------------------------------------------------------
// Text formats

/// One line per class: `<class_index> <bit_0> ... <bit_{k-1}>`.
inline void write_labels(std::ostream& os, const RoutingLabels& labels) {
  for (std::size_t c = 0; c < labels.bits.size(); ++c) {
    os << c;
    for (int b : labels.bits[c]) os << ' ' << b;
    os << '\n';
  }
}

inline RoutingLabels read_labels(std::istream& is) {
  RoutingLabels labels;
  std::vector<std::pair<std::size_t, std::vector<int>>> rows;
  std::string line;
  int depth = -1;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    std::istringstream ls(line);
    long long cls = -1;
    if (!(ls >> cls) || cls < 0) throw DataError("labels file: bad class index in '" + line + "'");
    std::vector<int> bits;
    int b;
    while (ls >> b) {
      if (b != 0 && b != 1) throw DataError("labels file: bit must be 0 or 1 in '" + line + "'");
      bits.push_back(b);
    }
    if (!ls.eof()) throw DataError("labels file: malformed line '" + line + "'");
    if (depth < 0) depth = static_cast<int>(bits.size());
    if (static_cast<int>(bits.size()) != depth) throw DataError("labels file: inconsistent label length");
    rows.emplace_back(static_cast<std::size_t>(cls), std::move(bits));
  }
  if (rows.empty()) throw DataError("labels file: no entries");
  labels.depth = depth;
  labels.bits.assign(rows.size(), {});
  std::vector<bool> seen(rows.size(), false);
  for (auto& [cls, bits] : rows) {
    if (cls >= rows.size() || seen[cls]) throw DataError("labels file: classes must be 0..C-1 exactly once");
    seen[cls] = true;
    labels.bits[cls] = std::move(bits);
  }
  return labels;
}

/// Comma-separated C x C values, one row per line.
inline void write_matrix_csv(std::ostream& os, const ClassMatrix& m) {
  std::ostringstream buf;
  buf.precision(17);
  for (std::size_t i = 0; i < m.classes; ++i) {
    for (std::size_t j = 0; j < m.classes; ++j) buf << (j ? "," : "") << m(i, j);
    buf << '\n';
  }
  os << buf.str();
}

template <typename M = ConfusionMatrix>
M read_matrix_csv(std::istream& is) {
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::vector<double> row;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw DataError("matrix csv: bad value '" + cell + "'");
      }
    }
    rows.push_back(std::move(row));
  }
  M m(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.size()) throw DataError("matrix csv: not square");
    for (std::size_t j = 0; j < rows.size(); ++j) m(i, j) = rows[i][j];
  }
  return m;
}

/// Row-normalized confusion counts.
inline ConfusionMatrix confusion_from_predictions(std::span<const int> truth,
                                                  std::span<const int> predicted,
                                                  std::size_t classes) {
  if (truth.size() != predicted.size()) throw std::invalid_argument("confusion: size mismatch");
  ConfusionMatrix f(classes);
  std::vector<double> totals(classes, 0.0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto t = static_cast<std::size_t>(truth[i]);
    const auto p = static_cast<std::size_t>(predicted[i]);
    if (t >= classes || p >= classes) throw std::out_of_range("confusion: label out of range");
    f(t, p) += 1.0;
    totals[t] += 1.0;
  }
  for (std::size_t c = 0; c < classes; ++c) {
    if (totals[c] == 0.0) throw std::invalid_argument("confusion: class " + std::to_string(c) + " has no samples");
    for (std::size_t j = 0; j < classes; ++j) f(c, j) /= totals[c];
  }
  return f;
}

/// Renders the hierarchy as indented text, using `names` when provided.
inline std::string describe(const ClusterTree& tree, const std::vector<std::string>& names = {}) {
  std::ostringstream os;
  std::vector<std::pair<int, std::string>> stack{{0, ""}};
  while (!stack.empty()) {
    auto [idx, path] = stack.back();
    stack.pop_back();
    const auto& n = tree.nodes[static_cast<std::size_t>(idx)];
    os << std::string(static_cast<std::size_t>(n.depth) * 2, ' ') << (path.empty() ? "root" : path)
       << ": {";
    for (std::size_t i = 0; i < n.classes.size(); ++i) {
      const auto c = static_cast<std::size_t>(n.classes[i]);
      os << (i ? ", " : "") << (c < names.size() ? names[c] : std::to_string(c));
    }
    os << "}\n";
    if (!n.is_leaf()) {
      stack.emplace_back(n.children[1], path + "1");
      stack.emplace_back(n.children[0], path + "0");
    }
  }
  return os.str();
}

}  // namespace dnet
