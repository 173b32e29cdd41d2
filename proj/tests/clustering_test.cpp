#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>
#include <sstream>

#include "decisionet/clustering.hpp"

using namespace dnet;
using Partition = std::set<std::set<int>>;

namespace {

Partition as_partition(const std::vector<std::vector<int>>& groups) {
  Partition p;
  for (const auto& g : groups) p.insert(std::set<int>(g.begin(), g.end()));
  return p;
}

// Best 2-way split of `members` by exhaustive search: the partition with the
// largest average-linkage distance between its two halves.
Partition exhaustive_split(const DistanceMatrix& d, const std::vector<int>& members) {
  const std::size_t m = members.size();
  double best = -1;
  Partition out;
  for (std::size_t mask = 1; mask < (std::size_t{1} << (m - 1)); ++mask) {
    std::vector<int> a, b;
    for (std::size_t i = 0; i < m; ++i) ((mask >> i) & 1 ? a : b).push_back(members[i]);
    const double v = linkage_distance(d, a, b, Linkage::Average);
    if (v > best + 1e-12) {
      best = v;
      out = as_partition({a, b});
    }
  }
  return out;
}

// Row-stochastic matrix with planted off-diagonal mass.
ConfusionMatrix planted(std::size_t c, const std::function<double(std::size_t, std::size_t)>& off) {
  ConfusionMatrix f(c);
  for (std::size_t i = 0; i < c; ++i) {
    double row = 0;
    for (std::size_t j = 0; j < c; ++j)
      if (i != j) row += f(i, j) = off(i, j);
    f(i, i) = 1.0 - row;
  }
  return f;
}

ConfusionMatrix random_confusion(std::size_t c, std::mt19937_64& rng) {
  std::gamma_distribution<double> g(0.5, 1.0);
  ConfusionMatrix f(c);
  for (std::size_t i = 0; i < c; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < c; ++j) s += f(i, j) = g(rng) + (i == j ? 3.0 : 0.0);
    for (std::size_t j = 0; j < c; ++j) f(i, j) /= s;
  }
  return f;
}

std::size_t group_of(const std::vector<std::vector<int>>& groups, std::size_t c) {
  for (std::size_t g = 0; g < groups.size(); ++g)
    if (std::find(groups[g].begin(), groups[g].end(), static_cast<int>(c)) != groups[g].end()) return g;
  return groups.size();
}

}  // namespace

TEST(DistanceMatrix, PerfectClassifier) {
  ConfusionMatrix f(4);
  for (std::size_t i = 0; i < 4; ++i) f(i, i) = 1.0;
  auto d = build_distance_matrix(f);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(d(i, j), i == j ? 0.0 : 1.0);
}

TEST(DistanceMatrix, TwoClassHandExample) {
  ConfusionMatrix f(2);
  f.values = {0.9, 0.1, 0.3, 0.7};
  auto d = build_distance_matrix(f);
  EXPECT_NEAR(d(0, 1), 0.8, 1e-15);
  EXPECT_EQ(d(0, 1), d(1, 0));
}

TEST(DistanceMatrix, SymmetricAndIdempotent) {
  std::mt19937_64 rng(0);
  for (int trial = 0; trial < 20; ++trial) {
    auto d = build_distance_matrix(random_confusion(7, rng));
    auto again = symmetrize(d);
    for (std::size_t i = 0; i < 7; ++i)
      for (std::size_t j = 0; j < 7; ++j) {
        EXPECT_EQ(d(i, j), d(j, i));
        EXPECT_EQ(again(i, j), d(i, j));
      }
  }
}

TEST(DistanceMatrix, RejectsInvalidRows) {
  ConfusionMatrix f(2);
  f.values = {0.5, 0.4, 0.0, 1.0};
  EXPECT_THROW(build_distance_matrix(f), std::invalid_argument);
  f.values = {1.2, -0.2, 0.0, 1.0};
  EXPECT_THROW(build_distance_matrix(f), std::invalid_argument);
}

TEST(Agglomerate, BlockDiagonalFourClasses) {
  DistanceMatrix d(4);
  const std::vector<int> block{0, 1, 0, 1};
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      if (i != j) d(i, j) = block[i] == block[j] ? 0.1 : 0.9;
  auto tree = agglomerate(d, 1);
  EXPECT_EQ(as_partition(tree.partition_at(1)), (Partition{{0, 2}, {1, 3}}));
  EXPECT_EQ(as_partition(tree.partition_at(1)), exhaustive_split(d, {0, 1, 2, 3}));
}

TEST(Agglomerate, TwoClassesSplitApart) {
  DistanceMatrix d(2);
  d(0, 1) = d(1, 0) = 0.4;
  auto labels = routing_labels(agglomerate(d, 1));
  EXPECT_EQ(labels.bits[0], std::vector<int>{0});
  EXPECT_EQ(labels.bits[1], std::vector<int>{1});
}

TEST(Agglomerate, DepthMustBePositive) {
  EXPECT_THROW(agglomerate(DistanceMatrix(3), 0), std::invalid_argument);
}

TEST(Agglomerate, PlantedEightClassHierarchy) {
  const std::vector<std::vector<int>> pairs{{0, 5}, {1, 6}, {2, 4}, {3, 7}};
  const std::vector<std::vector<int>> groups{{0, 5, 1, 6}, {2, 4, 3, 7}};
  auto f = planted(8, [&](std::size_t i, std::size_t j) {
    if (group_of(pairs, i) == group_of(pairs, j)) return 0.3;
    return group_of(groups, i) == group_of(groups, j) ? 0.1 : 0.01;
  });
  auto d = build_distance_matrix(f);
  auto tree = agglomerate(d, 2);
  EXPECT_EQ(as_partition(tree.partition_at(1)), as_partition(groups));
  EXPECT_EQ(as_partition(tree.partition_at(2)), as_partition(pairs));

  std::vector<int> all(8);
  std::iota(all.begin(), all.end(), 0);
  EXPECT_EQ(as_partition(tree.partition_at(1)), exhaustive_split(d, all));
  for (const auto& g : groups) {
    auto sorted = g;
    std::sort(sorted.begin(), sorted.end());
    auto expected = exhaustive_split(d, sorted);
    Partition got;
    for (const auto& c : tree.partition_at(2))
      if (std::includes(sorted.begin(), sorted.end(), c.begin(), c.end())) got.insert(std::set<int>(c.begin(), c.end()));
    EXPECT_EQ(got, expected);
  }
}

TEST(Agglomerate, LeavesPartitionClassesAtEveryLevel) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t c = 2 + trial % 9;
    auto d = build_distance_matrix(random_confusion(c, rng));
    for (auto linkage : {Linkage::Average, Linkage::Complete}) {
      auto tree = agglomerate(d, 3, linkage);
      for (int level = 0; level <= 3; ++level) {
        std::vector<int> seen;
        for (const auto& cl : tree.partition_at(level)) {
          EXPECT_FALSE(cl.empty());
          seen.insert(seen.end(), cl.begin(), cl.end());
        }
        std::sort(seen.begin(), seen.end());
        std::vector<int> expected(c);
        std::iota(expected.begin(), expected.end(), 0);
        EXPECT_EQ(seen, expected);
      }
    }
  }
}

TEST(Agglomerate, SplitMatchesExhaustiveOracleOnPlantedBlocks) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> jitter(0.0, 0.05);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t c = 4 + static_cast<std::size_t>(trial % 5);
    std::vector<int> side(c);
    for (auto& s : side) s = static_cast<int>(rng() % 2);
    side[0] = 0;
    side[1] = 1;
    DistanceMatrix d(c);
    for (std::size_t i = 0; i < c; ++i)
      for (std::size_t j = i + 1; j < c; ++j) d(i, j) = d(j, i) = (side[i] == side[j] ? 0.2 : 0.8) + jitter(rng);
    std::vector<int> all(c);
    std::iota(all.begin(), all.end(), 0);
    EXPECT_EQ(as_partition(agglomerate(d, 1).partition_at(1)), exhaustive_split(d, all));
  }
}

TEST(RoutingLabels, CanonicalOrientationAndSingletonPadding) {
  // FashionMNIST classes: 0 T-shirt, 1 Trouser, 2 Pullover, 3 Dress, 4 Coat,
  // 5 Sandal, 6 Shirt, 7 Sneaker, 8 Bag, 9 Ankle boot.
  const std::vector<int> footwear{5, 7, 9};
  auto is_foot = [&](std::size_t c) { return std::count(footwear.begin(), footwear.end(), int(c)) > 0; };
  auto f = planted(10, [&](std::size_t i, std::size_t j) {
    if (is_foot(i) != is_foot(j)) return 0.001;
    if (is_foot(i)) return (i == 7 && j == 9) || (i == 9 && j == 7) ? 0.1 : 0.02;
    if (i == 1 || j == 1) return 0.002;
    return 0.05;
  });
  auto tree = agglomerate(build_distance_matrix(f), 2);
  auto labels = routing_labels(tree);
  EXPECT_EQ(as_partition(tree.partition_at(2)), (Partition{{0, 2, 3, 4, 6, 8}, {1}, {5}, {7, 9}}));
  EXPECT_EQ(labels.bits[1], (std::vector<int>{0, 1}));
  EXPECT_EQ(labels.bits[0], (std::vector<int>{0, 0}));
  EXPECT_EQ(labels.bits[7][0], 1);
  EXPECT_NE(labels.bits[5][1], labels.bits[7][1]);
  EXPECT_EQ(labels.bits[7], labels.bits[9]);
  EXPECT_EQ(labels.leaf_of(1), 1u);

  auto shallow = agglomerate(build_distance_matrix(f), 3);
  EXPECT_EQ(routing_labels(shallow).bits[1], (std::vector<int>{0, 1, 0}));
}

TEST(RoutingLabels, CifarLikeHierarchy) {
  // 0 plane, 1 car, 2 bird, 3 cat, 4 deer, 5 dog, 6 frog, 7 horse, 8 ship, 9 truck.
  const std::vector<std::vector<int>> leaves{{0, 8}, {1, 9}, {2, 3, 4, 5, 6}, {7}};
  auto f = planted(10, [&](std::size_t i, std::size_t j) {
    const auto a = group_of(leaves, i), b = group_of(leaves, j);
    if (a == b) return 0.06;
    return (a < 2) == (b < 2) ? 0.02 : 0.001;
  });
  auto labels = routing_labels(agglomerate(build_distance_matrix(f), 2));
  EXPECT_EQ(labels.bits[7], (std::vector<int>{1, 1}));
  EXPECT_EQ(labels.bits[1], (std::vector<int>{0, 1}));
  EXPECT_EQ(labels.bits[0], (std::vector<int>{0, 0}));
  EXPECT_EQ(labels.bits[2], (std::vector<int>{1, 0}));
}

TEST(RoutingLabels, FileRoundTrip) {
  std::mt19937_64 rng(3);
  auto labels = routing_labels(agglomerate(build_distance_matrix(random_confusion(10, rng)), 2));
  std::stringstream ss;
  write_labels(ss, labels);
  auto back = read_labels(ss);
  EXPECT_EQ(back.depth, 2);
  EXPECT_EQ(back.bits, labels.bits);
}

TEST(RoutingLabels, MalformedFilesRejected) {
  std::stringstream bad_bit("0 0 2\n1 1 0\n");
  EXPECT_THROW(read_labels(bad_bit), DataError);
  std::stringstream ragged("0 0 1\n1 1\n");
  EXPECT_THROW(read_labels(ragged), DataError);
  std::stringstream gap("0 0\n2 1\n");
  EXPECT_THROW(read_labels(gap), DataError);
}

TEST(Confusion, PerfectAndConstantModels) {
  std::vector<int> truth{0, 1, 2, 2, 1, 0};
  auto perfect = confusion_from_predictions(truth, truth, 3);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(perfect(i, j), i == j ? 1.0 : 0.0);
  std::vector<int> zeros(6, 0);
  auto constant = confusion_from_predictions(truth, zeros, 3);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(constant(i, 0), 1.0);
}

TEST(Confusion, MatchesSimulatedErrorRates) {
  const double rates[3][3] = {{0.8, 0.15, 0.05}, {0.1, 0.7, 0.2}, {0.0, 0.25, 0.75}};
  std::mt19937_64 rng(4);
  std::vector<int> truth, pred;
  std::vector<std::vector<double>> counts(3, std::vector<double>(3, 0));
  for (int n = 0; n < 30000; ++n) {
    const int t = n % 3;
    std::discrete_distribution<int> d({rates[t][0], rates[t][1], rates[t][2]});
    const int p = d(rng);
    truth.push_back(t);
    pred.push_back(p);
    counts[t][p] += 1;
  }
  auto f = confusion_from_predictions(truth, pred, 3);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_DOUBLE_EQ(f(i, j), counts[i][j] / 10000.0);
      EXPECT_NEAR(f(i, j), rates[i][j], 0.015);
    }
}

TEST(Confusion, EmptyClassThrows) {
  std::vector<int> truth{0, 0}, pred{0, 1};
  EXPECT_THROW(confusion_from_predictions(truth, pred, 3), std::invalid_argument);
}

TEST(Confusion, CsvRoundTrip) {
  std::mt19937_64 rng(5);
  auto f = random_confusion(5, rng);
  std::stringstream ss;
  write_matrix_csv(ss, f);
  auto back = read_matrix_csv(ss);
  EXPECT_EQ(back.values, f.values);
}
