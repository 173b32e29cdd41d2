#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "decisionet/clustering.hpp"
#include "decisionet/data.hpp"
#include "decisionet/training.hpp"

namespace dnet {

struct PreparedData {
  LabeledImageSet train;
  LabeledImageSet test;
  ChannelStats stats;
};

/// Loads a dataset by name, optionally keeps a class-balanced subset of the
/// training split, and normalizes both splits with full-training-split
/// statistics.
inline PreparedData prepare_data(const std::string& dataset, const std::filesystem::path& dir,
                                 std::size_t train_subset = 0, std::uint64_t subset_seed = 0) {
  TrainTest raw;
  if (dataset == "fashionmnist") raw = load_fashion_mnist(dir);
  else if (dataset == "cifar10") raw = load_cifar10(dir);
  else throw std::invalid_argument("unknown dataset '" + dataset + "' (expected fashionmnist or cifar10)");
  PreparedData out;
  out.stats = channel_stats(raw.train);
  if (train_subset > 0 && train_subset < raw.train.size()) {
    const std::size_t classes = raw.train.num_classes;
    if (train_subset % classes != 0) {
      throw std::invalid_argument("training subset size must be a multiple of " + std::to_string(classes));
    }
    std::mt19937_64 rng(subset_seed);
    const auto ids = balanced_subset(std::span<const int>(raw.train.labels), classes, train_subset / classes, rng);
    raw.train = subset(raw.train, ids);
  }
  out.train = normalize(std::move(raw.train), out.stats);
  out.test = normalize(std::move(raw.test), out.stats);
  return out;
}

/// Row-normalized confusion of a network's hard-routed predictions on
/// `per_class` images of every class.
template <typename T>
ConfusionMatrix network_confusion(TreeNetwork<T>& net, const LabeledImageSet& data, std::size_t per_class,
                                  std::uint64_t seed, std::size_t batch_size = 500) {
  std::mt19937_64 rng(seed);
  const auto ids = balanced_subset(std::span<const int>(data.labels), data.num_classes, per_class, rng);
  const auto sample = subset(data, ids);
  const auto ev = evaluate(net, sample, nullptr, batch_size);
  return confusion_from_predictions(sample.labels, ev.predictions, data.num_classes);
}

struct ClusteringResult {
  ConfusionMatrix confusion;
  ClusterTree tree;
  RoutingLabels labels;
};

template <typename T>
ClusteringResult cluster_classes(TreeNetwork<T>& net, const LabeledImageSet& data, int depth,
                                 std::size_t per_class, std::uint64_t seed,
                                 Linkage linkage = Linkage::Average) {
  ClusteringResult r;
  r.confusion = network_confusion(net, data, per_class, seed);
  r.tree = agglomerate(build_distance_matrix(r.confusion), depth, linkage);
  r.labels = routing_labels(r.tree);
  return r;
}

}  // namespace dnet
