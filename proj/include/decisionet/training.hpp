#pragma once

#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <vector>

#include "decisionet/clustering.hpp"
#include "decisionet/data.hpp"
#include "decisionet/tree_network.hpp"

namespace dnet {

enum class InitScheme { Gaussian, He };

struct TrainConfig {
  std::size_t batch_size = 128;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double initial_lr = 0.01;
  double lr_drop_factor = 10.0;
  std::size_t plateau_patience = 10;
  std::size_t max_lr_drops = 2;
  std::size_t max_epochs = 300;
  std::size_t early_stop_patience = 30;
  double beta = 0.0;
  std::uint64_t seed = 0;
  double init_stddev = 0.05;
  InitScheme init = InitScheme::Gaussian;
  bool augment = false;
  std::size_t eval_batch_size = 500;
  ChoiceGranularity granularity = ChoiceGranularity::PerCall;

  void validate() const {
    if (batch_size == 0 || eval_batch_size == 0 || !(initial_lr > 0) || !(lr_drop_factor > 0) ||
        momentum < 0 || weight_decay < 0 || beta < 0 || !(init_stddev > 0)) {
      throw std::invalid_argument("train config: sizes and rates must be positive, beta >= 0");
    }
  }
};

/// Classification loss plus beta times the mean squared routing error over
/// every routing module and sample.
template <typename T>
Tensor<T> dn_loss(const Tensor<T>& logits, std::span<const int> labels,
                  const std::vector<Tensor<T>>& rm_outputs, const std::vector<Tensor<T>>& rm_targets,
                  T beta) {
  if (rm_outputs.size() != rm_targets.size()) {
    throw std::invalid_argument("dn_loss: " + std::to_string(rm_outputs.size()) +
                                " routing outputs but " + std::to_string(rm_targets.size()) + " targets");
  }
  auto loss = cross_entropy(logits, labels);
  if (rm_outputs.empty() || beta == T{0}) return loss;
  std::optional<Tensor<T>> routing;
  for (std::size_t k = 0; k < rm_outputs.size(); ++k) {
    auto term = mse(rm_outputs[k], rm_targets[k]);
    routing = routing ? add(*routing, term) : term;
  }
  return add(loss, scale(*routing, beta / static_cast<T>(rm_outputs.size())));
}

/// v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v.
template <typename T>
void sgd_step(std::span<T> param, std::span<const T> grad, std::span<T> velocity, T lr, T momentum,
              T weight_decay) {
  if (param.size() != grad.size() || param.size() != velocity.size()) {
    throw std::invalid_argument("sgd_step: parameter, gradient and velocity sizes differ");
  }
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[i] + weight_decay * param[i];
    param[i] -= lr * velocity[i];
  }
}

template <typename T>
class Sgd {
 public:
  Sgd(std::vector<NamedParameter<T>> params, T momentum, T weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : params_) velocity_.emplace_back(p.tensor.numel(), T{0});
  }

  void step(T lr) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& t = params_[k].tensor;
      if (!t.has_grad()) t.mutable_grad();
      sgd_step<T>(t.mutable_data(), t.grad(), velocity_[k], lr, momentum_, weight_decay_);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::vector<NamedParameter<T>> params_;
  std::vector<std::vector<T>> velocity_;
  T momentum_, weight_decay_;
};

/// Divides the learning rate after `patience` epochs without a strictly
/// better training accuracy, at most `max_drops` times.
class PlateauSchedule {
 public:
  PlateauSchedule(double lr, double factor, std::size_t patience, std::size_t max_drops)
      : lr_(lr), factor_(factor), patience_(patience), max_drops_(max_drops) {}

  /// Returns true when the rate was lowered.
  bool observe(double train_accuracy) {
    if (train_accuracy > best_) {
      best_ = train_accuracy;
      stale_ = 0;
      return false;
    }
    ++stale_;
    if (stale_ >= patience_ && drops_ < max_drops_) {
      lr_ /= factor_;
      ++drops_;
      stale_ = 0;
      return true;
    }
    return false;
  }

  double lr() const { return lr_; }
  std::size_t drops() const { return drops_; }

 private:
  double lr_, factor_;
  std::size_t patience_, max_drops_;
  std::size_t drops_ = 0, stale_ = 0;
  double best_ = -std::numeric_limits<double>::infinity();
};

class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  /// Returns true when training should stop.
  bool observe(double heldout_loss) {
    if (heldout_loss < best_) {
      best_ = heldout_loss;
      stale_ = 0;
      return false;
    }
    return ++stale_ >= patience_;
  }

 private:
  std::size_t patience_;
  std::size_t stale_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double train_accuracy = 0;
  double heldout_loss = 0;
  double heldout_accuracy = 0;
  std::vector<double> routing_accuracy;  // one per routing module
};

struct EvalResult {
  double accuracy = 0;
  double loss = 0;
  std::vector<double> routing_accuracy;  // over the samples reaching each module
  std::vector<std::vector<std::size_t>> leaf_histogram;  // [leaf][class]
  std::vector<int> predictions;
  std::size_t samples = 0;
};

inline void write_metrics_header(std::ostream& os, std::size_t routers) {
  os << "epoch,lr,train_loss,train_acc,heldout_loss,heldout_acc";
  for (std::size_t k = 0; k < routers; ++k) os << ",routing_acc_" << k;
  os << '\n';
}

inline void write_metrics_row(std::ostream& os, const EpochMetrics& m) {
  std::ostringstream row;
  row << std::setprecision(10) << m.epoch << ',' << m.lr << ',' << m.train_loss << ','
      << m.train_accuracy << ',' << m.heldout_loss << ',' << m.heldout_accuracy;
  for (double r : m.routing_accuracy) row << ',' << r;
  os << row.str() << '\n';
}

namespace detail {

template <typename T>
std::vector<Tensor<T>> routing_targets(const TreeNetwork<T>& net, const RoutingLabels& labels,
                                       std::span<const int> batch_labels) {
  std::vector<Tensor<T>> targets;
  for (int node : net.router_nodes()) {
    const int level = net.nodes()[static_cast<std::size_t>(node)].depth;
    std::vector<T> bits(batch_labels.size());
    for (std::size_t n = 0; n < bits.size(); ++n)
      bits[n] = static_cast<T>(labels.bit(static_cast<std::size_t>(batch_labels[n]), level));
    targets.emplace_back(Shape{bits.size()}, std::move(bits));
  }
  return targets;
}

template <typename T>
std::size_t argmax_row(std::span<const T> logits, std::size_t row, std::size_t k) {
  const T* z = logits.data() + row * k;
  return static_cast<std::size_t>(std::max_element(z, z + k) - z);
}

inline void check_labels(const TreeSpec& spec, const RoutingLabels* labels) {
  if (spec.depth == 0) return;
  if (!labels) throw std::invalid_argument("training a tree network requires routing labels");
  if (labels->depth != spec.depth || labels->num_classes() != spec.num_classes) {
    throw std::invalid_argument("routing labels have depth " + std::to_string(labels->depth) + " for " +
                                std::to_string(labels->num_classes()) + " classes; network needs depth " +
                                std::to_string(spec.depth) + " for " + std::to_string(spec.num_classes));
  }
}

}  // namespace detail

/// Hard-routed evaluation: no noise, binary routing values.
template <typename T>
EvalResult evaluate(TreeNetwork<T>& net, const LabeledImageSet& data,
                    const RoutingLabels* labels = nullptr, std::size_t batch_size = 500) {
  NoGradGuard no_grad;
  const auto previous = net.mode();
  net.set_mode(RoutingMode::Eval);
  std::mt19937_64 unused(0);
  EvalResult r;
  r.samples = data.size();
  r.leaf_histogram.assign(net.num_leaves(), std::vector<std::size_t>(net.num_classes(), 0));
  const bool with_routing = labels && net.depth() > 0 && labels->depth == net.depth();
  std::vector<std::size_t> routing_hits(net.router_nodes().size(), 0);
  std::vector<std::size_t> routing_reached(net.router_nodes().size(), 0);
  std::size_t correct = 0;
  double loss_sum = 0;
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::vector<int> y;
  for (std::size_t begin = 0; begin < data.size(); begin += batch_size) {
    const std::size_t end = std::min(data.size(), begin + batch_size);
    std::span<const std::size_t> ids(idx.data() + begin, end - begin);
    auto x = make_batch<T>(data, ids, &y);
    auto out = net.forward(x, unused);
    loss_sum += static_cast<double>(cross_entropy(out.logits, y).item()) * static_cast<double>(ids.size());
    const auto leaves = out.leaves(net.nodes());
    const std::size_t k = out.logits.dim(1);
    for (std::size_t n = 0; n < ids.size(); ++n) {
      const auto pred = detail::argmax_row<T>(out.logits.data(), n, k);
      r.predictions.push_back(static_cast<int>(pred));
      correct += pred == static_cast<std::size_t>(y[n]) ? 1 : 0;
      ++r.leaf_histogram[leaves[n]][static_cast<std::size_t>(y[n])];
      if (with_routing) {
        int node = 0;
        while (!net.nodes()[static_cast<std::size_t>(node)].is_leaf()) {
          const auto& tn = net.nodes()[static_cast<std::size_t>(node)];
          const auto m = static_cast<std::size_t>(
              std::find(net.router_nodes().begin(), net.router_nodes().end(), node) - net.router_nodes().begin());
          const int bit = out.routing[m][n] > T(0.5) ? 1 : 0;
          ++routing_reached[m];
          routing_hits[m] += bit == labels->bit(static_cast<std::size_t>(y[n]), tn.depth) ? 1 : 0;
          node = tn.children[static_cast<std::size_t>(bit)];
        }
      }
    }
  }
  net.set_mode(previous);
  if (data.size() > 0) {
    r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    r.loss = loss_sum / static_cast<double>(data.size());
  }
  if (with_routing) {
    for (std::size_t m = 0; m < routing_hits.size(); ++m) {
      r.routing_accuracy.push_back(routing_reached[m] ? static_cast<double>(routing_hits[m]) /
                                                            static_cast<double>(routing_reached[m])
                                                      : 0.0);
    }
  }
  return r;
}

template <typename T>
struct FitResult {
  std::vector<EpochMetrics> metrics;
  std::vector<NamedParameter<T>> best;  // detached copies at the best held-out accuracy
  std::size_t best_epoch = 0;
  bool stopped_early = false;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Trains with noisy routing, SGD with momentum and weight decay, a plateau
/// learning-rate schedule and early stopping on held-out loss. Weights are
/// re-initialized from the config seed first.
template <typename T>
FitResult<T> fit(TreeNetwork<T>& net, const LabeledImageSet& train, const LabeledImageSet& heldout,
                 const RoutingLabels* labels, const TrainConfig& config,
                 const EpochCallback& on_epoch = {}) {
  config.validate();
  detail::check_labels(net.spec(), labels);
  std::mt19937_64 init_rng(config.seed);
  if (config.init == InitScheme::He) net.initialize_he(init_rng);
  else net.initialize(static_cast<T>(config.init_stddev), init_rng);
  net.set_granularity(config.granularity);

  FitResult<T> result;
  Sgd<T> opt(net.parameters(), static_cast<T>(config.momentum), static_cast<T>(config.weight_decay));
  PlateauSchedule schedule(config.initial_lr, config.lr_drop_factor, config.plateau_patience,
                           config.max_lr_drops);
  EarlyStopping early(config.early_stop_patience);
  double best_acc = -1.0;
  const std::size_t k = net.num_classes();
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<int> y;

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::seed_seq seq{config.seed, static_cast<std::uint64_t>(epoch), std::uint64_t{0x5eed}};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);
    net.set_mode(RoutingMode::Train);
    const T lr = static_cast<T>(schedule.lr());
    double loss_sum = 0;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      std::span<const std::size_t> ids(order.data() + begin, end - begin);
      auto x = make_batch<T>(train, ids, &y);
      if (config.augment) {
        auto aug = augment<T>(x.data(), ids.size(), train.channels, train.height, train.width, rng);
        std::copy(aug.begin(), aug.end(), x.mutable_data().begin());
      }
      auto out = net.forward(x, rng);
      std::vector<Tensor<T>> targets;
      if (labels && net.depth() > 0) targets = detail::routing_targets(net, *labels, y);
      auto loss = dn_loss(out.logits, y, out.routing, targets, static_cast<T>(config.beta));
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
      }
      loss.backward();
      {
        NoGradGuard no_grad;
        opt.step(lr);
      }
      opt.zero_grad();
      loss_sum += lv * static_cast<double>(ids.size());
      for (std::size_t n = 0; n < ids.size(); ++n)
        correct += detail::argmax_row<T>(out.logits.data(), n, k) == static_cast<std::size_t>(y[n]) ? 1 : 0;
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = static_cast<double>(lr);
    m.train_loss = loss_sum / static_cast<double>(train.size());
    m.train_accuracy = static_cast<double>(correct) / static_cast<double>(train.size());
    const auto ev = evaluate(net, heldout, labels, config.eval_batch_size);
    m.heldout_loss = ev.loss;
    m.heldout_accuracy = ev.accuracy;
    m.routing_accuracy = ev.routing_accuracy;
    result.metrics.push_back(m);
    if (on_epoch) on_epoch(m);

    if (m.heldout_accuracy > best_acc) {
      best_acc = m.heldout_accuracy;
      result.best_epoch = epoch;
      result.best.clear();
      for (const auto& p : net.parameters()) result.best.push_back({p.name, p.tensor.detach()});
    }
    schedule.observe(m.train_accuracy);
    if (early.observe(m.heldout_loss)) {
      result.stopped_early = true;
      break;
    }
  }
  return result;
}

}  // namespace dnet
