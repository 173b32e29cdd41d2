#include <CLI11.hpp>
#include <malloc.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "decisionet/decisionet.hpp"

using namespace dnet;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;
using Vec = std::vector<double>;

namespace {

constexpr double kDn1EarlyTolerance = 0.0005;
constexpr double kBaselineMacTolerance = 0.005;
constexpr double kPathMacTolerance = 0.01;
constexpr double kGradTolerance = 1e-4;
constexpr double kModeFrequencyTolerance = 0.02;
constexpr double kBackwardRuleTolerance = 1e-12;
constexpr double kMinAccuracy = 0.80;
constexpr double kMaxAccuracyGap = 0.020;
constexpr double kTrainingBudgetSeconds = 30 * 60;
constexpr double kDeterminismBudgetSeconds = 5 * 60;
constexpr double kOneSecond = 1.0;
constexpr double kOneMinute = 60.0;

struct Outcome {
  bool pass = true;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const Outcome& o, double seconds) {
  std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " " << name << " (" << std::fixed
            << std::setprecision(2) << seconds << " s)";
  if (!o.detail.empty()) std::cout << ": " << o.detail;
  std::cout << std::endl;
  failures += o.pass ? 0 : 1;
}

void run(int id, const std::string& name, double budget, const std::function<Outcome()>& body) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  if (secs > budget) {
    o.pass = false;
    std::ostringstream os;
    os << (o.detail.empty() ? "" : o.detail + "; ") << "exceeded time budget of " << budget << " s";
    o.detail = os.str();
  }
  report(id, name, o, secs);
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

// ---------------------------------------------------------------------------

Outcome parameter_counts() {
  struct Row { const char* dataset; std::size_t channels, size; Variant v; std::size_t expected; };
  const Row rows[] = {
      {"cifar10", 3, 32, Variant::Baseline, 966986}, {"cifar10", 3, 32, Variant::DN2, 736907},
      {"cifar10", 3, 32, Variant::DN1Late, 948757},  {"cifar10", 3, 32, Variant::DN2Slim, 423627},
      {"fashionmnist", 1, 28, Variant::Baseline, 957386}, {"fashionmnist", 1, 28, Variant::DN2Slim, 414027},
  };
  Outcome o;
  std::ostringstream detail;
  for (const auto& r : rows) {
    const auto arch = build_nin(10, r.channels, r.size, r.size);
    const auto got = count_params(to_decisionet(arch, split_plan(r.v, arch)));
    if (got != r.expected) {
      o.pass = false;
      detail << r.dataset << "/" << to_string(r.v) << " " << got << " != " << r.expected << "; ";
    }
  }
  const auto arch = build_nin(10, 3, 32, 32);
  const auto early = count_params(to_decisionet(arch, split_plan(Variant::DN1Early, arch)));
  const double rel = std::abs(static_cast<double>(early) - 745909.0) / 745909.0;
  if (rel > kDn1EarlyTolerance) o.pass = false;
  detail << "dn1-early " << early << " (rel. error " << rel << ")";
  o.detail = detail.str();
  return o;
}

Outcome mac_counts() {
  const auto arch = build_nin(10, 3, 32, 32);
  auto macs = [&](Variant v) { return double(count_macs(to_decisionet(arch, split_plan(v, arch)), 32, 32)); };
  struct Row { Variant v; double expected, tol; };
  const Row rows[] = {{Variant::Baseline, 223.12e6, kBaselineMacTolerance},
                      {Variant::DN2, 129.00e6, kPathMacTolerance},
                      {Variant::DN2Slim, 89.08e6, kPathMacTolerance}};
  Outcome o;
  std::ostringstream detail;
  for (const auto& r : rows) {
    const double got = macs(r.v);
    const double rel = std::abs(got - r.expected) / r.expected;
    if (rel > r.tol) o.pass = false;
    detail << to_string(r.v) << " " << fmt(got / 1e6, 3) << "M (" << fmt(100 * rel, 3) << "%) ";
  }
  o.detail = detail.str();
  return o;
}

// ---------------------------------------------------------------------------

Tensor<double> uniform(Shape s, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vec v(numel(s));
  for (auto& e : v) e = u(rng);
  return Tensor<double>(std::move(s), std::move(v));
}

// Values bounded away from zero, for inputs that reach a ReLU kink.
Tensor<double> off_kink(Shape s, std::mt19937_64& rng) {
  auto t = uniform(std::move(s), rng, 0.2, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.mutable_data()) v = sign(rng) ? v : -v;
  return t;
}

// Distinct values at least 0.1 apart, so max-pool windows have no ties.
Tensor<double> spread(Shape s, std::mt19937_64& rng) {
  Vec v(numel(s));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.1 * static_cast<double>(i);
  std::shuffle(v.begin(), v.end(), rng);
  return Tensor<double>(std::move(s), std::move(v));
}

Outcome gradient_checks() {
  std::mt19937_64 rng(20240);
  std::uniform_int_distribution<std::size_t> small(2, 4);
  Outcome o;
  std::ostringstream detail;
  double worst = 0;
  auto check = [&](const std::string& name, const TensorFn& fn, std::vector<Tensor<double>> inputs) {
    const auto r = grad_check(fn, std::move(inputs), 1e-5, kGradTolerance, name);
    worst = std::max(worst, r.max_rel_error);
    if (!r.passed()) {
      o.pass = false;
      detail << name << " flagged " << r.flagged << " (max rel " << r.max_rel_error << "); ";
    }
  };

  for (int trial = 0; trial < 3; ++trial) {
    const std::size_t n = small(rng), c = small(rng), o_ch = small(rng), h = small(rng) + 3, w = small(rng) + 3;
    const std::size_t k = 1 + 2 * (rng() % 2), stride = 1 + rng() % 2, pad = rng() % 2;
    const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
    check("conv2d",
          [=](const auto& in) { return sum(mul(conv2d(in[0], in[1], in[2], stride, pad), in[3])); },
          {uniform({n, c, h, w}, rng, -1, 1), uniform({o_ch, c, k, k}, rng, -1, 1), uniform({o_ch}, rng, -1, 1),
           uniform({n, o_ch, ho, wo}, rng, -1, 1)});

    const std::size_t ph = 2 * small(rng), pw = 2 * small(rng);
    check("max_pool2d", [](const auto& in) { return sum(mul(max_pool2d(in[0], 2, 2), in[1])); },
          {spread({n, c, ph, pw}, rng), uniform({n, c, ph / 2, pw / 2}, rng, -1, 1)});
    check("avg_pool2d", [](const auto& in) { return sum(mul(avg_pool2d(in[0], 2, 2), in[1])); },
          {uniform({n, c, ph, pw}, rng, -1, 1), uniform({n, c, ph / 2, pw / 2}, rng, -1, 1)});
    check("global_avg_pool", [](const auto& in) { return sum(mul(global_avg_pool(in[0]), in[1])); },
          {uniform({n, c, h, w}, rng, -1, 1), uniform({n, c}, rng, -1, 1)});
    check("relu", [](const auto& in) { return sum(mul(relu(in[0]), in[1])); },
          {off_kink({n, c, h}, rng), uniform({n, c, h}, rng, -1, 1)});
    check("linear", [](const auto& in) { return sum(mul(linear(in[0], in[1], in[2]), in[3])); },
          {uniform({n, c}, rng, -1, 1), uniform({c, o_ch}, rng, -1, 1), uniform({o_ch}, rng, -1, 1),
           uniform({n, o_ch}, rng, -1, 1)});
    std::vector<int> labels(n);
    for (auto& y : labels) y = static_cast<int>(rng() % o_ch);
    check("cross_entropy", [labels](const auto& in) { return cross_entropy(in[0], labels); },
          {uniform({n, o_ch}, rng, -3, 3)});
    check("mse", [](const auto& in) { return mse(in[0], in[1]); },
          {uniform({n}, rng, 0, 1), uniform({n}, rng, 0, 1)});
    check("combine_branches", [](const auto& in) { return sum(mul(combine_branches(in[0], in[1], in[2]), in[3])); },
          {uniform({n}, rng, 0, 1), uniform({n, c}, rng, -1, 1), uniform({n, c}, rng, -1, 1),
           uniform({n, c}, rng, -1, 1)});

    // Routing path through the relaxed binarizer; scores and noise keep
    // z + eps well inside the unsaturated region.
    Vec eps(n);
    std::uniform_real_distribution<double> e(-0.5, 0.5);
    for (auto& v : eps) v = e(rng);
    const std::vector<bool> relaxed(n, false);
    check("routing(g_r)",
          [=](const auto& in) {
            auto z = reshape(linear(global_avg_pool(in[0]), reshape(in[1], Shape{c, 1}), in[2]), Shape{n});
            auto r = binarize_with<double>(z, eps, relaxed);
            return sum(mul(combine_branches(r, in[3], in[4]), in[5]));
          },
          {uniform({n, c, h, w}, rng, -1, 1), uniform({c}, rng, -0.5, 0.5), uniform({1}, rng, -0.2, 0.2),
           uniform({n, 3}, rng, -1, 1), uniform({n, 3}, rng, -1, 1), uniform({n, 3}, rng, -1, 1)});
  }

  // A complete tree network with relaxed routing in every module.
  auto arch = parse_arch("input 2x6x6\nclasses 3\nconv 3x3 4\nrelu\nsplit\nconv 3x3 4\nrelu\nmaxpool 2x2 2\nconv 1x1 3\ngap\n");
  TreeNetwork<double> net(arch.arch, arch.plan);
  std::mt19937_64 init(5);
  net.initialize(0.5, init);
  auto params = net.parameters();
  std::vector<Tensor<double>> inputs{uniform({3, 2, 6, 6}, rng, -1, 1)};
  for (const auto& p : params) inputs.push_back(p.tensor);
  const std::vector<int> labels{0, 2, 1};
  check("tree_network",
        [&](const auto& in) {
          auto& rm = *net.nodes()[0].router;
          auto h = net.nodes()[0].stack.forward(in[0]);
          auto z = rm.logits(h);
          auto r = binarize_with<double>(z, Vec{0.1, -0.2, 0.05}, {false, false, false});
          auto left = net.nodes()[1].stack.forward(h);
          auto right = net.nodes()[2].stack.forward(h);
          return cross_entropy(combine_branches(r, left, right), labels);
        },
        inputs);
  detail << "max relative error " << worst;
  o.detail = detail.str();
  return o;
}

// ---------------------------------------------------------------------------

// Median score of a routing module on a batch, used to centre its bias so
// that both children receive samples.
void centre_router(RoutingModule<double>& rm, const Tensor<double>& h) {
  auto z = rm.logits(h);
  Vec v(z.data().begin(), z.data().end());
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2), v.end());
  rm.bias.mutable_data()[0] -= v[v.size() / 2] + 1e-9;
}

Outcome hard_path_equivalence() {
  const auto arch = build_nin(10, 3, 32, 32);
  TreeNetwork<double> net(arch, split_plan(Variant::DN2, arch));
  std::mt19937_64 rng(77);
  net.initialize_he(rng);
  const std::size_t N = 100;
  auto x = uniform({N, 3, 32, 32}, rng, -1, 1);
  {
    NoGradGuard guard;
    auto& nodes = net.nodes();
    auto h0 = nodes[0].stack.forward(x);
    centre_router(*nodes[0].router, h0);
    for (int child : nodes[0].children) {
      auto h1 = nodes[static_cast<std::size_t>(child)].stack.forward(h0);
      centre_router(*nodes[static_cast<std::size_t>(child)].router, h1);
    }
  }
  net.set_mode(RoutingMode::Eval);
  const auto out = net.forward(x, rng);
  NoGradGuard guard;
  const auto routed = net.forward(x, rng);
  const auto leaves = out.leaves(net.nodes());
  Outcome o;
  std::ostringstream detail;
  std::size_t routed_mismatches = 0;
  for (std::size_t i = 0; i < out.logits.numel(); ++i) routed_mismatches += out.logits[i] != routed.logits[i];
  if (routed.leaves(net.nodes()) != leaves) ++routed_mismatches;
  for (const auto& r : out.routing)
    for (double v : r.data())
      if (v != 0.0 && v != 1.0) o.pass = false;

  std::vector<std::size_t> per_leaf(net.num_leaves(), 0);
  std::size_t mismatches = 0;
  for (std::size_t leaf = 0; leaf < net.num_leaves(); ++leaf) {
    const auto path = net.path_network(leaf).forward(x);
    for (std::size_t n = 0; n < N; ++n) {
      if (leaves[n] != leaf) continue;
      ++per_leaf[leaf];
      for (std::size_t k = 0; k < 10; ++k) mismatches += out.logits[n * 10 + k] != path[n * 10 + k];
    }
  }
  std::size_t single_mismatch = 0;
  for (std::size_t n = 0; n < N; ++n) {
    const std::size_t sz = 3 * 32 * 32;
    Tensor<double> one(Shape{1, 3, 32, 32},
                       Vec(x.data().begin() + static_cast<std::ptrdiff_t>(n * sz),
                           x.data().begin() + static_cast<std::ptrdiff_t>((n + 1) * sz)));
    const auto s = net.infer_single(one, rng);
    if (s.leaf != leaves[n] || s.path.size() != static_cast<std::size_t>(net.depth()) + 1) ++single_mismatch;
    for (std::size_t k = 0; k < 10; ++k) single_mismatch += s.logits[k] != out.logits[n * 10 + k];
  }
  if (mismatches || single_mismatch || routed_mismatches) o.pass = false;
  detail << "samples per leaf";
  for (auto c : per_leaf) detail << ' ' << c;
  detail << ", tree/path mismatches " << mismatches << ", single-path mismatches " << single_mismatch
         << ", routed-batch mismatches " << routed_mismatches;
  o.detail = detail.str();
  return o;
}

// ---------------------------------------------------------------------------

Outcome hashing_properties() {
  std::mt19937_64 rng(99);
  Outcome o;
  std::ostringstream detail;

  RoutingModule<double> rm(8);
  std::normal_distribution<double> d;
  for (auto& w : rm.weight.mutable_data()) w = d(rng);
  rm.mode = RoutingMode::Eval;
  auto x = uniform({10000, 8, 2, 2}, rng, -3, 3);
  std::size_t non_binary = 0;
  for (double v : rm.forward(x, rng).data()) non_binary += v != 0.0 && v != 1.0;
  if (non_binary) o.pass = false;
  detail << "eval non-binary " << non_binary;

  Vec zv(10000);
  std::normal_distribution<double> wide(0.0, 4.0);
  for (auto& v : zv) v = wide(rng);
  Tensor<double> z(Shape{10000}, zv);
  std::size_t outside = 0;
  auto relaxed = binarize_with<double>(z, Vec(10000, 0.0), std::vector<bool>(10000, false));
  for (double v : relaxed.data()) outside += v < 0.0 || v > 1.0;
  rm.mode = RoutingMode::Train;
  rm.granularity = ChoiceGranularity::PerSample;
  for (double v : rm.forward(x, rng).data()) outside += v < 0.0 || v > 1.0;
  if (outside) o.pass = false;
  detail << ", train out of [0,1] " << outside;

  std::size_t hard = 0;
  Tensor<double> one(Shape{1}, 0.3);
  for (int call = 0; call < 10000; ++call) {
    std::vector<BinarizerSample<double>> trace;
    binarize(one, RoutingMode::Train, rng, ChoiceGranularity::PerCall, &trace);
    hard += trace[0].hard;
  }
  const double freq = static_cast<double>(hard) / 10000.0;
  if (std::abs(freq - 0.5) > kModeFrequencyTolerance) o.pass = false;
  detail << ", b-mode frequency " << fmt(freq);

  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    Tensor<double> zi(Shape{1}, Vec{wide(rng)}, true);
    std::vector<BinarizerSample<double>> trace;
    auto out = binarize(zi, RoutingMode::Train, rng, ChoiceGranularity::PerCall, &trace);
    sum(out).backward();
    const double u = trace[0].z + trace[0].epsilon;
    const double s = 1.0 / (1.0 + std::exp(-u));
    const double v = 1.2 * s - 0.1;
    const double expected = (v > 0.0 && v < 1.0) ? 1.2 * s * (1.0 - s) : 0.0;
    worst = std::max(worst, std::abs(zi.grad()[0] - expected));
  }
  if (worst >= kBackwardRuleTolerance) o.pass = false;
  detail << ", backward rule max abs error " << worst;
  o.detail = detail.str();
  return o;
}

// ---------------------------------------------------------------------------

using Partition = std::set<std::set<int>>;

Partition exhaustive_split(const DistanceMatrix& d, const std::vector<int>& members) {
  const std::size_t m = members.size();
  double best = -1;
  Partition out;
  for (std::size_t mask = 1; mask < (std::size_t{1} << (m - 1)); ++mask) {
    std::vector<int> a, b;
    for (std::size_t i = 0; i < m; ++i) ((mask >> i) & 1 ? a : b).push_back(members[i]);
    const double v = linkage_distance(d, a, b, Linkage::Average);
    if (v > best) {
      best = v;
      out = {std::set<int>(a.begin(), a.end()), std::set<int>(b.begin(), b.end())};
    }
  }
  return out;
}

Outcome clustering_oracle() {
  const std::vector<int> pair_of{0, 1, 2, 3, 0, 1, 2, 3};
  const std::vector<int> group_of{0, 0, 1, 1, 0, 0, 1, 1};
  ConfusionMatrix f(8);
  for (std::size_t i = 0; i < 8; ++i) {
    double row = 0;
    for (std::size_t j = 0; j < 8; ++j) {
      if (i == j) continue;
      f(i, j) = pair_of[i] == pair_of[j] ? 0.3 : group_of[i] == group_of[j] ? 0.1 : 0.01;
      row += f(i, j);
    }
    f(i, i) = 1.0 - row;
  }
  const auto d = build_distance_matrix(f);
  const auto tree = agglomerate(d, 2);

  Partition planted1{{0, 1, 4, 5}, {2, 3, 6, 7}};
  Partition planted2{{0, 4}, {1, 5}, {2, 6}, {3, 7}};
  auto as_set = [](const std::vector<std::vector<int>>& groups) {
    Partition p;
    for (const auto& g : groups) p.insert(std::set<int>(g.begin(), g.end()));
    return p;
  };
  Partition oracle2;
  const auto oracle1 = exhaustive_split(d, {0, 1, 2, 3, 4, 5, 6, 7});
  for (const auto& half : oracle1) {
    for (const auto& part : exhaustive_split(d, std::vector<int>(half.begin(), half.end()))) oracle2.insert(part);
  }
  Outcome o;
  o.pass = as_set(tree.partition_at(1)) == planted1 && as_set(tree.partition_at(2)) == planted2 &&
           oracle1 == planted1 && oracle2 == planted2;
  o.detail = describe(tree);
  std::replace(o.detail.begin(), o.detail.end(), '\n', ' ');
  return o;
}

// ---------------------------------------------------------------------------

struct TrainingSetup {
  fs::path data_dir;
  fs::path work_dir;
  std::size_t epochs = 8;
  std::size_t subset = 10000;
  std::size_t width_divisor = 4;
  std::uint64_t seed = 1;
  double beta = 3.0;
  double lr = 0.01;
  std::size_t batch_size = 32;
};

TrainConfig desk_config(const TrainingSetup& s, double beta) {
  TrainConfig c;
  c.max_epochs = s.epochs;
  c.beta = beta;
  c.seed = s.seed;
  c.initial_lr = s.lr;
  c.batch_size = s.batch_size;
  c.init = InitScheme::He;
  return c;
}

std::string train_to_file(TreeNetwork<float>& net, const PreparedData& data, const RoutingLabels* labels,
                          const TrainConfig& cfg, const fs::path& metrics_path, const std::string& tag,
                          EpochMetrics* last = nullptr) {
  std::ofstream os(metrics_path);
  write_metrics_header(os, net.router_nodes().size());
  const auto t0 = Clock::now();
  fit(net, data.train, data.test, labels, cfg, [&](const EpochMetrics& m) {
    write_metrics_row(os, m);
    os.flush();
    if (last) *last = m;
    std::cout << "  [" << tag << "] epoch " << m.epoch << " train_acc " << fmt(m.train_accuracy) << " test_acc "
              << fmt(m.heldout_accuracy) << " ("
              << fmt(std::chrono::duration<double>(Clock::now() - t0).count(), 1) << " s)" << std::endl;
  });
  std::ifstream is(metrics_path);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

struct DeskRun {
  PreparedData data;
  RoutingLabels labels;
  std::string dn_metrics;
  bool ok = false;
};

Outcome desk_training(const TrainingSetup& s, DeskRun& run) {
  run.data = prepare_data("fashionmnist", s.data_dir, s.subset, s.seed);
  const auto arch = scale_width(build_nin(10, 1, 28, 28), s.width_divisor);

  TreeNetwork<float> base(arch, {});
  EpochMetrics base_last, dn_last;
  train_to_file(base, run.data, nullptr, desk_config(s, 0.0), s.work_dir / "baseline_metrics.csv", "baseline",
                &base_last);
  const double base_acc = base_last.heldout_accuracy;

  const auto clusters = cluster_classes(base, run.data.train, 2, run.data.train.size() / 10 / 10, s.seed);
  run.labels = clusters.labels;
  {
    std::ofstream os(s.work_dir / "labels.txt");
    write_labels(os, run.labels);
  }
  std::cout << "  clustering: " << describe(clusters.tree);

  TreeNetwork<float> dn(arch, split_plan(Variant::DN2Slim, arch));
  run.dn_metrics = train_to_file(dn, run.data, &run.labels, desk_config(s, s.beta), s.work_dir / "dn2slim_metrics_a.csv",
                                 "dn2-slim", &dn_last);
  const double dn_acc = dn_last.heldout_accuracy;
  run.ok = true;

  Outcome o;
  const double gap = base_acc - dn_acc;
  o.pass = base_acc > kMinAccuracy && dn_acc > kMinAccuracy && std::abs(gap) <= kMaxAccuracyGap;
  o.detail = "baseline " + fmt(100 * base_acc, 2) + "%, dn2-slim " + fmt(100 * dn_acc, 2) + "% (gap " +
             fmt(100 * gap, 2) + " points), routing accuracy";
  for (double r : dn_last.routing_accuracy) o.detail += " " + fmt(r, 3);
  return o;
}

Outcome determinism(const TrainingSetup& s, const DeskRun& run) {
  if (!run.ok) return {false, "criterion 7 run unavailable"};
  const auto arch = scale_width(build_nin(10, 1, 28, 28), s.width_divisor);
  TreeNetwork<float> dn(arch, split_plan(Variant::DN2Slim, arch));
  const auto second = train_to_file(dn, run.data, &run.labels, desk_config(s, s.beta),
                                    s.work_dir / "dn2slim_metrics_b.csv", "dn2-slim rerun");
  Outcome o;
  o.pass = second == run.dn_metrics && !second.empty();
  o.detail = o.pass ? "metrics files identical (" + std::to_string(std::count(second.begin(), second.end(), '\n')) +
                          " lines)"
                    : "metrics files differ";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
  CLI::App app{"DecisioNet acceptance checks"};
  bool fast = false, training = false;
  TrainingSetup setup;
  std::string data_dir = "/root/data/fashionmnist", work_dir = "acceptance_out";
  app.add_flag("--fast", fast, "Run the non-training criteria");
  app.add_flag("--training", training, "Run the desk-scale training criteria");
  app.add_option("--data-dir", data_dir, "FashionMNIST IDX directory");
  app.add_option("--work-dir", work_dir, "Directory for metrics and labels");
  app.add_option("--epochs", setup.epochs, "Training epochs")->capture_default_str();
  app.add_option("--seed", setup.seed, "Seed")->capture_default_str();
  app.add_option("--lr", setup.lr, "Initial learning rate")->capture_default_str();
  app.add_option("--batch-size", setup.batch_size, "Mini-batch size")->capture_default_str();
  CLI11_PARSE(app, argc, argv);
  if (!fast && !training) fast = training = true;

  if (fast) {
    run(1, "parameter counts", kOneSecond, parameter_counts);
    run(2, "MAC counts", kOneSecond, mac_counts);
    run(3, "gradient checks", kOneMinute, gradient_checks);
    run(4, "hard-path equivalence", kOneMinute, hard_path_equivalence);
    run(5, "semantic hashing", kOneMinute, hashing_properties);
    run(6, "clustering oracle", kOneSecond, clustering_oracle);
  }
  if (training) {
    setup.data_dir = data_dir;
    setup.work_dir = work_dir;
    fs::create_directories(setup.work_dir);
    DeskRun desk;
    run(7, "desk-scale training", kTrainingBudgetSeconds, [&] { return desk_training(setup, desk); });
    run(9, "determinism", kDeterminismBudgetSeconds, [&] { return determinism(setup, desk); });
  }
  return failures == 0 ? 0 : 1;
}
