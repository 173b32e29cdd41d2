#include <CLI11.hpp>
#include <malloc.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "decisionet/decisionet.hpp"

using namespace dnet;
namespace fs = std::filesystem;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kData = 3, kNumeric = 4 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

const std::vector<std::string> kFashionNames{"T-shirt/top", "Trouser", "Pullover", "Dress", "Coat",
                                             "Sandal",      "Shirt",   "Sneaker",  "Bag",   "Ankle boot"};
const std::vector<std::string> kCifarNames{"airplane", "automobile", "bird",  "cat",  "deer",
                                           "dog",      "frog",       "horse", "ship", "truck"};

struct Options {
  std::string dataset = "fashionmnist";
  std::string data_dir;
  std::string arch = "baseline";
  std::optional<double> beta;
  std::uint64_t seed = 0;
  std::string labels;
  std::string checkpoint;
  std::string out = ".";
  std::size_t width_divisor = 1;

  // train
  std::size_t epochs = 300;
  std::optional<double> lr;
  std::size_t batch_size = 128;
  std::size_t train_subset = 0;
  std::string init = "gaussian";
  double init_stddev = 0.05;
  bool augment = false;

  // cluster
  int depth = 2;
  std::size_t per_class = 500;
  std::string linkage = "average";
};

const std::vector<std::string>& class_names(const std::string& dataset) {
  return dataset == "cifar10" ? kCifarNames : kFashionNames;
}

std::string data_dir(const Options& o) {
  if (!o.data_dir.empty()) return o.data_dir;
  if (const char* env = std::getenv("DN_DATA_DIR")) return env;
  throw UsageError("no data directory: pass --data-dir or set DN_DATA_DIR");
}

ArchSpec dataset_arch(const std::string& dataset, std::size_t width_divisor) {
  ArchSpec a;
  if (dataset == "fashionmnist") a = build_nin(10, 1, 28, 28);
  else if (dataset == "cifar10") a = build_nin(10, 3, 32, 32);
  else throw UsageError("unknown dataset '" + dataset + "' (expected fashionmnist or cifar10)");
  return width_divisor > 1 ? scale_width(a, width_divisor) : a;
}

Variant variant_of(const std::string& name) {
  try {
    return parse_variant(name);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

void write_config(const fs::path& path, const ConfigMap& config) {
  std::ofstream os(path);
  for (const auto& [k, v] : config) os << k << '=' << v << '\n';
  if (!os) throw DataError("cannot write " + path.string());
}

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

// ---------------------------------------------------------------------------

int cmd_cost(const Options& o) {
  const auto base = dataset_arch(o.dataset, o.width_divisor);
  const auto v = variant_of(o.arch);
  const auto report = cost_report(base, split_plan(v, base));
  std::cout << "dataset " << o.dataset << ", architecture " << to_string(v) << "\n";
  std::cout << std::fixed << std::setprecision(3);
  std::cout << "params      " << std::setw(12) << report.params << "  (" << std::showpos
            << std::setprecision(1) << report.params_change_pct() << std::noshowpos << "% vs "
            << report.baseline_params << ")\n";
  for (std::size_t leaf = 0; leaf < report.path_macs.size(); ++leaf) {
    std::cout << "path " << leaf << " MACs " << std::setw(12) << report.path_macs[leaf] << "  ("
              << std::setprecision(2) << static_cast<double>(report.path_macs[leaf]) / 1e6 << "M)\n";
  }
  std::cout << "max path MACs " << report.max_path_macs() << "  (" << std::showpos << std::setprecision(1)
            << report.macs_change_pct() << std::noshowpos << "% vs " << report.baseline_macs << ")\n\n";
  std::cout << "dataset,arch,params,params_change_pct,macs,macs_change_pct\n"
            << o.dataset << ',' << to_string(v) << ',' << report.params << ',' << std::setprecision(2)
            << report.params_change_pct() << ',' << report.max_path_macs() << ',' << report.macs_change_pct()
            << '\n';
  return kOk;
}

int cmd_cluster(const Options& o) {
  if (o.checkpoint.empty()) throw UsageError("cluster needs --checkpoint of a trained baseline");
  if (!fs::exists(o.checkpoint)) throw DataError("checkpoint not found: " + o.checkpoint);
  if (o.depth < 1) throw UsageError("--depth must be at least 1");
  const Linkage linkage = o.linkage == "complete" ? Linkage::Complete : Linkage::Average;
  if (o.linkage != "average" && o.linkage != "complete") throw UsageError("--linkage is average or complete");

  auto net = load_checkpoint<float>(o.checkpoint);
  const auto data = prepare_data(o.dataset, data_dir(o));
  const auto result = cluster_classes(net, data.train, o.depth, o.per_class, o.seed, linkage);

  fs::create_directories(o.out);
  const fs::path out(o.out);
  {
    std::ofstream os(out / "confusion.csv");
    write_matrix_csv(os, result.confusion);
  }
  {
    std::ofstream os(out / "distance.csv");
    write_matrix_csv(os, build_distance_matrix(result.confusion));
  }
  {
    std::ofstream os(out / "labels.txt");
    write_labels(os, result.labels);
  }
  const auto names = class_names(o.dataset);
  {
    std::ofstream os(out / "clusters.txt");
    os << describe(result.tree, names);
  }
  write_config(out / "cluster_config.txt", {{"dataset", o.dataset},
                                            {"checkpoint", o.checkpoint},
                                            {"depth", std::to_string(o.depth)},
                                            {"per_class", std::to_string(o.per_class)},
                                            {"linkage", o.linkage},
                                            {"seed", std::to_string(o.seed)}});
  std::cout << describe(result.tree, names);
  for (const auto& n : result.tree.nodes) {
    if (n.is_leaf() && n.depth < o.depth) {
      std::cerr << "warning: cluster {";
      for (std::size_t i = 0; i < n.classes.size(); ++i) std::cerr << (i ? ", " : "") << names[static_cast<std::size_t>(n.classes[i])];
      std::cerr << "} stops at level " << n.depth << "; its remaining bits are padded with 0\n";
    }
  }
  std::cout << "labels written to " << (out / "labels.txt").string() << '\n';
  return kOk;
}

int cmd_train(const Options& o) {
  const auto v = variant_of(o.arch);
  const bool tree = v != Variant::Baseline;
  if (tree && !o.beta) throw UsageError("--beta is required for " + to_string(v));
  if (tree && o.labels.empty()) throw UsageError("--labels is required for " + to_string(v));
  if (o.init != "gaussian" && o.init != "he") throw UsageError("--init is gaussian or he");

  const auto arch = dataset_arch(o.dataset, o.width_divisor);
  std::optional<RoutingLabels> labels;
  if (tree) {
    std::ifstream is(o.labels);
    if (!is) throw DataError("cannot open labels file " + o.labels);
    labels = read_labels(is);
  }

  TrainConfig cfg;
  cfg.max_epochs = o.epochs;
  cfg.batch_size = o.batch_size;
  cfg.initial_lr = o.lr.value_or(o.dataset == "cifar10" ? 0.05 : 0.01);
  cfg.beta = tree ? *o.beta : 0.0;
  cfg.seed = o.seed;
  cfg.init = o.init == "he" ? InitScheme::He : InitScheme::Gaussian;
  cfg.init_stddev = o.init_stddev;
  cfg.augment = o.augment;

  const ConfigMap config{{"dataset", o.dataset},
                         {"arch", to_string(v)},
                         {"width_divisor", std::to_string(o.width_divisor)},
                         {"beta", num(cfg.beta)},
                         {"seed", std::to_string(o.seed)},
                         {"labels", o.labels},
                         {"epochs", std::to_string(o.epochs)},
                         {"lr", num(cfg.initial_lr)},
                         {"batch_size", std::to_string(o.batch_size)},
                         {"train_subset", std::to_string(o.train_subset)},
                         {"init", o.init},
                         {"init_stddev", num(o.init_stddev)},
                         {"augment", o.augment ? "true" : "false"}};

  const auto data = prepare_data(o.dataset, data_dir(o), o.train_subset, o.seed);
  TreeNetwork<float> net(arch, tree ? split_plan(v, arch) : SplitPlan{});

  fs::create_directories(o.out);
  const fs::path out(o.out);
  write_config(out / "config.txt", config);
  std::ofstream metrics(out / "metrics.csv");
  write_metrics_header(metrics, net.router_nodes().size());
  std::cout << "training " << to_string(v) << " on " << data.train.size() << " images, lr " << cfg.initial_lr
            << (tree ? ", beta " + num(cfg.beta) : std::string()) << '\n';
  const auto result = fit(net, data.train, data.test, labels ? &*labels : nullptr, cfg, [&](const EpochMetrics& m) {
    write_metrics_row(metrics, m);
    metrics.flush();
    std::cout << "epoch " << m.epoch << "  lr " << m.lr << "  loss " << std::fixed << std::setprecision(4)
              << m.train_loss << "  train_acc " << m.train_accuracy << "  test_acc " << m.heldout_accuracy;
    for (double r : m.routing_accuracy) std::cout << "  rm " << r;
    std::cout << std::defaultfloat << std::endl;
  });
  save_checkpoint(out / "model.dnet", net, config);
  std::cout << "finished after " << result.metrics.size() << " epochs"
            << (result.stopped_early ? " (early stop)" : "") << "; checkpoint "
            << (out / "model.dnet").string() << '\n';
  return kOk;
}

int cmd_eval(const Options& o) {
  if (o.checkpoint.empty()) throw UsageError("eval needs --checkpoint");
  if (!fs::exists(o.checkpoint)) throw DataError("checkpoint not found: " + o.checkpoint);
  ConfigMap saved;
  auto net = load_checkpoint<float>(o.checkpoint, &saved);
  const auto data = prepare_data(o.dataset, data_dir(o));
  if (net.arch().in_channels != data.test.channels || net.arch().height != data.test.height ||
      net.arch().width != data.test.width) {
    throw DataError("checkpoint architecture does not match " + o.dataset + " images");
  }
  std::optional<RoutingLabels> labels;
  if (!o.labels.empty()) {
    std::ifstream is(o.labels);
    if (!is) throw DataError("cannot open labels file " + o.labels);
    labels = read_labels(is);
  }
  const auto r = evaluate(net, data.test, labels ? &*labels : nullptr);
  std::cout << std::fixed << std::setprecision(4) << "accuracy " << r.accuracy << "\nloss " << r.loss << '\n';
  for (std::size_t k = 0; k < r.routing_accuracy.size(); ++k)
    std::cout << "routing_accuracy_" << k << ' ' << r.routing_accuracy[k] << '\n';
  const auto& names = class_names(o.dataset);
  std::cout << "leaf histogram (rows: leaves, columns: classes)\n" << std::setw(6) << "leaf";
  for (std::size_t c = 0; c < net.num_classes(); ++c) std::cout << std::setw(7) << c;
  std::cout << '\n';
  for (std::size_t leaf = 0; leaf < r.leaf_histogram.size(); ++leaf) {
    std::cout << std::setw(6) << leaf;
    for (auto count : r.leaf_histogram[leaf]) std::cout << std::setw(7) << count;
    std::cout << '\n';
  }
  std::cout << "classes:";
  for (std::size_t c = 0; c < names.size(); ++c) std::cout << ' ' << c << '=' << names[c];
  std::cout << '\n';
  return kOk;
}

// Expands `--config file` into `--key=value` arguments placed right after the
// subcommand, so flags given on the command line take precedence.
std::vector<std::string> expand_config(CLI::App& app, std::vector<std::string> args) {
  std::string path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + 2));
      break;
    }
    if (args[i].starts_with("--config=")) {
      path = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
  }
  if (path.empty() || args.size() < 2) return args;
  CLI::App* sub = app.get_subcommand_no_throw(args[1]);
  if (!sub) return args;
  std::ifstream is(path);
  if (!is) throw CLI::FileError::Missing(path);
  std::vector<std::string> extra;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CLI::ConversionError("config line '" + line + "' is not key=value");
    std::string key = line.substr(0, eq);
    std::replace(key.begin(), key.end(), '_', '-');
    if (sub->get_option_no_throw("--" + key) == nullptr) continue;
    extra.push_back("--" + key + "=" + line.substr(eq + 1));
  }
  args.insert(args.begin() + 2, extra.begin(), extra.end());
  return args;
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"DecisioNet: tree-structured networks with class-hierarchy routing"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  Options o;
  std::string config_path;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Flat key=value file; command-line flags override it");
    sub->add_option("--dataset", o.dataset, "fashionmnist or cifar10")->capture_default_str();
    sub->add_option("--data-dir", o.data_dir, "Dataset directory (default: $DN_DATA_DIR)");
    sub->add_option("--width-divisor", o.width_divisor, "Divide every conv width by this")->capture_default_str();
    sub->add_option("--seed", o.seed, "Random seed")->capture_default_str();
    sub->add_option("--out", o.out, "Output directory")->capture_default_str();
  };

  auto* cost = app.add_subcommand("cost", "Parameter and per-path MAC report");
  common(cost);
  cost->add_option("--arch", o.arch, "baseline | dn1-early | dn1-late | dn2 | dn2-slim")->capture_default_str();

  auto* cluster = app.add_subcommand("cluster", "Routing labels from a trained baseline's confusion");
  common(cluster);
  cluster->add_option("--checkpoint", o.checkpoint, "Trained baseline checkpoint");
  cluster->add_option("--depth", o.depth, "Routing levels")->capture_default_str();
  cluster->add_option("--per-class", o.per_class, "Training images per class for the confusion")->capture_default_str();
  cluster->add_option("--linkage", o.linkage, "average or complete")->capture_default_str();

  auto* train = app.add_subcommand("train", "Train a baseline or DecisioNet");
  common(train);
  train->add_option("--arch", o.arch, "baseline | dn1-early | dn1-late | dn2 | dn2-slim")->capture_default_str();
  train->add_option("--beta", o.beta, "Routing loss weight (required for DN variants)");
  train->add_option("--labels", o.labels, "Routing labels file (required for DN variants)");
  train->add_option("--epochs", o.epochs, "Maximum epochs")->capture_default_str();
  train->add_option("--lr", o.lr, "Initial learning rate (default 0.01 FashionMNIST, 0.05 CIFAR10)");
  train->add_option("--batch-size", o.batch_size, "Mini-batch size")->capture_default_str();
  train->add_option("--train-subset", o.train_subset, "Class-balanced training subset size (0 = all)")
      ->capture_default_str();
  train->add_option("--init", o.init, "gaussian or he")->capture_default_str();
  train->add_option("--init-stddev", o.init_stddev, "Stddev for gaussian init")->capture_default_str();
  train->add_flag("--augment", o.augment, "Random crop and horizontal flip");

  auto* eval = app.add_subcommand("eval", "Hard-routed evaluation on the test split");
  common(eval);
  eval->add_option("--checkpoint", o.checkpoint, "Model checkpoint");
  eval->add_option("--labels", o.labels, "Routing labels for routing accuracy");

  try {
    auto args = expand_config(app, std::vector<std::string>(argv, argv + argc));
    args.erase(args.begin());
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::FileError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*cost) return cmd_cost(o);
    if (*cluster) return cmd_cluster(o);
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
