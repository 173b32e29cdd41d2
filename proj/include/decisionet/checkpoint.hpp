#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "decisionet/tree_network.hpp"

namespace dnet {

// Layout:
//   DNCKPT 1
//   precision float32|float64
//   manifest <bytes>
//   <manifest text: "[arch]" section with the architecture spec, then
//    "[config]" section of key=value lines>
//   tensors <count>
//   then per tensor: "<name>\n" followed by its binary blob

using ConfigMap = std::map<std::string, std::string>;

template <typename T>
constexpr const char* precision_name() {
  return sizeof(T) == 8 ? "float64" : "float32";
}

inline std::string format_manifest(const ArchSpec& arch, const SplitPlan& plan, const ConfigMap& config) {
  std::ostringstream os;
  os << "[arch]\n" << format_arch(arch, plan) << "[config]\n";
  for (const auto& [k, v] : config) os << k << '=' << v << '\n';
  return os.str();
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const TreeNetwork<T>& net,
                     const std::vector<NamedParameter<T>>& params, const ConfigMap& config) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint " + path.string());
  const auto manifest = format_manifest(net.arch(), net.plan(), config);
  os << "DNCKPT 1\nprecision " << precision_name<T>() << "\nmanifest " << manifest.size() << '\n'
     << manifest << "tensors " << params.size() << '\n';
  for (const auto& p : params) {
    os << p.name << '\n';
    write_tensor(os, p.tensor);
  }
  if (!os) throw DataError("failed writing checkpoint " + path.string());
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const TreeNetwork<T>& net, const ConfigMap& config) {
  save_checkpoint(path, net, net.parameters(), config);
}

namespace detail {

inline std::string expect_line(std::istream& is, const std::string& prefix, const std::string& path) {
  std::string line;
  if (!std::getline(is, line) || line.rfind(prefix, 0) != 0) {
    throw DataError(path + ": malformed checkpoint (expected '" + prefix + "')");
  }
  return line.substr(prefix.size());
}

}  // namespace detail

/// Reads the manifest and tensor table, then rebuilds the network and loads
/// every parameter by name.
template <typename T>
TreeNetwork<T> load_checkpoint(const std::filesystem::path& path, ConfigMap* config_out = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  const auto where = path.string();
  detail::expect_line(is, "DNCKPT 1", where);
  const auto precision = detail::expect_line(is, "precision ", where);
  if (precision != precision_name<T>()) {
    throw DataError(where + ": checkpoint precision " + precision + ", expected " + precision_name<T>());
  }
  const auto bytes = std::stoull(detail::expect_line(is, "manifest ", where));
  std::string manifest(bytes, '\0');
  if (!is.read(manifest.data(), static_cast<std::streamsize>(bytes))) throw DataError(where + ": truncated manifest");

  const auto arch_pos = manifest.find("[arch]\n");
  const auto cfg_pos = manifest.find("[config]\n");
  if (arch_pos != 0 || cfg_pos == std::string::npos) throw DataError(where + ": malformed manifest");
  auto parsed = parse_arch(manifest.substr(7, cfg_pos - 7));
  ConfigMap config;
  std::istringstream cs(manifest.substr(cfg_pos + 9));
  for (std::string line; std::getline(cs, line);) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) config[line.substr(0, eq)] = line.substr(eq + 1);
  }

  TreeNetwork<T> net(parsed.arch, parsed.plan);
  auto params = net.parameters();
  const auto count = std::stoull(detail::expect_line(is, "tensors ", where));
  if (count != params.size()) {
    throw DataError(where + ": checkpoint holds " + std::to_string(count) + " tensors, architecture needs " +
                    std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < count; ++i) {
    std::string name;
    if (!std::getline(is, name)) throw DataError(where + ": truncated tensor table");
    auto loaded = read_tensor<T>(is);
    auto it = std::find_if(params.begin(), params.end(), [&](const auto& p) { return p.name == name; });
    if (it == params.end()) throw DataError(where + ": unexpected tensor '" + name + "'");
    if (it->tensor.shape() != loaded.shape()) {
      throw DataError(where + ": tensor '" + name + "' has shape " + to_string(loaded.shape()) +
                      ", architecture expects " + to_string(it->tensor.shape()));
    }
    std::copy(loaded.data().begin(), loaded.data().end(), it->tensor.mutable_data().begin());
  }
  if (config_out) *config_out = std::move(config);
  return net;
}

}  // namespace dnet
