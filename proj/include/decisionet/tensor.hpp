#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <memory>
#include <new>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

namespace dnet {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Thrown when a computation produces NaN or infinity.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown for malformed or missing input files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 64-byte aligned allocation, so vectorized kernels see the same alignment
/// on every run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  // Sized construction leaves elements uninitialized; every op writes its output.
  template <typename U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

namespace detail {

inline thread_local std::uint64_t next_sequence = 0;
inline thread_local bool grad_enabled = true;

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;
  bool requires_grad = false;
  bool released = false;
  std::string op = "leaf";
  std::uint64_t seq = next_sequence++;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return op == "leaf"; }

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T{0});
    return grad;
  }
};

}  // namespace detail

/// Disables graph recording for its lifetime (evaluation, optimizer updates).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled; }

/// Dense row-major tensor with reverse-mode differentiation. Copies share the
/// underlying node; values produced by an operation are never modified.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() : Tensor(Shape{}, T{0}) {}

  explicit Tensor(Shape shape, T fill = T{0}, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    validate_shape(shape);
    node_->data.assign(dnet::numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    validate_shape(shape);
    if (dnet::numel(shape) != values.size()) {
      throw std::invalid_argument("tensor: shape " + dnet::to_string(shape) +
                                  " does not match " +
                                  std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->data.assign(values.begin(), values.end());
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  /// Direct write access, for parameters and freshly created inputs only.
  std::span<T> mutable_data() { return node_->data; }
  T operator[](std::size_t i) const { return node_->data[i]; }

  T item() const {
    if (numel() != 1) throw std::invalid_argument("item() on non-scalar tensor");
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T{0}); }
  void clear_grad() { node_->grad.clear(); }

  const std::string& op() const { return node_->op; }
  const NodePtr& node() const { return node_; }

  /// Copy of the values with no graph history.
  Tensor detach() const {
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = shape();
    node->data = node_->data;
    return Tensor(std::move(node));
  }

  /// Accumulates d(this)/d(t) into t.grad for every requires_grad tensor t
  /// reachable from this scalar. The graph is released afterwards.
  void backward() const;

 private:
  static void validate_shape(const Shape& shape) {
    for (auto d : shape) {
      if (d == 0) throw std::invalid_argument("tensor: zero-sized dimension");
    }
  }

  NodePtr node_;
};

namespace detail {

/// Builds the result node of an operation. The backward closure is attached
/// only when some input needs a gradient and recording is enabled.
template <typename T>
Tensor<T> make_result(std::string op, Shape shape, Buffer<T> values,
                      std::vector<std::shared_ptr<Node<T>>> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->op = std::move(op);
  node->shape = std::move(shape);
  node->data = std::move(values);
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in->requires_grad;
  if (needs && grad_enabled) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

}  // namespace detail

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                dnet::to_string(shape()));
  }
  if (node_->released) {
    throw std::logic_error(
        "backward: graph already consumed; run a new forward pass first");
  }
  if (!node_->requires_grad) return;

  std::vector<std::shared_ptr<detail::Node<T>>> order;
  std::unordered_set<detail::Node<T>*> seen;
  std::vector<std::shared_ptr<detail::Node<T>>> stack{node_};
  while (!stack.empty()) {
    auto n = std::move(stack.back());
    stack.pop_back();
    if (!seen.insert(n.get()).second) continue;
    if (n->released) {
      throw std::logic_error("backward: part of the graph was already consumed");
    }
    for (const auto& in : n->inputs) {
      if (in->requires_grad) stack.push_back(in);
    }
    order.push_back(std::move(n));
  }
  // Creation order is a topological order of the record.
  std::sort(order.begin(), order.end(),
            [](const auto& a, const auto& b) { return a->seq > b->seq; });

  for (auto& n : order) {
    if (!n->is_leaf()) n->grad.assign(n->data.size(), T{0});
    else n->grad_buffer();
  }
  node_->grad[0] += T{1};
  for (auto& n : order) {
    if (!n->backward_fn) continue;
    n->backward_fn(*n);
    n->backward_fn = nullptr;
    n->inputs.clear();
    n->released = true;
  }
}

// Serialization: rank and dims as 64-bit little-endian unsigned integers,
// followed by the values as little-endian IEEE-754.

namespace detail {

template <typename U>
void write_le(std::ostream& os, U value) {
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(std::begin(bytes), std::end(bytes));
  }
  os.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
  unsigned char bytes[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) {
    throw DataError("tensor blob truncated");
  }
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(std::begin(bytes), std::end(bytes));
  }
  U value;
  std::memcpy(&value, bytes, sizeof(U));
  return value;
}

}  // namespace detail

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  static_assert(std::is_floating_point_v<T>);
  detail::write_le<std::uint64_t>(os, t.rank());
  for (auto d : t.shape()) detail::write_le<std::uint64_t>(os, d);
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.numel() * sizeof(T)));
  } else {
    for (T v : t.data()) detail::write_le<T>(os, v);
  }
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  const auto rank = detail::read_le<std::uint64_t>(is);
  if (rank == 0 || rank > 8) throw DataError("tensor blob: bad rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) {
    d = detail::read_le<std::uint64_t>(is);
    if (d == 0 || d > (std::uint64_t{1} << 32)) throw DataError("tensor blob: bad dimension");
  }
  std::vector<T> values(dnet::numel(shape));
  if constexpr (std::endian::native == std::endian::little) {
    if (!is.read(reinterpret_cast<char*>(values.data()),
                 static_cast<std::streamsize>(values.size() * sizeof(T)))) {
      throw DataError("tensor blob truncated");
    }
  } else {
    for (auto& v : values) v = detail::read_le<T>(is);
  }
  return Tensor<T>(std::move(shape), std::move(values));
}

}  // namespace dnet
