#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "accvit/common.hpp"

namespace accvit {

// Dense shapes of rank 1..4. Feature maps are NCHW, token tensors are
// (batch, tokens, channels), matrices are (rows, cols).
class Shape {
 public:
  Shape() = default;

  Shape(std::initializer_list<std::int64_t> dims) { init(dims.begin(), dims.size()); }

  explicit Shape(const std::vector<std::int64_t>& dims) { init(dims.data(), dims.size()); }

  int rank() const { return rank_; }

  std::int64_t dim(int i) const {
    if (i < 0 || i >= rank_) throw DimensionError("Shape::dim: index " + std::to_string(i) + " out of range for rank " + std::to_string(rank_));
    return dims_[static_cast<std::size_t>(i)];
  }

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (int i = 0; i < rank_; ++i) n *= dims_[static_cast<std::size_t>(i)];
    return n;
  }

  bool operator==(const Shape& other) const {
    if (rank_ != other.rank_) return false;
    for (int i = 0; i < rank_; ++i)
      if (dims_[static_cast<std::size_t>(i)] != other.dims_[static_cast<std::size_t>(i)]) return false;
    return true;
  }
  bool operator!=(const Shape& other) const { return !(*this == other); }

  std::string str() const {
    std::ostringstream os;
    os << "(";
    for (int i = 0; i < rank_; ++i) os << (i ? ", " : "") << dims_[static_cast<std::size_t>(i)];
    os << ")";
    return os.str();
  }

 private:
  template <class It>
  void init(It first, std::size_t n) {
    if (n < 1 || n > 4) throw DimensionError("Shape: rank must be 1..4, got " + std::to_string(n));
    rank_ = static_cast<int>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::int64_t d = static_cast<std::int64_t>(first[i]);
      if (d < 1) throw DimensionError("Shape: dims must be positive, got " + std::to_string(d) + " at axis " + std::to_string(i));
      dims_[i] = d;
    }
  }

  std::array<std::int64_t, 4> dims_{};
  int rank_ = 0;
};

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  const void* tape = nullptr;  // tape that produced this tensor, if any
};

}  // namespace detail

// Value-style handle over shared storage. Copies alias the same buffer;
// operations never mutate their inputs, so aliasing is safe. Gradients attach
// to the storage, which is what ties optimizer state to parameter identity.
template <typename T>
class Tensor {
 public:
  using Impl = detail::TensorImpl<T>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{}) : impl_(std::make_shared<Impl>()) {
    impl_->shape = shape;
    impl_->value.assign(static_cast<std::size_t>(shape.numel()), fill);
  }

  Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<Impl>()) {
    if (static_cast<std::int64_t>(values.size()) != shape.numel())
      throw DimensionError("Tensor: got " + std::to_string(values.size()) + " values for shape " + shape.str());
    impl_->shape = shape;
    impl_->value = std::move(values);
  }

  static Tensor zeros(Shape shape) { return Tensor(shape, T{0}); }
  static Tensor full(Shape shape, T v) { return Tensor(shape, v); }

  static Tensor trunc_normal(Shape shape, double stddev, Rng& rng) {
    Tensor t(shape);
    for (auto& v : t.impl_->value) v = static_cast<T>(rng.trunc_normal(stddev));
    return t;
  }

  // Truncated normal scaled to the receptive fan-in, so activations keep
  // their magnitude through deep stacks at any width.
  static Tensor he_normal(Shape shape, std::int64_t fan_in, Rng& rng) {
    return trunc_normal(shape, std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
  }

  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng) {
    Tensor t(shape);
    for (auto& v : t.impl_->value) v = static_cast<T>(lo + (hi - lo) * rng.uniform());
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return impl_->shape.rank(); }
  std::int64_t dim(int i) const { return impl_->shape.dim(i); }
  std::int64_t numel() const { return impl_->shape.numel(); }

  std::span<const T> data() const { return impl_->value; }
  std::span<T> data_mut() { return impl_->value; }

  T at(std::int64_t i) const { return impl_->value[static_cast<std::size_t>(i)]; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  // Empty span when no gradient has been accumulated (treated as zeros).
  std::span<const T> grad() const { return impl_->grad; }

  T grad_at(std::int64_t i) const {
    return impl_->grad.empty() ? T{0} : impl_->grad[static_cast<std::size_t>(i)];
  }

  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T{0});
  }

  std::vector<T>& grad_buffer() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), T{0});
    return impl_->grad;
  }

  Impl* impl() const { return impl_.get(); }
  std::shared_ptr<Impl> impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

// Execution-ordered record of differentiable operations. Ops append a
// backward closure as they run; backward() replays them in exact reverse
// execution order, accumulating (summing) gradients into inputs. One tape
// records one forward/backward pass; recording is scoped and single-writer.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  class Scope {
   public:
    explicit Scope(Tape& tape) {
      if (slot() != nullptr) throw UsageError("Tape: another tape is already recording on this thread");
      slot() = &tape;
    }
    ~Scope() { slot() = nullptr; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;
  };

  static Tape* current() { return slot(); }

  template <class F>
  void record(detail::TensorImpl<T>* out, F&& backward_fn) {
    out->requires_grad = true;
    out->tape = this;
    nodes_.emplace_back(std::forward<F>(backward_fn));
  }

  std::size_t size() const { return nodes_.size(); }

  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) throw UsageError("Tape::backward: loss must be a defined scalar tensor");
    if (loss.impl()->tape != this) throw UsageError("Tape::backward: tensor is not on this tape");
    if (consumed_) throw UsageError("Tape::backward: tape already replayed");
    consumed_ = true;
    loss.impl()->grad.assign(1, T{1});
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  static Tape*& slot() {
    thread_local Tape* t = nullptr;
    return t;
  }

  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

namespace detail {

// True when an op executed now must record onto the active tape.
template <typename T>
inline bool taping(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::current() == nullptr) return false;
  for (const Tensor<T>* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

template <typename T>
inline void accumulate(TensorImpl<T>* impl, std::span<const T> delta) {
  if (impl->grad.empty()) impl->grad.assign(impl->value.size(), T{0});
  for (std::size_t i = 0; i < delta.size(); ++i) impl->grad[i] += delta[i];
}

}  // namespace detail

// Named parameter registry entry. Registries are built in a fixed
// construction order, which optimizers and counters rely on.
template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
bool has_nonfinite(const Tensor<T>& t) {
  for (const T v : t.data())
    if (!std::isfinite(static_cast<double>(v))) return true;
  return false;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("max_abs_diff: shapes " + a.shape().str() + " vs " + b.shape().str());
  double m = 0.0;
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < av.size(); ++i) m = std::max(m, std::abs(static_cast<double>(av[i]) - static_cast<double>(bv[i])));
  return m;
}

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.data().size_bytes()) == 0;
}

}  // namespace accvit
