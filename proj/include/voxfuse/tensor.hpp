#pragma once

// Dense N-d tensor with reverse-mode differentiation.
//
// A Tensor is a shape plus shared data/grad buffers; copies alias the same
// storage, and tensors are treated as immutable once produced by an op.
// Gradients live with the tensor: any tensor with requires_grad set always
// carries an allocated (possibly zero) grad buffer, so closures recorded on
// the tape share it by construction.
//
// A Tape is an ordered list of backward closures. Ops append nodes while a
// tape is active on the current thread (Tape::Scope); backward() replays the
// list in reverse. Nodes are appended in forward order, so the graph is
// acyclic by construction and reverse order is a valid topological order.
// A tape can run backward exactly once per recording; a second call throws.

#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "voxfuse/common.hpp"

namespace voxfuse {

inline void check_extents(const std::vector<int>& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
  for (int e : shape) {
    if (e < 1) {
      throw ShapeError("tensor extents must be positive, got " +
                       std::to_string(e));
    }
  }
}

inline std::int64_t shape_size(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int e : shape) n *= e;
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <Scalar T>
class Tape;

template <Scalar T>
class Tensor {
  // Copies of a Tensor share both the data buffer and this grad slot, so
  // enabling gradients through any handle is visible through every handle.
  struct GradSlot {
    std::vector<T> buf;
    bool active = false;
  };

 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape) {
    check_extents(shape);
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<T>>(shape_size(t.shape_), T(0));
    t.grad_ = std::make_shared<GradSlot>();
    return t;
  }

  static Tensor ones(std::vector<int> shape) { return full(std::move(shape), T(1)); }

  static Tensor full(std::vector<int> shape, T value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), value);
    return t;
  }

  // He-normal fill: stddev = sqrt(2 / fan_in) with fan_in = size / extent(0)
  // (input channels x receptive field for conv weights, input width for
  // fully connected weights). Deterministic under seed.
  static Tensor he_normal(std::vector<int> shape, std::uint64_t seed) {
    Tensor t = zeros(std::move(shape));
    const double fan_in =
        static_cast<double>(t.size()) / static_cast<double>(t.shape_[0]);
    const double sd = std::sqrt(2.0 / fan_in);
    Rng rng(seed);
    for (T& v : *t.data_) v = static_cast<T>(sd * rng.normal());
    return t;
  }

  static Tensor from_data(std::vector<int> shape, std::vector<T> data) {
    check_extents(shape);
    if (static_cast<std::int64_t>(data.size()) != shape_size(shape)) {
      throw ShapeError("from_data: buffer size does not match shape " +
                       shape_str(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<T>>(std::move(data));
    t.grad_ = std::make_shared<GradSlot>();
    return t;
  }

  static Tensor scalar(T v) { return from_data({1}, {v}); }

  bool defined() const { return static_cast<bool>(data_); }
  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int extent(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  std::int64_t size() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

  std::vector<T>& values() { return *data_; }
  const std::vector<T>& values() const { return *data_; }
  T* ptr() { return data_->data(); }
  const T* ptr() const { return data_->data(); }
  T item() const {
    if (size() != 1) throw ContractError("item(): tensor is not scalar");
    return (*data_)[0];
  }

  bool requires_grad() const { return grad_ && grad_->active; }

  Tensor& set_requires_grad(bool on) {
    if (!grad_) throw ContractError("set_requires_grad: undefined tensor");
    grad_->active = on;
    if (on && grad_->buf.empty()) grad_->buf.assign(data_->size(), T(0));
    return *this;
  }

  bool has_grad() const { return requires_grad(); }

  // The grad slot is shared across copies (like the data buffer), so it is
  // reachable for mutation through const handles; backward closures rely on
  // this to accumulate into captured tensors.
  std::vector<T>& grad() const {
    if (!requires_grad()) {
      throw ContractError("grad(): no gradient buffer allocated");
    }
    return grad_->buf;
  }
  T* grad_ptr() const { return grad_->buf.data(); }

  void zero_grad() {
    if (grad_) std::fill(grad_->buf.begin(), grad_->buf.end(), T(0));
  }

  // Returns a tensor aliasing this data under a new shape of equal size.
  // The result is a fresh node (no grad linkage); ops provide the
  // differentiable reshape.
  Tensor aliased_view(std::vector<int> shape) const {
    check_extents(shape);
    if (shape_size(shape) != size()) {
      throw ShapeError("view: size mismatch " + shape_str(shape_) + " -> " +
                       shape_str(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    t.grad_ = std::make_shared<GradSlot>();
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<T>>(*data_);
    t.grad_ = std::make_shared<GradSlot>();
    return t;
  }

  std::uint64_t tape_id() const { return tape_id_; }

 private:
  std::vector<int> shape_;
  std::shared_ptr<std::vector<T>> data_;
  std::shared_ptr<GradSlot> grad_;
  std::uint64_t tape_id_ = 0;

  friend class Tape<T>;
};

template <Scalar T>
class Tape {
 public:
  Tape() : id_(next_id().fetch_add(1) + 1) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // RAII activation on the current thread. Recording and backward must happen
  // on one thread (tapes are thread-confined).
  class Scope {
   public:
    explicit Scope(Tape& t) : prev_(current_) { current_ = &t; }
    ~Scope() { current_ = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  static Tape* current() { return current_; }
  static bool recording() { return current_ != nullptr; }

  void record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
  }

  void attach_output(Tensor<T>& t) { t.tape_id_ = id_; }

  std::size_t node_count() const { return nodes_.size(); }
  std::uint64_t id() const { return id_; }

  // Seeds d(loss)/d(loss) = 1 and replays recorded nodes in reverse, filling
  // the grad buffer of every requires_grad tensor reachable from the loss.
  // Repeat calls without re-recording are rejected.
  void backward(Tensor<T>& loss) {
    if (consumed_) {
      throw ContractError("backward: tape already consumed; re-record first");
    }
    if (loss.size() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " +
                          shape_str(loss.shape()));
    }
    if (loss.tape_id_ != id_) {
      throw ContractError("backward: loss was not produced under this tape");
    }
    consumed_ = true;
    loss.set_requires_grad(true);
    loss.grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  static std::atomic<std::uint64_t>& next_id() {
    static std::atomic<std::uint64_t> n{0};
    return n;
  }

  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
  std::uint64_t id_;
  static inline thread_local Tape* current_ = nullptr;
};

}  // namespace voxfuse
