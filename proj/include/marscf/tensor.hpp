#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace marscf {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("tensor: nonpositive dimension");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

namespace detail {
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
};
}  // namespace detail

/// Dense row-major tensor of doubles with an optional gradient buffer.
/// Copies are shallow; the value buffer is shared.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : node_(std::make_shared<detail::TensorNode>()) {
    node_->shape = std::move(shape);
    node_->value.assign(static_cast<size_t>(numel(node_->shape)), fill);
    node_->requires_grad = requires_grad;
  }

  static Tensor from(Shape shape, std::vector<double> values) {
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode>();
    check(numel(shape) == static_cast<std::int64_t>(values.size()),
          "tensor: shape " + shape_str(shape) + " does not match value count");
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(values);
    return t;
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->value.size()); }

  double* data() { return node_->value.data(); }
  const double* data() const { return node_->value.data(); }
  std::vector<double>& values() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }

  double item() const {
    check(size() == 1, "tensor: item() on non-scalar " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  bool has_grad() const { return !node_->grad.empty(); }
  void ensure_grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
  }
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
  }
  double* grad() {
    ensure_grad();
    return node_->grad.data();
  }
  const std::vector<double>& grad_values() const { return node_->grad; }

  /// Same values, fresh storage, detached from any gradient path.
  Tensor detach() const {
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode>();
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    return t;
  }

  Tensor reshaped(Shape s) const {
    check(numel(s) == size(), "reshape: element count mismatch");
    Tensor t = *this;  // shares storage and grad
    // Shape lives on the node, so reshaping in place would alias; make a
    // view-node sharing the same vectors is not supported -- copy instead.
    Tensor out = detach();
    out.node_->shape = std::move(s);
    return out;
  }

  bool same_shape(const Tensor& o) const { return node_->shape == o.node_->shape; }

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

/// Reverse-mode tape. Operations append backward closures during the forward
/// pass; backward() replays them in reverse. One tape per logical thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape*& active() {
    thread_local Tape* t = nullptr;
    return t;
  }

  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }
  size_t num_ops() const { return ops_.size(); }

  void backward(Tensor loss) {
    check(loss.size() == 1, "backward: loss must be scalar, got " + shape_str(loss.shape()));
    loss.ensure_grad();
    loss.grad()[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  void clear() { ops_.clear(); }

 private:
  std::vector<std::function<void()>> ops_;
};

/// Activates a fresh tape for the enclosing scope.
struct TapeScope {
  Tape tape;
  TapeScope() : prev_(Tape::active()) { Tape::active() = &tape; }
  ~TapeScope() { Tape::active() = prev_; }

 private:
  Tape* prev_;
};

/// Disables recording for the enclosing scope.
struct NoGradScope {
  NoGradScope() : prev_(Tape::active()) { Tape::active() = nullptr; }
  ~NoGradScope() { Tape::active() = prev_; }

 private:
  Tape* prev_;
};

inline bool tracing(const Tensor& a) { return Tape::active() && a.requires_grad(); }
inline bool tracing(const Tensor& a, const Tensor& b) {
  return Tape::active() && (a.requires_grad() || b.requires_grad());
}

}  // namespace marscf
