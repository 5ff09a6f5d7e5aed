#pragma once

#include <cstdint>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dfr/core/kernels.hpp"

namespace dfr {

template <typename T>
struct TensorStorage {
  std::vector<int> shape;
  std::vector<T> values;
  std::vector<T> grad;          // allocated on first use, same length as values
  bool requires_grad = false;   // leaf parameter flag
  bool needs_grad = false;      // true if this tensor reaches a grad leaf
  std::string name;
};

inline std::string shape_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major tensor handle with shared storage; copies are cheap and
// alias the same buffer. Autograd metadata lives in the storage block.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  explicit Tensor(std::vector<int> shape, bool requires_grad = false)
      : s_(std::make_shared<TensorStorage<T>>()) {
    int64_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw std::invalid_argument("Tensor: non-positive dim in " + shape_string(shape));
      n *= d;
    }
    s_->shape = std::move(shape);
    s_->values.assign(static_cast<size_t>(n), T(0));
    s_->requires_grad = requires_grad;
    s_->needs_grad = requires_grad;
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, T value) {
    Tensor t(std::move(shape));
    for (auto& v : t.s_->values) v = value;
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<T> values, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    if (values.size() != t.s_->values.size())
      throw std::invalid_argument("Tensor::from: " + std::to_string(values.size()) +
                                  " values for shape " + shape_string(t.shape()));
    t.s_->values = std::move(values);
    return t;
  }

  bool defined() const { return static_cast<bool>(s_); }
  const std::vector<int>& shape() const { return s_->shape; }
  int rank() const { return static_cast<int>(s_->shape.size()); }
  int dim(int i) const { return s_->shape.at(static_cast<size_t>(i)); }
  int64_t numel() const { return static_cast<int64_t>(s_->values.size()); }

  T* data() { return s_->values.data(); }
  const T* data() const { return s_->values.data(); }
  std::vector<T>& values() { return s_->values; }
  const std::vector<T>& values() const { return s_->values; }
  T item() const {
    if (numel() != 1) throw std::runtime_error("Tensor::item: tensor has " + std::to_string(numel()) + " elements");
    return s_->values[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool v) {
    s_->requires_grad = v;
    if (v) s_->needs_grad = true;
  }
  bool needs_grad() const { return s_->needs_grad; }
  void mark_needs_grad() { s_->needs_grad = true; }

  bool grad_allocated() const { return !s_->grad.empty(); }
  void ensure_grad() {
    if (s_->grad.empty()) s_->grad.assign(s_->values.size(), T(0));
  }
  T* grad() {
    ensure_grad();
    return s_->grad.data();
  }
  const T* grad_data() const { return s_->grad.empty() ? nullptr : s_->grad.data(); }
  std::vector<T>& grad_values() {
    ensure_grad();
    return s_->grad;
  }
  void zero_grad() {
    for (auto& g : s_->grad) g = T(0);
  }

  const std::string& name() const { return s_->name; }
  void set_name(std::string n) { s_->name = std::move(n); }

  // Deep copy of values only (fresh storage, no grad, not a leaf).
  Tensor clone() const {
    Tensor t(s_->shape);
    t.s_->values = s_->values;
    return t;
  }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }
  std::shared_ptr<TensorStorage<T>> storage() const { return s_; }

 private:
  std::shared_ptr<TensorStorage<T>> s_;
};

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape();
}

}  // namespace dfr
