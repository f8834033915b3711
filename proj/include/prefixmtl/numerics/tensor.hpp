// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with a reverse-mode tape.
//
// A Tensor is a shared handle: copies alias the same storage, which is what
// lets tape records refer to their inputs and outputs after the forward pass.
// Use clone() for an independent copy.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "prefixmtl/errors.hpp"

namespace prefixmtl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;

  explicit Tensor(Shape shape, Real fill = Real(0), bool requires_grad = false)
      : s_(std::make_shared<Storage>()) {
    s_->data.assign(shape_size(shape), fill);
    s_->shape = std::move(shape);
    s_->requires_grad = requires_grad;
  }

  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false) {
    if (shape_size(shape) != values.size()) {
      throw Error(ErrorCode::kShapeMismatch, "shape " + shape_string(shape) + " does not hold " +
                                                 std::to_string(values.size()) + " values");
    }
    Tensor t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = std::move(shape);
    t.s_->data = std::move(values);
    t.s_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(Real v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t size() const { return s_->data.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }

  /// Trailing dimension; the row length for a matrix.
  std::size_t cols() const { return s_->shape.empty() ? 1 : s_->shape.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }

  std::span<Real> data() { return s_->data; }
  std::span<const Real> data() const { return s_->data; }
  std::vector<Real>& values() { return s_->data; }
  const std::vector<Real>& values() const { return s_->data; }
  Real& operator[](std::size_t i) { return s_->data[i]; }
  Real operator[](std::size_t i) const { return s_->data[i]; }
  Real& at(std::size_t r, std::size_t c) { return s_->data[r * cols() + c]; }
  Real at(std::size_t r, std::size_t c) const { return s_->data[r * cols() + c]; }

  Real item() const {
    if (size() != 1) throw Error(ErrorCode::kShapeMismatch, "item() on " + shape_string(shape()));
    return s_->data[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool on) { s_->requires_grad = on; }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<Real> grad() {
    ensure_grad();
    return s_->grad;
  }
  std::span<const Real> grad() const { return s_->grad; }
  void ensure_grad() {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), Real(0));
  }
  void zero_grad() { std::fill(s_->grad.begin(), s_->grad.end(), Real(0)); }
  void drop_grad() { std::vector<Real>().swap(s_->grad); }

  Tensor clone() const {
    Tensor t = from(shape(), s_->data, requires_grad());
    return t;
  }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }
  const void* id() const { return s_.get(); }

 private:
  struct Storage {
    Shape shape;
    std::vector<Real> data;
    std::vector<Real> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

/// Ordered record of differentiable operations. Records are appended while
/// the forward pass runs, so every record's inputs are leaves or outputs of
/// earlier records.
template <typename Real>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  /// True when an op over these inputs must be recorded.
  template <typename... Ts>
  bool wants(const Ts&... inputs) const {
    return recording_ && (inputs.requires_grad() || ...);
  }

  void record(Tensor<Real> output, std::function<void()> backward) {
    output.set_requires_grad(true);
    records_.push_back({std::move(output), std::move(backward)});
  }

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  void clear() { records_.clear(); }

  /// Propagates d(loss)/d(.) into the grad buffers of every requires_grad
  /// tensor reachable on this tape, then clears the tape. Leaf grads
  /// accumulate across calls until zeroed.
  void backward(Tensor<Real> loss) {
    if (loss.size() != 1) {
      throw Error(ErrorCode::kNonScalarLoss, "backward() needs a scalar, got " + shape_string(loss.shape()));
    }
    if (loss.requires_grad()) {
      loss.ensure_grad();
      loss.grad()[0] += Real(1);
      for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
        if (it->output.has_grad()) it->backward();
        // intermediate buffers are dead once their record has run
        it->output.drop_grad();
      }
    }
    clear();
  }

 private:
  struct Record {
    Tensor<Real> output;
    std::function<void()> backward;
  };
  std::vector<Record> records_;
  bool recording_;
};

template <typename Real>
void backward(Tensor<Real> loss, Tape<Real>& tape) {
  tape.backward(std::move(loss));
}

template <typename Real>
bool all_finite(std::span<const Real> values) {
  return std::all_of(values.begin(), values.end(), [](Real v) { return std::isfinite(v); });
}

}  // namespace prefixmtl
