#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace msvm {

using Shape = std::vector<std::size_t>;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised when a forward op produces NaN/Inf; the message names the op.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
class Tape;

/// Dense row-major tensor. The buffer is shared between copies and copied
/// on write, so tensors behave as values. A tensor that carries a tape node
/// id (`node() >= 0`) is tracked for differentiation.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor();
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<T> data);

  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_->size(); }
  static constexpr DType dtype() { return dtype_of<T>(); }

  std::span<const T> data() const { return {data_->data(), data_->size()}; }
  std::span<T> mutable_data();
  const T* ptr() const { return data_->data(); }

  T item() const;
  T operator[](std::size_t flat) const { return (*data_)[flat]; }

  int node() const { return node_; }
  bool requires_grad() const { return node_ >= 0; }

  // Same values, no tape node.
  Tensor detach() const;
  // Same buffer reinterpreted with another shape of equal element count.
  Tensor reshaped(Shape shape) const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>((*data_)[i]);
    return Tensor<U>(shape_, std::move(out));
  }

 private:
  friend class Tape<T>;

  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  int node_ = -1;
};

// Throws NonFiniteError naming `op` if any element is NaN or Inf.
template <typename T>
void check_finite(std::span<const T> values, const char* op);

// Largest absolute elementwise difference; shapes must match.
template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace msvm
