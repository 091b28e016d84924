#include "msvm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace msvm {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  return os.str();
}

template <typename T>
Tensor<T>::Tensor() : Tensor(Shape{}) {}

template <typename T>
Tensor<T>::Tensor(Shape shape)
    : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(msvm::numel(shape_), T(0))) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(std::move(data))) {
  if (msvm::numel(shape_) != data_->size()) {
    throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match " +
                     std::to_string(data_->size()) + " elements");
  }
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  std::vector<T> d(msvm::numel(shape), value);
  return Tensor(std::move(shape), std::move(d));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{}, std::vector<T>{value});
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (data_.use_count() > 1) data_ = std::make_shared<std::vector<T>>(*data_);
  return {data_->data(), data_->size()};
}

template <typename T>
T Tensor<T>::item() const {
  if (data_->size() != 1) throw ShapeError("item: tensor has " + std::to_string(data_->size()) + " elements");
  return (*data_)[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  Tensor t = *this;
  t.node_ = -1;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (msvm::numel(shape) != numel()) {
    throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(shape));
  }
  Tensor t = detach();
  t.shape_ = std::move(shape);
  return t;
}

template <typename T>
void check_finite(std::span<const T> values, const char* op) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NonFiniteError(std::string("non-finite value in output of ") + op + " at index " + std::to_string(i));
    }
  }
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  T m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template class Tensor<float>;
template class Tensor<double>;
template void check_finite<float>(std::span<const float>, const char*);
template void check_finite<double>(std::span<const double>, const char*);
template float max_abs_diff<float>(const Tensor<float>&, const Tensor<float>&);
template double max_abs_diff<double>(const Tensor<double>&, const Tensor<double>&);

}  // namespace msvm
