#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "msvm/tensor.hpp"

namespace msvm {

/// A named, optimizer-owned tensor. Buffers (e.g. batch-norm running
/// statistics) live in the same store but are never differentiated.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool trainable = true;
};

/// Owns parameters in registration order; the order defines checkpoint
/// layout and optimizer state indexing.
template <typename T>
class ParamStore {
 public:
  Parameter<T>& add(std::string name, Tensor<T> value, bool trainable = true);

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  Parameter<T>* find(const std::string& name);
  // Total element count of trainable parameters.
  std::size_t trainable_count() const;

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Reverse-mode tape. Ops append records in execution order, so the record
/// list is already topologically sorted. A tape supports exactly one
/// backward pass.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::span<const T> upstream)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Thread-local tape that ops record into, or nullptr.
  static Tape* active();

  Tensor<T> leaf(const Tensor<T>& value);
  // Leaf bound to `p`; repeated calls within one recording return the same node.
  Tensor<T> watch(Parameter<T>& p);

  // Attaches a new node to `out`. During backward `fn` receives grad(out)
  // and accumulates into the grad buffers of the inputs it closed over.
  Tensor<T> record(Tensor<T> out, const char* op, BackwardFn fn);

  void backward(const Tensor<T>& loss);

  // Gradient for a leaf; zeros if it was unreachable from the loss.
  Tensor<T> grad(const Tensor<T>& leaf) const;
  Tensor<T> grad(const Parameter<T>& p) const;

  // Gradient buffer of `node`, allocated zeroed on first touch.
  std::span<T> grad_buffer(int node);
  // Output gradient of a record; empty span if nothing flowed into it.
  std::span<const T> upstream(int node) const;

  std::size_t num_records() const { return records_.size(); }
  bool consumed() const { return consumed_; }

 private:
  template <typename U>
  friend class TapeScope;

  struct Record {
    int output;
    const char* op;
    BackwardFn fn;
  };

  int new_node(const Shape& shape);

  std::vector<Shape> shapes_;
  std::vector<std::vector<T>> grads_;
  std::vector<Record> records_;
  std::unordered_map<const Parameter<T>*, int> watched_;
  bool consumed_ = false;
};

/// Makes `tape` the active tape for the current thread until destruction.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

// Reads a parameter for use in a forward pass: watched on the active tape
// when it is trainable and a tape is recording, plain value otherwise.
template <typename T>
Tensor<T> use(Parameter<T>& p);

}  // namespace msvm
