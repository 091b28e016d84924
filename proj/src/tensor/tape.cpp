#include "msvm/tape.hpp"

#include <algorithm>

namespace msvm {

template <typename T>
Parameter<T>& ParamStore<T>::add(std::string name, Tensor<T> value, bool trainable) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  index_.emplace(name, params_.size());
  params_.push_back(std::make_unique<Parameter<T>>(Parameter<T>{std::move(name), std::move(value), trainable}));
  return *params_.back();
}

template <typename T>
Parameter<T>* ParamStore<T>::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

template <typename T>
std::size_t ParamStore<T>::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p->trainable) n += p->value.numel();
  return n;
}

namespace {
template <typename T>
thread_local Tape<T>* g_active = nullptr;
}

template <typename T>
Tape<T>* Tape<T>::active() {
  return g_active<T>;
}

template <typename T>
int Tape<T>::new_node(const Shape& shape) {
  if (consumed_) throw TapeError("tape: recording into a tape that already ran backward");
  shapes_.push_back(shape);
  grads_.emplace_back();
  return static_cast<int>(shapes_.size()) - 1;
}

template <typename T>
Tensor<T> Tape<T>::leaf(const Tensor<T>& value) {
  Tensor<T> t = value.detach();
  t.node_ = new_node(t.shape());
  return t;
}

template <typename T>
Tensor<T> Tape<T>::watch(Parameter<T>& p) {
  auto it = watched_.find(&p);
  Tensor<T> t = p.value.detach();
  if (it != watched_.end()) {
    t.node_ = it->second;
    return t;
  }
  t.node_ = new_node(t.shape());
  watched_.emplace(&p, t.node_);
  return t;
}

template <typename T>
Tensor<T> Tape<T>::record(Tensor<T> out, const char* op, BackwardFn fn) {
  out.node_ = new_node(out.shape());
  records_.push_back(Record{out.node_, op, std::move(fn)});
  return out;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (consumed_) throw TapeError("backward: tape is stale (backward already ran on this recording)");
  if (loss.numel() != 1) throw TapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (loss.node() < 0 || loss.node() >= static_cast<int>(shapes_.size())) {
    throw TapeError("backward: loss was not recorded on this tape");
  }
  consumed_ = true;
  grad_buffer(loss.node())[0] = T(1);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (grads_[it->output].empty()) continue;
    it->fn(*this, upstream(it->output));
    // Intermediate grads are no longer needed once propagated.
    std::vector<T>().swap(grads_[it->output]);
  }
}

template <typename T>
Tensor<T> Tape<T>::grad(const Tensor<T>& leaf) const {
  if (leaf.node() < 0) throw TapeError("grad: tensor is not tracked");
  const auto& g = grads_.at(leaf.node());
  if (g.empty()) return Tensor<T>(shapes_[leaf.node()]);
  return Tensor<T>(shapes_[leaf.node()], g);
}

template <typename T>
Tensor<T> Tape<T>::grad(const Parameter<T>& p) const {
  auto it = watched_.find(&p);
  if (it == watched_.end()) return Tensor<T>(p.value.shape());
  const auto& g = grads_[it->second];
  if (g.empty()) return Tensor<T>(p.value.shape());
  return Tensor<T>(p.value.shape(), g);
}

template <typename T>
std::span<T> Tape<T>::grad_buffer(int node) {
  auto& g = grads_.at(node);
  if (g.empty()) g.assign(numel(shapes_[node]), T(0));
  return {g.data(), g.size()};
}

template <typename T>
std::span<const T> Tape<T>::upstream(int node) const {
  const auto& g = grads_.at(node);
  return {g.data(), g.size()};
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(g_active<T>) {
  g_active<T> = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  g_active<T> = previous_;
}

template <typename T>
Tensor<T> use(Parameter<T>& p) {
  auto* tape = Tape<T>::active();
  if (tape && p.trainable) return tape->watch(p);
  return p.value.detach();
}

template struct Parameter<float>;
template struct Parameter<double>;
template class ParamStore<float>;
template class ParamStore<double>;
template class Tape<float>;
template class Tape<double>;
template class TapeScope<float>;
template class TapeScope<double>;
template Tensor<float> use<float>(Parameter<float>&);
template Tensor<double> use<double>(Parameter<double>&);

}  // namespace msvm
