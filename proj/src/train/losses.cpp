#include <cmath>
#include <numbers>

#include "msvm/train.hpp"

namespace msvm {

namespace {

struct ClassMap {
  std::size_t B, K, HW;
};

template <typename T>
ClassMap class_map(const Tensor<T>& x, std::span<const LabelMap> masks, const char* op) {
  if (x.rank() != 3 && x.rank() != 4) throw ShapeError(std::string(op) + ": expected [K,H,W] or [B,K,H,W], got " + shape_str(x.shape()));
  const bool batched = x.rank() == 4;
  ClassMap m{batched ? x.dim(0) : 1, x.dim(batched ? 1 : 0), x.dim(x.rank() - 2) * x.dim(x.rank() - 1)};
  if (masks.size() != m.B) throw ShapeError(std::string(op) + ": expected " + std::to_string(m.B) + " masks");
  for (const auto& mk : masks) {
    if (mk.H != x.dim(x.rank() - 2) || mk.W != x.dim(x.rank() - 1)) throw ShapeError(std::string(op) + ": mask extent mismatch");
    for (auto id : mk.ids)
      if (id >= m.K) throw ShapeError(std::string(op) + ": class id " + std::to_string(id) + " >= K");
  }
  return m;
}

}  // namespace

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& probs, std::span<const LabelMap> masks, T eps) {
  const auto m = class_map(probs, masks, "dice_loss");
  std::vector<double> inter(m.K, 0.0), denom(m.K, 0.0);
  const T* p = probs.ptr();
  for (std::size_t b = 0; b < m.B; ++b)
    for (std::size_t k = 0; k < m.K; ++k)
      for (std::size_t i = 0; i < m.HW; ++i) {
        const double pv = p[(b * m.K + k) * m.HW + i];
        const bool g = masks[b].ids[i] == k;
        denom[k] += pv + (g ? 1.0 : 0.0);
        if (g) inter[k] += pv;
      }
  double acc = 0;
  for (std::size_t k = 0; k < m.K; ++k) acc += (2 * inter[k] + eps) / (denom[k] + eps);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(1.0 - acc / double(m.K)));
  Tape<T>* tape = Tape<T>::active();
  if (!tape || !probs.requires_grad()) return out;
  std::vector<LabelMap> keep(masks.begin(), masks.end());
  return tape->record(out, "dice_loss", [probs, m, inter, denom, eps, keep = std::move(keep)](Tape<T>& t, std::span<const T> up) {
    auto g = t.grad_buffer(probs.node());
    for (std::size_t k = 0; k < m.K; ++k) {
      const double S = denom[k] + eps, num = 2 * inter[k] + eps;
      for (std::size_t b = 0; b < m.B; ++b)
        for (std::size_t i = 0; i < m.HW; ++i) {
          const double gk = keep[b].ids[i] == k ? 1.0 : 0.0;
          const double dr = (2 * gk * S - num) / (S * S);
          g[(b * m.K + k) * m.HW + i] += static_cast<T>(-double(up[0]) * dr / double(m.K));
        }
    }
  });
}

template <typename T>
Tensor<T> ce_loss(const Tensor<T>& logits, std::span<const LabelMap> masks) {
  const auto m = class_map(logits, masks, "ce_loss");
  const T* x = logits.ptr();
  const double n = double(m.B * m.HW);
  double total = 0;
  for (std::size_t b = 0; b < m.B; ++b)
    for (std::size_t i = 0; i < m.HW; ++i) {
      double mx = -INFINITY;
      for (std::size_t k = 0; k < m.K; ++k) mx = std::max(mx, double(x[(b * m.K + k) * m.HW + i]));
      double s = 0;
      for (std::size_t k = 0; k < m.K; ++k) s += std::exp(double(x[(b * m.K + k) * m.HW + i]) - mx);
      total += mx + std::log(s) - double(x[(b * m.K + masks[b].ids[i]) * m.HW + i]);
    }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / n));
  Tape<T>* tape = Tape<T>::active();
  if (!tape || !logits.requires_grad()) return out;
  std::vector<LabelMap> keep(masks.begin(), masks.end());
  return tape->record(out, "ce_loss", [logits, m, n, keep = std::move(keep)](Tape<T>& t, std::span<const T> up) {
    auto g = t.grad_buffer(logits.node());
    const T* x = logits.ptr();
    std::vector<double> e(m.K);
    for (std::size_t b = 0; b < m.B; ++b)
      for (std::size_t i = 0; i < m.HW; ++i) {
        double mx = -INFINITY;
        for (std::size_t k = 0; k < m.K; ++k) mx = std::max(mx, double(x[(b * m.K + k) * m.HW + i]));
        double s = 0;
        for (std::size_t k = 0; k < m.K; ++k) s += e[k] = std::exp(double(x[(b * m.K + k) * m.HW + i]) - mx);
        for (std::size_t k = 0; k < m.K; ++k) {
          const double onehot = keep[b].ids[i] == k ? 1.0 : 0.0;
          g[(b * m.K + k) * m.HW + i] += static_cast<T>(double(up[0]) * (e[k] / s - onehot) / n);
        }
      }
  });
}

template <typename T>
LossParts<T> total_loss(const Tensor<T>& logits, std::span<const LabelMap> masks, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("total_loss: alpha must lie in [0,1]");
  LossParts<T> parts;
  parts.dice = dice_loss(softmax(logits, logits.rank() == 4 ? 1 : 0), masks);
  parts.ce = ce_loss(logits, masks);
  parts.total = add(scale(parts.dice, static_cast<T>(alpha)), scale(parts.ce, static_cast<T>(1.0 - alpha)));
  return parts;
}

template <typename T>
void adamw_step(std::span<Parameter<T>* const> params, std::span<const Tensor<T>> grads, AdamWState<T>& state,
                double lr, const AdamWOptions& o) {
  if (grads.size() != params.size()) throw std::invalid_argument("adamw_step: one gradient per parameter required");
  if (state.m.empty()) {
    for (auto* p : params) {
      state.m.emplace_back(p->value.numel(), 0.0);
      state.v.emplace_back(p->value.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adamw_step: state does not match parameters");
  ++state.step;
  const double c1 = 1.0 - std::pow(o.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, double(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i]->value.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const bool has_grad = grads[i].numel() == w.size();
    for (std::size_t j = 0; j < w.size(); ++j) {
      double p = double(w[j]);
      p -= lr * o.weight_decay * p;
      const double g = has_grad ? double(grads[i][j]) : 0.0;
      m[j] = o.beta1 * m[j] + (1 - o.beta1) * g;
      v[j] = o.beta2 * v[j] + (1 - o.beta2) * g * g;
      p -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + o.eps);
      w[j] = static_cast<T>(p);
    }
  }
}

double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double lr0) {
  if (total_steps == 0) return lr0;
  const double t = double(std::min(step, total_steps)) / double(total_steps);
  return lr0 * (1.0 + std::cos(std::numbers::pi * t)) / 2.0;
}

#define MSVM_INSTANTIATE_LOSSES(T)                                                                            \
  template Tensor<T> dice_loss<T>(const Tensor<T>&, std::span<const LabelMap>, T);                            \
  template Tensor<T> ce_loss<T>(const Tensor<T>&, std::span<const LabelMap>);                                 \
  template LossParts<T> total_loss<T>(const Tensor<T>&, std::span<const LabelMap>, double);                   \
  template void adamw_step<T>(std::span<Parameter<T>* const>, std::span<const Tensor<T>>, AdamWState<T>&, double, \
                              const AdamWOptions&);

MSVM_INSTANTIATE_LOSSES(float)
MSVM_INSTANTIATE_LOSSES(double)

}  // namespace msvm
