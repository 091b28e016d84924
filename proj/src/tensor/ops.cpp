#include "msvm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace msvm {

namespace {

template <typename T>
Tape<T>* tracking(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return nullptr;
  for (const auto* x : inputs)
    if (x && x->requires_grad()) return tape;
  return nullptr;
}

template <typename T>
const Tensor<T>* opt_ptr(const OptTensor<T>& t) {
  return t ? &*t : nullptr;
}

template <typename T>
Tensor<T> finish(Shape shape, std::vector<T> data, const char* op) {
  check_finite<T>(data, op);
  return Tensor<T>(std::move(shape), std::move(data));
}

struct AxisView {
  std::size_t outer, dim, inner;
};

AxisView axis_view(const Shape& shape, int axis, const char* op) {
  const int rank = static_cast<int>(shape.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError(std::string(op) + ": axis out of range for shape " + shape_str(shape));
  AxisView v{1, shape[axis], 1};
  for (int i = 0; i < axis; ++i) v.outer *= shape[i];
  for (int i = axis + 1; i < rank; ++i) v.inner *= shape[i];
  return v;
}

struct Map4 {
  std::size_t B, C, H, W;
};

Map4 map4(const Shape& s, const char* op) {
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  throw ShapeError(std::string(op) + ": expected [C,H,W] or [B,C,H,W], got " + shape_str(s));
}

Shape with_map(const Shape& like, std::size_t C, std::size_t H, std::size_t W) {
  if (like.size() == 3) return {C, H, W};
  return {like[0], C, H, W};
}

}  // namespace

double gaussian_cdf(double x) {
  return 0.5 * std::erfc(-x / std::numbers::sqrt2);
}

double softplus_scalar(double x) {
  if (x > 20.0) return x;
  return std::log1p(std::exp(x));
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  auto out = finish(a.shape(), std::move(y), "add");
  auto* tape = tracking({&a, &b});
  if (!tape) return out;
  return tape->record(out, "add", [a, b](Tape<T>& t, std::span<const T> gy) {
    for (const auto* in : {&a, &b}) {
      if (!in->requires_grad()) continue;
      auto g = t.grad_buffer(in->node());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  auto out = finish(a.shape(), std::move(y), "mul");
  auto* tape = tracking({&a, &b});
  if (!tape) return out;
  return tape->record(out, "mul", [a, b](Tape<T>& t, std::span<const T> gy) {
    if (a.requires_grad()) {
      auto g = t.grad_buffer(a.node());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * b[i];
    }
    if (b.requires_grad()) {
      auto g = t.grad_buffer(b.node());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * a[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  std::vector<T> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * s;
  auto out = finish(x.shape(), std::move(y), "scale");
  auto* tape = tracking({&x});
  if (!tape) return out;
  return tape->record(out, "scale", [x, s](Tape<T>& t, std::span<const T> gy) {
    auto g = t.grad_buffer(x.node());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * s;
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (auto v : x.data()) acc += v;
  auto out = finish<T>(Shape{}, {acc}, "sum");
  auto* tape = tracking({&x});
  if (!tape) return out;
  return tape->record(out, "sum", [x](Tape<T>& t, std::span<const T> gy) {
    auto g = t.grad_buffer(x.node());
    for (auto& v : g) v += gy[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  auto out = x.reshaped(std::move(shape));
  auto* tape = tracking({&x});
  if (!tape) return out;
  return tape->record(out, "reshape", [x](Tape<T>& t, std::span<const T> gy) {
    auto g = t.grad_buffer(x.node());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
  });
}

// --------------------------------------------------------------------- linear

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& W, const OptArg<T>& b, int axis) {
  if (W.rank() != 2) throw ShapeError("linear: weight must be [Cin,Cout], got " + shape_str(W.shape()));
  const auto v = axis_view(x.shape(), axis, "linear");
  const std::size_t cin = W.dim(0), cout = W.dim(1);
  if (v.dim != cin) {
    throw ShapeError("linear: input extent " + std::to_string(v.dim) + " != weight rows " + std::to_string(cin));
  }
  if (b && (b->rank() != 1 || b->dim(0) != cout)) throw ShapeError("linear: bias must be [" + std::to_string(cout) + "]");

  Shape oshape = x.shape();
  oshape[axis < 0 ? axis + oshape.size() : axis] = cout;
  std::vector<T> y(v.outer * cout * v.inner, T(0));
  const T* xp = x.ptr();
  const T* wp = W.ptr();
  if (v.inner == 1) {
    for (std::size_t o = 0; o < v.outer; ++o) {
      T* yr = y.data() + o * cout;
      if (b)
        for (std::size_t j = 0; j < cout; ++j) yr[j] = (*b)[j];
      for (std::size_t i = 0; i < cin; ++i) {
        const T xi = xp[o * cin + i];
        const T* wr = wp + i * cout;
        for (std::size_t j = 0; j < cout; ++j) yr[j] += xi * wr[j];
      }
    }
  } else {
    const std::size_t P = v.inner;
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t j = 0; j < cout; ++j) {
        T* yr = y.data() + (o * cout + j) * P;
        const T bj = b ? (*b)[j] : T(0);
        for (std::size_t p = 0; p < P; ++p) yr[p] = bj;
      }
      for (std::size_t i = 0; i < cin; ++i) {
        const T* xr = xp + (o * cin + i) * P;
        for (std::size_t j = 0; j < cout; ++j) {
          const T w = wp[i * cout + j];
          T* yr = y.data() + (o * cout + j) * P;
          for (std::size_t p = 0; p < P; ++p) yr[p] += w * xr[p];
        }
      }
    }
  }
  auto out = finish(std::move(oshape), std::move(y), "linear");
  auto* tape = tracking({&x, &W, opt_ptr(b)});
  if (!tape) return out;
  return tape->record(out, "linear", [x, W, b, v, cin, cout](Tape<T>& t, std::span<const T> gy) {
    const std::size_t P = v.inner;
    const T* xp = x.ptr();
    const T* wp = W.ptr();
    if (x.requires_grad()) {
      auto gx = t.grad_buffer(x.node());
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t i = 0; i < cin; ++i) {
          T* gxr = gx.data() + (o * cin + i) * P;
          for (std::size_t j = 0; j < cout; ++j) {
            const T w = wp[i * cout + j];
            const T* gyr = gy.data() + (o * cout + j) * P;
            for (std::size_t p = 0; p < P; ++p) gxr[p] += w * gyr[p];
          }
        }
    }
    if (W.requires_grad()) {
      auto gw = t.grad_buffer(W.node());
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t i = 0; i < cin; ++i) {
          const T* xr = xp + (o * cin + i) * P;
          for (std::size_t j = 0; j < cout; ++j) {
            const T* gyr = gy.data() + (o * cout + j) * P;
            T acc = 0;
            for (std::size_t p = 0; p < P; ++p) acc += xr[p] * gyr[p];
            gw[i * cout + j] += acc;
          }
        }
    }
    if (b && b->requires_grad()) {
      auto gb = t.grad_buffer(b->node());
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t j = 0; j < cout; ++j) {
          const T* gyr = gy.data() + (o * cout + j) * P;
          T acc = 0;
          for (std::size_t p = 0; p < P; ++p) acc += gyr[p];
          gb[j] += acc;
        }
    }
  });
}

// --------------------------------------------------------------- convolutions

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& k, const OptArg<T>& bias) {
  const auto m = map4(x.shape(), "depthwise_conv2d");
  if (k.rank() != 3) throw ShapeError("depthwise_conv2d: kernel must be [C,kh,kw], got " + shape_str(k.shape()));
  if (k.dim(0) != m.C) throw ShapeError("depthwise_conv2d: kernel channels " + std::to_string(k.dim(0)) + " != input channels " + std::to_string(m.C));
  const std::size_t kh = k.dim(1), kw = k.dim(2);
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("depthwise_conv2d: kernel extents must be odd, got " + shape_str(k.shape()));
  if (bias && (bias->rank() != 1 || bias->dim(0) != m.C)) throw ShapeError("depthwise_conv2d: bias must be [C]");
  const long ph = static_cast<long>(kh / 2), pw = static_cast<long>(kw / 2);
  const long H = static_cast<long>(m.H), W = static_cast<long>(m.W);

  std::vector<T> y(x.numel(), T(0));
  const T* xp = x.ptr();
  const T* kp = k.ptr();
  for (std::size_t b = 0; b < m.B; ++b)
    for (std::size_t c = 0; c < m.C; ++c) {
      const T* xc = xp + (b * m.C + c) * m.H * m.W;
      T* yc = y.data() + (b * m.C + c) * m.H * m.W;
      if (bias)
        for (std::size_t i = 0; i < m.H * m.W; ++i) yc[i] = (*bias)[c];
      for (long i = 0; i < static_cast<long>(kh); ++i)
        for (long j = 0; j < static_cast<long>(kw); ++j) {
          const T kv = kp[(c * kh + i) * kw + j];
          const long dy = i - ph, dx = j - pw;
          const long w0 = std::max(0L, -dx), w1 = std::min(W, W - dx);
          for (long h = std::max(0L, -dy); h < std::min(H, H - dy); ++h) {
            const T* xr = xc + (h + dy) * W + dx;
            T* yr = yc + h * W;
            for (long w = w0; w < w1; ++w) yr[w] += kv * xr[w];
          }
        }
    }
  auto out = finish(x.shape(), std::move(y), "depthwise_conv2d");
  auto* tape = tracking({&x, &k, opt_ptr(bias)});
  if (!tape) return out;
  return tape->record(out, "depthwise_conv2d", [x, k, bias, m, kh, kw, ph, pw, H, W](Tape<T>& t, std::span<const T> gy) {
    const T* xp = x.ptr();
    const T* kp = k.ptr();
    T* gx = x.requires_grad() ? t.grad_buffer(x.node()).data() : nullptr;
    T* gk = k.requires_grad() ? t.grad_buffer(k.node()).data() : nullptr;
    for (std::size_t b = 0; b < m.B; ++b)
      for (std::size_t c = 0; c < m.C; ++c) {
        const std::size_t off = (b * m.C + c) * m.H * m.W;
        const T* gyc = gy.data() + off;
        for (long i = 0; i < static_cast<long>(kh); ++i)
          for (long j = 0; j < static_cast<long>(kw); ++j) {
            const std::size_t ki = (c * kh + i) * kw + j;
            const T kv = kp[ki];
            const long dy = i - ph, dx = j - pw;
            const long w0 = std::max(0L, -dx), w1 = std::min(W, W - dx);
            T kacc = 0;
            for (long h = std::max(0L, -dy); h < std::min(H, H - dy); ++h) {
              const T* gyr = gyc + h * W;
              const std::size_t xrow = off + (h + dy) * W + dx;
              if (gx)
                for (long w = w0; w < w1; ++w) gx[xrow + w] += kv * gyr[w];
              if (gk)
                for (long w = w0; w < w1; ++w) kacc += xp[xrow + w] * gyr[w];
            }
            if (gk) gk[ki] += kacc;
          }
      }
    if (bias && bias->requires_grad()) {
      auto gb = t.grad_buffer(bias->node());
      for (std::size_t b = 0; b < m.B; ++b)
        for (std::size_t c = 0; c < m.C; ++c) {
          const T* gyc = gy.data() + (b * m.C + c) * m.H * m.W;
          T acc = 0;
          for (std::size_t i = 0; i < m.H * m.W; ++i) acc += gyc[i];
          gb[c] += acc;
        }
    }
  });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& k, const OptArg<T>& bias) {
  const auto m = map4(x.shape(), "conv2d");
  if (k.rank() != 4 || k.dim(1) != m.C) {
    throw ShapeError("conv2d: kernel must be [Cout," + std::to_string(m.C) + ",kh,kw], got " + shape_str(k.shape()));
  }
  const std::size_t cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d: kernel extents must be odd");
  if (bias && (bias->rank() != 1 || bias->dim(0) != cout)) throw ShapeError("conv2d: bias must be [Cout]");
  const long ph = static_cast<long>(kh / 2), pw = static_cast<long>(kw / 2);
  const long H = static_cast<long>(m.H), W = static_cast<long>(m.W);
  const std::size_t HW = m.H * m.W;

  std::vector<T> y(m.B * cout * HW, T(0));
  const T* xp = x.ptr();
  const T* kp = k.ptr();
  for (std::size_t b = 0; b < m.B; ++b)
    for (std::size_t o = 0; o < cout; ++o) {
      T* yc = y.data() + (b * cout + o) * HW;
      if (bias)
        for (std::size_t i = 0; i < HW; ++i) yc[i] = (*bias)[o];
      for (std::size_t ci = 0; ci < m.C; ++ci) {
        const T* xc = xp + (b * m.C + ci) * HW;
        for (long i = 0; i < static_cast<long>(kh); ++i)
          for (long j = 0; j < static_cast<long>(kw); ++j) {
            const T kv = kp[((o * m.C + ci) * kh + i) * kw + j];
            const long dy = i - ph, dx = j - pw;
            const long w0 = std::max(0L, -dx), w1 = std::min(W, W - dx);
            for (long h = std::max(0L, -dy); h < std::min(H, H - dy); ++h) {
              const T* xr = xc + (h + dy) * W + dx;
              T* yr = yc + h * W;
              for (long w = w0; w < w1; ++w) yr[w] += kv * xr[w];
            }
          }
      }
    }
  auto out = finish(with_map(x.shape(), cout, m.H, m.W), std::move(y), "conv2d");
  auto* tape = tracking({&x, &k, opt_ptr(bias)});
  if (!tape) return out;
  return tape->record(out, "conv2d", [x, k, bias, m, cout, kh, kw, ph, pw, H, W, HW](Tape<T>& t, std::span<const T> gy) {
    const T* xp = x.ptr();
    const T* kp = k.ptr();
    T* gx = x.requires_grad() ? t.grad_buffer(x.node()).data() : nullptr;
    T* gk = k.requires_grad() ? t.grad_buffer(k.node()).data() : nullptr;
    for (std::size_t b = 0; b < m.B; ++b)
      for (std::size_t o = 0; o < cout; ++o) {
        const T* gyc = gy.data() + (b * cout + o) * HW;
        for (std::size_t ci = 0; ci < m.C; ++ci) {
          const std::size_t xoff = (b * m.C + ci) * HW;
          for (long i = 0; i < static_cast<long>(kh); ++i)
            for (long j = 0; j < static_cast<long>(kw); ++j) {
              const std::size_t ki = ((o * m.C + ci) * kh + i) * kw + j;
              const T kv = kp[ki];
              const long dy = i - ph, dx = j - pw;
              const long w0 = std::max(0L, -dx), w1 = std::min(W, W - dx);
              T kacc = 0;
              for (long h = std::max(0L, -dy); h < std::min(H, H - dy); ++h) {
                const T* gyr = gyc + h * W;
                const std::size_t xrow = xoff + (h + dy) * W + dx;
                if (gx)
                  for (long w = w0; w < w1; ++w) gx[xrow + w] += kv * gyr[w];
                if (gk)
                  for (long w = w0; w < w1; ++w) kacc += xp[xrow + w] * gyr[w];
              }
              if (gk) gk[ki] += kacc;
            }
        }
      }
    if (bias && bias->requires_grad()) {
      auto gb = t.grad_buffer(bias->node());
      for (std::size_t b = 0; b < m.B; ++b)
        for (std::size_t o = 0; o < cout; ++o) {
          const T* gyc = gy.data() + (b * cout + o) * HW;
          T acc = 0;
          for (std::size_t i = 0; i < HW; ++i) acc += gyc[i];
          gb[o] += acc;
        }
    }
  });
}

template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& b) {
  const auto m = map4(x.shape(), "add_channel_bias");
  if (b.rank() != 1 || b.dim(0) != m.C) throw ShapeError("add_channel_bias: bias must be [C]");
  const std::size_t HW = m.H * m.W;
  std::vector<T> y(x.numel());
  for (std::size_t bc = 0; bc < m.B * m.C; ++bc)
    for (std::size_t i = 0; i < HW; ++i) y[bc * HW + i] = x[bc * HW + i] + b[bc % m.C];
  auto out = finish(x.shape(), std::move(y), "add_channel_bias");
  auto* tape = tracking({&x, &b});
  if (!tape) return out;
  return tape->record(out, "add_channel_bias", [x, b, m, HW](Tape<T>& t, std::span<const T> gy) {
    if (x.requires_grad()) {
      auto gx = t.grad_buffer(x.node());
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
    }
    if (b.requires_grad()) {
      auto gb = t.grad_buffer(b.node());
      for (std::size_t bc = 0; bc < m.B * m.C; ++bc)
        for (std::size_t i = 0; i < HW; ++i) gb[bc % m.C] += gy[bc * HW + i];
    }
  });
}

// -------------------------------------------------------------- normalization

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps, int axis) {
  const auto v = axis_view(x.shape(), axis, "layer_norm");
  const std::size_t C = v.dim, P = v.inner;
  if (C == 0) throw ShapeError("layer_norm: normalized extent is 0");
  if (gamma.numel() != C || beta.numel() != C) throw ShapeError("layer_norm: gamma/beta must have " + std::to_string(C) + " elements");

  std::vector<T> y(x.numel());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(v.outer * P);
  std::vector<T> mu(P), var(P);
  const T* xp = x.ptr();
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::fill(mu.begin(), mu.end(), T(0));
    std::fill(var.begin(), var.end(), T(0));
    const std::size_t base = o * C * P;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) mu[p] += xp[base + c * P + p];
    for (std::size_t p = 0; p < P; ++p) mu[p] /= static_cast<T>(C);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) {
        const T d = xp[base + c * P + p] - mu[p];
        var[p] += d * d;
      }
    for (std::size_t p = 0; p < P; ++p) (*rstd)[o * P + p] = T(1) / std::sqrt(var[p] / static_cast<T>(C) + eps);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) {
        const std::size_t i = base + c * P + p;
        const T xh = (xp[i] - mu[p]) * (*rstd)[o * P + p];
        (*xhat)[i] = xh;
        y[i] = xh * gamma[c] + beta[c];
      }
  }
  auto out = finish(x.shape(), std::move(y), "layer_norm");
  auto* tape = tracking({&x, &gamma, &beta});
  if (!tape) return out;
  return tape->record(out, "layer_norm", [x, gamma, beta, v, xhat, rstd](Tape<T>& t, std::span<const T> gy) {
    const std::size_t C = v.dim, P = v.inner;
    const auto& xh = *xhat;
    if (gamma.requires_grad() || beta.requires_grad()) {
      T* gg = gamma.requires_grad() ? t.grad_buffer(gamma.node()).data() : nullptr;
      T* gb = beta.requires_grad() ? t.grad_buffer(beta.node()).data() : nullptr;
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t p = 0; p < P; ++p) {
            const std::size_t i = (o * C + c) * P + p;
            if (gg) gg[c] += gy[i] * xh[i];
            if (gb) gb[c] += gy[i];
          }
    }
    if (!x.requires_grad()) return;
    auto gx = t.grad_buffer(x.node());
    std::vector<T> m1(P), m2(P);
    for (std::size_t o = 0; o < v.outer; ++o) {
      std::fill(m1.begin(), m1.end(), T(0));
      std::fill(m2.begin(), m2.end(), T(0));
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p) {
          const std::size_t i = (o * C + c) * P + p;
          const T g = gy[i] * gamma[c];
          m1[p] += g;
          m2[p] += g * xh[i];
        }
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p) {
          const std::size_t i = (o * C + c) * P + p;
          const T g = gy[i] * gamma[c];
          gx[i] += (*rstd)[o * P + p] * (g - m1[p] / static_cast<T>(C) - xh[i] * m2[p] / static_cast<T>(C));
        }
    }
  });
}

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormRunning<T> running,
                       Mode mode, T momentum, T eps) {
  const auto m = map4(x.shape(), "batch_norm2d");
  const std::size_t HW = m.H * m.W, n = m.B * HW;
  if (gamma.numel() != m.C || beta.numel() != m.C) throw ShapeError("batch_norm2d: gamma/beta must be [C]");
  if (running.mean.numel() != m.C || running.var.numel() != m.C) throw ShapeError("batch_norm2d: running stats must be [C]");

  std::vector<T> mu(m.C), rstd(m.C);
  const T* xp = x.ptr();
  if (mode == Mode::train) {
    if (n < 2) throw ShapeError("batch_norm2d: train mode needs B*H*W >= 2, got " + std::to_string(n));
    auto rm = running.mean.mutable_data();
    auto rv = running.var.mutable_data();
    for (std::size_t c = 0; c < m.C; ++c) {
      T s = 0;
      for (std::size_t b = 0; b < m.B; ++b)
        for (std::size_t i = 0; i < HW; ++i) s += xp[(b * m.C + c) * HW + i];
      mu[c] = s / static_cast<T>(n);
      T ss = 0;
      for (std::size_t b = 0; b < m.B; ++b)
        for (std::size_t i = 0; i < HW; ++i) {
          const T d = xp[(b * m.C + c) * HW + i] - mu[c];
          ss += d * d;
        }
      const T var = ss / static_cast<T>(n);
      rstd[c] = T(1) / std::sqrt(var + eps);
      if (momentum != T(0)) {
        rm[c] = (T(1) - momentum) * rm[c] + momentum * mu[c];
        rv[c] = (T(1) - momentum) * rv[c] + momentum * ss / static_cast<T>(n - 1);
      }
    }
    running.count.mutable_data()[0] += T(1);
  } else {
    if (running.count.numel() != 1 || running.count[0] <= T(0)) {
      throw ConfigError("batch_norm2d: eval mode with uninitialized running statistics (no train-mode step has run)");
    }
    for (std::size_t c = 0; c < m.C; ++c) {
      mu[c] = running.mean[c];
      rstd[c] = T(1) / std::sqrt(running.var[c] + eps);
    }
  }

  std::vector<T> y(x.numel());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  for (std::size_t b = 0; b < m.B; ++b)
    for (std::size_t c = 0; c < m.C; ++c)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t k = (b * m.C + c) * HW + i;
        (*xhat)[k] = (xp[k] - mu[c]) * rstd[c];
        y[k] = (*xhat)[k] * gamma[c] + beta[c];
      }
  auto out = finish(x.shape(), std::move(y), "batch_norm2d");
  auto* tape = tracking({&x, &gamma, &beta});
  if (!tape) return out;
  return tape->record(out, "batch_norm2d", [x, gamma, beta, m, HW, n, xhat, rstd, mode](Tape<T>& t, std::span<const T> gy) {
    const auto& xh = *xhat;
    T* gg = gamma.requires_grad() ? t.grad_buffer(gamma.node()).data() : nullptr;
    T* gb = beta.requires_grad() ? t.grad_buffer(beta.node()).data() : nullptr;
    T* gx = x.requires_grad() ? t.grad_buffer(x.node()).data() : nullptr;
    for (std::size_t c = 0; c < m.C; ++c) {
      T s1 = 0, s2 = 0;
      for (std::size_t b = 0; b < m.B; ++b)
        for (std::size_t i = 0; i < HW; ++i) {
          const std::size_t k = (b * m.C + c) * HW + i;
          s1 += gy[k];
          s2 += gy[k] * xh[k];
        }
      if (gg) gg[c] += s2;
      if (gb) gb[c] += s1;
      if (!gx) continue;
      const T g = gamma[c] * rstd[c];
      const T inv_n = T(1) / static_cast<T>(n);
      for (std::size_t b = 0; b < m.B; ++b)
        for (std::size_t i = 0; i < HW; ++i) {
          const std::size_t k = (b * m.C + c) * HW + i;
          if (mode == Mode::train) {
            gx[k] += g * (gy[k] - s1 * inv_n - xh[k] * s2 * inv_n);
          } else {
            gx[k] += g * gy[k];
          }
        }
    }
  });
}

// ---------------------------------------------------------------- activations

template <typename T>
Tensor<T> activation(Activation kind, const Tensor<T>& x) {
  std::vector<T> y(x.numel());
  const char* name = kind == Activation::silu ? "silu" : kind == Activation::gelu ? "gelu" : "relu";
  for (std::size_t i = 0; i < y.size(); ++i) {
    const T v = x[i];
    switch (kind) {
      case Activation::silu: y[i] = v / (T(1) + std::exp(-v)); break;
      case Activation::gelu: y[i] = v * static_cast<T>(gaussian_cdf(v)); break;
      case Activation::relu: y[i] = v > T(0) ? v : T(0); break;
    }
  }
  auto out = finish(x.shape(), std::move(y), name);
  auto* tape = tracking({&x});
  if (!tape) return out;
  return tape->record(out, name, [x, kind](Tape<T>& t, std::span<const T> gy) {
    auto g = t.grad_buffer(x.node());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = x[i];
      T d;
      switch (kind) {
        case Activation::silu: {
          const T s = T(1) / (T(1) + std::exp(-v));
          d = s * (T(1) + v * (T(1) - s));
          break;
        }
        case Activation::gelu: {
          const T pdf = std::exp(-v * v / T(2)) / std::sqrt(T(2) * std::numbers::pi_v<T>);
          d = static_cast<T>(gaussian_cdf(v)) + v * pdf;
          break;
        }
        default: d = v > T(0) ? T(1) : T(0);
      }
      g[i] += gy[i] * d;
    }
  });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  std::vector<T> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<T>(softplus_scalar(x[i]));
  auto out = finish(x.shape(), std::move(y), "softplus");
  auto* tape = tracking({&x});
  if (!tape) return out;
  return tape->record(out, "softplus", [x](Tape<T>& t, std::span<const T> gy) {
    auto g = t.grad_buffer(x.node());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] / (T(1) + std::exp(-x[i]));
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const auto v = axis_view(x.shape(), axis, "softmax");
  const std::size_t K = v.dim, P = v.inner;
  if (K == 0) throw ShapeError("softmax: empty class extent");
  std::vector<T> y(x.numel());
  std::vector<T> mx(P), den(P);
  for (std::size_t o = 0; o < v.outer; ++o) {
    const std::size_t base = o * K * P;
    std::fill(mx.begin(), mx.end(), -std::numeric_limits<T>::infinity());
    std::fill(den.begin(), den.end(), T(0));
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t p = 0; p < P; ++p) mx[p] = std::max(mx[p], x[base + k * P + p]);
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t p = 0; p < P; ++p) {
        const T e = std::exp(x[base + k * P + p] - mx[p]);
        y[base + k * P + p] = e;
        den[p] += e;
      }
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t p = 0; p < P; ++p) y[base + k * P + p] /= den[p];
  }
  auto out = finish(x.shape(), std::move(y), "softmax");
  auto* tape = tracking({&x});
  if (!tape) return out;
  return tape->record(out, "softmax", [x, v, out](Tape<T>& t, std::span<const T> gy) {
    const std::size_t K = v.dim, P = v.inner;
    auto g = t.grad_buffer(x.node());
    std::vector<T> dot(P);
    for (std::size_t o = 0; o < v.outer; ++o) {
      const std::size_t base = o * K * P;
      std::fill(dot.begin(), dot.end(), T(0));
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t p = 0; p < P; ++p) dot[p] += gy[base + k * P + p] * out[base + k * P + p];
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t p = 0; p < P; ++p) {
          const std::size_t i = base + k * P + p;
          g[i] += out[i] * (gy[i] - dot[p]);
        }
    }
  });
}

// ------------------------------------------------------------ rearrangements

template <typename T>
Tensor<T> index_gather(const Tensor<T>& x, Shape out_shape, std::shared_ptr<const std::vector<std::uint32_t>> index,
                       const char* op) {
  if (index->size() != msvm::numel(out_shape)) throw ShapeError(std::string(op) + ": index size mismatch");
  std::vector<T> y(index->size());
  const T* xp = x.ptr();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xp[(*index)[i]];
  Tensor<T> out(std::move(out_shape), std::move(y));
  auto* tape = tracking({&x});
  if (!tape) return out;
  return tape->record(out, op, [x, index](Tape<T>& t, std::span<const T> gy) {
    auto g = t.grad_buffer(x.node());
    for (std::size_t i = 0; i < gy.size(); ++i) g[(*index)[i]] += gy[i];
  });
}

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t r) {
  const auto m = map4(x.shape(), "pixel_shuffle");
  if (r == 0 || m.C % (r * r) != 0) {
    throw ShapeError("pixel_shuffle: channels " + std::to_string(m.C) + " not divisible by " + std::to_string(r * r));
  }
  const std::size_t C = m.C / (r * r), OH = m.H * r, OW = m.W * r;
  auto idx = std::make_shared<std::vector<std::uint32_t>>(x.numel());
  std::size_t o = 0;
  for (std::size_t b = 0; b < m.B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t oh = 0; oh < OH; ++oh)
        for (std::size_t ow = 0; ow < OW; ++ow) {
          const std::size_t g = (oh % r) * r + (ow % r);
          const std::size_t ic = c * r * r + g;
          (*idx)[o++] = static_cast<std::uint32_t>(((b * m.C + ic) * m.H + oh / r) * m.W + ow / r);
        }
  return index_gather(x, with_map(x.shape(), C, OH, OW), idx, "pixel_shuffle");
}

template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t r) {
  const auto m = map4(x.shape(), "pixel_unshuffle");
  if (r == 0 || m.H % r != 0 || m.W % r != 0) {
    throw ShapeError("pixel_unshuffle: spatial extents " + std::to_string(m.H) + "x" + std::to_string(m.W) +
                     " not divisible by " + std::to_string(r));
  }
  const std::size_t OC = m.C * r * r, OH = m.H / r, OW = m.W / r;
  auto idx = std::make_shared<std::vector<std::uint32_t>>(x.numel());
  std::size_t o = 0;
  for (std::size_t b = 0; b < m.B; ++b)
    for (std::size_t oc = 0; oc < OC; ++oc)
      for (std::size_t h = 0; h < OH; ++h)
        for (std::size_t w = 0; w < OW; ++w) {
          const std::size_t c = oc / (r * r), g = oc % (r * r);
          const std::size_t ih = h * r + g / r, iw = w * r + g % r;
          (*idx)[o++] = static_cast<std::uint32_t>(((b * m.C + c) * m.H + ih) * m.W + iw);
        }
  return index_gather(x, with_map(x.shape(), OC, OH, OW), idx, "pixel_unshuffle");
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  const auto m = map4(x.shape(), "upsample_nearest2x");
  const std::size_t OH = m.H * 2, OW = m.W * 2;
  auto idx = std::make_shared<std::vector<std::uint32_t>>(m.B * m.C * OH * OW);
  std::size_t o = 0;
  for (std::size_t bc = 0; bc < m.B * m.C; ++bc)
    for (std::size_t h = 0; h < OH; ++h)
      for (std::size_t w = 0; w < OW; ++w) (*idx)[o++] = static_cast<std::uint32_t>((bc * m.H + h / 2) * m.W + w / 2);
  return index_gather(x, with_map(x.shape(), m.C, OH, OW), idx, "upsample_nearest2x");
}

#define MSVM_INSTANTIATE_OPS(T)                                                                                      \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                                     \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                                     \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                                                  \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                                       \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                                      \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                                            \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const OptArg<T>&, int);                        \
  template Tensor<T> depthwise_conv2d<T>(const Tensor<T>&, const Tensor<T>&, const OptArg<T>&);                   \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const OptArg<T>&);                             \
  template Tensor<T> add_channel_bias<T>(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T, int);                    \
  template Tensor<T> batch_norm2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormRunning<T>, Mode, \
                                     T, T);                                                                          \
  template Tensor<T> activation<T>(Activation, const Tensor<T>&);                                                    \
  template Tensor<T> softplus<T>(const Tensor<T>&);                                                                  \
  template Tensor<T> softmax<T>(const Tensor<T>&, int);                                                              \
  template Tensor<T> pixel_shuffle<T>(const Tensor<T>&, std::size_t);                                                \
  template Tensor<T> pixel_unshuffle<T>(const Tensor<T>&, std::size_t);                                              \
  template Tensor<T> upsample_nearest2x<T>(const Tensor<T>&);                                                        \
  template Tensor<T> index_gather<T>(const Tensor<T>&, Shape, std::shared_ptr<const std::vector<std::uint32_t>>,     \
                                     const char*);

MSVM_INSTANTIATE_OPS(float)
MSVM_INSTANTIATE_OPS(double)

}  // namespace msvm
