#pragma once

#include <optional>
#include <type_traits>

#include "msvm/tape.hpp"
#include "msvm/tensor.hpp"

namespace msvm {

enum class Activation { silu, gelu, relu };
enum class Mode { train, eval };

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
using OptTensor = std::optional<Tensor<T>>;
// Non-deduced spelling so a plain Tensor<T> converts at call sites.
template <typename T>
using OptArg = std::type_identity_t<OptTensor<T>>;

// Every op below records onto Tape<T>::active() when one of its tensor
// inputs is tracked. Feature maps are channel-first: [C,H,W] or [B,C,H,W].

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s);
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// y[.., j, ..] = sum_i x[.., i, ..] W[i, j] + b[j], contracting `axis`
/// (default: last). W is [Cin, Cout].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& W, const OptArg<T>& b = std::nullopt, int axis = -1);

/// Per-channel cross-correlation with zero "same" padding. k is [C,kh,kw]
/// with odd extents; optional bias [C].
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& k, const OptArg<T>& bias = std::nullopt);

/// Dense cross-correlation with "same" padding. k is [Cout,Cin,kh,kw].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& k, const OptArg<T>& bias = std::nullopt);

/// Adds b[c] along the channel axis of a [C,H,W] or [B,C,H,W] map.
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& b);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps, int axis = -1);

/// Running statistics of one batch-norm layer. `count` is the number of
/// train-mode batches seen; eval mode requires count > 0.
template <typename T>
struct BatchNormRunning {
  Tensor<T>& mean;
  Tensor<T>& var;
  Tensor<T>& count;
};

/// Normalizes [B,C,H,W] per channel over (B,H,W). Train mode uses batch
/// statistics and updates running stats (unbiased variance) with
/// `momentum`; eval mode uses the running stats.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       BatchNormRunning<T> running, Mode mode, T momentum = T(0.1), T eps = T(1e-5));

template <typename T>
Tensor<T> activation(Activation kind, const Tensor<T>& x);
template <typename T>
Tensor<T> silu(const Tensor<T>& x) { return activation(Activation::silu, x); }
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) { return activation(Activation::gelu, x); }
template <typename T>
Tensor<T> relu(const Tensor<T>& x) { return activation(Activation::relu, x); }
template <typename T>
Tensor<T> softplus(const Tensor<T>& x);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis);
/// Softmax over the leading class extent of [K, ...].
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) { return softmax(x, 0); }

/// [B, C*r*r, H, W] -> [B, C, H*r, W*r]. Input channel c*r*r + i*r + j
/// lands at output (c, h*r + i, w*r + j).
template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t r);
/// Exact inverse of pixel_shuffle: [B, C, H*r, W*r] -> [B, C*r*r, H, W].
template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t r);

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x);

/// out.flat[i] = x.flat[index[i]]. Backward scatters with accumulation, so
/// `index` may repeat source positions.
template <typename T>
Tensor<T> index_gather(const Tensor<T>& x, Shape out_shape, std::shared_ptr<const std::vector<std::uint32_t>> index,
                       const char* op = "index_gather");

// Scalar activation helpers shared with tests and the scan kernels.
double gaussian_cdf(double x);
double softplus_scalar(double x);

}  // namespace msvm
