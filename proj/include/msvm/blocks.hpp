#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "msvm/ops.hpp"
#include "msvm/rng.hpp"
#include "msvm/scan.hpp"
#include "msvm/tape.hpp"

namespace msvm {

// Layers hold pointers into a ParamStore owned by the caller (the model).
// Every forward accepts [C,H,W] or [B,C,H,W]; macs() counts multiply-adds
// for one sample at the given input extent.

/// Registers parameters under a dotted name prefix.
template <typename T>
class Builder {
 public:
  Builder(ParamStore<T>& store, Rng& rng, std::string prefix = "") : store_(store), rng_(rng), prefix_(std::move(prefix)) {}

  Builder sub(const std::string& name) const { return Builder(store_, rng_, join(name)); }
  Parameter<T>& tensor(const std::string& name, Tensor<T> value, bool trainable = true) {
    return store_.add(join(name), std::move(value), trainable);
  }
  Parameter<T>& zeros(const std::string& name, Shape s) { return tensor(name, Tensor<T>(std::move(s))); }
  Parameter<T>& ones(const std::string& name, Shape s) { return tensor(name, Tensor<T>::full(std::move(s), T(1))); }
  Parameter<T>& trunc_normal(const std::string& name, Shape s, double stddev);
  Parameter<T>& uniform(const std::string& name, Shape s, double bound);
  Rng& rng() { return rng_; }
  const std::string& prefix() const { return prefix_; }

 private:
  std::string join(const std::string& name) const { return prefix_.empty() ? name : prefix_ + "." + name; }
  ParamStore<T>& store_;
  Rng& rng_;
  std::string prefix_;
};

inline int channel_axis(std::size_t rank) { return rank == 4 ? 1 : 0; }

template <typename T>
struct Linear {
  Parameter<T>* W = nullptr;  // [Cin,Cout]
  Parameter<T>* b = nullptr;

  static Linear make(Builder<T> bld, std::size_t cin, std::size_t cout, bool bias = true);
  Tensor<T> operator()(const Tensor<T>& x, int axis) const;
  // Applies along the channel axis of a feature map.
  Tensor<T> map(const Tensor<T>& x) const { return (*this)(x, channel_axis(x.rank())); }
  std::size_t in() const { return W->value.dim(0); }
  std::size_t out() const { return W->value.dim(1); }
  std::uint64_t macs(std::size_t positions) const { return std::uint64_t(in()) * out() * positions; }
};

template <typename T>
struct LayerNorm {
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;
  T eps = T(1e-5);

  static LayerNorm make(Builder<T> bld, std::size_t C);
  Tensor<T> map(const Tensor<T>& x) const;
};

template <typename T>
struct BatchNorm {
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;
  Parameter<T>* running_mean = nullptr;  // buffers, not trainable
  Parameter<T>* running_var = nullptr;
  Parameter<T>* num_batches = nullptr;

  static BatchNorm make(Builder<T> bld, std::size_t C);
  Tensor<T> operator()(const Tensor<T>& x, Mode mode) const;
};

template <typename T>
struct DWConv {
  Parameter<T>* kernel = nullptr;  // [C,k,k]
  Parameter<T>* bias = nullptr;

  static DWConv make(Builder<T> bld, std::size_t C, std::size_t k, bool with_bias = true);
  Tensor<T> operator()(const Tensor<T>& x) const;
  std::uint64_t macs(std::size_t HW) const { return kernel->value.numel() * HW; }
};

/// Per-path S6 parameters for an SS2D over Cd channels.
template <typename T>
struct ScanPathParams {
  Parameter<T>*dt_down, *dt_up, *dt_bias, *B_proj, *C_proj, *A_log, *D;

  static ScanPathParams make(Builder<T> bld, std::size_t Cd, std::size_t N);
  ScanWeights<T> weights() const;
};

template <typename T>
struct SS2D {
  std::array<ScanPathParams<T>, 4> paths;

  static SS2D make(Builder<T> bld, std::size_t Cd, std::size_t N);
  Tensor<T> operator()(const Tensor<T>& x) const;
  std::uint64_t macs(std::size_t HW) const;
};

/// C2(LN(SS2D(SiLU(DWConv3(C1(z)))))) with C1: C -> 2C, C2: 2C -> C.
template <typename T>
struct SS2DBlock {
  Linear<T> in_proj, out_proj;
  DWConv<T> dwconv;
  SS2D<T> ss2d;
  LayerNorm<T> norm;

  static SS2DBlock make(Builder<T> bld, std::size_t C, std::size_t N);
  Tensor<T> operator()(const Tensor<T>& z) const;
  std::size_t inner_channels() const { return in_proj.out(); }
  std::uint64_t macs(std::size_t HW) const;
};

/// m' = GELU(C3 m); out = C4(sum_k DWConv_k(m') + m'). An empty kernel
/// list gives the plain two-layer MLP used by the VSS baseline.
template <typename T>
struct FeedForward {
  Linear<T> fc1, fc2;
  std::vector<DWConv<T>> convs;

  static FeedForward make(Builder<T> bld, std::size_t C, std::size_t expand, const std::vector<std::size_t>& kernels);
  Tensor<T> operator()(const Tensor<T>& m) const;
  std::uint64_t macs(std::size_t HW) const;
};

enum class BlockKind { vss, msvss };
const char* to_string(BlockKind k);

/// f^ = SS2DBlock(LN(f)) + f; out = FFN(LN(f^)) + f^. The FFN is MS-FFN for
/// msvss and the plain MLP for vss.
template <typename T>
struct StateSpaceBlock {
  BlockKind kind = BlockKind::vss;
  LayerNorm<T> norm1, norm2;
  SS2DBlock<T> mixer;
  FeedForward<T> ffn;

  static StateSpaceBlock make(Builder<T> bld, BlockKind kind, std::size_t C, std::size_t N,
                              const std::vector<std::size_t>& kernels);
  Tensor<T> operator()(const Tensor<T>& f) const;
  std::uint64_t macs(std::size_t HW) const { return mixer.macs(HW) + ffn.macs(HW); }
};

/// 4x4 stride-4 patch projection (as unshuffle + 1x1 linear) then LN.
template <typename T>
struct PatchEmbed {
  Linear<T> proj;
  LayerNorm<T> norm;

  static PatchEmbed make(Builder<T> bld, std::size_t in_channels, std::size_t C);
  Tensor<T> operator()(const Tensor<T>& img) const;
  std::uint64_t macs(std::size_t H, std::size_t W) const { return proj.macs(H / 4 * (W / 4)); }
};

/// 2x2 neighbourhoods -> 4C channels, LN, linear to 2C (no bias).
template <typename T>
struct PatchMerge {
  LayerNorm<T> norm;
  Linear<T> reduction;

  static PatchMerge make(Builder<T> bld, std::size_t C);
  Tensor<T> operator()(const Tensor<T>& f) const;
  std::uint64_t macs(std::size_t H, std::size_t W) const { return reduction.macs(H / 2 * (W / 2)); }
};

enum class UpsamplerKind { patch_expand, lkpe, transposed_conv, upsample_block };
const char* to_string(UpsamplerKind k);

/// 2x upsampler halving channels, C x H x W -> C/2 x 2H x 2W.
///  lkpe:            C5 (C -> 2C) -> BN -> ReLU -> DWConv -> shuffle(2) -> LN
///  patch_expand:    linear C -> 2C -> shuffle(2) -> LN
///  transposed_conv: 2x2 stride-2 transposed conv (linear C -> 2C + shuffle)
///  upsample_block:  nearest 2x -> 3x3 conv C -> C/2
template <typename T>
struct Upsampler {
  UpsamplerKind kind = UpsamplerKind::lkpe;
  Linear<T> expand;
  BatchNorm<T> bn;
  DWConv<T> dwconv;
  LayerNorm<T> norm;
  Parameter<T>* conv = nullptr;  // upsample_block kernel [C/2,C,3,3]
  Parameter<T>* bias = nullptr;  // transposed_conv / upsample_block bias [C/2]

  static Upsampler make(Builder<T> bld, UpsamplerKind kind, std::size_t C, std::size_t kernel = 3);
  Tensor<T> operator()(const Tensor<T>& u, Mode mode) const;
  std::uint64_t macs(std::size_t H, std::size_t W) const;
};

/// Final 4x head: C6 (C -> 16C) -> BN -> ReLU -> DWConv -> shuffle(4) -> LN
/// -> 1x1 conv to K logits.
template <typename T>
struct FLKPE {
  Linear<T> expand;
  BatchNorm<T> bn;
  DWConv<T> dwconv;
  LayerNorm<T> norm;
  Linear<T> head;

  static FLKPE make(Builder<T> bld, std::size_t C, std::size_t K, std::size_t kernel = 3);
  Tensor<T> operator()(const Tensor<T>& f, Mode mode) const;
  std::uint64_t macs(std::size_t H, std::size_t W) const;
};

}  // namespace msvm
