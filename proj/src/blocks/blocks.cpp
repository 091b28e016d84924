#include "msvm/blocks.hpp"

#include <cmath>
#include <stdexcept>

namespace msvm {

template <typename T>
Parameter<T>& Builder<T>::trunc_normal(const std::string& name, Shape s, double stddev) {
  std::vector<T> v(numel(s));
  for (auto& e : v) e = static_cast<T>(rng_.truncated_normal(stddev));
  return tensor(name, Tensor<T>(std::move(s), std::move(v)));
}

template <typename T>
Parameter<T>& Builder<T>::uniform(const std::string& name, Shape s, double bound) {
  std::vector<T> v(numel(s));
  for (auto& e : v) e = static_cast<T>(rng_.uniform(-bound, bound));
  return tensor(name, Tensor<T>(std::move(s), std::move(v)));
}

const char* to_string(BlockKind k) { return k == BlockKind::vss ? "vss" : "msvss"; }

const char* to_string(UpsamplerKind k) {
  switch (k) {
    case UpsamplerKind::patch_expand: return "patch_expand";
    case UpsamplerKind::lkpe: return "lkpe";
    case UpsamplerKind::transposed_conv: return "transposed_conv";
    case UpsamplerKind::upsample_block: return "upsample_block";
  }
  return "?";
}

namespace {

std::size_t spatial(const Shape& s, const char* op) {
  if (s.size() != 3 && s.size() != 4) throw ShapeError(std::string(op) + ": expected [C,H,W] or [B,C,H,W], got " + shape_str(s));
  return s[s.size() - 2] * s[s.size() - 1];
}

std::size_t channels(const Shape& s) { return s[s.size() == 4 ? 1 : 0]; }

template <typename T>
OptTensor<T> use_opt(Parameter<T>* p) {
  if (!p) return std::nullopt;
  return use(*p);
}

}  // namespace

// ---------------------------------------------------------------- primitives

template <typename T>
Linear<T> Linear<T>::make(Builder<T> bld, std::size_t cin, std::size_t cout, bool bias) {
  Linear l;
  l.W = &bld.trunc_normal("weight", {cin, cout}, 0.02);
  if (bias) l.b = &bld.zeros("bias", {cout});
  return l;
}

template <typename T>
Tensor<T> Linear<T>::operator()(const Tensor<T>& x, int axis) const {
  return linear(x, use(*W), use_opt(b), axis);
}

template <typename T>
LayerNorm<T> LayerNorm<T>::make(Builder<T> bld, std::size_t C) {
  return {&bld.ones("weight", {C}), &bld.zeros("bias", {C})};
}

template <typename T>
Tensor<T> LayerNorm<T>::map(const Tensor<T>& x) const {
  return layer_norm(x, use(*gamma), use(*beta), eps, channel_axis(x.rank()));
}

template <typename T>
BatchNorm<T> BatchNorm<T>::make(Builder<T> bld, std::size_t C) {
  BatchNorm bn;
  bn.gamma = &bld.ones("weight", {C});
  bn.beta = &bld.zeros("bias", {C});
  bn.running_mean = &bld.tensor("running_mean", Tensor<T>({C}), false);
  bn.running_var = &bld.tensor("running_var", Tensor<T>::full({C}, T(1)), false);
  bn.num_batches = &bld.tensor("num_batches_tracked", Tensor<T>({1}), false);
  return bn;
}

template <typename T>
Tensor<T> BatchNorm<T>::operator()(const Tensor<T>& x, Mode mode) const {
  BatchNormRunning<T> running{running_mean->value, running_var->value, num_batches->value};
  return batch_norm2d(x, use(*gamma), use(*beta), running, mode);
}

template <typename T>
DWConv<T> DWConv<T>::make(Builder<T> bld, std::size_t C, std::size_t k, bool with_bias) {
  if (k % 2 == 0) throw ConfigError("depthwise kernel size must be odd, got " + std::to_string(k));
  const double bound = 1.0 / std::sqrt(double(k * k));
  DWConv d;
  d.kernel = &bld.uniform("weight", {C, k, k}, bound);
  if (with_bias) d.bias = &bld.uniform("bias", {C}, bound);
  return d;
}

template <typename T>
Tensor<T> DWConv<T>::operator()(const Tensor<T>& x) const {
  return depthwise_conv2d(x, use(*kernel), use_opt(bias));
}

// ---------------------------------------------------------------------- SS2D

template <typename T>
ScanPathParams<T> ScanPathParams<T>::make(Builder<T> bld, std::size_t Cd, std::size_t N) {
  const std::size_t R = (Cd + 15) / 16;
  ScanPathParams p;
  p.dt_down = &bld.uniform("dt_down", {Cd, R}, 1.0 / std::sqrt(double(Cd)));
  p.dt_up = &bld.uniform("dt_up", {R, Cd}, 1.0 / std::sqrt(double(R)));
  // softplus(dt_bias) starts log-uniform in [1e-3, 1e-1]
  std::vector<T> bias(Cd);
  for (auto& b : bias) {
    const double dt = std::exp(bld.rng().uniform(std::log(1e-3), std::log(1e-1)));
    b = static_cast<T>(dt + std::log(-std::expm1(-dt)));
  }
  p.dt_bias = &bld.tensor("dt_bias", Tensor<T>({Cd}, std::move(bias)));
  p.B_proj = &bld.uniform("B_proj", {Cd, N}, 1.0 / std::sqrt(double(Cd)));
  p.C_proj = &bld.uniform("C_proj", {Cd, N}, 1.0 / std::sqrt(double(Cd)));
  std::vector<T> alog(Cd * N);
  for (std::size_t c = 0; c < Cd; ++c)
    for (std::size_t n = 0; n < N; ++n) alog[c * N + n] = static_cast<T>(std::log(double(n + 1)));
  p.A_log = &bld.tensor("A_log", Tensor<T>({Cd, N}, std::move(alog)));
  p.D = &bld.ones("D", {Cd});
  return p;
}

template <typename T>
ScanWeights<T> ScanPathParams<T>::weights() const {
  return {use(*dt_down), use(*dt_up), use(*dt_bias), use(*B_proj), use(*C_proj), use(*A_log), use(*D)};
}

template <typename T>
SS2D<T> SS2D<T>::make(Builder<T> bld, std::size_t Cd, std::size_t N) {
  SS2D s;
  for (std::size_t k = 0; k < 4; ++k) s.paths[k] = ScanPathParams<T>::make(bld.sub(to_string(kScanPaths[k])), Cd, N);
  return s;
}

template <typename T>
Tensor<T> SS2D<T>::operator()(const Tensor<T>& x) const {
  std::array<ScanWeights<T>, 4> w;
  for (std::size_t k = 0; k < 4; ++k) w[k] = paths[k].weights();
  return ss2d(x, w);
}

template <typename T>
std::uint64_t SS2D<T>::macs(std::size_t L) const {
  std::uint64_t total = 0;
  for (const auto& p : paths) {
    const std::uint64_t Cd = p.A_log->value.dim(0), N = p.A_log->value.dim(1), R = p.dt_down->value.dim(1);
    total += L * (2 * Cd * R + 2 * Cd * N);  // projections
    total += L * N * Cd;                     // recurrence
  }
  return total;
}

template <typename T>
SS2DBlock<T> SS2DBlock<T>::make(Builder<T> bld, std::size_t C, std::size_t N) {
  SS2DBlock b;
  b.in_proj = Linear<T>::make(bld.sub("in_proj"), C, 2 * C);
  b.dwconv = DWConv<T>::make(bld.sub("dwconv"), 2 * C, 3);
  b.ss2d = SS2D<T>::make(bld.sub("ss2d"), 2 * C, N);
  b.norm = LayerNorm<T>::make(bld.sub("norm"), 2 * C);
  b.out_proj = Linear<T>::make(bld.sub("out_proj"), 2 * C, C);
  return b;
}

template <typename T>
Tensor<T> SS2DBlock<T>::operator()(const Tensor<T>& z) const {
  return out_proj.map(norm.map(ss2d(silu(dwconv(in_proj.map(z))))));
}

template <typename T>
std::uint64_t SS2DBlock<T>::macs(std::size_t HW) const {
  return in_proj.macs(HW) + dwconv.macs(HW) + ss2d.macs(HW) + out_proj.macs(HW);
}

// ----------------------------------------------------------------------- FFN

template <typename T>
FeedForward<T> FeedForward<T>::make(Builder<T> bld, std::size_t C, std::size_t expand,
                                    const std::vector<std::size_t>& kernels) {
  FeedForward f;
  f.fc1 = Linear<T>::make(bld.sub("fc1"), C, expand * C);
  for (auto k : kernels) f.convs.push_back(DWConv<T>::make(bld.sub("dwconv" + std::to_string(k)), expand * C, k));
  f.fc2 = Linear<T>::make(bld.sub("fc2"), expand * C, C);
  return f;
}

template <typename T>
Tensor<T> FeedForward<T>::operator()(const Tensor<T>& m) const {
  const auto h = gelu(fc1.map(m));
  if (convs.empty()) return fc2.map(h);
  Tensor<T> acc = convs[0](h);
  for (std::size_t i = 1; i < convs.size(); ++i) acc = add(acc, convs[i](h));
  return fc2.map(add(acc, h));
}

template <typename T>
std::uint64_t FeedForward<T>::macs(std::size_t HW) const {
  std::uint64_t total = fc1.macs(HW) + fc2.macs(HW);
  for (const auto& c : convs) total += c.macs(HW);
  return total;
}

template <typename T>
StateSpaceBlock<T> StateSpaceBlock<T>::make(Builder<T> bld, BlockKind kind, std::size_t C, std::size_t N,
                                            const std::vector<std::size_t>& kernels) {
  if (kind == BlockKind::msvss && kernels.empty()) throw ConfigError("MS-FFN needs at least one kernel size");
  StateSpaceBlock b;
  b.kind = kind;
  b.norm1 = LayerNorm<T>::make(bld.sub("norm1"), C);
  b.mixer = SS2DBlock<T>::make(bld.sub("ss2d_block"), C, N);
  b.norm2 = LayerNorm<T>::make(bld.sub("norm2"), C);
  b.ffn = FeedForward<T>::make(bld.sub(kind == BlockKind::msvss ? "ms_ffn" : "mlp"), C, 4,
                               kind == BlockKind::msvss ? kernels : std::vector<std::size_t>{});
  return b;
}

template <typename T>
Tensor<T> StateSpaceBlock<T>::operator()(const Tensor<T>& f) const {
  const auto fh = add(mixer(norm1.map(f)), f);
  return add(ffn(norm2.map(fh)), fh);
}

// --------------------------------------------------------- resampling layers

template <typename T>
PatchEmbed<T> PatchEmbed<T>::make(Builder<T> bld, std::size_t in_channels, std::size_t C) {
  return {Linear<T>::make(bld.sub("proj"), in_channels * 16, C), LayerNorm<T>::make(bld.sub("norm"), C)};
}

template <typename T>
Tensor<T> PatchEmbed<T>::operator()(const Tensor<T>& img) const {
  spatial(img.shape(), "patch_embed");
  const std::size_t H = img.dim(img.rank() - 2), W = img.dim(img.rank() - 1);
  if (H % 4 || W % 4) throw ShapeError("patch_embed: extents must be divisible by 4, got " + shape_str(img.shape()));
  return norm.map(proj.map(pixel_unshuffle(img, 4)));
}

template <typename T>
PatchMerge<T> PatchMerge<T>::make(Builder<T> bld, std::size_t C) {
  return {LayerNorm<T>::make(bld.sub("norm"), 4 * C), Linear<T>::make(bld.sub("reduction"), 4 * C, 2 * C, false)};
}

template <typename T>
Tensor<T> PatchMerge<T>::operator()(const Tensor<T>& f) const {
  spatial(f.shape(), "patch_merge");
  const std::size_t H = f.dim(f.rank() - 2), W = f.dim(f.rank() - 1);
  if (H % 2 || W % 2) throw ShapeError("patch_merge: extents must be even, got " + shape_str(f.shape()));
  return reduction.map(norm.map(pixel_unshuffle(f, 2)));
}

template <typename T>
Upsampler<T> Upsampler<T>::make(Builder<T> bld, UpsamplerKind kind, std::size_t C, std::size_t kernel) {
  if (C % 2) throw ConfigError("upsampler: channel count must be even, got " + std::to_string(C));
  Upsampler u;
  u.kind = kind;
  switch (kind) {
    case UpsamplerKind::lkpe:
      u.expand = Linear<T>::make(bld.sub("expand"), C, 2 * C, false);
      u.bn = BatchNorm<T>::make(bld.sub("bn"), 2 * C);
      u.dwconv = DWConv<T>::make(bld.sub("dwconv"), 2 * C, kernel);
      u.norm = LayerNorm<T>::make(bld.sub("norm"), C / 2);
      break;
    case UpsamplerKind::patch_expand:
      u.expand = Linear<T>::make(bld.sub("expand"), C, 2 * C, false);
      u.norm = LayerNorm<T>::make(bld.sub("norm"), C / 2);
      break;
    case UpsamplerKind::transposed_conv:
      u.expand = Linear<T>::make(bld.sub("expand"), C, 2 * C, false);
      u.bias = &bld.zeros("bias", {C / 2});
      break;
    case UpsamplerKind::upsample_block: {
      const double bound = 1.0 / std::sqrt(double(C * 9));
      u.conv = &bld.uniform("conv.weight", {C / 2, C, 3, 3}, bound);
      u.bias = &bld.uniform("conv.bias", {C / 2}, bound);
      break;
    }
  }
  return u;
}

template <typename T>
Tensor<T> Upsampler<T>::operator()(const Tensor<T>& u, Mode mode) const {
  spatial(u.shape(), "upsampler");
  if (channels(u.shape()) % 2) throw ShapeError("upsampler: channel count must be even, got " + shape_str(u.shape()));
  switch (kind) {
    case UpsamplerKind::lkpe:
      return norm.map(pixel_shuffle(dwconv(relu(bn(expand.map(u), mode))), 2));
    case UpsamplerKind::patch_expand:
      return norm.map(pixel_shuffle(expand.map(u), 2));
    case UpsamplerKind::transposed_conv:
      return add_channel_bias(pixel_shuffle(expand.map(u), 2), use(*bias));
    case UpsamplerKind::upsample_block:
      return conv2d(upsample_nearest2x(u), use(*conv), use_opt(bias));
  }
  throw std::logic_error("unreachable");
}

template <typename T>
std::uint64_t Upsampler<T>::macs(std::size_t H, std::size_t W) const {
  const std::size_t HW = H * W;
  switch (kind) {
    case UpsamplerKind::lkpe: return expand.macs(HW) + dwconv.macs(HW);
    case UpsamplerKind::patch_expand:
    case UpsamplerKind::transposed_conv: return expand.macs(HW);
    case UpsamplerKind::upsample_block: return conv->value.numel() * HW * 4;
  }
  return 0;
}

template <typename T>
FLKPE<T> FLKPE<T>::make(Builder<T> bld, std::size_t C, std::size_t K, std::size_t kernel) {
  FLKPE f;
  f.expand = Linear<T>::make(bld.sub("expand"), C, 16 * C, false);
  f.bn = BatchNorm<T>::make(bld.sub("bn"), 16 * C);
  f.dwconv = DWConv<T>::make(bld.sub("dwconv"), 16 * C, kernel);
  f.norm = LayerNorm<T>::make(bld.sub("norm"), C);
  f.head = Linear<T>::make(bld.sub("head"), C, K);
  return f;
}

template <typename T>
Tensor<T> FLKPE<T>::operator()(const Tensor<T>& f, Mode mode) const {
  spatial(f.shape(), "flkpe");
  return head.map(norm.map(pixel_shuffle(dwconv(relu(bn(expand.map(f), mode))), 4)));
}

template <typename T>
std::uint64_t FLKPE<T>::macs(std::size_t H, std::size_t W) const {
  const std::size_t HW = H * W;
  return expand.macs(HW) + dwconv.macs(HW) + head.macs(16 * HW);
}

#define MSVM_INSTANTIATE_BLOCKS(T)     \
  template class Builder<T>;           \
  template struct Linear<T>;           \
  template struct LayerNorm<T>;        \
  template struct BatchNorm<T>;        \
  template struct DWConv<T>;           \
  template struct ScanPathParams<T>;   \
  template struct SS2D<T>;             \
  template struct SS2DBlock<T>;        \
  template struct FeedForward<T>;      \
  template struct StateSpaceBlock<T>;  \
  template struct PatchEmbed<T>;       \
  template struct PatchMerge<T>;       \
  template struct Upsampler<T>;        \
  template struct FLKPE<T>;

MSVM_INSTANTIATE_BLOCKS(float)
MSVM_INSTANTIATE_BLOCKS(double)

}  // namespace msvm
