#include "msvm/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace msvm {

BlockKind parse_block_kind(const std::string& s) {
  if (s == "vss") return BlockKind::vss;
  if (s == "msvss") return BlockKind::msvss;
  throw ConfigError("unknown decoder block '" + s + "' (vss|msvss)");
}

UpsamplerKind parse_upsampler(const std::string& s) {
  for (auto k : {UpsamplerKind::patch_expand, UpsamplerKind::lkpe, UpsamplerKind::transposed_conv,
                 UpsamplerKind::upsample_block})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown upsampler '" + s + "' (patch_expand|lkpe|transposed_conv|upsample_block)");
}

void ModelConfig::validate() const {
  if (in_channels == 0 || base_channels == 0) throw ConfigError("model: channel counts must be positive");
  if (base_channels % 2) throw ConfigError("model.base_channels must be even");
  for (auto d : depths)
    if (d == 0) throw ConfigError("model.depths entries must be >= 1");
  if (num_classes < 2) throw ConfigError("model.num_classes must be >= 2");
  if (height == 0 || width == 0 || height % 32 || width % 32) {
    throw ConfigError("model input size must be a positive multiple of 32, got " + std::to_string(height) + "x" +
                      std::to_string(width));
  }
  for (auto k : kernel_set)
    if (k % 2 == 0) throw ConfigError("model.kernel_set entries must be odd");
  if (decoder_block == BlockKind::msvss && kernel_set.empty()) throw ConfigError("model.kernel_set must be non-empty");
  if (skip_fusion != "add") throw ConfigError("model.skip_fusion: only 'add' is supported");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("model.alpha must lie in [0,1]");
  if (state_size == 0) throw ConfigError("model.state_size must be >= 1");
  if (lkpe_kernel % 2 == 0) throw ConfigError("model.lkpe_kernel must be odd");
}

bool ModelConfig::set(const std::string& key, const std::string& v) {
  const std::string full = "model." + key;
  if (key == "in_channels") in_channels = parse_size(full, v);
  else if (key == "base_channels") base_channels = parse_size(full, v);
  else if (key == "depths") {
    auto d = parse_size_list(full, v);
    if (d.size() != 4) throw ConfigError(full + ": expected four stage depths");
    std::copy(d.begin(), d.end(), depths.begin());
  } else if (key == "num_classes") num_classes = parse_size(full, v);
  else if (key == "height") height = parse_size(full, v);
  else if (key == "width") width = parse_size(full, v);
  else if (key == "input_size") height = width = parse_size(full, v);
  else if (key == "kernel_set") kernel_set = parse_size_list(full, v);
  else if (key == "decoder_block") decoder_block = parse_block_kind(v);
  else if (key == "upsampler") upsampler = parse_upsampler(v);
  else if (key == "skip_fusion") skip_fusion = v;
  else if (key == "alpha") alpha = parse_double(full, v);
  else if (key == "state_size") state_size = parse_size(full, v);
  else if (key == "lkpe_kernel") lkpe_kernel = parse_size(full, v);
  else return false;
  return true;
}

ConfigMap ModelConfig::to_map() const {
  char a[32];
  const auto end = std::to_chars(a, a + sizeof a, alpha).ptr;  // shortest round-trip form
  return {{"model.in_channels", std::to_string(in_channels)},
          {"model.base_channels", std::to_string(base_channels)},
          {"model.depths", size_list_text({depths.begin(), depths.end()})},
          {"model.num_classes", std::to_string(num_classes)},
          {"model.height", std::to_string(height)},
          {"model.width", std::to_string(width)},
          {"model.kernel_set", size_list_text(kernel_set)},
          {"model.decoder_block", to_string(decoder_block)},
          {"model.upsampler", to_string(upsampler)},
          {"model.skip_fusion", skip_fusion},
          {"model.alpha", std::string(a, end)},
          {"model.state_size", std::to_string(state_size)},
          {"model.lkpe_kernel", std::to_string(lkpe_kernel)}};
}

ModelConfig ModelConfig::from_map(const ConfigMap& m) {
  ModelConfig cfg;
  for (const auto& [k, v] : m) {
    if (k.rfind("model.", 0) != 0) continue;
    if (!cfg.set(k.substr(6), v)) throw ConfigError("unknown config key '" + k + "'");
  }
  return cfg;
}

ModelConfig ModelConfig::preset(const std::string& name) {
  ModelConfig c;
  if (name == "toy") {
    c.state_size = 8;
  } else if (name == "tiny224") {
    c.base_channels = 96;
    c.depths = {2, 2, 4, 2};
    c.height = c.width = 224;
    c.num_classes = 9;
  } else if (name == "micro") {
    c.base_channels = 8;
    c.height = c.width = 32;
    c.state_size = 4;
  } else {
    throw ConfigError("unknown preset '" + name + "' (toy|tiny224|micro)");
  }
  return c;
}

// --------------------------------------------------------------------- model

template <typename T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), store_(std::make_unique<ParamStore<T>>()) {
  cfg_.validate();
  Rng rng(seed);
  Builder<T> root(*store_, rng);
  const std::size_t C = cfg_.base_channels, N = cfg_.state_size;
  for (std::size_t i = 0; i < 4; ++i) {
    auto b = root.sub("encoder" + std::to_string(i + 1));
    const std::size_t Ci = C << i;
    if (i == 0) encoder_[i].embed = PatchEmbed<T>::make(b.sub("patch_embed"), cfg_.in_channels, C);
    else encoder_[i].merge = PatchMerge<T>::make(b.sub("patch_merge"), Ci / 2);
    for (std::size_t d = 0; d < cfg_.depths[i]; ++d) {
      encoder_[i].blocks.push_back(
          StateSpaceBlock<T>::make(b.sub("block" + std::to_string(d)), BlockKind::vss, Ci, N, cfg_.kernel_set));
    }
  }
  for (std::size_t s = 0; s < 3; ++s) {
    auto b = root.sub("decoder" + std::to_string(s + 1));
    const std::size_t Cin = C << (3 - s);
    auto up = Upsampler<T>::make(b.sub("upsample"), cfg_.upsampler, Cin, cfg_.lkpe_kernel);
    auto blk = StateSpaceBlock<T>::make(b.sub("block"), cfg_.decoder_block, Cin / 2, N, cfg_.kernel_set);
    decoder_[s] = DecoderStage{std::move(up), std::move(blk)};
  }
  head_ = FLKPE<T>::make(root.sub("head"), C, cfg_.num_classes, cfg_.lkpe_kernel);
}

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& img, const ForwardOptions& opts, FeatureBundle<T>* features) const {
  if (img.rank() != 3 && img.rank() != 4) throw ShapeError("model: expected [3,H,W] or [B,3,H,W], got " + shape_str(img.shape()));
  const std::size_t ch = img.dim(img.rank() - 3), H = img.dim(img.rank() - 2), W = img.dim(img.rank() - 1);
  if (ch != cfg_.in_channels) throw ShapeError("model: expected " + std::to_string(cfg_.in_channels) + " input channels, got " + shape_str(img.shape()));
  if (H % 32 || W % 32) throw ShapeError("model: input extents must be multiples of 32, got " + shape_str(img.shape()));

  std::array<Tensor<T>, 4> enc;
  Tensor<T> x = img;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& st = encoder_[i];
    x = st.embed ? (*st.embed)(x) : (*st.merge)(x);
    for (const auto& blk : st.blocks) x = blk(x);
    enc[i] = x;
  }
  std::array<Tensor<T>, 3> dec;
  for (std::size_t s = 0; s < 3; ++s) {
    x = decoder_[s]->up(x, opts.mode);
    const auto& skip = enc[2 - s];
    if (opts.skips[s]) x = add(x, skip);
    x = decoder_[s]->block(x);
    dec[s] = x;
  }
  if (features) {
    features->encoder = enc;
    features->decoder = dec;
  }
  return (*head_)(x, opts.mode);
}

template <typename T>
bool Model<T>::has_running_stats() const {
  bool any = false;
  for (std::size_t i = 0; i < store_->size(); ++i) {
    const auto& p = (*store_)[i];
    if (p.name.ends_with("num_batches_tracked")) {
      if (p.value[0] <= T(0)) return false;
      any = true;
    }
  }
  return any;
}

template <typename T>
std::uint64_t Model<T>::macs(std::size_t H, std::size_t W) const {
  std::uint64_t total = encoder_[0].embed->macs(H, W);
  std::size_t h = H / 4, w = W / 4;
  for (std::size_t i = 0; i < 4; ++i) {
    if (i > 0) {
      total += encoder_[i].merge->macs(h, w);
      h /= 2;
      w /= 2;
    }
    for (const auto& blk : encoder_[i].blocks) total += blk.macs(h * w);
  }
  for (std::size_t s = 0; s < 3; ++s) {
    total += decoder_[s]->up.macs(h, w);
    h *= 2;
    w *= 2;
    total += decoder_[s]->block.macs(h * w);
  }
  return total + head_->macs(h, w);
}

template <typename T>
ParamCount count_params(const Model<T>& model) {
  ParamCount c;
  const auto& store = model.params();
  for (std::size_t i = 0; i < store.size(); ++i) {
    (store[i].trainable ? c.trainable : c.buffers) += store[i].value.numel();
  }
  return c;
}

template <typename T>
std::uint64_t count_flops(const Model<T>& model, std::size_t H, std::size_t W) {
  return 2 * model.macs(H, W);
}

// ---------------------------------------------------------------- checkpoint

template <typename T>
void write_checkpoint(std::ostream& os, const Model<T>& model) {
  os.write(kCheckpointMagic, 4);
  write_u16(os, kCheckpointVersion);
  const auto text = config_text(model.config().to_map());
  write_u32(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto& store = model.params();
  write_u32(os, static_cast<std::uint32_t>(store.size()));
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store[i];
    write_u32(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_tensor(os, p.value);
  }
  if (!os) throw std::runtime_error("checkpoint: write failed");
}

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model) {
  // write-then-rename so an interrupted save never leaves a torn file
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + tmp);
    write_checkpoint(f, model);
  }
  std::filesystem::rename(tmp, path);
}

CheckpointContents read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kCheckpointMagic)) throw FormatError("checkpoint: bad magic");
  const auto version = read_u16(is);
  if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  CheckpointContents c;
  const auto len = read_u32(is);
  c.config_text.resize(len);
  if (!is.read(c.config_text.data(), len)) throw FormatError("checkpoint: truncated config");
  const auto count = read_u32(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto n = read_u32(is);
    if (n > 4096) throw FormatError("checkpoint: implausible name length");
    std::string name(n, '\0');
    if (!is.read(name.data(), n)) throw FormatError("checkpoint: truncated name");
    c.tensors.emplace_back(std::move(name), read_any_tensor(is));
  }
  return c;
}

CheckpointContents read_checkpoint_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  return read_checkpoint(f);
}

template <typename T>
Model<T> load_checkpoint(const std::string& path) {
  auto c = read_checkpoint_file(path);
  Model<T> model(ModelConfig::from_map(parse_config_text(c.config_text)), 0);
  auto& store = model.params();
  if (c.tensors.size() != store.size()) {
    throw FormatError("checkpoint: expected " + std::to_string(store.size()) + " tensors, found " +
                      std::to_string(c.tensors.size()));
  }
  for (auto& [name, any] : c.tensors) {
    auto* p = store.find(name);
    if (!p) throw FormatError("checkpoint: unexpected tensor '" + name + "'");
    Tensor<T> t = std::visit([](auto& v) { return v.template cast<T>(); }, any);
    if (t.shape() != p->value.shape()) {
      throw FormatError("checkpoint: tensor '" + name + "' has shape " + shape_str(t.shape()) + ", expected " +
                        shape_str(p->value.shape()));
    }
    p->value = std::move(t);
  }
  return model;
}

// ------------------------------------------------------------------- export

template <typename T>
Tensor<T> channel_mean(const Tensor<T>& f) {
  if (f.rank() != 3) throw ShapeError("channel_mean: expected [C,H,W], got " + shape_str(f.shape()));
  const std::size_t C = f.dim(0), HW = f.dim(1) * f.dim(2);
  std::vector<T> m(HW, T(0));
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < HW; ++i) m[i] += f[c * HW + i];
  for (auto& v : m) v /= static_cast<T>(C);
  return Tensor<T>({f.dim(1), f.dim(2)}, std::move(m));
}

template <typename T>
void write_pgm(const std::string& path, const Tensor<T>& map) {
  if (map.rank() != 2) throw ShapeError("write_pgm: expected [H,W]");
  const auto [lo, hi] = std::minmax_element(map.data().begin(), map.data().end());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "P5\n" << map.dim(1) << ' ' << map.dim(0) << "\n255\n";
  const double range = double(*hi) - double(*lo);
  for (auto v : map.data()) {
    const int g = range > 0 ? static_cast<int>(std::lround(255.0 * (double(v) - double(*lo)) / range)) : 128;
    f.put(static_cast<char>(static_cast<unsigned char>(g)));
  }
  if (!f) throw std::runtime_error("write failed: " + path);
}

template <typename T>
std::vector<std::string> export_stage_features(const Model<T>& model, const Tensor<T>& img, const std::string& dir) {
  if (img.rank() != 3) throw ShapeError("export_stage_features: expected one [3,H,W] image");
  std::filesystem::create_directories(dir);
  FeatureBundle<T> fb;
  ForwardOptions opts;
  opts.mode = model.has_running_stats() ? Mode::eval : Mode::train;
  model.forward(img, opts, &fb);
  std::vector<std::string> paths;
  for (std::size_t s = 0; s < 3; ++s) {
    const auto path = (std::filesystem::path(dir) / ("decoder_layer" + std::to_string(s + 1) + ".pgm")).string();
    write_pgm(path, channel_mean(fb.decoder[s]));
    paths.push_back(path);
  }
  return paths;
}

#define MSVM_INSTANTIATE_MODEL(T)                                                                               \
  template class Model<T>;                                                                                      \
  template ParamCount count_params<T>(const Model<T>&);                                                         \
  template std::uint64_t count_flops<T>(const Model<T>&, std::size_t, std::size_t);                             \
  template void write_checkpoint<T>(std::ostream&, const Model<T>&);                                            \
  template void save_checkpoint<T>(const std::string&, const Model<T>&);                                        \
  template Model<T> load_checkpoint<T>(const std::string&);                                                     \
  template Tensor<T> channel_mean<T>(const Tensor<T>&);                                                         \
  template void write_pgm<T>(const std::string&, const Tensor<T>&);                                             \
  template std::vector<std::string> export_stage_features<T>(const Model<T>&, const Tensor<T>&, const std::string&);

MSVM_INSTANTIATE_MODEL(float)
MSVM_INSTANTIATE_MODEL(double)

}  // namespace msvm
