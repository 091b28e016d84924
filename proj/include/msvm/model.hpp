#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "msvm/blocks.hpp"
#include "msvm/config.hpp"
#include "msvm/serialize.hpp"

namespace msvm {

struct ModelConfig {
  std::size_t in_channels = 3;
  std::size_t base_channels = 16;
  std::array<std::size_t, 4> depths{1, 1, 1, 1};
  std::size_t num_classes = 4;
  std::size_t height = 64, width = 64;
  std::vector<std::size_t> kernel_set{1, 3, 5};
  BlockKind decoder_block = BlockKind::msvss;
  UpsamplerKind upsampler = UpsamplerKind::lkpe;
  std::string skip_fusion = "add";
  double alpha = 0.6;  // Dice weight of the training loss
  std::size_t state_size = 16;
  std::size_t lkpe_kernel = 3;

  void validate() const;
  // Keys are relative to the "model." section, e.g. "base_channels".
  // Returns false for an unknown key.
  bool set(const std::string& key, const std::string& value);
  ConfigMap to_map() const;  // keys prefixed with "model."
  static ModelConfig from_map(const ConfigMap& m);  // ignores non-model keys

  // "toy" (C=16, N=8, 64x64, K=4), "tiny224" (C=96, depths 2,2,4,2,
  // 224x224, K=9) and "micro" (C=8, 32x32, for gradient checks).
  static ModelConfig preset(const std::string& name);
};

BlockKind parse_block_kind(const std::string& s);
UpsamplerKind parse_upsampler(const std::string& s);

/// Stage outputs. decoder[0] is the deepest decoder stage (4C channels),
/// decoder[2] the shallowest (C channels), i.e. numbered bottom to top.
template <typename T>
struct FeatureBundle {
  std::array<Tensor<T>, 4> encoder;
  std::array<Tensor<T>, 3> decoder;
};

struct ForwardOptions {
  Mode mode = Mode::train;
  // skips[i] feeds decoder stage i (bottom to top: f3e, f2e, f1e).
  std::array<bool, 3> skips{true, true, true};
};

template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return *store_; }
  const ParamStore<T>& params() const { return *store_; }

  /// img [3,H,W] or [B,3,H,W] -> logits [K,H,W] / [B,K,H,W].
  Tensor<T> forward(const Tensor<T>& img, const ForwardOptions& opts = {}, FeatureBundle<T>* features = nullptr) const;
  Tensor<T> forward(const Tensor<T>& img, Mode mode) const { return forward(img, ForwardOptions{mode, {true, true, true}}); }

  // True once batch-norm running statistics have seen a train-mode batch.
  bool has_running_stats() const;
  std::uint64_t macs(std::size_t H, std::size_t W) const;

 private:
  struct Stage {
    std::optional<PatchEmbed<T>> embed;
    std::optional<PatchMerge<T>> merge;
    std::vector<StateSpaceBlock<T>> blocks;
  };
  struct DecoderStage {
    Upsampler<T> up;
    StateSpaceBlock<T> block;
  };

  ModelConfig cfg_;
  std::unique_ptr<ParamStore<T>> store_;
  std::array<Stage, 4> encoder_;
  std::array<std::optional<DecoderStage>, 3> decoder_;
  std::optional<FLKPE<T>> head_;
};

struct ParamCount {
  std::uint64_t trainable = 0;
  std::uint64_t buffers = 0;  // batch-norm running statistics
  std::uint64_t total() const { return trainable + buffers; }
};

/// Exact element counts of every stored tensor. total() equals the sum of
/// checkpoint tensor extents.
template <typename T>
ParamCount count_params(const Model<T>& model);
/// 2 FLOPs per multiply-add, one sample at H x W.
template <typename T>
std::uint64_t count_flops(const Model<T>& model, std::size_t H, std::size_t W);

// Checkpoint: "MSVC", u16 version, u32 config length + config text, u32
// tensor count, then per tensor u32 name length + name + tensor record.
inline constexpr char kCheckpointMagic[4] = {'M', 'S', 'V', 'C'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointContents {
  std::string config_text;
  std::vector<std::pair<std::string, AnyTensor>> tensors;
};

template <typename T>
void write_checkpoint(std::ostream& os, const Model<T>& model);
template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model);
CheckpointContents read_checkpoint(std::istream& is);
CheckpointContents read_checkpoint_file(const std::string& path);
/// Rebuilds the model from the stored config and loads every tensor;
/// missing, extra or mis-shaped tensors are a FormatError.
template <typename T>
Model<T> load_checkpoint(const std::string& path);

/// Channel mean of [C,H,W] -> [H,W].
template <typename T>
Tensor<T> channel_mean(const Tensor<T>& f);
/// Min-max normalize to [0,255] and write a binary PGM. A constant map
/// becomes uniform mid-gray (128).
template <typename T>
void write_pgm(const std::string& path, const Tensor<T>& map);
/// Writes decoder_layer{1,2,3}.pgm (bottom to top) under `dir`. Uses
/// running batch-norm statistics when available, batch statistics otherwise.
template <typename T>
std::vector<std::string> export_stage_features(const Model<T>& model, const Tensor<T>& img, const std::string& dir);

}  // namespace msvm
