#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msvm/metrics.hpp"
#include "msvm/model.hpp"

namespace msvm {

struct SegSample {
  std::string id;
  Tensor<float> image;  // [3,H,W] in [0,1]
  LabelMap mask;
};

// ------------------------------------------------------------------- losses

/// 1 - mean_k (2 sum p g + eps) / (sum p + sum g + eps), sums over the
/// whole batch. probs is [K,H,W] or [B,K,H,W]; one mask per sample.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& probs, std::span<const LabelMap> masks, T eps = T(1e-5));
/// Mean over pixels of -log softmax(logits)[true class].
template <typename T>
Tensor<T> ce_loss(const Tensor<T>& logits, std::span<const LabelMap> masks);

template <typename T>
struct LossParts {
  Tensor<T> total, dice, ce;
};
/// alpha * Dice(softmax(logits)) + (1 - alpha) * CE(logits).
template <typename T>
LossParts<T> total_loss(const Tensor<T>& logits, std::span<const LabelMap> masks, double alpha);

// ---------------------------------------------------------------- optimizer

struct AdamWOptions {
  double weight_decay = 1e-4;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamWState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t step = 0;
};

/// p <- p - lr*wd*p, then the bias-corrected Adam update. `grads[i]` may be
/// empty (no gradient reached the parameter): only the decay applies.
template <typename T>
void adamw_step(std::span<Parameter<T>* const> params, std::span<const Tensor<T>> grads, AdamWState<T>& state,
                double lr, const AdamWOptions& opts = {});

double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double lr0);

// -------------------------------------------------------------------- data

struct AugmentToggles {
  bool hflip = true, vflip = true, rotate = true, noise = true, blur = true, contrast = true;
  std::size_t target = 0;  // resize to target x target first; 0 keeps the size

  static AugmentToggles none() { return {false, false, false, false, false, false, 0}; }
};

SegSample resize(const SegSample& s, std::size_t H, std::size_t W);
SegSample hflip(const SegSample& s);
SegSample vflip(const SegSample& s);
/// Rotation about the centre; bilinear for the image, nearest for the mask,
/// zero / background outside the source.
SegSample rotate(const SegSample& s, double radians);
/// Resize first, then each enabled augmentation with probability 0.5.
SegSample augment(const SegSample& s, Rng& rng, const AugmentToggles& t);

/// K-1 anti-aliased ellipses/rectangles (one per foreground class, each
/// with its own colour) over a textured background.
std::vector<SegSample> gen_synthetic_dataset(std::size_t n, std::size_t K, std::size_t size, Rng& rng);

struct Dataset {
  std::size_t num_classes = 0;
  std::size_t size = 0;
  std::vector<SegSample> samples;
};

/// manifest.txt (num_classes=, size=, sample=<id> lines) plus
/// <id>.image.msvt and <id>.mask.msvt tensor records.
void write_dataset(const std::string& dir, const Dataset& d);
Dataset read_dataset(const std::string& dir);

Tensor<float> stack_images(std::span<const SegSample> batch);
std::vector<LabelMap> masks_of(std::span<const SegSample> batch);
/// Per-pixel argmax over the class axis of [K,H,W].
template <typename T>
LabelMap argmax_labels(const Tensor<T>& logits);

// ------------------------------------------------------------------- loops

struct TrainConfig {
  double lr = 5e-4;
  double weight_decay = 1e-4;
  std::size_t batch_size = 8;
  std::size_t max_epochs = 200;
  std::size_t max_steps = 0;  // 0: no cap beyond max_epochs
  std::size_t eval_every = 1;  // epochs
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  AugmentToggles augment;
  HdPooling hd_pooling = HdPooling::pooled;

  void validate() const;
  bool set(const std::string& key, const std::string& value);  // relative to "train."
  ConfigMap to_map() const;
  static TrainConfig from_map(const ConfigMap& m);
};

struct MetricsReport {
  std::vector<double> dsc;                  // per class, averaged over samples
  std::vector<std::optional<double>> hd95;  // per class, over samples where defined
  double mean_dsc = 0;                      // over foreground classes 1..K-1
  std::optional<double> mean_hd95;
  double loss = 0, dice_loss = 0, ce_loss = 0;

  std::string text() const;
};

/// Eval-mode forward per sample (parallel over samples with `threads`),
/// argmax, per-sample metrics, averaged over samples then classes.
template <typename T>
MetricsReport evaluate(const Model<T>& model, std::span<const SegSample> data, double alpha, std::size_t threads = 1,
                       HdPooling pooling = HdPooling::pooled);

/// Computes per-sample metrics from precomputed predictions.
MetricsReport metrics_report(std::span<const LabelMap> preds, std::span<const LabelMap> truths, std::size_t K,
                             HdPooling pooling = HdPooling::pooled);

struct TrainResult {
  std::uint64_t steps = 0;
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;
  double best_dsc = -1;
  MetricsReport final_report;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shuffled mini-batches, total loss, AdamW with a per-step cosine
/// schedule. Writes metrics.csv, best.ckpt (highest train mean DSC) and
/// last.ckpt to out_dir when it is non-empty.
TrainResult train_loop(Model<float>& model, std::span<const SegSample> data, const TrainConfig& cfg,
                       const std::string& out_dir);

inline constexpr const char* kMetricsCsvHeader = "epoch,step,lr,loss,dice_loss,ce_loss,mean_dsc,mean_hd95";

}  // namespace msvm
