#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "msvm/train.hpp"

namespace msvm {

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string exact(double v) {
  char buf[32];
  return std::string(buf, std::to_chars(buf, buf + sizeof buf, v).ptr);
}

std::string pooling_name(HdPooling p) { return p == HdPooling::pooled ? "pooled" : "max"; }

HdPooling parse_pooling(const std::string& v) {
  if (v == "pooled") return HdPooling::pooled;
  if (v == "max") return HdPooling::max_of_directed;
  throw ConfigError("train.hd_pooling must be 'pooled' or 'max', got '" + v + "'");
}

}  // namespace

// ------------------------------------------------------------------ config

void TrainConfig::validate() const {
  if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("train.lr must be > 0");
  if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be >= 0");
  if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
  if (max_epochs == 0) throw ConfigError("train.max_epochs must be >= 1");
  if (eval_every == 0) throw ConfigError("train.eval_every must be >= 1");
  if (threads == 0) throw ConfigError("train.threads must be >= 1");
}

bool TrainConfig::set(const std::string& key, const std::string& v) {
  const std::string full = "train." + key;
  if (key == "lr") lr = parse_double(full, v);
  else if (key == "weight_decay") weight_decay = parse_double(full, v);
  else if (key == "batch_size") batch_size = parse_size(full, v);
  else if (key == "max_epochs") max_epochs = parse_size(full, v);
  else if (key == "max_steps") max_steps = parse_size(full, v);
  else if (key == "eval_every") eval_every = parse_size(full, v);
  else if (key == "seed") seed = parse_size(full, v);
  else if (key == "threads") threads = parse_size(full, v);
  else if (key == "hd_pooling") hd_pooling = parse_pooling(v);
  else if (key == "augment.hflip") augment.hflip = parse_bool(full, v);
  else if (key == "augment.vflip") augment.vflip = parse_bool(full, v);
  else if (key == "augment.rotate") augment.rotate = parse_bool(full, v);
  else if (key == "augment.noise") augment.noise = parse_bool(full, v);
  else if (key == "augment.blur") augment.blur = parse_bool(full, v);
  else if (key == "augment.contrast") augment.contrast = parse_bool(full, v);
  else if (key == "augment.target") augment.target = parse_size(full, v);
  else return false;
  return true;
}

ConfigMap TrainConfig::to_map() const {
  auto b = [](bool x) { return std::string(x ? "true" : "false"); };
  return {
      {"train.lr", exact(lr)},
      {"train.weight_decay", exact(weight_decay)},
      {"train.batch_size", std::to_string(batch_size)},
      {"train.max_epochs", std::to_string(max_epochs)},
      {"train.max_steps", std::to_string(max_steps)},
      {"train.eval_every", std::to_string(eval_every)},
      {"train.seed", std::to_string(seed)},
      {"train.threads", std::to_string(threads)},
      {"train.hd_pooling", pooling_name(hd_pooling)},
      {"train.augment.hflip", b(augment.hflip)},
      {"train.augment.vflip", b(augment.vflip)},
      {"train.augment.rotate", b(augment.rotate)},
      {"train.augment.noise", b(augment.noise)},
      {"train.augment.blur", b(augment.blur)},
      {"train.augment.contrast", b(augment.contrast)},
      {"train.augment.target", std::to_string(augment.target)},
  };
}

TrainConfig TrainConfig::from_map(const ConfigMap& m) {
  TrainConfig c;
  for (const auto& [k, v] : m) {
    if (k.rfind("train.", 0) != 0) continue;
    if (!c.set(k.substr(6), v)) throw ConfigError("unknown config key '" + k + "'");
  }
  c.validate();
  return c;
}

// ----------------------------------------------------------------- metrics

std::string MetricsReport::text() const {
  std::ostringstream os;
  os << "mean_dsc = " << num(mean_dsc) << "\n";
  os << "mean_hd95 = " << (mean_hd95 ? num(*mean_hd95) : "absent") << "\n";
  os << "loss = " << num(loss) << "\n";
  os << "dice_loss = " << num(dice_loss) << "\n";
  os << "ce_loss = " << num(ce_loss) << "\n";
  for (std::size_t k = 0; k < dsc.size(); ++k) os << "dsc." << k << " = " << num(dsc[k]) << "\n";
  for (std::size_t k = 0; k < hd95.size(); ++k) os << "hd95." << k << " = " << (hd95[k] ? num(*hd95[k]) : "absent") << "\n";
  return os.str();
}

MetricsReport metrics_report(std::span<const LabelMap> preds, std::span<const LabelMap> truths, std::size_t K,
                             HdPooling pooling) {
  if (preds.size() != truths.size()) throw std::invalid_argument("metrics_report: prediction/truth count mismatch");
  MetricsReport r;
  r.dsc.assign(K, 0.0);
  r.hd95.assign(K, std::nullopt);
  std::vector<double> hd_sum(K, 0.0);
  std::vector<std::size_t> hd_n(K, 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto d = dsc_metric(preds[i], truths[i], K);
    const auto h = hd95_metric(preds[i], truths[i], K, pooling);
    for (std::size_t k = 0; k < K; ++k) {
      r.dsc[k] += d[k];
      if (h[k]) {
        hd_sum[k] += *h[k];
        ++hd_n[k];
      }
    }
  }
  if (!preds.empty())
    for (auto& v : r.dsc) v /= double(preds.size());
  for (std::size_t k = 0; k < K; ++k)
    if (hd_n[k]) r.hd95[k] = hd_sum[k] / double(hd_n[k]);
  double s = 0, hs = 0;
  std::size_t hn = 0;
  for (std::size_t k = 1; k < K; ++k) {
    s += r.dsc[k];
    if (r.hd95[k]) {
      hs += *r.hd95[k];
      ++hn;
    }
  }
  r.mean_dsc = K > 1 ? s / double(K - 1) : 0.0;
  if (hn) r.mean_hd95 = hs / double(hn);
  return r;
}

template <typename T>
MetricsReport evaluate(const Model<T>& model, std::span<const SegSample> data, double alpha, std::size_t threads,
                       HdPooling pooling) {
  const std::size_t n = data.size(), K = model.config().num_classes;
  std::vector<LabelMap> preds(n), truths(n);
  std::vector<std::array<double, 3>> losses(n);
  const Mode mode = model.has_running_stats() ? Mode::eval : Mode::train;
  auto work = [&](std::size_t begin, std::size_t step) {
    for (std::size_t i = begin; i < n; i += step) {
      const Tensor<T> img = data[i].image.template cast<T>();
      const Tensor<T> batch = img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)});
      const Tensor<T> logits = model.forward(batch, mode);
      const LabelMap* m = &data[i].mask;
      const auto parts = total_loss(logits, std::span<const LabelMap>(m, 1), alpha);
      losses[i] = {double(parts.total.item()), double(parts.dice.item()), double(parts.ce.item())};
      preds[i] = argmax_labels(logits.reshaped({K, img.dim(1), img.dim(2)}));
      truths[i] = data[i].mask;
    }
  };
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
  }
  auto r = metrics_report(preds, truths, K, pooling);
  for (const auto& l : losses) {
    r.loss += l[0];
    r.dice_loss += l[1];
    r.ce_loss += l[2];
  }
  if (n) {
    r.loss /= double(n);
    r.dice_loss /= double(n);
    r.ce_loss /= double(n);
  }
  return r;
}

template MetricsReport evaluate<float>(const Model<float>&, std::span<const SegSample>, double, std::size_t, HdPooling);
template MetricsReport evaluate<double>(const Model<double>&, std::span<const SegSample>, double, std::size_t, HdPooling);

// ------------------------------------------------------------------- train

TrainResult train_loop(Model<float>& model, std::span<const SegSample> data, const TrainConfig& cfg,
                       const std::string& out_dir) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train_loop: empty dataset");
  const double alpha = model.config().alpha;
  const std::size_t n = data.size(), bs = std::min(cfg.batch_size, n);
  const std::size_t per_epoch = (n + bs - 1) / bs;
  std::uint64_t total_steps = std::uint64_t(per_epoch) * cfg.max_epochs;
  if (cfg.max_steps) total_steps = std::min<std::uint64_t>(total_steps, cfg.max_steps);

  std::ofstream csv;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    csv.open(std::filesystem::path(out_dir) / "metrics.csv");
    if (!csv) throw std::runtime_error("cannot write metrics.csv in " + out_dir);
    csv << kMetricsCsvHeader << "\n";
  }

  std::vector<Parameter<float>*> params;
  for (std::size_t i = 0; i < model.params().size(); ++i)
    if (model.params()[i].trainable) params.push_back(&model.params()[i]);
  AdamWOptions opt;
  opt.weight_decay = cfg.weight_decay;
  AdamWState<float> state;

  // eval data matches what the model sees after the resize step
  std::vector<SegSample> eval_data;
  for (const auto& s : data) eval_data.push_back(cfg.augment.target ? resize(s, cfg.augment.target, cfg.augment.target) : s);

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(n);
  TrainResult res;
  double lr = cfg.lr;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs && res.steps < total_steps; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    double sum_loss = 0, sum_dice = 0, sum_ce = 0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < n && res.steps < total_steps; b0 += bs) {
      std::vector<SegSample> batch;
      for (std::size_t j = b0; j < std::min(b0 + bs, n); ++j) batch.push_back(augment(data[order[j]], rng, cfg.augment));
      const auto masks = masks_of(batch);
      Tape<float> tape;
      LossParts<float> parts;
      auto diverged = [&](const std::string& what) {
        return TrainingDiverged("training diverged at step " + std::to_string(res.steps + 1) + " (epoch " +
                                std::to_string(epoch) + ", lr=" + num(lr) + "): " + what);
      };
      try {
        TapeScope<float> scope(tape);
        const auto logits = model.forward(stack_images(batch), Mode::train);
        parts = total_loss(logits, std::span<const LabelMap>(masks), alpha);
      } catch (const NonFiniteError& e) {
        throw diverged(e.what());
      }
      const double loss = parts.total.item();
      if (!std::isfinite(loss)) {
        throw diverged("loss=" + num(loss) + " dice=" + num(parts.dice.item()) + " ce=" + num(parts.ce.item()));
      }
      try {
        tape.backward(parts.total);
      } catch (const NonFiniteError& e) {
        throw diverged(e.what());
      }
      std::vector<Tensor<float>> grads;
      grads.reserve(params.size());
      for (auto* p : params) grads.push_back(tape.grad(*p));
      lr = cosine_lr(res.steps, total_steps, cfg.lr);
      adamw_step<float>(params, grads, state, lr, opt);
      ++res.steps;
      ++batches;
      sum_loss += loss;
      sum_dice += parts.dice.item();
      sum_ce += parts.ce.item();
    }
    res.epochs = epoch;
    const bool last = res.steps >= total_steps || epoch == cfg.max_epochs;
    if (epoch % cfg.eval_every != 0 && !last) continue;
    auto report = evaluate(model, std::span<const SegSample>(eval_data), alpha, cfg.threads, cfg.hd_pooling);
    if (csv.is_open()) {
      csv << epoch << "," << res.steps << "," << num(lr) << "," << num(sum_loss / double(batches)) << ","
          << num(sum_dice / double(batches)) << "," << num(sum_ce / double(batches)) << "," << num(report.mean_dsc)
          << "," << (report.mean_hd95 ? num(*report.mean_hd95) : "") << "\n";
      csv.flush();
    }
    if (report.mean_dsc > res.best_dsc) {
      res.best_dsc = report.mean_dsc;
      res.best_epoch = epoch;
      if (!out_dir.empty()) save_checkpoint((std::filesystem::path(out_dir) / "best.ckpt").string(), model);
    }
    res.final_report = std::move(report);
  }
  if (!out_dir.empty()) save_checkpoint((std::filesystem::path(out_dir) / "last.ckpt").string(), model);
  return res;
}

}  // namespace msvm
