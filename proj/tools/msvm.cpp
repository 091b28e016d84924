#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "msvm/grad_suite.hpp"
#include "msvm/train.hpp"

namespace fs = std::filesystem;
using namespace msvm;

namespace {

constexpr int kExitArgs = 1, kExitRuntime = 2, kExitGradcheck = 3;

// Published reference row for the tiny224 configuration.
constexpr double kReferenceGFlops = 15.53, kReferenceMParams = 35.93;

struct Common {
  std::string config_path, preset = "toy", out_dir;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
};

void add_common(CLI::App* sub, Common& c, bool with_out_dir = true) {
  sub->add_option("--config", c.config_path, "key = value config file")->check(CLI::ExistingFile);
  sub->add_option("--preset", c.preset, "model preset: toy, tiny224, micro")->capture_default_str();
  sub->add_option("--set", c.overrides, "override, e.g. --set train.lr=1e-3 (repeatable)");
  sub->add_option("--seed", c.seed, "seed for data, init and training");
  sub->add_option("--threads", c.threads, "worker threads");
  if (with_out_dir) sub->add_option("--out-dir", c.out_dir, "output directory");
}

struct Settings {
  ModelConfig model;
  TrainConfig train;
  std::size_t data_samples = 8;
  std::optional<std::uint64_t> data_seed;
  ConfigMap merged;

  std::uint64_t seed() const { return train.seed; }
  std::uint64_t data_seed_or_default() const { return data_seed.value_or(train.seed); }
};

// preset < config file < --set < --seed/--threads
Settings resolve(const Common& c) {
  ConfigMap m;
  if (!c.config_path.empty()) m = load_config_file(c.config_path);
  std::string preset = c.preset;
  if (auto it = m.find("preset"); it != m.end()) {
    preset = it->second;
    m.erase(it);
  }
  for (const auto& kv : c.overrides) {
    auto [k, v] = parse_override(kv);
    if (k == "preset") preset = v;
    else m[k] = v;
  }
  if (c.seed) m["train.seed"] = std::to_string(*c.seed);
  if (c.threads) m["train.threads"] = std::to_string(*c.threads);

  Settings s;
  s.model = ModelConfig::preset(preset);
  for (const auto& [k, v] : m) {
    if (k.rfind("model.", 0) == 0) {
      if (!s.model.set(k.substr(6), v)) throw ConfigError("unknown config key '" + k + "'");
    } else if (k.rfind("train.", 0) == 0) {
      if (!s.train.set(k.substr(6), v)) throw ConfigError("unknown config key '" + k + "'");
    } else if (k == "data.samples") {
      s.data_samples = parse_size(k, v);
    } else if (k == "data.seed") {
      s.data_seed = parse_size(k, v);
    } else {
      throw ConfigError("unknown config key '" + k + "'");
    }
  }
  s.model.validate();
  s.train.validate();
  s.merged = s.model.to_map();
  for (auto& kv : s.train.to_map()) s.merged.insert(kv);
  s.merged["data.samples"] = std::to_string(s.data_samples);
  if (s.data_seed) s.merged["data.seed"] = std::to_string(*s.data_seed);
  return s;
}

Dataset synthetic(const Settings& s) {
  Rng rng(s.data_seed_or_default());
  Rng data_rng = rng.fork(0xda7a);
  return {s.model.num_classes, s.model.height,
          gen_synthetic_dataset(s.data_samples, s.model.num_classes, s.model.height, data_rng)};
}

// Brings samples to the model's input extent.
std::vector<SegSample> fit_to(const Dataset& d, const ModelConfig& cfg) {
  std::vector<SegSample> out;
  for (const auto& x : d.samples) {
    const bool same = x.image.dim(1) == cfg.height && x.image.dim(2) == cfg.width;
    out.push_back(same ? x : resize(x, cfg.height, cfg.width));
  }
  return out;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
  if (!f) throw std::runtime_error("cannot write " + p.string());
}

void require_out_dir(const Common& c) {
  if (c.out_dir.empty()) throw CLI::ValidationError("--out-dir", "is required for this subcommand");
}

// ---------------------------------------------------------------- commands

int cmd_gen_data(const Common& c) {
  require_out_dir(c);
  const auto s = resolve(c);
  const auto d = synthetic(s);
  write_dataset(c.out_dir, d);
  std::cout << "wrote " << d.samples.size() << " samples (K=" << d.num_classes << ", " << d.size << "x" << d.size
            << ") to " << c.out_dir << "\n";
  return 0;
}

int cmd_train(const Common& c, const std::string& data_dir) {
  require_out_dir(c);
  const auto s = resolve(c);
  fs::create_directories(c.out_dir);
  Dataset d = data_dir.empty() ? synthetic(s) : read_dataset(data_dir);
  if (d.num_classes != s.model.num_classes)
    throw ConfigError("dataset has " + std::to_string(d.num_classes) + " classes, model.num_classes is " +
                      std::to_string(s.model.num_classes));
  if (data_dir.empty()) write_dataset((fs::path(c.out_dir) / "data").string(), d);
  write_text(fs::path(c.out_dir) / "config.cfg", config_text(s.merged));
  const auto samples = fit_to(d, s.model);
  Model<float> model(s.model, s.seed());
  const auto res = train_loop(model, samples, s.train, c.out_dir);
  std::cout << "steps = " << res.steps << "\nepochs = " << res.epochs << "\nbest_epoch = " << res.best_epoch
            << "\nbest_mean_dsc = " << res.best_dsc << "\n"
            << res.final_report.text();
  return 0;
}

int cmd_eval(const Common& c, const std::string& ckpt, const std::string& data_dir) {
  const auto s = resolve(c);
  const auto model = load_checkpoint<float>(ckpt);
  Dataset d = read_dataset(data_dir);
  if (d.num_classes != model.config().num_classes) throw ConfigError("dataset and checkpoint disagree on K");
  const auto samples = fit_to(d, model.config());
  const auto report =
      evaluate(model, std::span<const SegSample>(samples), model.config().alpha, s.train.threads, s.train.hd_pooling);
  const auto text = report.text();
  std::cout << text;
  if (!c.out_dir.empty()) {
    fs::create_directories(c.out_dir);
    write_text(fs::path(c.out_dir) / "report.txt", text);
  }
  return 0;
}

int cmd_gradcheck(const Common& c) {
  const auto s = resolve(c);
  GradSuiteOptions o;
  o.seed = s.seed();
  bool ok = true;
  std::printf("%-6s %-20s %5s %12s %9s %s\n", "group", "name", "seeds", "max_rel_err", "tol", "result");
  run_grad_suite(o, [&](const GradSuiteEntry& e) {
    ok = ok && e.pass();
    std::printf("%-6s %-20s %5zu %12.3e %9.1e %s\n", e.group.c_str(), e.name.c_str(), e.seeds, e.max_rel_error,
                e.tolerance, e.pass() ? "PASS" : "FAIL");
    std::fflush(stdout);
  });
  std::printf("gradcheck %s\n", ok ? "PASS" : "FAIL");
  return ok ? 0 : kExitGradcheck;
}

int cmd_bench(const Common& c, const std::vector<std::size_t>& lengths, std::size_t N, std::size_t C,
              std::size_t chunk, std::size_t reps) {
  const auto s = resolve(c);
  const auto rows = bench_scan(lengths, N, C, chunk, reps, s.seed(), s.train.threads);
  const auto csv = bench_csv(rows);
  std::cout << csv;
  if (!c.out_dir.empty()) {
    fs::create_directories(c.out_dir);
    write_text(fs::path(c.out_dir) / "bench_scan.csv", csv);
  }
  return 0;
}

int cmd_export(const Common& c, const std::string& ckpt, const std::string& data_dir, std::size_t index) {
  require_out_dir(c);
  const auto s = resolve(c);
  Model<float> model = ckpt.empty() ? Model<float>(s.model, s.seed()) : load_checkpoint<float>(ckpt);
  Dataset d = data_dir.empty() ? synthetic(s) : read_dataset(data_dir);
  const auto samples = fit_to(d, model.config());
  if (index >= samples.size()) throw ConfigError("--index out of range");
  const auto& img = samples[index].image;
  const auto files = export_stage_features(model, img, c.out_dir);
  for (const auto& f : files) std::cout << f << "\n";
  return 0;
}

int cmd_count(const Common& c) {
  const auto s = resolve(c);
  Model<float> model(s.model, s.seed());
  const auto pc = count_params(model);
  const double gflops = double(count_flops(model, s.model.height, s.model.width)) / 1e9;
  std::printf("%-28s %12s %12s\n", "model", "#FLOPs (G)", "#Params (M)");
  std::printf("%-28s %12.2f %12.2f\n", "computed", gflops, double(pc.trainable) / 1e6);
  const auto tiny = ModelConfig::preset("tiny224");
  if (s.model.base_channels == tiny.base_channels && s.model.depths == tiny.depths && s.model.height == tiny.height) {
    std::printf("%-28s %12.2f %12.2f\n", "reference (published, tiny)", kReferenceGFlops, kReferenceMParams);
    std::printf("note: reference row is a labeled diagnostic, not a pass/fail gate\n");
  }
  std::printf("input = %zux%zu, base_channels = %zu, depths = %s, num_classes = %zu\n", s.model.height, s.model.width,
              s.model.base_channels,
              size_list_text({s.model.depths.begin(), s.model.depths.end()}).c_str(), s.model.num_classes);
  std::printf("trainable = %llu\nbuffers = %llu\ntotal = %llu\nflops = %llu\n", (unsigned long long)pc.trainable,
              (unsigned long long)pc.buffers, (unsigned long long)pc.total(),
              (unsigned long long)count_flops(model, s.model.height, s.model.width));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"msvm: state-space U-shaped segmentation toolkit"};
  app.require_subcommand(1);
  Common c;
  std::string data_dir, ckpt;
  std::size_t index = 0;
  std::vector<std::size_t> lengths{64, 256, 1024};
  std::size_t bench_N = 16, bench_C = 8, bench_chunk = 64, bench_reps = 3;

  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset");
  add_common(gen, c);
  auto* train = app.add_subcommand("train", "train a model, write checkpoints and metrics.csv");
  add_common(train, c);
  train->add_option("--data", data_dir, "dataset directory (default: synthetic from config)");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  add_common(eval, c);
  eval->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  eval->add_option("--data", data_dir, "dataset directory")->required();
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  add_common(grad, c, false);
  auto* bench = app.add_subcommand("bench-scan", "sequential vs chunked scan timings as CSV");
  add_common(bench, c);
  bench->add_option("--lengths", lengths, "sequence lengths")->capture_default_str();
  bench->add_option("--state", bench_N, "state size N")->capture_default_str();
  bench->add_option("--channels", bench_C, "channels C")->capture_default_str();
  bench->add_option("--chunk", bench_chunk, "chunk length")->capture_default_str();
  bench->add_option("--reps", bench_reps, "repetitions")->capture_default_str();
  auto* exp = app.add_subcommand("export-features", "write decoder-stage heat maps as PGM");
  add_common(exp, c);
  exp->add_option("--checkpoint", ckpt, "checkpoint (default: freshly initialized model)");
  exp->add_option("--data", data_dir, "dataset directory (default: synthetic from config)");
  exp->add_option("--index", index, "sample index")->capture_default_str();
  auto* count = app.add_subcommand("count", "parameter and FLOP table");
  add_common(count, c, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitArgs;
  }

  try {
    if (*gen) return cmd_gen_data(c);
    if (*train) return cmd_train(c, data_dir);
    if (*eval) return cmd_eval(c, ckpt, data_dir);
    if (*grad) return cmd_gradcheck(c);
    if (*bench) return cmd_bench(c, lengths, bench_N, bench_C, bench_chunk, bench_reps);
    if (*exp) return cmd_export(c, ckpt, data_dir, index);
    if (*count) return cmd_count(c);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitArgs;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitArgs;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitArgs;
}
