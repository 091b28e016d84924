// Acceptance checks: one PASS/FAIL line per criterion. Usage:
//   acceptance <msvm-cli> <toy.cfg> <work-dir>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "msvm/grad_suite.hpp"
#include "msvm/train.hpp"

namespace fs = std::filesystem;
using namespace msvm;
using Clock = std::chrono::steady_clock;

namespace {

// pinned tolerances and budgets
constexpr double kOpGradTol = 1e-4;
constexpr double kModelGradTol = 1e-3;
constexpr std::size_t kOpSeeds = 20, kBlockSeeds = 3;
constexpr double kGradBudgetSec = 300;
constexpr double kScanTol = 1e-12;
constexpr std::size_t kScanCases = 200;
constexpr double kLossTol = 1e-12, kUniformCeTol = 1e-9;
constexpr double kOverfitDsc = 0.95;
constexpr std::uint64_t kOverfitMaxSteps = 500;
constexpr double kOverfitBudgetSec = 15 * 60;

std::string g_cli, g_cfg;
fs::path g_work;
int g_failures = 0;

void report(bool ok, const std::string& name, const std::string& detail) {
  std::cout << (ok ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
  if (!ok) ++g_failures;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

// Runs the CLI with stdout/stderr captured to `log`; returns the exit code.
int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = "\"" + g_cli + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string fmt(double v) {
  char b[40];
  std::snprintf(b, sizeof b, "%.3g", v);
  return b;
}

Tensor<double> rand_t(Shape s, Rng& rng, double lo, double hi) {
  std::vector<double> d(numel(s));
  for (auto& v : d) v = rng.uniform(lo, hi);
  return Tensor<double>(std::move(s), std::move(d));
}

LabelMap rand_labels(std::size_t H, std::size_t W, std::size_t K, Rng& rng, bool blobs) {
  LabelMap m(H, W);
  if (!blobs) {
    for (auto& v : m.ids) v = static_cast<std::uint16_t>(rng.below(K));
    return m;
  }
  for (std::size_t k = 1; k < K; ++k)
    for (int r = 0; r < 2; ++r) {
      const auto y0 = rng.below(H), x0 = rng.below(W);
      const auto h = 1 + rng.below(H / 2 + 1), w = 1 + rng.below(W / 2 + 1);
      for (std::size_t y = y0; y < std::min(H, y0 + h); ++y)
        for (std::size_t x = x0; x < std::min(W, x0 + w); ++x) m.at(y, x) = static_cast<std::uint16_t>(k);
    }
  return m;
}

// ------------------------------------------------------------- criteria

void gradient_suite() {
  const auto t0 = Clock::now();
  GradSuiteOptions o;
  o.seed = 7;
  o.op_seeds = kOpSeeds;
  o.block_seeds = kBlockSeeds;
  o.op_tolerance = o.block_tolerance = kOpGradTol;
  o.model_tolerance = kModelGradTol;
  const auto entries = run_grad_suite(o);
  const double secs = seconds_since(t0);
  bool ok = secs <= kGradBudgetSec;
  double worst_op = 0, worst_block = 0, model = 0;
  std::string failed;
  std::set<std::string> names;
  for (const auto& e : entries) {
    names.insert(e.name);
    if (!e.pass()) {
      ok = false;
      failed += " " + e.name;
    }
    if (e.group == "op") worst_op = std::max(worst_op, e.max_rel_error);
    if (e.group == "block") worst_block = std::max(worst_block, e.max_rel_error);
    if (e.group == "model") model = e.max_rel_error;
  }
  for (const char* required : {"SS2DBlock", "MS-FFN", "MSVSS", "VSS", "LKPE", "FLKPE", "micro"})
    if (!names.count(required)) {
      ok = false;
      failed += std::string(" missing:") + required;
    }
  report(ok, "gradient-suite",
         std::to_string(entries.size()) + " entries, worst op " + fmt(worst_op) + ", worst block " + fmt(worst_block) +
             ", micro model " + fmt(model) + ", " + fmt(secs) + " s" + (failed.empty() ? "" : "; failed:" + failed));
}

void scan_oracle() {
  Rng rng(2024);
  double worst = 0;
  std::size_t runs = 0;
  for (std::size_t t = 0; t < kScanCases; ++t) {
    const std::size_t L = 1 + rng.below(512), N = 1 + rng.below(16), C = 1 + rng.below(8);
    ScanParams<double> p{rand_t({C, N}, rng, -1, 1), rand_t({C}, rng, -1, 1), rand_t({L, C}, rng, 0.01, 1.0),
                         rand_t({L, N}, rng, -1, 1), rand_t({L, N}, rng, -1, 1)};
    const auto x = rand_t({L, C}, rng, -1, 1);
    const auto ref = selective_scan_seq(x, p);
    for (std::size_t chunk : {std::size_t(1), std::size_t(2), std::size_t(7), std::size_t(64), L}) {
      worst = std::max(worst, max_abs_diff(selective_scan_chunked(x, p, chunk, 1 + runs % 3), ref));
      ++runs;
    }
  }
  bool exact = true;
  for (int t = 0; t < 20; ++t) {
    const std::size_t C = 1 + rng.below(6), H = 1 + rng.below(12), W = 1 + rng.below(12);
    const auto f = rand_t({C, H, W}, rng, -10, 10);
    exact = exact && max_abs_diff(cross_merge(cross_scan(f), H, W), scale(f, 4.0)) == 0.0;
  }
  report(worst <= kScanTol && exact, "scan-oracle",
         std::to_string(kScanCases) + " cases x 5 chunk sizes (" + std::to_string(runs) + " runs), max |chunked-seq| " +
             fmt(worst) + "; cross_merge(cross_scan) == 4x " + (exact ? "exactly" : "NOT exactly"));
}

std::vector<std::pair<long, long>> brute_boundary(const LabelMap& m, std::size_t k) {
  std::vector<std::pair<long, long>> out;
  for (long y = 0; y < long(m.H); ++y)
    for (long x = 0; x < long(m.W); ++x) {
      if (m.at(y, x) != k) continue;
      bool b = false;
      for (long dy = -1; dy <= 1; ++dy)
        for (long dx = -1; dx <= 1; ++dx) {
          const long yy = y + dy, xx = x + dx;
          b |= yy < 0 || xx < 0 || yy >= long(m.H) || xx >= long(m.W) || m.at(yy, xx) != k;
        }
      if (b) out.emplace_back(y, x);
    }
  return out;
}

std::optional<double> brute_hd95(const LabelMap& a, const LabelMap& b, std::size_t k) {
  const auto ba = brute_boundary(a, k), bb = brute_boundary(b, k);
  if (ba.empty() || bb.empty()) return std::nullopt;
  std::vector<double> d;
  for (int dir = 0; dir < 2; ++dir) {
    const auto& from = dir ? bb : ba;
    const auto& to = dir ? ba : bb;
    for (auto [y, x] : from) {
      long best = -1;
      for (auto [yy, xx] : to) {
        const long s = (y - yy) * (y - yy) + (x - xx) * (x - xx);
        if (best < 0 || s < best) best = s;
      }
      d.push_back(std::sqrt(double(best)));
    }
  }
  std::sort(d.begin(), d.end());
  const double pos = 0.95 * double(d.size() - 1);
  const auto lo = std::size_t(pos);
  const auto hi = std::min(lo + 1, d.size() - 1);
  return d[lo] + (d[hi] - d[lo]) * (pos - double(lo));
}

void metric_oracles() {
  Rng rng(99);
  std::size_t hd_mismatch = 0, hd_classes = 0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t H = 2 + rng.below(63), W = 2 + rng.below(63), K = 2 + rng.below(3);
    const auto a = rand_labels(H, W, K, rng, true), b = rand_labels(H, W, K, rng, t % 5 != 0);
    const auto got = hd95_metric(a, b, K);
    for (std::size_t k = 0; k < K; ++k) {
      const auto want = brute_hd95(a, b, k);
      ++hd_classes;
      if (got[k].has_value() != want.has_value() || (want && *got[k] != *want)) ++hd_mismatch;
    }
  }
  std::size_t dsc_mismatch = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t H = 1 + rng.below(32), W = 1 + rng.below(32), K = 2 + rng.below(4);
    const auto a = rand_labels(H, W, K, rng, t % 2), b = rand_labels(H, W, K, rng, false);
    const auto got = dsc_metric(a, b, K);
    for (std::size_t k = 0; k < K; ++k) {
      std::set<std::size_t> P, T;
      for (std::size_t i = 0; i < a.ids.size(); ++i) {
        if (a.ids[i] == k) P.insert(i);
        if (b.ids[i] == k) T.insert(i);
      }
      std::size_t both = 0;
      for (auto i : P) both += T.count(i);
      const double want = P.empty() && T.empty() ? 1.0 : 2.0 * double(both) / double(P.size() + T.size());
      dsc_mismatch += got[k] != want;
    }
  }
  const auto m = rand_labels(40, 40, 4, rng, true);
  bool identity = true;
  for (double v : dsc_metric(m, m, 4)) identity &= v == 1.0;
  for (const auto& v : hd95_metric(m, m, 4)) identity &= !v || *v == 0.0;
  report(hd_mismatch == 0 && dsc_mismatch == 0 && identity, "metric-oracles",
         "hd95 vs all-pairs: " + std::to_string(hd_mismatch) + " mismatches over " + std::to_string(hd_classes) +
             " class slots (50 masks); dsc vs set counting: " + std::to_string(dsc_mismatch) +
             " mismatches (100 pairs); identical masks DSC=1, HD95=0: " + (identity ? "yes" : "no"));
}

void loss_contract() {
  Rng rng(5);
  double worst_combo = 0, worst_ln = 0;
  for (int t = 0; t < 20; ++t) {
    const std::size_t K = 2 + rng.below(7), H = 2 + rng.below(10), W = 2 + rng.below(10);
    std::vector<LabelMap> masks{rand_labels(H, W, K, rng, false), rand_labels(H, W, K, rng, false)};
    const auto logits = rand_t({2, K, H, W}, rng, -4, 4);
    const auto parts = total_loss(logits, std::span<const LabelMap>(masks), 0.6);
    worst_combo = std::max(worst_combo, std::abs(parts.total.item() - (0.6 * parts.dice.item() + 0.4 * parts.ce.item())));
    const auto uniform = Tensor<double>::full({2, K, H, W}, rng.uniform(-3, 3));
    worst_ln = std::max(worst_ln, std::abs(ce_loss(uniform, std::span<const LabelMap>(masks)).item() - std::log(double(K))));
  }
  report(worst_combo <= kLossTol && worst_ln <= kUniformCeTol, "loss-contract",
         "|total - (0.6 Dice + 0.4 CE)| max " + fmt(worst_combo) + " (tol 1e-12); |CE(uniform) - ln K| max " +
             fmt(worst_ln) + " (tol 1e-9)");
}

std::optional<double> report_value(const std::string& text, const std::string& key) {
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line))
    if (line.rfind(key + " = ", 0) == 0) return std::stod(line.substr(key.size() + 3));
  return std::nullopt;
}

void overfit() {
  const auto dir = g_work / "overfit";
  fs::remove_all(dir);
  const auto t0 = Clock::now();
  const int rc = run_cli("train --config \"" + g_cfg + "\" --seed 1 --threads 1 --out-dir \"" + dir.string() + "\"",
                         g_work / "overfit.log");
  const double secs = seconds_since(t0);
  if (rc != 0) {
    report(false, "overfit", "train exited with " + std::to_string(rc) + ", see " + (g_work / "overfit.log").string());
    return;
  }
  // first logged step at which the train-set mean DSC reached the bar
  std::istringstream csv(read_file(dir / "metrics.csv"));
  std::string line;
  std::getline(csv, line);
  std::uint64_t first = 0, last_step = 0;
  while (std::getline(csv, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() < 7) continue;
    last_step = std::stoull(f[1]);
    if (!first && std::stod(f[6]) >= kOverfitDsc) first = last_step;
  }
  const int erc = run_cli("eval --checkpoint \"" + (dir / "best.ckpt").string() + "\" --data \"" +
                              (dir / "data").string() + "\" --threads 1",
                          g_work / "overfit_eval.txt");
  const auto dsc = report_value(read_file(g_work / "overfit_eval.txt"), "mean_dsc");
  const bool ok = erc == 0 && dsc && *dsc >= kOverfitDsc && first > 0 && last_step <= kOverfitMaxSteps &&
                  secs <= kOverfitBudgetSec;
  report(ok, "overfit",
         "toy C=16 depths [1,1,1,1] 64x64 K=4, 8 samples: DSC >= 0.95 first logged at step " + std::to_string(first) +
             " of " + std::to_string(last_step) + "; eval mean DSC " + (dsc ? fmt(*dsc) : "n/a") + "; train " +
             fmt(secs) + " s");
}

void ablations() {
  struct Variant {
    std::string name, sets;
  };
  std::vector<Variant> vs;
  for (const char* up : {"patch_expand", "lkpe"})
    for (const char* blk : {"vss", "msvss"})
      vs.push_back({std::string("components ") + up + "+" + blk,
                    std::string("--set model.upsampler=") + up + " --set model.decoder_block=" + blk});
  for (const char* up : {"patch_expand", "lkpe", "transposed_conv", "upsample_block"})
    vs.push_back({std::string("upsampler ") + up, std::string("--set model.upsampler=") + up});
  for (const char* ks : {"[1, 3, 5]", "[3, 5, 7]", "[1, 3, 5, 7]"})
    vs.push_back({std::string("kernels ") + ks, std::string("--set \"model.kernel_set=") + ks + "\""});
  std::size_t ok = 0;
  std::string failed;
  for (std::size_t i = 0; i < vs.size(); ++i) {
    const auto dir = g_work / ("ablation" + std::to_string(i));
    fs::remove_all(dir);
    const std::string common = " --preset toy --seed 3 --set data.samples=2 --set train.batch_size=2"
                               " --set train.max_steps=1 --set train.max_epochs=1 ";
    const int rc = run_cli("train" + common + vs[i].sets + " --out-dir \"" + dir.string() + "\"", dir.string() + ".log");
    const int erc = rc == 0 ? run_cli("eval --checkpoint \"" + (dir / "last.ckpt").string() + "\" --data \"" +
                                          (dir / "data").string() + "\"",
                                      dir.string() + ".eval")
                            : -1;
    if (rc == 0 && erc == 0 && report_value(read_file(dir.string() + ".eval"), "mean_dsc")) ++ok;
    else failed += " [" + vs[i].name + "]";
  }
  report(ok == vs.size(), "ablation-plumbing",
         std::to_string(ok) + "/" + std::to_string(vs.size()) +
             " configurations (4 component combos, 4 upsamplers, 3 kernel sets) trained one step and evaluated via the CLI" +
             (failed.empty() ? "" : "; failed:" + failed));
}

void shape_ladder() {
  auto cfg = ModelConfig::preset("tiny224");
  Model<float> model(cfg, 1);
  Rng rng(1);
  std::vector<float> px(3 * 224 * 224);
  for (auto& v : px) v = float(rng.uniform());
  FeatureBundle<float> fb;
  const auto out = model.forward(Tensor<float>({1, 3, 224, 224}, px), ForwardOptions{}, &fb);
  const Shape want[4] = {{1, 96, 56, 56}, {1, 192, 28, 28}, {1, 384, 14, 14}, {1, 768, 7, 7}};
  bool ok = out.shape() == Shape{1, cfg.num_classes, 224, 224};
  std::string got;
  for (int i = 0; i < 4; ++i) {
    ok = ok && fb.encoder[i].shape() == want[i];
    got += (i ? " / " : "") + shape_str(fb.encoder[i].shape());
  }
  report(ok, "shape-ladder", "C=96 at 224x224: stages " + got + ", head " + shape_str(out.shape()));
}

void accounting() {
  bool ok = true;
  std::string detail;
  for (const char* preset : {"toy", "tiny224"}) {
    Model<float> m(ModelConfig::preset(preset), 2);
    std::stringstream ss;
    write_checkpoint(ss, m);
    const auto back = read_checkpoint(ss);
    std::uint64_t extent = 0;
    for (const auto& [name, t] : back.tensors) std::visit([&](const auto& x) { extent += x.numel(); }, t);
    const auto pc = count_params(m);
    ok = ok && pc.total() == extent;
    detail += std::string(preset) + ": count " + std::to_string(pc.total()) + " vs checkpoint " + std::to_string(extent) +
              "; ";
  }
  const int rc = run_cli("count --preset tiny224", g_work / "count.txt");
  const auto table = read_file(g_work / "count.txt");
  const bool printed = rc == 0 && table.find("#FLOPs (G)") != std::string::npos &&
                       table.find("#Params (M)") != std::string::npos && table.find("15.53") != std::string::npos &&
                       table.find("35.93") != std::string::npos;
  std::istringstream is(table);
  std::string line, computed;
  while (std::getline(is, line))
    if (line.rfind("computed", 0) == 0) computed = line;
  report(ok && printed, "accounting",
         detail + "count --preset tiny224 table printed: " + (printed ? "yes" : "no") +
             " (diagnostic only) [" + computed + " | reference 15.53 G / 35.93 M]");
}

void determinism() {
  std::string files[2][3];
  for (int run = 0; run < 2; ++run) {
    const auto dir = g_work / ("determinism" + std::to_string(run));
    fs::remove_all(dir);
    const int rc = run_cli("train --config \"" + g_cfg +
                               "\" --seed 11 --threads 1 --set train.max_steps=30 --set train.eval_every=5 --out-dir \"" +
                               dir.string() + "\"",
                           dir.string() + ".log");
    if (rc != 0) {
      report(false, "determinism", "train run " + std::to_string(run) + " exited with " + std::to_string(rc));
      return;
    }
    files[run][0] = read_file(dir / "last.ckpt");
    files[run][1] = read_file(dir / "best.ckpt");
    files[run][2] = read_file(dir / "metrics.csv");
  }
  const bool ok = !files[0][0].empty() && files[0][0] == files[1][0] && files[0][1] == files[1][1] &&
                  files[0][2] == files[1][2];
  report(ok, "determinism",
         std::string("two seeded --threads 1 train runs: last.ckpt ") + (files[0][0] == files[1][0] ? "identical" : "differ") +
             ", best.ckpt " + (files[0][1] == files[1][1] ? "identical" : "differ") + ", metrics.csv " +
             (files[0][2] == files[1][2] ? "identical" : "differ") + " (" + std::to_string(files[0][0].size()) +
             " checkpoint bytes)");
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 4) {
    std::cerr << "usage: acceptance <msvm-cli> <toy.cfg> <work-dir>\n";
    return 2;
  }
  g_cli = argv[1];
  g_cfg = argv[2];
  g_work = argv[3];
  fs::create_directories(g_work);
  const std::pair<const char*, void (*)()> checks[] = {
      {"gradient-suite", gradient_suite}, {"scan-oracle", scan_oracle}, {"metric-oracles", metric_oracles},
      {"loss-contract", loss_contract},   {"overfit", overfit},         {"ablation-plumbing", ablations},
      {"shape-ladder", shape_ladder},     {"accounting", accounting},   {"determinism", determinism},
  };
  for (const auto& [name, fn] : checks) {
    try {
      fn();
    } catch (const std::exception& e) {
      report(false, name, std::string("threw: ") + e.what());
    }
  }
  std::cout << (g_failures ? "acceptance: " + std::to_string(g_failures) + " criteria failed" : "acceptance: all criteria passed")
            << std::endl;
  return g_failures ? 1 : 0;
}
