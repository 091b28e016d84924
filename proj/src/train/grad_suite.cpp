#include "msvm/grad_suite.hpp"

#include <algorithm>

#include "msvm/gradcheck.hpp"
#include "msvm/train.hpp"

namespace msvm {

namespace {

using Td = Tensor<double>;
using Inputs = std::vector<Td>;

Td random_tensor(Shape shape, Rng& rng, double lo = -1.5, double hi = 1.5) {
  std::vector<double> d(numel(shape));
  for (auto& v : d) v = rng.uniform(lo, hi);
  return Td(std::move(shape), std::move(d));
}

// sum(out * w) with fixed random w, so each output element gets its own weight
Td probe(const Td& out, std::uint64_t seed) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  return sum(mul(out, random_tensor(out.shape(), rng, -1.0, 1.0)));
}

LabelMap random_labels(std::size_t H, std::size_t W, std::size_t K, Rng& rng) {
  LabelMap m(H, W);
  for (auto& v : m.ids) v = static_cast<std::uint16_t>(rng.below(K));
  return m;
}

struct OpCase {
  const char* name;
  std::vector<Shape> shapes;
  std::function<Td(const Inputs&, std::uint64_t)> fn;
  double lo = -1.5, hi = 1.5;
  std::vector<std::pair<std::size_t, std::pair<double, double>>> ranges = {};  // per-input overrides
};

std::vector<OpCase> op_cases() {
  return {
      {"add", {{3, 4}, {3, 4}}, [](auto& in, auto s) { return probe(add(in[0], in[1]), s); }},
      {"mul", {{3, 4}, {3, 4}}, [](auto& in, auto s) { return probe(mul(in[0], in[1]), s); }},
      {"scale", {{3, 4}}, [](auto& in, auto s) { return probe(scale(in[0], 0.7), s); }},
      {"mean", {{3, 4}}, [](auto& in, auto) { return mean(in[0]); }},
      {"linear", {{2, 3, 2, 2}, {3, 4}, {4}}, [](auto& in, auto s) { return probe(linear(in[0], in[1], in[2], 1), s); }},
      {"depthwise_conv2d", {{3, 5, 4}, {3, 3, 3}, {3}},
       [](auto& in, auto s) { return probe(depthwise_conv2d(in[0], in[1], in[2]), s); }},
      {"conv2d", {{1, 2, 4, 4}, {3, 2, 3, 3}, {3}}, [](auto& in, auto s) { return probe(conv2d(in[0], in[1], in[2]), s); }},
      {"layer_norm", {{2, 5, 3}, {5}, {5}},
       [](auto& in, auto s) { return probe(layer_norm(in[0], in[1], in[2], 1e-5, 1), s); }},
      {"batch_norm2d", {{2, 3, 2, 3}, {3}, {3}},
       [](auto& in, auto s) {
         Td m({3}), v = Td::full({3}, 1.0), c({1});
         return probe(batch_norm2d(in[0], in[1], in[2], BatchNormRunning<double>{m, v, c}, Mode::train), s);
       }},
      {"silu", {{10}}, [](auto& in, auto s) { return probe(silu(in[0]), s); }},
      {"gelu", {{10}}, [](auto& in, auto s) { return probe(gelu(in[0]), s); }},
      {"relu", {{10}}, [](auto& in, auto s) { return probe(relu(in[0]), s); }},
      {"softplus", {{10}}, [](auto& in, auto s) { return probe(softplus(in[0]), s); }},
      {"softmax", {{4, 3, 2}}, [](auto& in, auto s) { return probe(softmax(in[0], 0), s); }},
      {"pixel_shuffle", {{1, 8, 2, 3}}, [](auto& in, auto s) { return probe(pixel_shuffle(in[0], 2), s); }},
      {"pixel_unshuffle", {{1, 2, 4, 6}}, [](auto& in, auto s) { return probe(pixel_unshuffle(in[0], 2), s); }},
      {"upsample_nearest2x", {{2, 2, 3}}, [](auto& in, auto s) { return probe(upsample_nearest2x(in[0]), s); }},
      {"add_channel_bias", {{2, 3, 2, 2}, {3}}, [](auto& in, auto s) { return probe(add_channel_bias(in[0], in[1]), s); }},
      {"selective_scan",
       {{2, 6, 3}, {3, 4}, {3}, {2, 6, 3}, {2, 6, 4}, {2, 6, 4}},
       [](auto& in, auto s) {
         return probe(selective_scan(in[0], ScanParams<double>{in[1], in[2], in[3], in[4], in[5]}), s);
       },
       -1.5,
       1.5,
       {{3, {0.05, 0.8}}}},
      {"cross_scan_merge", {{3, 4, 5}}, [](auto& in, auto s) { return probe(cross_merge(cross_scan(in[0]), 4, 5), s); }},
      {"dice_loss",
       {{2, 3, 3, 4}},
       [](auto& in, auto s) {
         Rng r(s);
         std::vector<LabelMap> m{random_labels(3, 4, 3, r), random_labels(3, 4, 3, r)};
         return dice_loss(in[0], std::span<const LabelMap>(m));
       },
       0.05,
       1.0},
      {"ce_loss",
       {{2, 3, 3, 4}},
       [](auto& in, auto s) {
         Rng r(s);
         std::vector<LabelMap> m{random_labels(3, 4, 3, r), random_labels(3, 4, 3, r)};
         return ce_loss(in[0], std::span<const LabelMap>(m));
       }},
      {"total_loss",
       {{1, 4, 3, 3}},
       [](auto& in, auto s) {
         Rng r(s);
         std::vector<LabelMap> m{random_labels(3, 3, 4, r)};
         return total_loss(in[0], std::span<const LabelMap>(m), 0.6).total;
       }},
  };
}

// One block instance: registers its weights (and the input "x") in a
// store and returns the scalar loss closure.
using BlockFactory = std::function<std::function<Td()>(ParamStore<double>&, Rng&, std::uint64_t)>;

std::vector<std::pair<const char*, BlockFactory>> block_cases() {
  auto input = [](ParamStore<double>& s, Rng& r, Shape shape, double lo = -1.0, double hi = 1.0) -> Parameter<double>& {
    return s.add("x", random_tensor(std::move(shape), r, lo, hi));
  };
  std::vector<std::pair<const char*, BlockFactory>> out;
  out.emplace_back("SS2D", [=](ParamStore<double>& s, Rng& r, std::uint64_t seed) {
    auto& x = input(s, r, {4, 5, 4});
    auto m = SS2D<double>::make(Builder<double>(s, r, "ss2d"), 4, 3);
    return std::function<Td()>([&x, m, seed] { return probe(m(use(x)), seed); });
  });
  out.emplace_back("SS2DBlock", [=](ParamStore<double>& s, Rng& r, std::uint64_t seed) {
    auto& x = input(s, r, {6, 5, 5});
    auto m = SS2DBlock<double>::make(Builder<double>(s, r, "blk"), 6, 4);
    return std::function<Td()>([&x, m, seed] { return probe(m(use(x)), seed); });
  });
  out.emplace_back("MS-FFN", [=](ParamStore<double>& s, Rng& r, std::uint64_t seed) {
    auto& x = input(s, r, {3, 5, 4});
    auto m = FeedForward<double>::make(Builder<double>(s, r, "ffn"), 3, 4, {1, 3, 5});
    return std::function<Td()>([&x, m, seed] { return probe(m(use(x)), seed); });
  });
  for (auto kind : {BlockKind::msvss, BlockKind::vss}) {
    out.emplace_back(kind == BlockKind::msvss ? "MSVSS" : "VSS", [=](ParamStore<double>& s, Rng& r, std::uint64_t seed) {
      auto& x = input(s, r, {4, 4, 5});
      auto m = StateSpaceBlock<double>::make(Builder<double>(s, r, "b"), kind, 4, 3, {1, 3, 5});
      return std::function<Td()>([&x, m, seed] { return probe(m(use(x)), seed); });
    });
  }
  out.emplace_back("PatchMerge", [=](ParamStore<double>& s, Rng& r, std::uint64_t seed) {
    auto& x = input(s, r, {3, 4, 6});
    auto m = PatchMerge<double>::make(Builder<double>(s, r, "pm"), 3);
    return std::function<Td()>([&x, m, seed] { return probe(m(use(x)), seed); });
  });
  out.emplace_back("LKPE", [=](ParamStore<double>& s, Rng& r, std::uint64_t seed) {
    auto& x = input(s, r, {2, 8, 3, 3});
    auto m = Upsampler<double>::make(Builder<double>(s, r, "up"), UpsamplerKind::lkpe, 8);
    return std::function<Td()>([&x, m, seed] { return probe(m(use(x), Mode::train), seed); });
  });
  for (auto kind : {UpsamplerKind::patch_expand, UpsamplerKind::transposed_conv, UpsamplerKind::upsample_block}) {
    out.emplace_back(to_string(kind), [=](ParamStore<double>& s, Rng& r, std::uint64_t seed) {
      auto& x = input(s, r, {4, 3, 2});
      auto m = Upsampler<double>::make(Builder<double>(s, r, "up"), kind, 4);
      return std::function<Td()>([&x, m, seed] { return probe(m(use(x), Mode::train), seed); });
    });
  }
  out.emplace_back("FLKPE", [=](ParamStore<double>& s, Rng& r, std::uint64_t seed) {
    auto& x = input(s, r, {2, 4, 2, 3});
    auto m = FLKPE<double>::make(Builder<double>(s, r, "head"), 4, 3);
    return std::function<Td()>([&x, m, seed] { return probe(m(use(x), Mode::train), seed); });
  });
  return out;
}

std::vector<Parameter<double>*> trainable(ParamStore<double>& s) {
  std::vector<Parameter<double>*> out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s[i].trainable) out.push_back(&s[i]);
  return out;
}

}  // namespace

std::vector<GradSuiteEntry> run_grad_suite(const GradSuiteOptions& o,
                                           const std::function<void(const GradSuiteEntry&)>& on_entry) {
  std::vector<GradSuiteEntry> out;
  auto emit = [&](GradSuiteEntry e) {
    if (on_entry) on_entry(e);
    out.push_back(std::move(e));
  };

  for (const auto& c : op_cases()) {
    GradSuiteEntry e{"op", c.name, o.op_seeds, 0.0, o.op_tolerance};
    for (std::size_t i = 0; i < o.op_seeds; ++i) {
      const std::uint64_t seed = o.seed * 1000003ULL + i;
      Rng rng(seed);
      Inputs in;
      for (std::size_t k = 0; k < c.shapes.size(); ++k) {
        auto [lo, hi] = std::pair{c.lo, c.hi};
        for (const auto& [idx, range] : c.ranges)
          if (idx == k) std::tie(lo, hi) = range;
        in.push_back(random_tensor(c.shapes[k], rng, lo, hi));
      }
      const double err = finite_diff_grad_check([&](const Inputs& x) { return c.fn(x, seed); }, in, 1e-5);
      e.max_rel_error = std::max(e.max_rel_error, err);
    }
    emit(std::move(e));
  }

  for (const auto& [name, factory] : block_cases()) {
    GradSuiteEntry e{"block", name, o.block_seeds, 0.0, o.block_tolerance};
    for (std::size_t i = 0; i < o.block_seeds; ++i) {
      const std::uint64_t seed = o.seed * 1000003ULL + 500 + i;
      Rng rng(seed);
      ParamStore<double> store;
      const auto loss = factory(store, rng, seed);
      GradCheckOptions g;
      g.seed = seed;
      g.max_coords = 24;
      const auto params = trainable(store);
      e.max_rel_error = std::max(e.max_rel_error, check_param_grads(loss, params, g).max_rel_error);
    }
    emit(std::move(e));
  }

  {
    const std::uint64_t seed = o.seed * 1000003ULL + 900;
    Model<double> m(ModelConfig::preset("micro"), seed);
    Rng rng(seed);
    const auto img = random_tensor({2, 3, 32, 32}, rng, 0.0, 1.0);
    GradCheckOptions g;
    g.seed = seed;
    g.max_coords = 5;
    const auto params = trainable(m.params());
    const auto rep = check_param_grads([&] { return probe(m.forward(img, Mode::train), seed); }, params, g);
    emit({"model", "micro", 1, rep.max_rel_error, o.model_tolerance});
  }
  return out;
}

}  // namespace msvm
