#include <cmath>

#include "doctest.h"
#include "msvm/blocks.hpp"
#include "support.hpp"

using namespace msvm;
using msvm::testing::probe;
using msvm::testing::random_tensor;
using msvm::testing::store_gradcheck;

namespace {

template <typename T>
void zero(Parameter<T>* p) {
  if (p) p->value = Tensor<T>(p->value.shape());
}

// Eval-mode batch norm that is the identity up to rounding.
template <typename T>
void make_identity(BatchNorm<T>& bn) {
  const auto C = bn.gamma->value.numel();
  bn.running_mean->value = Tensor<T>({C});
  bn.running_var->value = Tensor<T>::full({C}, T(1) - T(1e-5));
  bn.num_batches->value = Tensor<T>::full({1}, T(1));
}

template <typename T>
void set_delta(DWConv<T>& d) {
  auto& k = d.kernel->value;
  const std::size_t C = k.dim(0), ks = k.dim(1);
  std::vector<T> v(k.numel(), T(0));
  for (std::size_t c = 0; c < C; ++c) v[c * ks * ks + ks * ks / 2] = T(1);
  k = Tensor<T>(k.shape(), v);
  zero(d.bias);
}

}  // namespace

TEST_CASE("ss2d block shapes") {
  ParamStore<double> store;
  Rng rng(1);
  auto blk = SS2DBlock<double>::make(Builder<double>(store, rng, "b"), 4, 4);
  CHECK(blk.inner_channels() == 8);
  CHECK(blk.dwconv.kernel->value.shape() == Shape{8, 3, 3});
  for (std::size_t H = 1; H <= 8; ++H)
    for (std::size_t W = 1; W <= 8; ++W) {
      auto y = blk(random_tensor<double>({4, H, W}, rng));
      CHECK(y.shape() == Shape{4, H, W});
    }
  CHECK(blk(random_tensor<double>({2, 4, 3, 5}, rng)).shape() == Shape{2, 4, 3, 5});
}

TEST_CASE("ss2d block gradients on 6x5x5") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    ParamStore<double> store;
    Rng rng(10 + seed);
    auto& x = store.add("x", random_tensor<double>({6, 5, 5}, rng));
    auto blk = SS2DBlock<double>::make(Builder<double>(store, rng, "b"), 6, 4);
    CHECK(store_gradcheck(store, [&] { return probe(blk(use(x)), seed); }, seed) <= 1e-4);
  }
}

TEST_CASE("ms-ffn") {
  ParamStore<double> store;
  Rng rng(2);
  auto ffn = FeedForward<double>::make(Builder<double>(store, rng, "f"), 3, 4, {1, 3, 5});
  REQUIRE(ffn.convs.size() == 3);
  CHECK(ffn.fc1.out() == 12);
  CHECK(ffn.convs[2].kernel->value.shape() == Shape{12, 5, 5});
  auto m = random_tensor<double>({3, 4, 6}, rng);

  SUBCASE("zeroed depthwise kernels leave the inner residual") {
    for (auto& c : ffn.convs) {
      zero(c.kernel);
      zero(c.bias);
    }
    auto want = ffn.fc2.map(gelu(ffn.fc1.map(m)));
    CHECK(max_abs_diff(ffn(m), want) == 0.0);
  }
  SUBCASE("empty kernel set rejected for msvss") {
    CHECK_THROWS_AS(StateSpaceBlock<double>::make(Builder<double>(store, rng, "s"), BlockKind::msvss, 3, 4, {}),
                    ConfigError);
  }
  SUBCASE("gradients") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      ParamStore<double> s;
      Rng r(20 + seed);
      auto& x = s.add("x", random_tensor<double>({3, 5, 4}, r));
      auto f = FeedForward<double>::make(Builder<double>(s, r, "f"), 3, 4, {1, 3, 5});
      CHECK(store_gradcheck(s, [&] { return probe(f(use(x)), seed); }, seed) <= 1e-4);
    }
  }
}

TEST_CASE("msvss and vss blocks") {
  ParamStore<double> store;
  Rng rng(3);
  auto ms = StateSpaceBlock<double>::make(Builder<double>(store, rng, "ms"), BlockKind::msvss, 4, 4, {1, 3, 5});
  auto vss = StateSpaceBlock<double>::make(Builder<double>(store, rng, "v"), BlockKind::vss, 4, 4, {1, 3, 5});
  CHECK(vss.ffn.convs.empty());
  auto f = random_tensor<double>({4, 6, 5}, rng);
  CHECK(ms(f).shape() == f.shape());
  CHECK(vss(f).shape() == f.shape());
  CHECK(ms(random_tensor<double>({2, 4, 8, 8}, rng)).shape() == Shape{2, 4, 8, 8});

  SUBCASE("zeroed branches give the identity") {
    for (auto* blk : {&ms, &vss}) {
      zero(blk->mixer.out_proj.W);
      zero(blk->mixer.out_proj.b);
      zero(blk->ffn.fc2.W);
      zero(blk->ffn.fc2.b);
      CHECK(max_abs_diff((*blk)(f), f) == 0.0);
    }
  }
  SUBCASE("vss is msvss without the depthwise convolutions") {
    for (auto& c : ms.ffn.convs) {
      zero(c.kernel);
      zero(c.bias);
    }
    vss.norm1 = ms.norm1;
    vss.norm2 = ms.norm2;
    vss.mixer = ms.mixer;
    vss.ffn.fc1 = ms.ffn.fc1;
    vss.ffn.fc2 = ms.ffn.fc2;
    CHECK(max_abs_diff(vss(f), ms(f)) == 0.0);
  }
  SUBCASE("gradients") {
    for (std::uint64_t seed = 0; seed < 3; ++seed)
      for (auto kind : {BlockKind::msvss, BlockKind::vss}) {
        ParamStore<double> s;
        Rng r(30 + seed);
        auto& x = s.add("x", random_tensor<double>({4, 4, 5}, r));
        auto blk = StateSpaceBlock<double>::make(Builder<double>(s, r, "b"), kind, 4, 3, {1, 3, 5});
        CHECK(store_gradcheck(s, [&] { return probe(blk(use(x)), seed); }, seed) <= 1e-4);
      }
  }
}

TEST_CASE("patch embedding") {
  ParamStore<float> store;
  Rng rng(4);
  auto pe = PatchEmbed<float>::make(Builder<float>(store, rng, "pe"), 3, 16);
  CHECK(pe(random_tensor<float>({3, 32, 32}, rng)).shape() == Shape{16, 8, 8});
  auto pe96 = PatchEmbed<float>::make(Builder<float>(store, rng, "pe96"), 3, 96);
  CHECK(pe96(random_tensor<float>({3, 224, 224}, rng)).shape() == Shape{96, 56, 56});
  CHECK_THROWS_AS(pe(random_tensor<float>({3, 30, 32}, rng)), ShapeError);

  auto y = pe(Tensor<float>::full({3, 16, 12}, 0.3f));
  const std::size_t HW = 4 * 3;
  for (std::size_t c = 0; c < 16; ++c)
    for (std::size_t i = 1; i < HW; ++i) CHECK(y[c * HW + i] == y[c * HW]);
}

TEST_CASE("patch merging") {
  ParamStore<double> store;
  Rng rng(5);
  SUBCASE("2x2 single channel") {
    auto pm = PatchMerge<double>::make(Builder<double>(store, rng, "pm"), 1);
    Tensor<double> f({1, 2, 2}, {1, 2, 4, 8});
    auto y = pm(f);
    REQUIRE(y.shape() == Shape{2, 1, 1});
    // layer-norm the four values then project
    const double mu = 15.0 / 4;
    double var = 0;
    for (double v : {1.0, 2.0, 4.0, 8.0}) var += (v - mu) * (v - mu) / 4;
    const double vals[4] = {1, 2, 4, 8};
    for (std::size_t o = 0; o < 2; ++o) {
      double acc = 0;
      for (std::size_t i = 0; i < 4; ++i) acc += (vals[i] - mu) / std::sqrt(var + 1e-5) * pm.reduction.W->value[i * 2 + o];
      CHECK(y[o] == doctest::Approx(acc).epsilon(1e-12));
    }
  }
  SUBCASE("shapes") {
    ParamStore<float> fs;
    auto pm = PatchMerge<float>::make(Builder<float>(fs, rng, "pm"), 96);
    CHECK(pm(random_tensor<float>({96, 56, 56}, rng)).shape() == Shape{192, 28, 28});
    CHECK_THROWS_AS(pm(random_tensor<float>({96, 5, 6}, rng)), ShapeError);
  }
  SUBCASE("merge then lkpe restores extents") {
    auto pm = PatchMerge<double>::make(Builder<double>(store, rng, "pm"), 6);
    auto up = Upsampler<double>::make(Builder<double>(store, rng, "up"), UpsamplerKind::lkpe, 12);
    auto f = random_tensor<double>({6, 8, 10}, rng);
    CHECK(up(pm(f), Mode::train).shape() == f.shape());
  }
}

TEST_CASE("lkpe") {
  Rng rng(6);
  SUBCASE("shape") {
    ParamStore<float> fs;
    auto up = Upsampler<float>::make(Builder<float>(fs, rng, "up"), UpsamplerKind::lkpe, 768);
    CHECK(up(random_tensor<float>({768, 7, 7}, rng), Mode::train).shape() == Shape{384, 14, 14});
    CHECK_THROWS_AS(Upsampler<float>::make(Builder<float>(fs, rng, "odd"), UpsamplerKind::lkpe, 5), ConfigError);
  }
  SUBCASE("index mapping oracle") {
    const std::size_t C = 4, H = 3, W = 2;
    ParamStore<double> store;
    auto up = Upsampler<double>::make(Builder<double>(store, rng, "up"), UpsamplerKind::lkpe, C);
    std::vector<double> dup(C * 2 * C, 0.0);
    for (std::size_t j = 0; j < 2 * C; ++j) dup[(j % C) * 2 * C + j] = 1.0;
    up.expand.W->value = Tensor<double>({C, 2 * C}, dup);
    make_identity(up.bn);
    set_delta(up.dwconv);
    auto u = random_tensor<double>({C, H, W}, rng, 0.1, 1.0);
    auto y = up(u, Mode::eval);
    REQUIRE(y.shape() == Shape{C / 2, 2 * H, 2 * W});
    // output (c, 2h+i, 2w+j) <- duplicated channel 4c+2i+j <- input channel (4c+2i+j) mod C,
    // then layer norm over the C/2 output channels at each position
    for (std::size_t oh = 0; oh < 2 * H; ++oh)
      for (std::size_t ow = 0; ow < 2 * W; ++ow) {
        std::vector<double> col(C / 2);
        for (std::size_t c = 0; c < C / 2; ++c) {
          const std::size_t src = (c * 4 + (oh % 2) * 2 + ow % 2) % C;
          col[c] = u[(src * H + oh / 2) * W + ow / 2];
        }
        double mu = 0, var = 0;
        for (double v : col) mu += v / col.size();
        for (double v : col) var += (v - mu) * (v - mu) / col.size();
        for (std::size_t c = 0; c < C / 2; ++c) {
          const double want = (col[c] - mu) / std::sqrt(var + 1e-5);
          CHECK(y[(c * 2 * H + oh) * 2 * W + ow] == doctest::Approx(want).epsilon(1e-9));
        }
      }
  }
  SUBCASE("patch expand is lkpe without bn, relu and conv") {
    const std::size_t C = 6;
    ParamStore<double> store;
    auto lk = Upsampler<double>::make(Builder<double>(store, rng, "lk"), UpsamplerKind::lkpe, C);
    auto pe = Upsampler<double>::make(Builder<double>(store, rng, "pe"), UpsamplerKind::patch_expand, C);
    auto w = random_tensor<double>({C, 2 * C}, rng, 0.0, 1.0);
    lk.expand.W->value = w;
    pe.expand.W->value = w;
    make_identity(lk.bn);
    set_delta(lk.dwconv);
    auto u = random_tensor<double>({C, 3, 4}, rng, 0.0, 1.0);  // keeps ReLU inactive
    CHECK(max_abs_diff(lk(u, Mode::eval), pe(u, Mode::eval)) <= 1e-9);
  }
  SUBCASE("gradients") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      ParamStore<double> s;
      Rng r(40 + seed);
      // layer norm over 2 channels (C=4) is too curved for a 1e-5 central difference
      auto& x = s.add("x", random_tensor<double>({2, 8, 3, 3}, r));
      auto up = Upsampler<double>::make(Builder<double>(s, r, "up"), UpsamplerKind::lkpe, 8);
      CHECK(store_gradcheck(s, [&] { return probe(up(use(x), Mode::train), seed); }, seed) <= 1e-4);
    }
  }
}

TEST_CASE("alternative upsamplers") {
  Rng rng(7);
  ParamStore<double> store;
  for (auto kind : {UpsamplerKind::patch_expand, UpsamplerKind::transposed_conv, UpsamplerKind::upsample_block}) {
    auto up = Upsampler<double>::make(Builder<double>(store, rng, to_string(kind)), kind, 8);
    CHECK(up(random_tensor<double>({8, 3, 5}, rng), Mode::train).shape() == Shape{4, 6, 10});
  }
  SUBCASE("transposed conv, uniform kernel, constant input") {
    auto up = Upsampler<double>::make(Builder<double>(store, rng, "t"), UpsamplerKind::transposed_conv, 4);
    up.expand.W->value = Tensor<double>::full({4, 8}, 0.25);
    auto y = up(Tensor<double>::full({4, 3, 3}, 2.0), Mode::eval);
    for (auto v : y.data()) CHECK(v == 2.0);
  }
  SUBCASE("nearest neighbour of a single pixel") {
    auto y = upsample_nearest2x(Tensor<double>({1, 1, 1}, {3.5}));
    CHECK(std::vector<double>(y.data().begin(), y.data().end()) == std::vector<double>{3.5, 3.5, 3.5, 3.5});
  }
  SUBCASE("gradients") {
    for (std::uint64_t seed = 0; seed < 3; ++seed)
      for (auto kind : {UpsamplerKind::patch_expand, UpsamplerKind::transposed_conv, UpsamplerKind::upsample_block}) {
        ParamStore<double> s;
        Rng r(50 + seed);
        auto& x = s.add("x", random_tensor<double>({4, 3, 2}, r));
        auto up = Upsampler<double>::make(Builder<double>(s, r, "up"), kind, 4);
        CHECK(store_gradcheck(s, [&] { return probe(up(use(x), Mode::train), seed); }, seed) <= 1e-4);
      }
  }
}

TEST_CASE("flkpe") {
  Rng rng(8);
  {
    ParamStore<float> fs;
    auto head = FLKPE<float>::make(Builder<float>(fs, rng, "h"), 16, 4);
    CHECK(head(random_tensor<float>({16, 8, 8}, rng), Mode::train).shape() == Shape{4, 32, 32});
    auto big = FLKPE<float>::make(Builder<float>(fs, rng, "big"), 96, 9);
    CHECK(big(random_tensor<float>({96, 56, 56}, rng), Mode::train).shape() == Shape{9, 224, 224});
  }
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    ParamStore<double> s;
    Rng r(60 + seed);
    auto& x = s.add("x", random_tensor<double>({2, 4, 2, 3}, r));
    auto head = FLKPE<double>::make(Builder<double>(s, r, "h"), 4, 3);
    CHECK(store_gradcheck(s, [&] { return probe(head(use(x), Mode::train), seed); }, seed) <= 1e-4);
  }
}

TEST_CASE("mac counts") {
  ParamStore<double> store;
  Rng rng(9);
  auto lin = Linear<double>::make(Builder<double>(store, rng, "l"), 8, 3);
  CHECK(lin.W->value.numel() + lin.b->value.numel() == 27);
  CHECK(lin.macs(10) == 240);
  auto ffn = FeedForward<double>::make(Builder<double>(store, rng, "f"), 2, 4, {1, 3});
  // fc1 2*8, fc2 8*2, dw 8*1 + 8*9 per position
  CHECK(ffn.macs(5) == (16 + 16 + 8 + 72) * 5);
}
