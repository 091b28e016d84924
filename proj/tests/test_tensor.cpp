#include <cmath>
#include <sstream>

#include "doctest.h"
#include "msvm/gradcheck.hpp"
#include "msvm/ops.hpp"
#include "msvm/serialize.hpp"
#include "support.hpp"

using namespace msvm;
using msvm::testing::probe;
using msvm::testing::random_tensor;

namespace {

using Td = Tensor<double>;

// Direct six-loop depthwise cross-correlation with zero padding.
Td dwconv_oracle(const Td& x, const Td& k) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2), kh = k.dim(1), kw = k.dim(2);
  std::vector<double> y(C * H * W);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) {
        double acc = 0;
        for (std::size_t i = 0; i < kh; ++i)
          for (std::size_t j = 0; j < kw; ++j) {
            const long ih = long(h) + long(i) - long(kh / 2), iw = long(w) + long(j) - long(kw / 2);
            if (ih < 0 || iw < 0 || ih >= long(H) || iw >= long(W)) continue;
            acc += k[(c * kh + i) * kw + j] * x[(c * H + ih) * W + iw];
          }
        y[(c * H + h) * W + w] = acc;
      }
  return Td({C, H, W}, y);
}

Td delta_kernel(std::size_t C, std::size_t k) {
  Td d({C, k, k});
  auto p = d.mutable_data();
  for (std::size_t c = 0; c < C; ++c) p[(c * k + k / 2) * k + k / 2] = 1.0;
  return d;
}

struct Running {
  Td mean, var, count;
  explicit Running(std::size_t C) : mean({C}), var(Td::full({C}, 1.0)), count({1}) {}
  BatchNormRunning<double> ref() { return {mean, var, count}; }
};

}  // namespace

TEST_CASE("linear: direct examples") {
  auto y = linear(Td({2}, {1, 2}), Td({2, 2}, {1, 0, 0, 1}), Td({2}, {0, 0}));
  CHECK(y[0] == 1.0);
  CHECK(y[1] == 2.0);
  auto z = linear(Td({2}, {1, 1}), Td({2, 1}, {2, 3}), Td({1}, {1}));
  CHECK(z.shape() == Shape{1});
  CHECK(z[0] == 6.0);
  CHECK_THROWS_AS(linear(Td({3}), Td({2, 2})), ShapeError);
}

TEST_CASE("linear: channel axis matches last-axis form after transpose") {
  Rng rng(3);
  auto x = random_tensor({2, 3, 4, 5}, rng);  // [B,C,H,W]
  auto W = random_tensor({3, 6}, rng);
  auto b = random_tensor({6}, rng);
  auto y = linear(x, W, b, 1);
  REQUIRE(y.shape() == Shape{2, 6, 4, 5});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t p = 0; p < 20; ++p)
      for (std::size_t j = 0; j < 6; ++j) {
        double acc = b[j];
        for (std::size_t i = 0; i < 3; ++i) acc += x[(n * 3 + i) * 20 + p] * W[i * 6 + j];
        CHECK(y[(n * 6 + j) * 20 + p] == doctest::Approx(acc).epsilon(1e-14));
      }
}

TEST_CASE("linear: gradients match finite differences in f64") {
  Rng rng(11);
  auto x = random_tensor({4, 8}, rng);
  auto W = random_tensor({8, 3}, rng);
  auto b = random_tensor({3}, rng);
  const double err = finite_diff_grad_check(
      [](const std::vector<Td>& in) { return probe(linear(in[0], in[1], in[2])); }, {x, W, b});
  CHECK(err <= 1e-6);
  CHECK(err <= 1e-8);
}

TEST_CASE("depthwise_conv2d: identity, counting and brute-force oracle") {
  Rng rng(5);
  auto x = random_tensor({3, 5, 7}, rng);
  for (std::size_t k : {1, 3, 5}) {
    auto y = depthwise_conv2d(x, delta_kernel(3, k));
    CHECK(max_abs_diff(x, y) == 0.0);
  }

  auto ones = Td::full({1, 3, 3}, 1.0);
  auto y = depthwise_conv2d(ones, Td::full({1, 3, 3}, 1.0));
  CHECK(y[4] == 9.0);
  CHECK(y[0] == 4.0);
  CHECK(y[1] == 6.0);

  auto xr = random_tensor({4, 8, 8}, rng);
  auto kr = random_tensor({4, 3, 3}, rng);
  CHECK(max_abs_diff(depthwise_conv2d(xr, kr), dwconv_oracle(xr, kr)) == 0.0);

  CHECK_THROWS_AS(depthwise_conv2d(xr, Td({4, 2, 2})), ShapeError);
  CHECK_THROWS_AS(depthwise_conv2d(xr, Td({3, 3, 3})), ShapeError);
}

TEST_CASE("conv2d: single input channel reduces to depthwise") {
  Rng rng(8);
  auto x = random_tensor({1, 1, 6, 6}, rng);
  auto k = random_tensor({1, 3, 3}, rng);
  auto dense = conv2d(x, k.reshaped({1, 1, 3, 3}));
  auto dw = depthwise_conv2d(x, k);
  CHECK(max_abs_diff(dense, dw) == 0.0);
}

TEST_CASE("layer_norm: examples and statistics") {
  auto g = Td::full({3}, 1.0), b = Td({3});
  auto y = layer_norm(Td::full({2, 3}, 5.0), g, b, 1e-5);
  for (auto v : y.data()) CHECK(v == 0.0);

  auto z = layer_norm(Td({2}, {1, -1}), Td::full({2}, 1.0), Td({2}), 0.0);
  CHECK(z[0] == doctest::Approx(1.0));
  CHECK(z[1] == doctest::Approx(-1.0));

  Rng rng(2);
  auto x = random_tensor({2, 7, 3, 4}, rng, -3, 5);
  auto n = layer_norm(x, Td::full({7}, 1.0), Td({7}), 1e-12, 1);
  for (std::size_t bb = 0; bb < 2; ++bb)
    for (std::size_t p = 0; p < 12; ++p) {
      double m = 0, v = 0;
      for (std::size_t c = 0; c < 7; ++c) m += n[(bb * 7 + c) * 12 + p];
      m /= 7;
      for (std::size_t c = 0; c < 7; ++c) v += std::pow(n[(bb * 7 + c) * 12 + p] - m, 2);
      v /= 7;
      CHECK(std::abs(m) <= 1e-6);
      CHECK(std::abs(v - 1.0) <= 1e-6);
    }
  CHECK_THROWS_AS(layer_norm(Td({2, 0}), Td({0}), Td({0}), 1e-5), ShapeError);
}

TEST_CASE("batch_norm2d: train statistics, eval guard, momentum") {
  Rng rng(4);
  Running r(3);
  auto beta = Td({3}, {0.5, -1, 2});
  auto c = batch_norm2d(Td::full({2, 3, 2, 2}, 7.0), Td::full({3}, 1.0), beta, r.ref(), Mode::train);
  for (std::size_t i = 0; i < c.numel(); ++i) CHECK(c[i] == beta[(i / 4) % 3]);

  auto x = random_tensor({4, 3, 5, 5}, rng, -2, 3);
  auto y = batch_norm2d(x, Td::full({3}, 1.0), Td({3}), r.ref(), Mode::train, 0.1, 1e-12);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double m = 0, v = 0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 25; ++i) m += y[(b * 3 + ch) * 25 + i];
    m /= 100;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 25; ++i) v += std::pow(y[(b * 3 + ch) * 25 + i] - m, 2);
    v /= 100;
    CHECK(std::abs(m) <= 1e-6);
    CHECK(std::abs(v - 1.0) <= 1e-6);
  }

  Running frozen(3);
  batch_norm2d(x, Td::full({3}, 1.0), Td({3}), frozen.ref(), Mode::train, 0.0);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    CHECK(frozen.mean[ch] == 0.0);
    CHECK(frozen.var[ch] == 1.0);
  }

  Running fresh(3);
  CHECK_THROWS_AS(batch_norm2d(x, Td::full({3}, 1.0), Td({3}), fresh.ref(), Mode::eval), ConfigError);
  CHECK_THROWS_AS(batch_norm2d(Td({1, 3, 1, 1}), Td::full({3}, 1.0), Td({3}), fresh.ref(), Mode::train), ShapeError);
}

TEST_CASE("activations: fixed points and asymptote") {
  auto v = [](Activation a, double x) { return activation(a, Td({1}, {x}))[0]; };
  CHECK(v(Activation::silu, 0) == 0.0);
  CHECK(v(Activation::relu, -3) == 0.0);
  CHECK(v(Activation::gelu, 0) == 0.0);
  CHECK(std::abs(v(Activation::silu, 20) - 20) <= 1e-6);
  // exact erf form: gelu(1) = Phi(1) = 0.8413447460685429
  CHECK(v(Activation::gelu, 1) == doctest::Approx(0.8413447460685429).epsilon(1e-15));
}

TEST_CASE("softmax_channels") {
  auto one = softmax_channels(Td({1, 2, 2}, {3, -1, 0, 8}));
  for (auto p : one.data()) CHECK(p == 1.0);
  auto half = softmax_channels(Td({2, 1}, {0, 0}));
  CHECK(half[0] == 0.5);
  CHECK(half[1] == 0.5);

  Rng rng(9);
  auto x = random_tensor({5, 3, 4}, rng, -10, 10);
  auto p = softmax_channels(x);
  auto shifted = Td::full(x.shape(), 123.25);
  auto q = softmax_channels(add(x, shifted));
  CHECK(max_abs_diff(p, q) <= 1e-12);
  for (std::size_t i = 0; i < 12; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < 5; ++k) s += p[k * 12 + i];
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("backward: analytic examples and tape contract") {
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto x = tape.leaf(Td({2}, {1, 2}));
  auto unused = tape.leaf(Td({3}));
  auto loss = sum(mul(x, x));
  tape.backward(loss);
  auto g = tape.grad(x);
  CHECK(g[0] == 2.0);
  CHECK(g[1] == 4.0);
  auto gu = tape.grad(unused);
  for (auto v : gu.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(tape.backward(loss), TapeError);

  Tape<double> t2;
  TapeScope<double> s2(t2);
  auto y = t2.leaf(Td({3}, {1, 2, 3}));
  CHECK_THROWS_AS(t2.backward(scale(y, 2.0)), TapeError);
  auto l2 = sum(y);
  t2.backward(l2);
  const auto gy = t2.grad(y);
  for (auto v : gy.data()) CHECK(v == 1.0);
}

TEST_CASE("finite_diff_grad_check: identity sum and non-scalar rejection") {
  Rng rng(1);
  auto x = random_tensor({3, 4}, rng);
  CHECK(finite_diff_grad_check([](const std::vector<Td>& in) { return sum(in[0]); }, {x}) <= 1e-10);
  CHECK_THROWS_AS(finite_diff_grad_check([](const std::vector<Td>& in) { return in[0]; }, {x}), GradCheckError);
}

TEST_CASE("every differentiable op passes the finite-difference check over 20 seeds") {
  using Fn = std::function<Td(const std::vector<Td>&)>;
  struct Case {
    const char* name;
    std::vector<Shape> shapes;
    Fn fn;
  };
  std::vector<Case> cases = {
      {"add", {{3, 4}, {3, 4}}, [](auto& in) { return probe(add(in[0], in[1])); }},
      {"mul", {{3, 4}, {3, 4}}, [](auto& in) { return probe(mul(in[0], in[1])); }},
      {"linear_axis1", {{2, 3, 2, 2}, {3, 4}, {4}}, [](auto& in) { return probe(linear(in[0], in[1], in[2], 1)); }},
      {"dwconv", {{3, 5, 4}, {3, 3, 3}, {3}}, [](auto& in) { return probe(depthwise_conv2d(in[0], in[1], in[2])); }},
      {"conv2d", {{1, 2, 4, 4}, {3, 2, 3, 3}, {3}}, [](auto& in) { return probe(conv2d(in[0], in[1], in[2])); }},
      {"layer_norm", {{2, 5, 3}, {5}, {5}}, [](auto& in) { return probe(layer_norm(in[0], in[1], in[2], 1e-5, 1)); }},
      {"batch_norm", {{2, 3, 2, 3}, {3}, {3}},
       [](auto& in) {
         Running r(3);
         return probe(batch_norm2d(in[0], in[1], in[2], r.ref(), Mode::train));
       }},
      {"silu", {{10}}, [](auto& in) { return probe(silu(in[0])); }},
      {"gelu", {{10}}, [](auto& in) { return probe(gelu(in[0])); }},
      {"relu", {{10}}, [](auto& in) { return probe(relu(in[0])); }},
      {"softplus", {{10}}, [](auto& in) { return probe(softplus(in[0])); }},
      {"softmax", {{4, 3, 2}}, [](auto& in) { return probe(softmax_channels(in[0])); }},
      {"pixel_shuffle", {{1, 8, 2, 3}}, [](auto& in) { return probe(pixel_shuffle(in[0], 2)); }},
      {"upsample", {{2, 2, 3}}, [](auto& in) { return probe(upsample_nearest2x(in[0])); }},
      {"channel_bias", {{2, 3, 2, 2}, {3}}, [](auto& in) { return probe(add_channel_bias(in[0], in[1])); }},
  };
  for (const auto& c : cases) {
    double worst = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed * 7919 + 1);
      std::vector<Td> inputs;
      for (const auto& s : c.shapes) inputs.push_back(random_tensor(s, rng, -1.5, 1.5));
      worst = std::max(worst, finite_diff_grad_check(c.fn, inputs, 1e-5));
    }
    INFO(c.name);
    CHECK(worst <= 1e-4);
  }
}

TEST_CASE("non-finite forward values abort with the op name") {
  auto x = Td({2}, {1.0, std::numeric_limits<double>::infinity()});
  try {
    scale(x, 2.0);
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(std::string(e.what()).find("scale") != std::string::npos);
  }
}

TEST_CASE("pixel_shuffle is a bijection with unshuffle as inverse") {
  Rng rng(12);
  for (std::size_t r : {2, 4}) {
    auto x = random_tensor({2, 3 * r * r, 3, 2}, rng);
    auto s = pixel_shuffle(x, r);
    CHECK(s.shape() == Shape{2, 3, 3 * r, 2 * r});
    CHECK(max_abs_diff(pixel_unshuffle(s, r), x) == 0.0);
  }
  // channel group g at (h, w) -> (h*r + g/r, w*r + g%r)
  auto x = Td({4, 1, 1}, {10, 11, 12, 13});
  auto s = pixel_shuffle(x, 2);
  CHECK(s.shape() == Shape{1, 2, 2});
  CHECK(s[0] == 10);
  CHECK(s[1] == 11);
  CHECK(s[2] == 12);
  CHECK(s[3] == 13);
  auto up = upsample_nearest2x(Td({1, 1, 1}, {5}));
  CHECK(up.shape() == Shape{1, 2, 2});
  for (auto v : up.data()) CHECK(v == 5);
}

TEST_CASE("tensor record layout and round trip") {
  Td t({2, 1}, {1.5, -2});
  std::stringstream ss;
  write_tensor(ss, t);
  const std::string bytes = ss.str();
  REQUIRE(bytes.size() == 4 + 2 + 1 + 1 + 2 * 8 + 2 * 8);
  CHECK(bytes.substr(0, 4) == "MSVT");
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);
  CHECK(bytes[6] == 1);  // f64
  CHECK(bytes[7] == 2);  // rank
  CHECK(bytes[8] == 2);  // first extent, little endian
  auto back = read_tensor<double>(ss);
  CHECK(back.shape() == t.shape());
  CHECK(max_abs_diff(back, t) == 0.0);

  Rng rng(77);
  auto f = random_tensor<float>({3, 4, 5}, rng);
  std::stringstream fs;
  write_tensor(fs, f);
  CHECK(fs.str()[6] == 0);
  auto fb = read_tensor<float>(fs);
  CHECK(max_abs_diff(fb, f) == 0.0f);

  std::stringstream bad("MSVX");
  CHECK_THROWS_AS(read_tensor<float>(bad), FormatError);
}

TEST_CASE("rng: identical seed and call sequence give identical streams") {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs |= x != c.next_u64();
  }
  CHECK(differs);
  Rng u(1);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform();
    CHECK(v >= 0.0);
    CHECK(v < 1.0);
    CHECK(u.below(7) < 7);
  }
}
