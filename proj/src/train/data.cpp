#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "msvm/serialize.hpp"
#include "msvm/train.hpp"

namespace msvm {

namespace {

std::size_t img_h(const SegSample& s) { return s.image.dim(1); }
std::size_t img_w(const SegSample& s) { return s.image.dim(2); }

float bilinear(const float* plane, std::size_t H, std::size_t W, double y, double x, bool zero_outside) {
  if (zero_outside && (y < -0.5 || x < -0.5 || y > double(H) - 0.5 || x > double(W) - 0.5)) return 0.0f;
  y = std::clamp(y, 0.0, double(H - 1));
  x = std::clamp(x, 0.0, double(W - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(y)), x0 = static_cast<std::size_t>(std::floor(x));
  const auto y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
  const double fy = y - double(y0), fx = x - double(x0);
  const double top = plane[y0 * W + x0] * (1 - fx) + plane[y0 * W + x1] * fx;
  const double bot = plane[y1 * W + x0] * (1 - fx) + plane[y1 * W + x1] * fx;
  return static_cast<float>(top * (1 - fy) + bot * fy);
}

// Maps each output pixel to a source coordinate; image is resampled
// bilinearly, mask by nearest neighbour.
template <typename Fn>
SegSample remap(const SegSample& s, std::size_t H, std::size_t W, Fn src, bool zero_outside) {
  const std::size_t C = s.image.dim(0), h0 = img_h(s), w0 = img_w(s);
  std::vector<float> img(C * H * W);
  LabelMap mask(H, W);
  const float* in = s.image.ptr();
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const auto [sy, sx] = src(double(y), double(x));
      for (std::size_t c = 0; c < C; ++c) img[(c * H + y) * W + x] = bilinear(in + c * h0 * w0, h0, w0, sy, sx, zero_outside);
      const double ry = std::round(sy), rx = std::round(sx);
      if (ry >= 0 && rx >= 0 && ry < double(h0) && rx < double(w0)) {
        mask.at(y, x) = s.mask.at(static_cast<std::size_t>(ry), static_cast<std::size_t>(rx));
      } else if (!zero_outside) {
        mask.at(y, x) = s.mask.at(std::clamp<std::size_t>(std::size_t(std::max(0.0, ry)), 0, h0 - 1),
                                  std::clamp<std::size_t>(std::size_t(std::max(0.0, rx)), 0, w0 - 1));
      }
    }
  return {s.id, Tensor<float>({C, H, W}, std::move(img)), std::move(mask)};
}

void clamp01(std::vector<float>& v) {
  for (auto& e : v) e = std::clamp(e, 0.0f, 1.0f);
}

}  // namespace

SegSample resize(const SegSample& s, std::size_t H, std::size_t W) {
  if (H == img_h(s) && W == img_w(s)) return s;
  const double sy = double(img_h(s)) / double(H), sx = double(img_w(s)) / double(W);
  return remap(s, H, W, [&](double y, double x) { return std::pair{(y + 0.5) * sy - 0.5, (x + 0.5) * sx - 0.5}; }, false);
}

SegSample hflip(const SegSample& s) {
  const std::size_t C = s.image.dim(0), H = img_h(s), W = img_w(s);
  std::vector<float> img(s.image.numel());
  LabelMap mask(H, W);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) img[(c * H + y) * W + x] = s.image[(c * H + y) * W + (W - 1 - x)];
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) mask.at(y, x) = s.mask.at(y, W - 1 - x);
  return {s.id, Tensor<float>(s.image.shape(), std::move(img)), std::move(mask)};
}

SegSample vflip(const SegSample& s) {
  const std::size_t C = s.image.dim(0), H = img_h(s), W = img_w(s);
  std::vector<float> img(s.image.numel());
  LabelMap mask(H, W);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      std::copy_n(s.image.ptr() + (c * H + (H - 1 - y)) * W, W, img.begin() + (c * H + y) * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) mask.at(y, x) = s.mask.at(H - 1 - y, x);
  return {s.id, Tensor<float>(s.image.shape(), std::move(img)), std::move(mask)};
}

SegSample rotate(const SegSample& s, double radians) {
  const std::size_t H = img_h(s), W = img_w(s);
  const double cy = (double(H) - 1) / 2, cx = (double(W) - 1) / 2;
  const double c = std::cos(radians), sn = std::sin(radians);
  return remap(
      s, H, W,
      [&](double y, double x) {
        const double dy = y - cy, dx = x - cx;
        return std::pair{cy + c * dy - sn * dx, cx + sn * dy + c * dx};
      },
      true);
}

SegSample augment(const SegSample& in, Rng& rng, const AugmentToggles& t) {
  SegSample s = t.target ? resize(in, t.target, t.target) : in;
  // draw every coin regardless of toggles so streams stay aligned
  const bool do_h = rng.bernoulli(0.5), do_v = rng.bernoulli(0.5), do_rot = rng.bernoulli(0.5);
  const bool do_noise = rng.bernoulli(0.5), do_blur = rng.bernoulli(0.5), do_contrast = rng.bernoulli(0.5);
  const double angle = rng.uniform(-20.0, 20.0) * std::numbers::pi / 180.0;
  const double sigma = rng.uniform(0.5, 1.2), contrast = rng.uniform(0.8, 1.25);
  Rng noise_rng = rng.fork(rng.next_u64());

  if (t.hflip && do_h) s = hflip(s);
  if (t.vflip && do_v) s = vflip(s);
  if (t.rotate && do_rot) s = rotate(s, angle);
  const std::size_t C = s.image.dim(0), H = img_h(s), W = img_w(s);
  if (t.noise && do_noise) {
    for (auto& e : s.image.mutable_data()) e = std::clamp(e + static_cast<float>(0.03 * noise_rng.normal()), 0.0f, 1.0f);
  }
  if (t.blur && do_blur) {
    float k[5];
    float ks = 0;
    for (int i = -2; i <= 2; ++i) ks += k[i + 2] = static_cast<float>(std::exp(-(i * i) / (2 * sigma * sigma)));
    for (auto& e : k) e /= ks;
    std::vector<float> a(s.image.data().begin(), s.image.data().end()), b(a.size());
    auto at = [&](const std::vector<float>& src, std::size_t c, long y, long x) {
      y = std::clamp<long>(y, 0, long(H) - 1);
      x = std::clamp<long>(x, 0, long(W) - 1);
      return src[(c * H + std::size_t(y)) * W + std::size_t(x)];
    };
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          float acc = 0;
          for (int i = -2; i <= 2; ++i) acc += k[i + 2] * at(a, c, long(y), long(x) + i);
          b[(c * H + y) * W + x] = acc;
        }
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          float acc = 0;
          for (int i = -2; i <= 2; ++i) acc += k[i + 2] * at(b, c, long(y) + i, long(x));
          a[(c * H + y) * W + x] = acc;
        }
    s.image = Tensor<float>(s.image.shape(), std::move(a));
  }
  if (t.contrast && do_contrast) {
    std::vector<float> v(s.image.data().begin(), s.image.data().end());
    double mean = 0;
    for (auto e : v) mean += e;
    mean /= double(v.size());
    for (auto& e : v) e = static_cast<float>((e - mean) * contrast + mean);
    clamp01(v);
    s.image = Tensor<float>(s.image.shape(), std::move(v));
  }
  return s;
}

// ---------------------------------------------------------------- synthetic

namespace {

std::array<double, 3> hsv(double h, double s, double v) {
  const double c = v * s, hp = h * 6, x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
  std::array<double, 3> rgb{};
  const int i = static_cast<int>(hp) % 6;
  const double tbl[6][3] = {{c, x, 0}, {x, c, 0}, {0, c, x}, {0, x, c}, {x, 0, c}, {c, 0, x}};
  for (int j = 0; j < 3; ++j) rgb[j] = tbl[i][j] + (v - c);
  return rgb;
}

struct Shape2D {
  bool ellipse;
  double cy, cx, ry, rx, angle;

  bool inside(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double u = std::cos(angle) * dx + std::sin(angle) * dy;
    const double v = -std::sin(angle) * dx + std::cos(angle) * dy;
    if (ellipse) return (u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0;
    return std::abs(u) <= rx && std::abs(v) <= ry;
  }
};

SegSample synth_one(std::size_t K, std::size_t S, Rng& rng, std::size_t index) {
  const double Sd = double(S);
  constexpr int kSuper = 4;
  std::vector<double> img(3 * S * S);
  // textured background: tilted sinusoid plus a soft gradient
  const double fy = rng.uniform(0.05, 0.2), fx = rng.uniform(0.05, 0.2), phase = rng.uniform(0, 6.28);
  const double base = rng.uniform(0.25, 0.4);
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      const double v = base + 0.06 * std::sin(fy * double(y) + fx * double(x) + phase) + 0.05 * double(y) / Sd;
      for (std::size_t c = 0; c < 3; ++c) img[(c * S + y) * S + x] = v * (c == 2 ? 1.05 : 1.0);
    }
  LabelMap mask(S, S);
  for (std::size_t k = 1; k < K; ++k) {
    Shape2D sh{rng.bernoulli(0.5), rng.uniform(0.2, 0.8) * Sd, rng.uniform(0.2, 0.8) * Sd,
               rng.uniform(0.1, 0.22) * Sd, rng.uniform(0.1, 0.22) * Sd, rng.uniform(0, std::numbers::pi)};
    auto colour = hsv(double(k - 1) / double(K - 1), 0.85, 0.95);
    for (auto& c : colour) c = std::clamp(c + rng.uniform(-0.04, 0.04), 0.0, 1.0);
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        int hits = 0;
        for (int i = 0; i < kSuper; ++i)
          for (int j = 0; j < kSuper; ++j)
            hits += sh.inside(double(y) + (i + 0.5) / kSuper - 0.5, double(x) + (j + 0.5) / kSuper - 0.5);
        if (!hits) continue;
        const double cov = double(hits) / (kSuper * kSuper);
        for (std::size_t c = 0; c < 3; ++c) {
          auto& px = img[(c * S + y) * S + x];
          px = (1 - cov) * px + cov * colour[c];
        }
        if (cov >= 0.5) mask.at(y, x) = static_cast<std::uint16_t>(k);
      }
  }
  std::vector<float> out(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = static_cast<float>(std::clamp(img[i] + 0.03 * rng.normal(), 0.0, 1.0));
  char id[32];
  std::snprintf(id, sizeof id, "s%04zu", index);
  return {id, Tensor<float>({3, S, S}, std::move(out)), std::move(mask)};
}

}  // namespace

std::vector<SegSample> gen_synthetic_dataset(std::size_t n, std::size_t K, std::size_t size, Rng& rng) {
  if (K < 2) throw ConfigError("synthetic data needs K >= 2");
  if (size < 8) throw ConfigError("synthetic image size must be >= 8");
  std::vector<SegSample> out;
  const std::size_t min_pixels = std::max<std::size_t>(4, size * size / 200);
  for (std::size_t i = 0; i < n; ++i) {
    // resample until every foreground class stays visible after occlusion
    for (int attempt = 0;; ++attempt) {
      auto s = synth_one(K, size, rng, i);
      std::vector<std::size_t> counts(K, 0);
      for (auto id : s.mask.ids) ++counts[id];
      const bool ok = std::all_of(counts.begin() + 1, counts.end(), [&](std::size_t c) { return c >= min_pixels; });
      if (ok || attempt >= 50) {
        out.push_back(std::move(s));
        break;
      }
    }
  }
  return out;
}

// ------------------------------------------------------------------ storage

void write_dataset(const std::string& dir, const Dataset& d) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream man(fs::path(dir) / "manifest.txt");
  if (!man) throw std::runtime_error("cannot write manifest in " + dir);
  man << "num_classes=" << d.num_classes << "\nsize=" << d.size << "\n";
  for (const auto& s : d.samples) {
    man << "sample=" << s.id << "\n";
    save_tensor((fs::path(dir) / (s.id + ".image.msvt")).string(), s.image);
    std::vector<float> m(s.mask.ids.begin(), s.mask.ids.end());
    save_tensor((fs::path(dir) / (s.id + ".mask.msvt")).string(), Tensor<float>({s.mask.H, s.mask.W}, std::move(m)));
  }
  if (!man) throw std::runtime_error("failed writing manifest in " + dir);
}

Dataset read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream man(fs::path(dir) / "manifest.txt");
  if (!man) throw std::runtime_error("dataset: no manifest.txt in " + dir);
  Dataset d;
  std::string line;
  while (std::getline(man, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto [key, value] = parse_override(line);
    if (key == "num_classes") d.num_classes = parse_size(key, value);
    else if (key == "size") d.size = parse_size(key, value);
    else if (key == "sample") {
      SegSample s;
      s.id = value;
      s.image = load_tensor<float>((fs::path(dir) / (value + ".image.msvt")).string());
      const auto m = load_tensor<float>((fs::path(dir) / (value + ".mask.msvt")).string());
      if (s.image.rank() != 3 || m.rank() != 2 || m.dim(0) != s.image.dim(1) || m.dim(1) != s.image.dim(2)) {
        throw FormatError("dataset: sample " + value + " has inconsistent extents");
      }
      s.mask = LabelMap(m.dim(0), m.dim(1));
      for (std::size_t i = 0; i < m.numel(); ++i) {
        const float v = m[i];
        if (v < 0 || v != std::floor(v)) throw FormatError("dataset: sample " + value + " mask holds non-integer ids");
        s.mask.ids[i] = static_cast<std::uint16_t>(v);
      }
      d.samples.push_back(std::move(s));
    } else {
      throw FormatError("dataset: unknown manifest key '" + key + "'");
    }
  }
  if (d.num_classes < 2) throw FormatError("dataset: manifest lacks num_classes");
  for (const auto& s : d.samples)
    for (auto id : s.mask.ids)
      if (id >= d.num_classes) throw FormatError("dataset: sample " + s.id + " has class id >= num_classes");
  return d;
}

Tensor<float> stack_images(std::span<const SegSample> batch) {
  if (batch.empty()) throw std::invalid_argument("stack_images: empty batch");
  const auto& s0 = batch[0].image.shape();
  std::vector<float> v;
  v.reserve(batch.size() * batch[0].image.numel());
  for (const auto& s : batch) {
    if (s.image.shape() != s0) throw ShapeError("stack_images: images differ in shape");
    v.insert(v.end(), s.image.data().begin(), s.image.data().end());
  }
  return Tensor<float>({batch.size(), s0[0], s0[1], s0[2]}, std::move(v));
}

std::vector<LabelMap> masks_of(std::span<const SegSample> batch) {
  std::vector<LabelMap> out;
  for (const auto& s : batch) out.push_back(s.mask);
  return out;
}

template <typename T>
LabelMap argmax_labels(const Tensor<T>& logits) {
  if (logits.rank() != 3) throw ShapeError("argmax_labels: expected [K,H,W]");
  const std::size_t K = logits.dim(0), H = logits.dim(1), W = logits.dim(2);
  LabelMap out(H, W);
  for (std::size_t i = 0; i < H * W; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (logits[k * H * W + i] > logits[best * H * W + i]) best = k;
    out.ids[i] = static_cast<std::uint16_t>(best);
  }
  return out;
}

template LabelMap argmax_labels<float>(const Tensor<float>&);
template LabelMap argmax_labels<double>(const Tensor<double>&);

}  // namespace msvm
