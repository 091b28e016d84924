#include "msvm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace msvm {

namespace {

void check_pair(const LabelMap& a, const LabelMap& b) {
  if (a.H != b.H || a.W != b.W || a.ids.size() != a.H * a.W || b.ids.size() != b.H * b.W) {
    throw std::invalid_argument("metrics: mask extents differ");
  }
}

}  // namespace

std::vector<double> dsc_metric(const LabelMap& pred, const LabelMap& truth, std::size_t K) {
  check_pair(pred, truth);
  std::vector<std::uint64_t> p(K, 0), t(K, 0), both(K, 0);
  for (std::size_t i = 0; i < pred.ids.size(); ++i) {
    const auto a = pred.ids[i], b = truth.ids[i];
    if (a < K) ++p[a];
    if (b < K) ++t[b];
    if (a == b && a < K) ++both[a];
  }
  std::vector<double> out(K);
  for (std::size_t k = 0; k < K; ++k) {
    out[k] = p[k] + t[k] == 0 ? 1.0 : 2.0 * double(both[k]) / double(p[k] + t[k]);
  }
  return out;
}

std::vector<std::uint8_t> boundary_mask(const LabelMap& m, std::uint16_t k) {
  std::vector<std::uint8_t> b(m.H * m.W, 0);
  for (std::size_t h = 0; h < m.H; ++h)
    for (std::size_t w = 0; w < m.W; ++w) {
      if (m.at(h, w) != k) continue;
      bool edge = h == 0 || w == 0 || h + 1 == m.H || w + 1 == m.W;
      for (int dh = -1; dh <= 1 && !edge; ++dh)
        for (int dw = -1; dw <= 1 && !edge; ++dw) {
          if (m.at(h + dh, w + dw) != k) edge = true;
        }
      b[h * m.W + w] = edge;
    }
  return b;
}

double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("percentile of an empty set");
  std::sort(v.begin(), v.end());
  const double pos = q * double(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - double(lo);
  return v[lo] + (v[hi] - v[lo]) * frac;
}

// 1D lower envelope of parabolas (Felzenszwalb & Huttenlocher) over the
// finite entries of f; all arithmetic stays in integers.
static void envelope_1d(const std::vector<std::int64_t>& f, std::vector<std::int64_t>& out) {
  const std::int64_t n = static_cast<std::int64_t>(f.size());
  std::vector<std::int64_t> v;
  v.reserve(f.size());
  // z boundaries as fractions num/den, den > 0
  std::vector<std::pair<std::int64_t, std::int64_t>> z;
  auto cross = [&](std::int64_t q, std::int64_t p) {
    return std::pair<std::int64_t, std::int64_t>{(f[q] + q * q) - (f[p] + p * p), 2 * (q - p)};
  };
  auto le = [](std::pair<std::int64_t, std::int64_t> a, std::pair<std::int64_t, std::int64_t> b) {
    return a.first * b.second <= b.first * a.second;
  };
  for (std::int64_t q = 0; q < n; ++q) {
    if (f[q] < 0) continue;
    while (!v.empty()) {
      const auto s = cross(q, v.back());
      if (z.size() >= 1 && le(s, z.back())) {
        v.pop_back();
        z.pop_back();
      } else {
        break;
      }
    }
    if (!v.empty()) z.push_back(cross(q, v.back()));
    v.push_back(q);
  }
  if (v.empty()) {
    std::fill(out.begin(), out.end(), -1);
    return;
  }
  std::size_t k = 0;
  for (std::int64_t q = 0; q < n; ++q) {
    // advance while the next boundary lies left of q: z[k].num/den < q
    while (k < z.size() && z[k].first < q * z[k].second) ++k;
    const std::int64_t d = q - v[k];
    out[q] = d * d + f[v[k]];
  }
}

std::vector<std::int64_t> squared_distance_transform(const std::vector<std::uint8_t>& mask, std::size_t H,
                                                     std::size_t W) {
  // columns: squared distance to the nearest set pixel in the same column
  std::vector<std::int64_t> g(H * W, -1);
  for (std::size_t w = 0; w < W; ++w) {
    std::int64_t last = -1;
    for (std::size_t h = 0; h < H; ++h) {
      if (mask[h * W + w]) last = std::int64_t(h);
      if (last >= 0) g[h * W + w] = (std::int64_t(h) - last) * (std::int64_t(h) - last);
    }
    last = -1;
    for (std::size_t h = H; h-- > 0;) {
      if (mask[h * W + w]) last = std::int64_t(h);
      if (last >= 0) {
        const std::int64_t d = (last - std::int64_t(h)) * (last - std::int64_t(h));
        auto& cur = g[h * W + w];
        if (cur < 0 || d < cur) cur = d;
      }
    }
  }
  std::vector<std::int64_t> out(H * W), row(W), res(W);
  for (std::size_t h = 0; h < H; ++h) {
    std::copy(g.begin() + h * W, g.begin() + (h + 1) * W, row.begin());
    envelope_1d(row, res);
    std::copy(res.begin(), res.end(), out.begin() + h * W);
  }
  return out;
}

std::vector<std::optional<double>> hd95_metric(const LabelMap& pred, const LabelMap& truth, std::size_t K,
                                               HdPooling pooling) {
  check_pair(pred, truth);
  std::vector<std::optional<double>> out(K);
  for (std::size_t k = 0; k < K; ++k) {
    const auto bp = boundary_mask(pred, static_cast<std::uint16_t>(k));
    const auto bt = boundary_mask(truth, static_cast<std::uint16_t>(k));
    const bool ep = std::find(bp.begin(), bp.end(), 1) == bp.end();
    const bool et = std::find(bt.begin(), bt.end(), 1) == bt.end();
    if (ep || et) continue;
    const auto dt_truth = squared_distance_transform(bt, truth.H, truth.W);
    const auto dt_pred = squared_distance_transform(bp, pred.H, pred.W);
    std::vector<double> pt, tp;
    for (std::size_t i = 0; i < bp.size(); ++i) {
      if (bp[i]) pt.push_back(std::sqrt(double(dt_truth[i])));
      if (bt[i]) tp.push_back(std::sqrt(double(dt_pred[i])));
    }
    if (pooling == HdPooling::pooled) {
      pt.insert(pt.end(), tp.begin(), tp.end());
      out[k] = percentile(std::move(pt), 0.95);
    } else {
      out[k] = std::max(percentile(std::move(pt), 0.95), percentile(std::move(tp), 0.95));
    }
  }
  return out;
}

}  // namespace msvm
