#include "msvm/scan.hpp"

#include <chrono>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "msvm/ops.hpp"
#include "msvm/rng.hpp"
#include "msvm/tape.hpp"

namespace msvm {

const char* to_string(ScanPath p) {
  switch (p) {
    case ScanPath::RowFwd: return "row_fwd";
    case ScanPath::ColFwd: return "col_fwd";
    case ScanPath::RowRev: return "row_rev";
    case ScanPath::ColRev: return "col_rev";
  }
  return "?";
}

std::vector<std::uint32_t> scan_order(ScanPath path, std::size_t H, std::size_t W) {
  const std::size_t L = H * W;
  std::vector<std::uint32_t> order(L);
  for (std::size_t t = 0; t < L; ++t) {
    const bool rev = path == ScanPath::RowRev || path == ScanPath::ColRev;
    const std::size_t s = rev ? L - 1 - t : t;
    if (path == ScanPath::RowFwd || path == ScanPath::RowRev) {
      order[t] = static_cast<std::uint32_t>(s);
    } else {
      order[t] = static_cast<std::uint32_t>((s % H) * W + s / H);
    }
  }
  return order;
}

namespace {

struct ScanDims {
  std::size_t B, L, C, N;
};

template <typename T>
ScanDims check_scan_shapes(const Tensor<T>& x, const ScanParams<T>& p) {
  if (x.rank() != 2 && x.rank() != 3) throw ShapeError("selective_scan: x must be [L,C] or [B,L,C], got " + shape_str(x.shape()));
  const bool batched = x.rank() == 3;
  ScanDims d{batched ? x.dim(0) : 1, x.dim(x.rank() - 2), x.dim(x.rank() - 1), 0};
  if (d.L == 0) throw ShapeError("selective_scan: empty sequence");
  if (p.A_log.rank() != 2 || p.A_log.dim(0) != d.C) throw ShapeError("selective_scan: A_log must be [C,N]");
  d.N = p.A_log.dim(1);
  if (p.D.numel() != d.C) throw ShapeError("selective_scan: D must be [C]");
  if (p.delta.shape() != x.shape()) throw ShapeError("selective_scan: delta must match x, got " + shape_str(p.delta.shape()));
  Shape bn = batched ? Shape{d.B, d.L, d.N} : Shape{d.L, d.N};
  if (p.B.shape() != bn || p.C.shape() != bn) throw ShapeError("selective_scan: B and C must be " + shape_str(bn));
  return d;
}

// Forward recurrence for one sequence. `hs`, when non-null, receives h_t
// for every step ([L,C,N]) for the backward pass.
template <typename T>
void scan_forward(const ScanDims& d, const T* x, const T* delta, const T* A, const T* Bm, const T* Cm, const T* D, T* y,
                  T* hs) {
  std::vector<T> h(d.C * d.N, T(0));
  for (std::size_t t = 0; t < d.L; ++t) {
    const T* bt = Bm + t * d.N;
    const T* ct = Cm + t * d.N;
    for (std::size_t c = 0; c < d.C; ++c) {
      const T xv = x[t * d.C + c];
      const T dt = delta[t * d.C + c];
      T* hc = h.data() + c * d.N;
      const T* ac = A + c * d.N;
      T acc = 0;
      for (std::size_t n = 0; n < d.N; ++n) {
        const T a = std::exp(dt * ac[n]);
        hc[n] = a * hc[n] + (dt * bt[n]) * xv;
        acc += ct[n] * hc[n];
      }
      y[t * d.C + c] = acc + D[c] * xv;
    }
    if (hs) std::copy(h.begin(), h.end(), hs + t * d.C * d.N);
  }
}

template <typename T>
std::vector<T> negative_exp(const Tensor<T>& A_log) {
  std::vector<T> A(A_log.numel());
  for (std::size_t i = 0; i < A.size(); ++i) A[i] = -std::exp(A_log[i]);
  return A;
}

template <typename T>
void parallel_for(std::size_t n, std::size_t threads, const auto& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  const std::size_t workers = std::min(threads, n);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
}

}  // namespace

template <typename T>
Discretized<T> discretize(const Tensor<T>& delta, const Tensor<T>& A, const Tensor<T>& B) {
  if (delta.rank() != 2 || A.rank() != 2 || B.rank() != 2) throw ShapeError("discretize: expected delta [L,C], A [C,N], B [L,N]");
  const std::size_t L = delta.dim(0), C = delta.dim(1), N = A.dim(1);
  if (A.dim(0) != C || B.dim(0) != L || B.dim(1) != N) throw ShapeError("discretize: inconsistent extents");
  for (auto v : delta.data())
    if (!(v > T(0))) throw std::domain_error("discretize: delta must be positive");
  std::vector<T> abar(L * C * N), bbar(L * C * N);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t n = 0; n < N; ++n) {
        const T dt = delta[t * C + c];
        abar[(t * C + c) * N + n] = std::exp(dt * A[c * N + n]);
        bbar[(t * C + c) * N + n] = dt * B[t * N + n];
      }
  return {Tensor<T>({L, C, N}, std::move(abar)), Tensor<T>({L, C, N}, std::move(bbar))};
}

template <typename T>
Tensor<T> selective_scan_seq(const Tensor<T>& x, const ScanParams<T>& p) {
  const auto d = check_scan_shapes(x, p);
  if (d.B != 1 || x.rank() != 2) throw ShapeError("selective_scan_seq: expects an unbatched [L,C] sequence");
  const auto A = negative_exp(p.A_log);
  std::vector<T> y(d.L * d.C);
  scan_forward(d, x.ptr(), p.delta.ptr(), A.data(), p.B.ptr(), p.C.ptr(), p.D.ptr(), y.data(), static_cast<T*>(nullptr));
  check_finite<T>(y, "selective_scan_seq");
  return Tensor<T>(x.shape(), std::move(y));
}

template <typename T>
Tensor<T> selective_scan_chunked(const Tensor<T>& x, const ScanParams<T>& p, std::size_t chunk, std::size_t threads) {
  const auto d = check_scan_shapes(x, p);
  if (d.B != 1 || x.rank() != 2) throw ShapeError("selective_scan_chunked: expects an unbatched [L,C] sequence");
  if (chunk == 0) throw std::invalid_argument("selective_scan_chunked: chunk must be >= 1");
  const auto A = negative_exp(p.A_log);
  const std::size_t L = d.L, C = d.C, N = d.N, CN = C * N;
  const std::size_t nchunks = (L + chunk - 1) / chunk;
  const T* xp = x.ptr();
  const T* dp = p.delta.ptr();
  const T* bp = p.B.ptr();
  const T* cp = p.C.ptr();

  // Per step: cumulative decay within the chunk and the local state from a
  // zero start; together they are the prefix of (a, b) pairs under o.
  std::vector<T> decay(L * CN), local(L * CN);
  parallel_for<T>(nchunks, threads, [&](std::size_t k) {
    const std::size_t t0 = k * chunk, t1 = std::min(L, t0 + chunk);
    for (std::size_t t = t0; t < t1; ++t)
      for (std::size_t c = 0; c < C; ++c) {
        const T xv = xp[t * C + c];
        const T dt = dp[t * C + c];
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t i = t * CN + c * N + n;
          const T a = std::exp(dt * A[c * N + n]);
          const T b = (dt * bp[t * N + n]) * xv;
          if (t == t0) {
            decay[i] = a;
            local[i] = a * T(0) + b;
          } else {
            decay[i] = decay[i - CN] * a;
            local[i] = a * local[i - CN] + b;
          }
        }
      }
  });

  // Carry pass: state entering each chunk.
  std::vector<T> carry(nchunks * CN, T(0));
  for (std::size_t k = 1; k < nchunks; ++k) {
    const std::size_t last = std::min(L, k * chunk) - 1;
    for (std::size_t j = 0; j < CN; ++j) {
      carry[k * CN + j] = local[last * CN + j] + decay[last * CN + j] * carry[(k - 1) * CN + j];
    }
  }

  std::vector<T> y(L * C);
  parallel_for<T>(nchunks, threads, [&](std::size_t k) {
    const std::size_t t0 = k * chunk, t1 = std::min(L, t0 + chunk);
    const T* h_in = carry.data() + k * CN;
    for (std::size_t t = t0; t < t1; ++t)
      for (std::size_t c = 0; c < C; ++c) {
        T acc = 0;
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t j = c * N + n;
          const T h = local[t * CN + j] + decay[t * CN + j] * h_in[j];
          acc += cp[t * N + n] * h;
        }
        y[t * C + c] = acc + p.D[c] * xp[t * C + c];
      }
  });
  check_finite<T>(y, "selective_scan_chunked");
  return Tensor<T>(x.shape(), std::move(y));
}

template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x, const ScanParams<T>& p) {
  const auto d = check_scan_shapes(x, p);
  const auto A = std::make_shared<std::vector<T>>(negative_exp(p.A_log));
  Tape<T>* tape = Tape<T>::active();
  const bool track = tape && (x.requires_grad() || p.A_log.requires_grad() || p.D.requires_grad() ||
                              p.delta.requires_grad() || p.B.requires_grad() || p.C.requires_grad());

  const std::size_t LC = d.L * d.C, LN = d.L * d.N, LCN = d.L * d.C * d.N;
  std::vector<T> y(d.B * LC);
  auto hs = track ? std::make_shared<std::vector<T>>(d.B * LCN) : nullptr;
  for (std::size_t b = 0; b < d.B; ++b) {
    scan_forward(d, x.ptr() + b * LC, p.delta.ptr() + b * LC, A->data(), p.B.ptr() + b * LN, p.C.ptr() + b * LN, p.D.ptr(),
                 y.data() + b * LC, hs ? hs->data() + b * LCN : nullptr);
  }
  check_finite<T>(y, "selective_scan");
  Tensor<T> out(x.shape(), std::move(y));
  if (!track) return out;

  return tape->record(out, "selective_scan", [x, p, d, A, hs](Tape<T>& t, std::span<const T> gy_all) {
    const std::size_t C = d.C, N = d.N, L = d.L;
    const std::size_t LC = L * C, LN = L * N, LCN = L * C * N;
    T* gx = x.requires_grad() ? t.grad_buffer(x.node()).data() : nullptr;
    T* gdelta = p.delta.requires_grad() ? t.grad_buffer(p.delta.node()).data() : nullptr;
    T* gB = p.B.requires_grad() ? t.grad_buffer(p.B.node()).data() : nullptr;
    T* gC = p.C.requires_grad() ? t.grad_buffer(p.C.node()).data() : nullptr;
    std::vector<T> gA(C * N, T(0)), gD(C, T(0)), gh(C * N);
    for (std::size_t b = 0; b < d.B; ++b) {
      const T* xb = x.ptr() + b * LC;
      const T* db = p.delta.ptr() + b * LC;
      const T* Bb = p.B.ptr() + b * LN;
      const T* Cb = p.C.ptr() + b * LN;
      const T* gy = gy_all.data() + b * LC;
      const T* hb = hs->data() + b * LCN;
      std::fill(gh.begin(), gh.end(), T(0));
      for (std::size_t tt = L; tt-- > 0;) {
        const T* h_t = hb + tt * C * N;
        const T* h_prev = tt > 0 ? hb + (tt - 1) * C * N : nullptr;
        for (std::size_t c = 0; c < C; ++c) {
          const T g = gy[tt * C + c];
          const T xv = xb[tt * C + c];
          const T dt = db[tt * C + c];
          gD[c] += g * xv;
          T gdt = 0, gxs = g * p.D[c];
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t j = c * N + n;
            const T a_cn = (*A)[j];
            const T a = std::exp(dt * a_cn);
            const T ght = gh[j] + g * Cb[tt * N + n];
            if (gC) gC[b * LN + tt * N + n] += g * h_t[j];
            const T hp = h_prev ? h_prev[j] : T(0);
            const T ga = ght * hp;
            gdt += ga * a * a_cn + ght * Bb[tt * N + n] * xv;
            gA[j] += ga * a * dt;
            if (gB) gB[b * LN + tt * N + n] += ght * dt * xv;
            gxs += ght * dt * Bb[tt * N + n];
            gh[j] = ght * a;
          }
          if (gdelta) gdelta[b * LC + tt * C + c] += gdt;
          if (gx) gx[b * LC + tt * C + c] += gxs;
        }
      }
    }
    if (p.A_log.requires_grad()) {
      auto g = t.grad_buffer(p.A_log.node());
      for (std::size_t j = 0; j < C * N; ++j) g[j] += gA[j] * (*A)[j];
    }
    if (p.D.requires_grad()) {
      auto g = t.grad_buffer(p.D.node());
      for (std::size_t c = 0; c < C; ++c) g[c] += gD[c];
    }
  });
}

// ---------------------------------------------------------------- cross scan

namespace {

struct MapDims {
  std::size_t B, C, H, W;
  bool batched;
};

MapDims map_dims(const Shape& s) {
  if (s.size() == 3) return {1, s[0], s[1], s[2], false};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
  throw ShapeError("cross_scan: expected [C,H,W] or [B,C,H,W], got " + shape_str(s));
}

}  // namespace

template <typename T>
Tensor<T> scan_gather(const Tensor<T>& fmap, ScanPath path) {
  const auto m = map_dims(fmap.shape());
  const std::size_t L = m.H * m.W;
  const auto order = scan_order(path, m.H, m.W);
  auto idx = std::make_shared<std::vector<std::uint32_t>>(m.B * L * m.C);
  for (std::size_t b = 0; b < m.B; ++b)
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t c = 0; c < m.C; ++c)
        (*idx)[(b * L + t) * m.C + c] = static_cast<std::uint32_t>((b * m.C + c) * L + order[t]);
  Shape out = m.batched ? Shape{m.B, L, m.C} : Shape{L, m.C};
  return index_gather(fmap, std::move(out), idx, "scan_gather");
}

template <typename T>
Tensor<T> scan_scatter(const Tensor<T>& seq, ScanPath path, std::size_t H, std::size_t W) {
  if (seq.rank() != 2 && seq.rank() != 3) throw ShapeError("cross_merge: sequence must be [L,C] or [B,L,C]");
  const bool batched = seq.rank() == 3;
  const std::size_t B = batched ? seq.dim(0) : 1, L = seq.dim(seq.rank() - 2), C = seq.dim(seq.rank() - 1);
  if (L != H * W) {
    throw ShapeError("cross_merge: sequence length " + std::to_string(L) + " != H*W = " + std::to_string(H * W));
  }
  const auto order = scan_order(path, H, W);
  std::vector<std::uint32_t> inverse(L);
  for (std::size_t t = 0; t < L; ++t) inverse[order[t]] = static_cast<std::uint32_t>(t);
  auto idx = std::make_shared<std::vector<std::uint32_t>>(B * C * L);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t px = 0; px < L; ++px)
        (*idx)[(b * C + c) * L + px] = static_cast<std::uint32_t>((b * L + inverse[px]) * C + c);
  Shape out = batched ? Shape{B, C, H, W} : Shape{C, H, W};
  return index_gather(seq, std::move(out), idx, "scan_scatter");
}

template <typename T>
std::array<Tensor<T>, 4> cross_scan(const Tensor<T>& fmap) {
  std::array<Tensor<T>, 4> out;
  for (std::size_t k = 0; k < 4; ++k) out[k] = scan_gather(fmap, kScanPaths[k]);
  return out;
}

template <typename T>
Tensor<T> cross_merge(const std::array<Tensor<T>, 4>& seqs, std::size_t H, std::size_t W) {
  std::array<Tensor<T>, 4> maps;
  for (std::size_t k = 0; k < 4; ++k) maps[k] = scan_scatter(seqs[k], kScanPaths[k], H, W);
  // Pairwise order keeps merge(cross_scan(x)) == 4x exact in floating point.
  return add(add(maps[0], maps[1]), add(maps[2], maps[3]));
}

template <typename T>
ScanParams<T> project_scan_params(const Tensor<T>& seq, const ScanWeights<T>& w) {
  ScanParams<T> p;
  p.A_log = w.A_log;
  p.D = w.D;
  p.delta = softplus(linear(linear(seq, w.dt_down), w.dt_up, w.dt_bias));
  p.B = linear(seq, w.B_proj);
  p.C = linear(seq, w.C_proj);
  return p;
}

template <typename T>
Tensor<T> ss2d(const Tensor<T>& fmap, const std::array<ScanWeights<T>, 4>& weights) {
  const auto m = map_dims(fmap.shape());
  const auto seqs = cross_scan(fmap);
  std::array<Tensor<T>, 4> ys;
  for (std::size_t k = 0; k < 4; ++k) ys[k] = selective_scan(seqs[k], project_scan_params(seqs[k], weights[k]));
  return cross_merge(ys, m.H, m.W);
}

// ----------------------------------------------------------------- benchmark

std::vector<ScanBenchRow> bench_scan(const std::vector<std::size_t>& lengths, std::size_t N, std::size_t C,
                                     std::size_t chunk, std::size_t reps, std::uint64_t seed, std::size_t threads) {
  using Clock = std::chrono::steady_clock;
  std::vector<ScanBenchRow> rows;
  Rng rng(seed);
  auto rand = [&](Shape s, double lo, double hi) {
    std::vector<double> v(numel(s));
    for (auto& e : v) e = rng.uniform(lo, hi);
    return Tensor<double>(std::move(s), std::move(v));
  };
  for (const std::size_t L : lengths) {
    std::size_t H = 1;
    for (std::size_t h = 1; h * h <= L; ++h)
      if (L % h == 0) H = h;
    const std::size_t W = L / H;
    const auto seqs = cross_scan(rand({C, H, W}, -1, 1));
    std::array<ScanParams<double>, 4> params;
    for (auto& p : params) {
      p.A_log = rand({C, N}, -1, 1.5);
      p.D = rand({C}, -1, 1);
      p.delta = rand({L, C}, 0.001, 0.1);
      p.B = rand({L, N}, -1, 1);
      p.C = rand({L, N}, -1, 1);
    }

    std::array<Tensor<double>, 4> ref;
    for (const char* variant : {"seq", "chunked"}) {
      const bool chunked = std::string(variant) == "chunked";
      std::array<Tensor<double>, 4> ys;
      std::uint64_t best = UINT64_MAX;
      for (std::size_t r = 0; r < std::max<std::size_t>(reps, 1); ++r) {
        const auto start = Clock::now();
        for (std::size_t k = 0; k < 4; ++k) {
          ys[k] = chunked ? selective_scan_chunked(seqs[k], params[k], chunk, threads) : selective_scan_seq(seqs[k], params[k]);
        }
        const auto ns = std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - start).count();
        best = std::min<std::uint64_t>(best, static_cast<std::uint64_t>(ns));
      }
      if (!chunked) {
        ref = ys;
      } else {
        for (std::size_t k = 0; k < 4; ++k) {
          if (max_abs_diff(ys[k], ref[k]) > 1e-12) {
            throw std::runtime_error("bench_scan: chunked scan deviates from the sequential oracle at L=" + std::to_string(L));
          }
        }
      }
      double checksum = 0;
      const auto merged = cross_merge(ys, H, W);
      for (auto v : merged.data()) checksum += v;
      rows.push_back({4, L, N, C, variant, best, checksum});
    }
  }
  return rows;
}

std::string bench_csv(const std::vector<ScanBenchRow>& rows) {
  std::ostringstream os;
  os << "path_count,L,N,C,variant,wall_ns,checksum\n";
  os.precision(17);
  for (const auto& r : rows) {
    os << r.path_count << ',' << r.L << ',' << r.N << ',' << r.C << ',' << r.variant << ',' << r.wall_ns << ','
       << r.checksum << '\n';
  }
  return os.str();
}

#define MSVM_INSTANTIATE_SCAN(T)                                                                              \
  template struct ScanParams<T>;                                                                              \
  template struct ScanWeights<T>;                                                                             \
  template Discretized<T> discretize<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> selective_scan_seq<T>(const Tensor<T>&, const ScanParams<T>&);                           \
  template Tensor<T> selective_scan_chunked<T>(const Tensor<T>&, const ScanParams<T>&, std::size_t, std::size_t); \
  template Tensor<T> selective_scan<T>(const Tensor<T>&, const ScanParams<T>&);                               \
  template Tensor<T> scan_gather<T>(const Tensor<T>&, ScanPath);                                              \
  template Tensor<T> scan_scatter<T>(const Tensor<T>&, ScanPath, std::size_t, std::size_t);                   \
  template std::array<Tensor<T>, 4> cross_scan<T>(const Tensor<T>&);                                          \
  template Tensor<T> cross_merge<T>(const std::array<Tensor<T>, 4>&, std::size_t, std::size_t);               \
  template ScanParams<T> project_scan_params<T>(const Tensor<T>&, const ScanWeights<T>&);                     \
  template Tensor<T> ss2d<T>(const Tensor<T>&, const std::array<ScanWeights<T>, 4>&);

MSVM_INSTANTIATE_SCAN(float)
MSVM_INSTANTIATE_SCAN(double)

}  // namespace msvm
