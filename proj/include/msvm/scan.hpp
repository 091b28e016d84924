#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "msvm/tensor.hpp"

namespace msvm {

/// The four flattening orders of a 2D map. The reversed paths visit
/// exactly the forward index sequence backwards.
enum class ScanPath : std::uint8_t { RowFwd = 0, ColFwd = 1, RowRev = 2, ColRev = 3 };
inline constexpr std::array<ScanPath, 4> kScanPaths = {ScanPath::RowFwd, ScanPath::ColFwd, ScanPath::RowRev,
                                                       ScanPath::ColRev};
const char* to_string(ScanPath p);

/// Sequence position t -> flat pixel index h*W + w.
std::vector<std::uint32_t> scan_order(ScanPath path, std::size_t H, std::size_t W);

/// Resolved per-step selective-scan parameters for one sequence of length L
/// over C channels with state size N. A = -exp(A_log) is strictly negative.
template <typename T>
struct ScanParams {
  Tensor<T> A_log;  // [C,N]
  Tensor<T> D;      // [C]
  Tensor<T> delta;  // [L,C] (or [B,L,C]), positive
  Tensor<T> B;      // [L,N] (or [B,L,N])
  Tensor<T> C;      // [L,N] (or [B,L,N])

  std::size_t state_size() const { return A_log.dim(1); }
};

template <typename T>
struct Discretized {
  Tensor<T> Abar;  // [L,C,N]
  Tensor<T> Bbar;  // [L,C,N]
};

/// Zero-order hold for A and the Euler form for B:
/// Abar = exp(delta * A), Bbar = delta * B. Here A is the (negative) state
/// matrix itself, not its log.
template <typename T>
Discretized<T> discretize(const Tensor<T>& delta, const Tensor<T>& A, const Tensor<T>& B);

/// Reference recurrence over x [L,C]:
///   h_0 = 0, h_t = Abar_t * h_{t-1} + Bbar_t * x_t, y_t = <C_t, h_t> + D * x_t
template <typename T>
Tensor<T> selective_scan_seq(const Tensor<T>& x, const ScanParams<T>& p);

/// Same output as selective_scan_seq, computed as independent per-chunk
/// scans from a zero state, a carry pass combining chunk summaries with
///   (a1, b1) o (a2, b2) = (a1 a2, a2 b1 + b2),
/// and a fix-up pass adding the carried state. Chunks run on up to
/// `threads` threads; results do not depend on the thread count.
template <typename T>
Tensor<T> selective_scan_chunked(const Tensor<T>& x, const ScanParams<T>& p, std::size_t chunk,
                                 std::size_t threads = 1);

/// Differentiable selective scan. Accepts x [L,C] or a batch [B,L,C] with
/// matching delta/B/C. The backward pass runs the reverse recurrence
/// analytically instead of taping every step.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x, const ScanParams<T>& p);

/// [C,H,W] -> [L,C] (or [B,C,H,W] -> [B,L,C]) along one path. Differentiable.
template <typename T>
Tensor<T> scan_gather(const Tensor<T>& fmap, ScanPath path);
/// Inverse of scan_gather: restores a sequence to its 2D positions.
template <typename T>
Tensor<T> scan_scatter(const Tensor<T>& seq, ScanPath path, std::size_t H, std::size_t W);

template <typename T>
std::array<Tensor<T>, 4> cross_scan(const Tensor<T>& fmap);
/// Restores each sequence along its own path and sums the four maps.
template <typename T>
Tensor<T> cross_merge(const std::array<Tensor<T>, 4>& seqs, std::size_t H, std::size_t W);

/// Input-dependent projections of one S6 path. Delta goes through a
/// rank-reduced pair of projections and softplus; B and C are direct
/// projections of the input sequence.
template <typename T>
struct ScanWeights {
  Tensor<T> dt_down;  // [C,R]
  Tensor<T> dt_up;    // [R,C]
  Tensor<T> dt_bias;  // [C]
  Tensor<T> B_proj;   // [C,N]
  Tensor<T> C_proj;   // [C,N]
  Tensor<T> A_log;    // [C,N]
  Tensor<T> D;        // [C]
};

template <typename T>
ScanParams<T> project_scan_params(const Tensor<T>& seq, const ScanWeights<T>& w);

/// 2D selective scan: cross_scan, one independently parameterized S6 scan
/// per path, cross_merge.
template <typename T>
Tensor<T> ss2d(const Tensor<T>& fmap, const std::array<ScanWeights<T>, 4>& weights);

struct ScanBenchRow {
  std::size_t path_count, L, N, C;
  std::string variant;
  std::uint64_t wall_ns;
  double checksum;
};

/// Times seq vs chunked scans over the four paths of a random square map
/// per length. Every chunked result is checked against the sequential one
/// (max abs deviation <= 1e-12) before it is reported.
std::vector<ScanBenchRow> bench_scan(const std::vector<std::size_t>& lengths, std::size_t N, std::size_t C,
                                     std::size_t chunk, std::size_t reps, std::uint64_t seed, std::size_t threads = 1);

std::string bench_csv(const std::vector<ScanBenchRow>& rows);

}  // namespace msvm
