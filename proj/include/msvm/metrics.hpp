#pragma once

#include <cstdint>
#include <optional>
#include <vector>

namespace msvm {

/// Integer class-id map, row-major.
struct LabelMap {
  std::size_t H = 0, W = 0;
  std::vector<std::uint16_t> ids;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::uint16_t fill = 0) : H(h), W(w), ids(h * w, fill) {}
  std::uint16_t& at(std::size_t h, std::size_t w) { return ids[h * W + w]; }
  std::uint16_t at(std::size_t h, std::size_t w) const { return ids[h * W + w]; }
  bool operator==(const LabelMap&) const = default;
};

/// Per class k < K: 2|P∩T| / (|P|+|T|); 1 when both are empty.
std::vector<double> dsc_metric(const LabelMap& pred, const LabelMap& truth, std::size_t K);

/// Pixels of class k that touch the image edge or have an 8-neighbour of
/// another class.
std::vector<std::uint8_t> boundary_mask(const LabelMap& m, std::uint16_t k);

enum class HdPooling {
  pooled,     // 95th percentile of both directed distance sets together
  max_of_directed,  // max of the two directed 95th percentiles
};

/// Per class: HD95 between the boundaries of pred and truth, in pixels.
/// Absent (nullopt) when either boundary is empty.
std::vector<std::optional<double>> hd95_metric(const LabelMap& pred, const LabelMap& truth, std::size_t K,
                                               HdPooling pooling = HdPooling::pooled);

/// Linear-interpolation percentile (q in [0,1]) of unsorted values.
double percentile(std::vector<double> v, double q);

/// Squared Euclidean distance from every pixel to the nearest set pixel of
/// `mask` (exact, separable lower-envelope transform). Pixels are at
/// integer coordinates; an empty mask yields all -1.
std::vector<std::int64_t> squared_distance_transform(const std::vector<std::uint8_t>& mask, std::size_t H,
                                                     std::size_t W);

}  // namespace msvm
