#pragma once

#include <iosfwd>
#include <stdexcept>
#include <string>
#include <variant>

#include "msvm/tensor.hpp"

namespace msvm {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor record: "MSVT", u16 version (1), u8 dtype (0=f32, 1=f64), u8 rank,
// rank x u64 extents, then the little-endian payload.
inline constexpr char kTensorMagic[4] = {'M', 'S', 'V', 'T'};
inline constexpr std::uint16_t kTensorVersion = 1;

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t);

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

AnyTensor read_any_tensor(std::istream& is);

// Reads a record and converts it to T when the stored dtype differs.
template <typename T>
Tensor<T> read_tensor(std::istream& is);

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t);
template <typename T>
Tensor<T> load_tensor(const std::string& path);

// Little-endian primitives shared with the checkpoint format.
void write_u8(std::ostream& os, std::uint8_t v);
void write_u16(std::ostream& os, std::uint16_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
std::uint8_t read_u8(std::istream& is);
std::uint16_t read_u16(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);

}  // namespace msvm
