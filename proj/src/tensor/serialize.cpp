#include "msvm/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace msvm {

namespace {

template <typename U>
void write_le(std::ostream& os, U v) {
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw FormatError("unexpected end of stream");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

template <typename T>
void write_payload(std::ostream& os, std::span<const T> data) {
  for (T v : data) {
    if constexpr (sizeof(T) == 4) {
      write_le(os, std::bit_cast<std::uint32_t>(v));
    } else {
      write_le(os, std::bit_cast<std::uint64_t>(v));
    }
  }
}

template <typename T>
Tensor<T> read_payload(std::istream& is, Shape shape) {
  std::vector<T> data(numel(shape));
  for (auto& v : data) {
    if constexpr (sizeof(T) == 4) {
      v = std::bit_cast<float>(read_le<std::uint32_t>(is));
    } else {
      v = std::bit_cast<double>(read_le<std::uint64_t>(is));
    }
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace

void write_u8(std::ostream& os, std::uint8_t v) { write_le(os, v); }
void write_u16(std::ostream& os, std::uint16_t v) { write_le(os, v); }
void write_u32(std::ostream& os, std::uint32_t v) { write_le(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { write_le(os, v); }
std::uint8_t read_u8(std::istream& is) { return read_le<std::uint8_t>(is); }
std::uint16_t read_u16(std::istream& is) { return read_le<std::uint16_t>(is); }
std::uint32_t read_u32(std::istream& is) { return read_le<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return read_le<std::uint64_t>(is); }

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  if (t.rank() > 255) throw FormatError("tensor rank exceeds 255");
  os.write(kTensorMagic, 4);
  write_u16(os, kTensorVersion);
  write_u8(os, static_cast<std::uint8_t>(Tensor<T>::dtype()));
  write_u8(os, static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) write_u64(os, e);
  write_payload<T>(os, t.data());
  if (!os) throw FormatError("write failed");
}

AnyTensor read_any_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) throw FormatError("unexpected end of stream reading tensor magic");
  if (std::memcmp(magic, kTensorMagic, 4) != 0) throw FormatError("bad tensor magic");
  const auto version = read_u16(is);
  if (version != kTensorVersion) throw FormatError("unsupported tensor record version " + std::to_string(version));
  const auto dtype = read_u8(is);
  const auto rank = read_u8(is);
  Shape shape(rank);
  for (auto& e : shape) e = read_u64(is);
  switch (dtype) {
    case 0: return read_payload<float>(is, std::move(shape));
    case 1: return read_payload<double>(is, std::move(shape));
    default: throw FormatError("unknown tensor dtype code " + std::to_string(dtype));
  }
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  return std::visit([](const auto& t) { return t.template cast<T>(); }, read_any_tensor(is));
}

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write_tensor(os, t);
}

template <typename T>
Tensor<T> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_tensor<T>(is);
}

template void write_tensor<float>(std::ostream&, const Tensor<float>&);
template void write_tensor<double>(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor<float>(std::istream&);
template Tensor<double> read_tensor<double>(std::istream&);
template void save_tensor<float>(const std::string&, const Tensor<float>&);
template void save_tensor<double>(const std::string&, const Tensor<double>&);
template Tensor<float> load_tensor<float>(const std::string&);
template Tensor<double> load_tensor<double>(const std::string&);

}  // namespace msvm
