#include "unihema/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "unihema/error.hpp"

namespace unihema {

namespace io {

namespace {
template <class U>
void put_le(std::ostream& out, U v) {
  std::array<char, sizeof(U)> buf;
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(buf.data(), buf.size());
}

template <class U>
U get_le(std::istream& in) {
  std::array<unsigned char, sizeof(U)> buf;
  if (!in.read(reinterpret_cast<char*>(buf.data()), buf.size())) {
    throw FormatError("unexpected end of tensor stream");
  }
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}
}  // namespace

void put_u32(std::ostream& out, std::uint32_t v) { put_le(out, v); }
void put_u64(std::ostream& out, std::uint64_t v) { put_le(out, v); }
void put_f64(std::ostream& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }
std::uint32_t get_u32(std::istream& in) { return get_le<std::uint32_t>(in); }
std::uint64_t get_u64(std::istream& in) { return get_le<std::uint64_t>(in); }
double get_f64(std::istream& in) { return std::bit_cast<double>(get_le<std::uint64_t>(in)); }

}  // namespace io

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write("UHTN", 4);
  io::put_u32(out, kTensorFormatVersion);
  io::put_u32(out, static_cast<std::uint32_t>(t.ndim()));
  for (auto d : t.shape()) io::put_u64(out, d);
  for (double v : t.data()) io::put_f64(out, v);
}

Tensor read_tensor(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4)) throw FormatError("unexpected end of tensor stream");
  if (std::memcmp(magic, "UHTN", 4) != 0) throw FormatError("bad tensor magic");
  const auto version = io::get_u32(in);
  if (version != kTensorFormatVersion) {
    throw VersionMismatchError("tensor format version " + std::to_string(version) +
                               " unsupported (expected " +
                               std::to_string(kTensorFormatVersion) + ")");
  }
  const auto ndim = io::get_u32(in);
  if (ndim == 0 || ndim > 8) throw FormatError("tensor rank " + std::to_string(ndim) + " invalid");
  Shape shape(ndim);
  std::size_t n = 1;
  for (auto& d : shape) {
    d = io::get_u64(in);
    if (d == 0 || d > (std::size_t{1} << 32)) throw FormatError("tensor extent invalid");
    n *= d;
  }
  if (n > (std::size_t{1} << 31)) throw FormatError("tensor too large");
  std::vector<double> data(n);
  for (auto& v : data) v = io::get_f64(in);
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  write_tensor(out, t);
  if (!out) throw DataError("write failed: " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError(path.string());
  return read_tensor(in);
}

}  // namespace unihema
