#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "unihema/tensor.hpp"

// Raw tensor blob: "UHTN", version u32 LE, ndim u32 LE, dims u64 LE[ndim],
// payload f64 LE row-major.
namespace unihema {

inline constexpr std::uint32_t kTensorFormatVersion = 1;

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

namespace io {
void put_u32(std::ostream& out, std::uint32_t v);
void put_u64(std::ostream& out, std::uint64_t v);
void put_f64(std::ostream& out, double v);
std::uint32_t get_u32(std::istream& in);
std::uint64_t get_u64(std::istream& in);
double get_f64(std::istream& in);
}  // namespace io

}  // namespace unihema
