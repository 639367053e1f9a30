#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "tpseg/tensor.hpp"

namespace tpseg {

// Tensor blob, little-endian:
//   "TPST" | u32 rank | u64 extent * rank | f64 value * prod(extents)

void write_tensor(std::ostream& out, const Tensor<double>& t);
Tensor<double> read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor<double>& t);
Tensor<double> load_tensor(const std::filesystem::path& path);

namespace le {
void put_u32(std::ostream& out, std::uint32_t v);
void put_u64(std::ostream& out, std::uint64_t v);
void put_f64(std::ostream& out, double v);
std::uint32_t get_u32(std::istream& in);
std::uint64_t get_u64(std::istream& in);
double get_f64(std::istream& in);
}  // namespace le

}  // namespace tpseg
