#include "tpseg/serialize.hpp"

#include <array>
#include <bit>
#include <fstream>
#include <istream>
#include <ostream>

namespace tpseg {

namespace le {

namespace {
template <typename U>
void put(std::ostream& out, U v) {
  std::array<char, sizeof(U)> bytes;
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes.data(), bytes.size());
}

template <typename U>
U get(std::istream& in) {
  std::array<unsigned char, sizeof(U)> bytes;
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!in) throw Error("unexpected end of stream");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}
}  // namespace

void put_u32(std::ostream& out, std::uint32_t v) { put(out, v); }
void put_u64(std::ostream& out, std::uint64_t v) { put(out, v); }
void put_f64(std::ostream& out, double v) { put(out, std::bit_cast<std::uint64_t>(v)); }
std::uint32_t get_u32(std::istream& in) { return get<std::uint32_t>(in); }
std::uint64_t get_u64(std::istream& in) { return get<std::uint64_t>(in); }
double get_f64(std::istream& in) { return std::bit_cast<double>(get<std::uint64_t>(in)); }

}  // namespace le

void write_tensor(std::ostream& out, const Tensor<double>& t) {
  out.write("TPST", 4);
  le::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (Index e : t.shape()) le::put_u64(out, static_cast<std::uint64_t>(e));
  for (Index i = 0; i < t.size(); ++i) le::put_f64(out, t[i]);
}

Tensor<double> read_tensor(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "TPST") throw Error("bad tensor magic");
  const std::uint32_t rank = le::get_u32(in);
  if (rank > 16) throw Error("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) {
    const std::uint64_t v = le::get_u64(in);
    if (v > (std::uint64_t{1} << 40)) throw Error("implausible tensor extent");
    e = static_cast<Index>(v);
  }
  Tensor<double> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = le::get_f64(in);
  return t;
}

void save_tensor(const std::filesystem::path& path, const Tensor<double>& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path.string(), "cannot open for writing");
  write_tensor(out, t);
  if (!out) throw IoError(path.string(), "write failed");
}

Tensor<double> load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string(), "cannot open");
  try {
    return read_tensor(in);
  } catch (const IoError&) {
    throw;
  } catch (const Error& e) {
    throw IoError(path.string(), e.what());
  }
}

}  // namespace tpseg
