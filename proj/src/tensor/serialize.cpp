#include "tpn/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <vector>

namespace tpn {

static_assert(std::endian::native == std::endian::little, "TPN1 I/O assumes a little-endian host");

namespace {
constexpr char kMagic[4] = {'T', 'P', 'N', '1'};

template <typename T>
constexpr DType dtype_of() {
  return sizeof(T) == 4 ? DType::F32 : DType::F64;
}

void read_exact(std::istream& is, void* dst, std::size_t bytes) {
  is.read(static_cast<char*>(dst), static_cast<std::streamsize>(bytes));
  if (static_cast<std::size_t>(is.gcount()) != bytes) throw FormatError("TPN1: truncated stream");
}

template <typename Src, typename Dst>
void read_values(std::istream& is, Tensor<Dst>& out) {
  if constexpr (std::is_same_v<Src, Dst>) {
    read_exact(is, out.data(), static_cast<std::size_t>(out.numel()) * sizeof(Dst));
  } else {
    std::vector<Src> buffer(static_cast<std::size_t>(out.numel()));
    read_exact(is, buffer.data(), buffer.size() * sizeof(Src));
    for (std::size_t i = 0; i < buffer.size(); ++i) out[static_cast<std::int64_t>(i)] = static_cast<Dst>(buffer[i]);
  }
}
}  // namespace

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write(kMagic, 4);
  const auto tag = static_cast<std::uint8_t>(dtype_of<T>());
  const std::uint8_t rank = 4;
  os.put(static_cast<char>(tag));
  os.put(static_cast<char>(rank));
  const Shape& s = t.shape();
  for (std::int64_t d : {s.n, s.c, s.h, s.w}) {
    const auto dim = static_cast<std::uint64_t>(d);
    os.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
  }
  os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (!os) throw FormatError("TPN1: write failed");
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  char magic[4];
  read_exact(is, magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("TPN1: bad magic");
  std::uint8_t header[2];
  read_exact(is, header, 2);
  const std::uint8_t tag = header[0];
  const std::uint8_t rank = header[1];
  if (rank < 1 || rank > 4) throw FormatError("TPN1: unsupported rank " + std::to_string(rank));
  std::int64_t dims[4] = {1, 1, 1, 1};
  for (int i = 0; i < rank; ++i) {
    std::uint64_t d = 0;
    read_exact(is, &d, sizeof(d));
    dims[4 - rank + i] = static_cast<std::int64_t>(d);
  }
  Tensor<T> out({dims[0], dims[1], dims[2], dims[3]});
  if (tag == static_cast<std::uint8_t>(DType::F32)) {
    read_values<float>(is, out);
  } else if (tag == static_cast<std::uint8_t>(DType::F64)) {
    read_values<double>(is, out);
  } else {
    throw FormatError("TPN1: unknown dtype tag " + std::to_string(tag));
  }
  return out;
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

template <typename T>
std::int64_t encoded_size(const Tensor<T>& t) {
  return 4 + 2 + 4 * 8 + t.numel() * static_cast<std::int64_t>(sizeof(T));
}

template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor(std::istream&);
template Tensor<double> read_tensor(std::istream&);
template void save_tensor(const std::string&, const Tensor<float>&);
template void save_tensor(const std::string&, const Tensor<double>&);
template Tensor<float> load_tensor(const std::string&);
template Tensor<double> load_tensor(const std::string&);
template std::int64_t encoded_size(const Tensor<float>&);
template std::int64_t encoded_size(const Tensor<double>&);

}  // namespace tpn
