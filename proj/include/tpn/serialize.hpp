#pragma once

// "TPN1" tensor files: magic "TPN1", u8 dtype tag, u8 rank, rank x u64 LE dims,
// then raw little-endian scalars in row-major order.
//
// dtype tags: 1 = f32, 2 = f64. Tensors are written with rank 4 (n, c, h, w);
// readers accept rank 1..4 and right-align the dims into (n, c, h, w).

#include <cstdint>
#include <iosfwd>
#include <string>
#include <variant>

#include "tpn/tensor.hpp"

namespace tpn {

enum class DType : std::uint8_t { F32 = 1, F64 = 2 };

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t);

/// Reads one tensor, converting to T if the stored dtype differs.
template <typename T>
Tensor<T> read_tensor(std::istream& is);

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t);
template <typename T>
Tensor<T> load_tensor(const std::string& path);

/// Size in bytes of the encoding of `t`.
template <typename T>
std::int64_t encoded_size(const Tensor<T>& t);

}  // namespace tpn
