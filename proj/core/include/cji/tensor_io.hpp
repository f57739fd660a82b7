#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "cji/common.hpp"

namespace cji {

// "CJI f64 <ndim> <d1> ... <dk>\n" followed by row-major little-endian doubles.
struct Tensor {
  std::vector<std::size_t> shape;
  Vec data;

  std::size_t numel() const;
  static Tensor vector(const Vec& v) { return Tensor{{static_cast<std::size_t>(v.size())}, v}; }
};

class TensorFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
void write_tensor_file(const std::string& path, const Tensor& t);
Tensor read_tensor_file(const std::string& path);

}  // namespace cji
