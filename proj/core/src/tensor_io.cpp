#include "cji/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace cji {

std::size_t Tensor::numel() const {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

namespace {

std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return __builtin_bswap64(v);
  }
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  if (t.numel() != static_cast<std::size_t>(t.data.size()))
    throw TensorFormatError("tensor shape does not match its data length");
  out << "CJI f64 " << t.shape.size();
  for (auto s : t.shape) out << ' ' << s;
  out << '\n';
  for (Eigen::Index i = 0; i < t.data.size(); ++i) {
    const std::uint64_t bits = to_little(std::bit_cast<std::uint64_t>(t.data[i]));
    out.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
  }
  if (!out) throw TensorFormatError("tensor write failed");
}

Tensor read_tensor(std::istream& in) {
  std::string header;
  if (!std::getline(in, header)) throw TensorFormatError("tensor file is empty");
  std::istringstream hs(header);
  std::string magic, dtype;
  long long ndim = -1;
  hs >> magic >> dtype >> ndim;
  if (magic != "CJI" || dtype != "f64" || ndim < 0 || hs.fail())
    throw TensorFormatError("bad tensor header: '" + header + "'");
  Tensor t;
  for (long long i = 0; i < ndim; ++i) {
    long long s = -1;
    hs >> s;
    if (hs.fail() || s < 0) throw TensorFormatError("bad tensor dims in header: '" + header + "'");
    t.shape.push_back(static_cast<std::size_t>(s));
  }
  std::string rest;
  if (hs >> rest) throw TensorFormatError("trailing tokens in tensor header: '" + header + "'");
  const std::size_t n = t.numel();
  t.data.resize(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits;
    if (!in.read(reinterpret_cast<char*>(&bits), sizeof(bits))) {
      std::ostringstream msg;
      msg << "tensor data truncated: expected " << n << " values, got " << i;
      throw TensorFormatError(msg.str());
    }
    t.data[static_cast<Eigen::Index>(i)] = std::bit_cast<double>(to_little(bits));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw TensorFormatError("trailing bytes after tensor data");
  return t;
}

void write_tensor_file(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw TensorFormatError("cannot open '" + path + "' for writing");
  write_tensor(out, t);
}

Tensor read_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TensorFormatError("cannot open '" + path + "'");
  return read_tensor(in);
}

}  // namespace cji
