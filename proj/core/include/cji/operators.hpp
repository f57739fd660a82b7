#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "cji/common.hpp"

namespace cji {

enum class OperatorKind { Mask, BlockAverage, CirculantBlur, Dense };

const char* to_string(OperatorKind kind);

namespace detail {
struct OperatorImpl;
}

// Matrix-free linear degradation H (m x d, m <= d). Immutable; copies share
// the cached spectra / factorizations.
class LinearDegradation {
 public:
  static LinearDegradation mask(std::vector<std::size_t> observed, std::size_t dim);
  // Image of (factor*height) x (factor*width) pixels, row-major, averaged over
  // disjoint factor x factor blocks.
  static LinearDegradation block_average(std::size_t factor, std::size_t out_height,
                                         std::size_t out_width);
  // Periodic convolution of a height x width image with `kernel` (taps
  // centred at (rows/2, cols/2), must sum to 1). Frequencies with |h_k| below
  // rel_threshold * max|h| are treated as outside the row space.
  static LinearDegradation circulant_blur(const Mat& kernel, std::size_t height,
                                          std::size_t width, double rel_threshold = 1e-8);
  static LinearDegradation dense(const Mat& h, double rel_threshold = 1e-8);

  OperatorKind kind() const;
  std::size_t out_dim() const;
  std::size_t in_dim() const;

  Vec apply(const Vec& x) const;    // H x
  Vec adjoint(const Vec& y) const;  // H^T y
  // (H H^T + shift I)^+ y, restricted to the numerical range of H.
  Vec gram_solve(const Vec& y, double shift = 0.0) const;

  Vec pinv_apply(const Vec& y) const;  // H^+ y
  Vec proj_apply(const Vec& x) const;  // P x = H^+ H x
  // H^T (H H^T + shift I)^{-1} y and its projector analogue.
  Vec regularized_pinv_apply(const Vec& y, double shift) const;
  Vec regularized_proj_apply(const Vec& x, double shift) const;
  // H^+ (H^+)^T x
  Vec pinv_outer_apply(const Vec& x) const;

  // Kind-specific accessors.
  const std::vector<std::size_t>& mask_indices() const;
  std::size_t block_factor() const;

 private:
  explicit LinearDegradation(std::shared_ptr<const detail::OperatorImpl> impl);
  std::shared_ptr<const detail::OperatorImpl> impl_;
};

struct DenseOperator {
  Mat h;     // m x d
  Mat pinv;  // d x m
  Mat proj;  // d x d
};

// Basis-probe materialization for small problems (d <= max_dim).
DenseOperator dense_materialize(const LinearDegradation& op, std::size_t max_dim = 4096);

// Normalized Gaussian taps of size x size.
Mat gaussian_kernel(std::size_t size, double sigma);

}  // namespace cji
