#include "cji/operators.hpp"

#include <cstring>
#include <fftw3.h>

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <complex>
#include <mutex>
#include <sstream>

namespace cji {

const char* to_string(OperatorKind kind) {
  switch (kind) {
    case OperatorKind::Mask: return "mask";
    case OperatorKind::BlockAverage: return "block_average";
    case OperatorKind::CirculantBlur: return "circulant_blur";
    case OperatorKind::Dense: return "dense";
  }
  return "?";
}

namespace detail {

struct OperatorImpl {
  OperatorImpl(OperatorKind k, std::size_t m, std::size_t d) : kind(k), m(m), d(d) {}
  virtual ~OperatorImpl() = default;
  virtual Vec apply(const Vec& x) const = 0;
  virtual Vec adjoint(const Vec& y) const = 0;
  virtual Vec gram_solve(const Vec& y, double shift) const = 0;
  // Fused H^T (HH^T + shift)^+ H; overridden where a cheaper path exists.
  virtual Vec proj(const Vec& x, double shift) const { return adjoint(gram_solve(apply(x), shift)); }
  virtual Vec pinv(const Vec& y, double shift) const { return adjoint(gram_solve(y, shift)); }

  OperatorKind kind;
  std::size_t m, d;
};

namespace {

struct MaskImpl final : OperatorImpl {
  MaskImpl(std::vector<std::size_t> idx, std::size_t dim)
      : OperatorImpl(OperatorKind::Mask, idx.size(), dim), indices(std::move(idx)) {}

  Vec apply(const Vec& x) const override {
    Vec y(m);
    for (std::size_t i = 0; i < m; ++i) y[i] = x[indices[i]];
    return y;
  }
  Vec adjoint(const Vec& y) const override {
    Vec x = Vec::Zero(d);
    for (std::size_t i = 0; i < m; ++i) x[indices[i]] = y[i];
    return x;
  }
  Vec gram_solve(const Vec& y, double shift) const override { return y / (1.0 + shift); }
  Vec proj(const Vec& x, double shift) const override {
    Vec out = Vec::Zero(d);
    const double s = 1.0 / (1.0 + shift);
    for (std::size_t i : indices) out[i] = s * x[i];
    return out;
  }

  std::vector<std::size_t> indices;
};

struct BlockAverageImpl final : OperatorImpl {
  BlockAverageImpl(std::size_t k, std::size_t h, std::size_t w)
      : OperatorImpl(OperatorKind::BlockAverage, h * w, (k * h) * (k * w)),
        factor(k), out_h(h), out_w(w) {}

  Vec apply(const Vec& x) const override {
    Vec y = Vec::Zero(m);
    const std::size_t in_w = factor * out_w;
    const double scale = 1.0 / static_cast<double>(factor * factor);
    for (std::size_t r = 0; r < factor * out_h; ++r)
      for (std::size_t c = 0; c < in_w; ++c) y[(r / factor) * out_w + c / factor] += x[r * in_w + c];
    return y * scale;
  }
  Vec adjoint(const Vec& y) const override {
    Vec x(d);
    const std::size_t in_w = factor * out_w;
    const double scale = 1.0 / static_cast<double>(factor * factor);
    for (std::size_t r = 0; r < factor * out_h; ++r)
      for (std::size_t c = 0; c < in_w; ++c) x[r * in_w + c] = scale * y[(r / factor) * out_w + c / factor];
    return x;
  }
  Vec gram_solve(const Vec& y, double shift) const override {
    const double g = 1.0 / static_cast<double>(factor * factor);
    return y / (g + shift);
  }

  std::size_t factor, out_h, out_w;
};

std::mutex& fftw_planner_mutex() {
  static std::mutex mu;
  return mu;
}

struct CirculantImpl final : OperatorImpl {
  CirculantImpl(const Mat& kernel, std::size_t h, std::size_t w, double rel_threshold)
      : OperatorImpl(OperatorKind::CirculantBlur, h * w, h * w), height(h), width(w) {
    const std::size_t n = h * w;
    fftw_complex* a = fftw_alloc_complex(n);
    fftw_complex* b = fftw_alloc_complex(n);
    {
      std::lock_guard<std::mutex> lock(fftw_planner_mutex());
      forward = fftw_plan_dft_2d(static_cast<int>(h), static_cast<int>(w), a, b, FFTW_FORWARD, FFTW_ESTIMATE);
      backward = fftw_plan_dft_2d(static_cast<int>(h), static_cast<int>(w), a, b, FFTW_BACKWARD, FFTW_ESTIMATE);
    }
    // embed taps with their centre moved to the origin
    std::memset(a, 0, sizeof(fftw_complex) * n);
    const auto kr = static_cast<std::ptrdiff_t>(kernel.rows()), kc = static_cast<std::ptrdiff_t>(kernel.cols());
    for (std::ptrdiff_t i = 0; i < kr; ++i) {
      for (std::ptrdiff_t j = 0; j < kc; ++j) {
        const auto hi = static_cast<std::ptrdiff_t>(h), wi = static_cast<std::ptrdiff_t>(w);
        const std::size_t r = static_cast<std::size_t>(((i - kr / 2) % hi + hi) % hi);
        const std::size_t c = static_cast<std::size_t>(((j - kc / 2) % wi + wi) % wi);
        a[r * w + c][0] += kernel(i, j);
      }
    }
    fftw_execute_dft(forward, a, b);
    spectrum.resize(n);
    double peak = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      spectrum[k] = {b[k][0], b[k][1]};
      peak = std::max(peak, std::abs(spectrum[k]));
    }
    kept.assign(n, 1);
    for (std::size_t k = 0; k < n; ++k)
      if (std::abs(spectrum[k]) < rel_threshold * peak) {
        kept[k] = 0;
      }
    fftw_free(a);
    fftw_free(b);
  }

  ~CirculantImpl() override {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    fftw_destroy_plan(forward);
    fftw_destroy_plan(backward);
  }

  template <class F>
  Vec filter(const Vec& x, F&& multiplier) const {
    const std::size_t n = d;
    fftw_complex* a = fftw_alloc_complex(n);
    fftw_complex* b = fftw_alloc_complex(n);
    for (std::size_t k = 0; k < n; ++k) {
      a[k][0] = x[k];
      a[k][1] = 0.0;
    }
    fftw_execute_dft(forward, a, b);
    for (std::size_t k = 0; k < n; ++k) {
      const std::complex<double> v = multiplier(k) * std::complex<double>(b[k][0], b[k][1]);
      b[k][0] = v.real();
      b[k][1] = v.imag();
    }
    fftw_execute_dft(backward, b, a);
    Vec out(n);
    const double scale = 1.0 / static_cast<double>(n);
    for (std::size_t k = 0; k < n; ++k) out[k] = a[k][0] * scale;
    fftw_free(a);
    fftw_free(b);
    return out;
  }

  Vec apply(const Vec& x) const override {
    return filter(x, [&](std::size_t k) { return spectrum[k]; });
  }
  Vec adjoint(const Vec& y) const override {
    return filter(y, [&](std::size_t k) { return std::conj(spectrum[k]); });
  }
  Vec gram_solve(const Vec& y, double shift) const override {
    return filter(y, [&](std::size_t k) {
      return std::complex<double>(kept[k] ? 1.0 / (std::norm(spectrum[k]) + shift) : 0.0, 0.0);
    });
  }
  Vec pinv(const Vec& y, double shift) const override {
    return filter(y, [&](std::size_t k) {
      return kept[k] ? std::conj(spectrum[k]) / (std::norm(spectrum[k]) + shift) : std::complex<double>(0.0, 0.0);
    });
  }
  Vec proj(const Vec& x, double shift) const override {
    return filter(x, [&](std::size_t k) {
      const double p = std::norm(spectrum[k]);
      return std::complex<double>(kept[k] ? p / (p + shift) : 0.0, 0.0);
    });
  }

  std::size_t height, width;
  fftw_plan forward = nullptr, backward = nullptr;
  std::vector<std::complex<double>> spectrum;
  std::vector<char> kept;
};

struct DenseImpl final : OperatorImpl {
  DenseImpl(const Mat& mat, double rel_threshold)
      : OperatorImpl(OperatorKind::Dense, static_cast<std::size_t>(mat.rows()), static_cast<std::size_t>(mat.cols())),
        h(mat) {
    // SVD of H rather than an eigendecomposition of H H^T: the squared
    // spectrum of the Gram matrix cannot resolve singular values near the cut.
    const Eigen::BDCSVD<Mat> svd(h, Eigen::ComputeFullU);
    basis = svd.matrixU();
    Vec sv = Vec::Zero(h.rows());
    sv.head(svd.singularValues().size()) = svd.singularValues();
    eig = sv.array().square().matrix();
    // singular values below rel_threshold * max are dropped
    const double peak = sv.size() ? sv.maxCoeff() : 0.0;
    kept = (sv.array() > rel_threshold * peak).cast<double>();
  }

  Vec apply(const Vec& x) const override { return h * x; }
  Vec adjoint(const Vec& y) const override { return h.transpose() * y; }
  Vec gram_solve(const Vec& y, double shift) const override {
    Vec c = basis.transpose() * y;
    for (Eigen::Index i = 0; i < c.size(); ++i) c[i] = kept[i] > 0 ? c[i] / (eig[i] + shift) : 0.0;
    return basis * c;
  }

  Mat h;
  Mat basis;
  Vec eig;
  Vec kept;
};

}  // namespace
}  // namespace detail

LinearDegradation::LinearDegradation(std::shared_ptr<const detail::OperatorImpl> impl) : impl_(std::move(impl)) {}

LinearDegradation LinearDegradation::mask(std::vector<std::size_t> observed, std::size_t dim) {
  for (std::size_t i = 0; i < observed.size(); ++i) {
    if (observed[i] >= dim) {
      std::ostringstream msg;
      msg << "mask index " << observed[i] << " out of range for d=" << dim;
      throw DomainError(msg.str());
    }
    if (i > 0 && observed[i] <= observed[i - 1]) throw DomainError("mask indices must be strictly increasing");
  }
  return LinearDegradation(std::make_shared<detail::MaskImpl>(std::move(observed), dim));
}

LinearDegradation LinearDegradation::block_average(std::size_t factor, std::size_t out_height,
                                                   std::size_t out_width) {
  if (factor == 0 || out_height == 0 || out_width == 0) throw DomainError("block_average needs positive sizes");
  return LinearDegradation(std::make_shared<detail::BlockAverageImpl>(factor, out_height, out_width));
}

LinearDegradation LinearDegradation::circulant_blur(const Mat& kernel, std::size_t height, std::size_t width,
                                                    double rel_threshold) {
  if (height == 0 || width == 0) throw DomainError("circulant_blur needs a non-empty image");
  if (kernel.size() == 0 || static_cast<std::size_t>(kernel.rows()) > height ||
      static_cast<std::size_t>(kernel.cols()) > width)
    throw DomainError("blur kernel must be non-empty and no larger than the image");
  if (std::abs(kernel.sum() - 1.0) > 1e-9) {
    std::ostringstream msg;
    msg << "blur kernel must sum to 1 (sum=" << kernel.sum() << ")";
    throw DomainError(msg.str());
  }
  if (!(rel_threshold >= 0.0)) throw DomainError("spectral threshold must be >= 0");
  return LinearDegradation(std::make_shared<detail::CirculantImpl>(kernel, height, width, rel_threshold));
}

LinearDegradation LinearDegradation::dense(const Mat& h, double rel_threshold) {
  if (h.rows() == 0 || h.cols() == 0) throw DomainError("dense operator must be non-empty");
  if (h.rows() > h.cols()) throw DomainError("dense operator needs m <= d");
  if (!h.allFinite()) throw DomainError("dense operator has non-finite entries");
  return LinearDegradation(std::make_shared<detail::DenseImpl>(h, rel_threshold));
}

OperatorKind LinearDegradation::kind() const { return impl_->kind; }
std::size_t LinearDegradation::out_dim() const { return impl_->m; }
std::size_t LinearDegradation::in_dim() const { return impl_->d; }

namespace {
void expect_len(const Vec& v, std::size_t n, const char* what) {
  if (static_cast<std::size_t>(v.size()) != n) {
    std::ostringstream msg;
    msg << what << ": expected length " << n << ", got " << v.size();
    throw DimensionError(msg.str());
  }
}
void expect_shift(double shift) {
  if (!(shift >= 0.0) || std::isinf(shift)) throw DomainError("gram shift must be finite and >= 0");
}
}  // namespace

Vec LinearDegradation::apply(const Vec& x) const {
  expect_len(x, impl_->d, "apply");
  return impl_->apply(x);
}

Vec LinearDegradation::adjoint(const Vec& y) const {
  expect_len(y, impl_->m, "adjoint");
  return impl_->adjoint(y);
}

Vec LinearDegradation::gram_solve(const Vec& y, double shift) const {
  expect_len(y, impl_->m, "gram_solve");
  expect_shift(shift);
  return impl_->gram_solve(y, shift);
}

Vec LinearDegradation::pinv_apply(const Vec& y) const {
  expect_len(y, impl_->m, "pinv_apply");
  return impl_->pinv(y, 0.0);
}

Vec LinearDegradation::proj_apply(const Vec& x) const {
  expect_len(x, impl_->d, "proj_apply");
  return impl_->proj(x, 0.0);
}

Vec LinearDegradation::regularized_pinv_apply(const Vec& y, double shift) const {
  expect_len(y, impl_->m, "regularized_pinv_apply");
  expect_shift(shift);
  return impl_->pinv(y, shift);
}

Vec LinearDegradation::regularized_proj_apply(const Vec& x, double shift) const {
  expect_len(x, impl_->d, "regularized_proj_apply");
  expect_shift(shift);
  return impl_->proj(x, shift);
}

Vec LinearDegradation::pinv_outer_apply(const Vec& x) const {
  expect_len(x, impl_->d, "pinv_outer_apply");
  // (H^+)^T x = (HH^T)^+ H x
  return impl_->pinv(impl_->gram_solve(impl_->apply(x), 0.0), 0.0);
}

const std::vector<std::size_t>& LinearDegradation::mask_indices() const {
  if (impl_->kind != OperatorKind::Mask) throw ConfigError("mask_indices on a non-mask operator");
  return static_cast<const detail::MaskImpl&>(*impl_).indices;
}

std::size_t LinearDegradation::block_factor() const {
  if (impl_->kind != OperatorKind::BlockAverage) throw ConfigError("block_factor on a non-block operator");
  return static_cast<const detail::BlockAverageImpl&>(*impl_).factor;
}

DenseOperator dense_materialize(const LinearDegradation& op, std::size_t max_dim) {
  const std::size_t d = op.in_dim(), m = op.out_dim();
  if (d > max_dim) {
    std::ostringstream msg;
    msg << "dense_materialize: d=" << d << " exceeds guard " << max_dim;
    throw DomainError(msg.str());
  }
  DenseOperator out{Mat(m, d), Mat(d, m), Mat(d, d)};
  for (std::size_t j = 0; j < d; ++j) {
    const Vec e = Vec::Unit(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(j));
    out.h.col(j) = op.apply(e);
    out.proj.col(j) = op.proj_apply(e);
  }
  for (std::size_t j = 0; j < m; ++j)
    out.pinv.col(j) = op.pinv_apply(Vec::Unit(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(j)));
  return out;
}

Mat gaussian_kernel(std::size_t size, double sigma) {
  if (size == 0 || !(sigma > 0.0)) throw DomainError("gaussian_kernel needs size > 0 and sigma > 0");
  Mat k(size, size);
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j < size; ++j) {
      const double di = static_cast<double>(i) - c, dj = static_cast<double>(j) - c;
      k(i, j) = std::exp(-(di * di + dj * dj) / (2.0 * sigma * sigma));
    }
  return k / k.sum();
}

}  // namespace cji
