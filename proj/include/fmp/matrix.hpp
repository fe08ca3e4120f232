#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fmp/error.hpp"

namespace fmp {

// Dense row-major matrix of doubles. Rank <= 2 covers every tensor in the library.
class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) + " != " +
                       std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Matrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged initializer for Matrix");
      std::copy(row.begin(), row.end(), m.data_.begin() + static_cast<std::ptrdiff_t>(i * c));
      ++i;
    }
    return m;
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline bool same_shape(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols();
}

inline std::string shape_str(const Matrix& a) {
  return std::to_string(a.rows()) + "x" + std::to_string(a.cols());
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!same_shape(a, b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

// Bit-level equality; distinguishes -0.0 from 0.0 and treats equal NaN payloads as equal.
inline bool bitwise_equal(const Matrix& a, const Matrix& b) {
  if (!same_shape(a, b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(a.values()[i]) != std::bit_cast<std::uint64_t>(b.values()[i])) {
      return false;
    }
  }
  return true;
}

inline bool all_finite(const Matrix& a) {
  return std::all_of(a.values().begin(), a.values().end(), [](double x) { return std::isfinite(x); });
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

// ---- products ----

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_str(a) + " x " + shape_str(b));
  }
  Matrix out(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* o = out.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const double* br = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) o[j] += aik * br[j];
    }
  }
  return out;
}

// a * b^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + shape_str(a) + " x " + shape_str(b) + "^T");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ar = a.row(i).data();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* br = b.row(j).data();
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += ar[k] * br[k];
      out(i, j) = s;
    }
  }
  return out;
}

// a^T * b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: " + shape_str(a) + "^T x " + shape_str(b));
  }
  Matrix out(a.cols(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* br = b.row(k).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      double* o = out.row(i).data();
      for (std::size_t j = 0; j < n; ++j) o[j] += aki * br[j];
    }
  }
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

// ---- elementwise ----

template <class F>
Matrix map(const Matrix& a, F f) {
  Matrix out(a.rows(), a.cols());
  auto src = a.values();
  auto dst = out.values();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

template <class F>
Matrix zip(const Matrix& a, const Matrix& b, const char* op, F f) {
  require_same_shape(a, b, op);
  Matrix out(a.rows(), a.cols());
  auto x = a.values();
  auto y = b.values();
  auto dst = out.values();
  for (std::size_t i = 0; i < x.size(); ++i) dst[i] = f(x[i], y[i]);
  return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  return zip(a, b, "add", [](double x, double y) { return x + y; });
}
inline Matrix sub(const Matrix& a, const Matrix& b) {
  return zip(a, b, "sub", [](double x, double y) { return x - y; });
}
inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  return zip(a, b, "hadamard", [](double x, double y) { return x * y; });
}
inline Matrix divide(const Matrix& a, const Matrix& b) {
  return zip(a, b, "divide", [](double x, double y) { return x / y; });
}
inline Matrix scale(const Matrix& a, double s) {
  return map(a, [s](double x) { return x * s; });
}
inline Matrix add_scalar(const Matrix& a, double s) {
  return map(a, [s](double x) { return x + s; });
}
inline Matrix tanh(const Matrix& a) {
  return map(a, [](double x) { return std::tanh(x); });
}
inline Matrix sqrt(const Matrix& a) {
  return map(a, [](double x) { return std::sqrt(x); });
}
inline Matrix abs(const Matrix& a) {
  return map(a, [](double x) { return std::abs(x); });
}

namespace detail {
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

inline double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}
}  // namespace detail

// Tanh-approximated GELU.
inline Matrix gelu(const Matrix& a) { return map(a, detail::gelu); }

// Adds a 1xC row to every row of a.
inline Matrix add_row(const Matrix& a, const Matrix& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row: " + shape_str(a) + " + " + shape_str(row));
  }
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j) + row(0, j);
  return out;
}

inline Matrix col_sums(const Matrix& a) {
  Matrix out(1, a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(0, j) += a(i, j);
  return out;
}

inline Matrix row_sums(const Matrix& a) {
  Matrix out(a.rows(), 1);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j);
    out(i, 0) = s;
  }
  return out;
}

inline double sum(const Matrix& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  return s;
}

inline double squared_norm(const Matrix& a) {
  double s = 0.0;
  for (double x : a.values()) s += x * x;
  return s;
}

// Row-wise softmax of a / temperature, max-subtracted.
inline Matrix softmax_rows(const Matrix& a, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw NumericError("softmax_rows: temperature must be positive");
  if (!all_finite(a)) throw NumericError("softmax_rows: non-finite input");
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto in = a.row(i);
    auto o = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp((in[j] - mx) / temperature);
      z += o[j];
    }
    for (double& v : o) v /= z;
  }
  return out;
}

inline Matrix log_softmax_rows(const Matrix& a) {
  if (!all_finite(a)) throw NumericError("log_softmax_rows: non-finite input");
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto in = a.row(i);
    auto o = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (double x : in) z += std::exp(x - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < in.size(); ++j) o[j] = in[j] - lz;
  }
  return out;
}

// ---- structural ----

inline Matrix concat_rows(std::span<const Matrix> parts) {
  if (parts.empty()) return {};
  const std::size_t c = parts.front().cols();
  std::size_t r = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw ShapeError("concat_rows: column mismatch");
    r += p.rows();
  }
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& p : parts) data.insert(data.end(), p.values().begin(), p.values().end());
  return Matrix(r, c, std::move(data));
}

inline Matrix concat_rows(const Matrix& a, const Matrix& b) {
  const Matrix parts[] = {a, b};
  return concat_rows(std::span<const Matrix>(parts));
}

inline Matrix concat_cols(std::span<const Matrix> parts) {
  if (parts.empty()) return {};
  const std::size_t r = parts.front().rows();
  std::size_t c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw ShapeError("concat_cols: row mismatch");
    c += p.cols();
  }
  Matrix out(r, c);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out(i, off + j) = p(i, j);
    off += p.cols();
  }
  return out;
}

inline Matrix slice_cols(const Matrix& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.cols()) throw ShapeError("slice_cols: out of range on " + shape_str(a));
  Matrix out(a.rows(), count);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = a(i, begin + j);
  return out;
}

inline Matrix slice_rows(const Matrix& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.rows()) throw ShapeError("slice_rows: out of range on " + shape_str(a));
  auto first = a.values().begin() + static_cast<std::ptrdiff_t>(begin * a.cols());
  return Matrix(count, a.cols(),
                std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count * a.cols())));
}

// out.row(i) = a.row(index[i])
inline Matrix gather_rows(const Matrix& a, std::span<const std::size_t> index) {
  Matrix out(index.size(), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= a.rows()) throw ShapeError("gather_rows: index out of range");
    std::copy(a.row(index[i]).begin(), a.row(index[i]).end(), out.row(i).begin());
  }
  return out;
}

namespace detail {
// Maps a double onto an unsigned key whose order is the IEEE-754 total order.
inline std::uint64_t total_order_key(double x) {
  const auto bits = std::bit_cast<std::uint64_t>(x);
  return (bits >> 63) != 0 ? ~bits : bits | (std::uint64_t{1} << 63);
}
}  // namespace detail

// Permutation sorting rows lexicographically under the IEEE total order. Equal rows are
// bitwise identical, so the gathered result does not depend on the input row order.
inline std::vector<std::size_t> canonical_row_order(const Matrix& a) {
  std::vector<std::size_t> idx(a.rows());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&a](std::size_t x, std::size_t y) {
    auto rx = a.row(x);
    auto ry = a.row(y);
    for (std::size_t j = 0; j < rx.size(); ++j) {
      const auto kx = detail::total_order_key(rx[j]);
      const auto ky = detail::total_order_key(ry[j]);
      if (kx != ky) return kx < ky;
    }
    return false;
  });
  return idx;
}

}  // namespace fmp
