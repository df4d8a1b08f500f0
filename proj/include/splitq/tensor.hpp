#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "splitq/error.hpp"

namespace splitq {

// Round to nearest integer, ties to even. Independent of the FP environment's
// rounding mode.
inline double round_half_even(double v) {
  const double fl = std::floor(v);
  const double diff = v - fl;
  if (diff > 0.5) return fl + 1.0;
  if (diff < 0.5) return fl;
  return std::fmod(fl, 2.0) == 0.0 ? fl : fl + 1.0;
}

namespace detail {

// Splits [0, n) into contiguous chunks across `threads` workers. Work items
// must be independent; each item is computed by exactly one worker.
template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t workers = std::min<std::size_t>(threads, n);
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([begin, end, &fn] {
      for (std::size_t i = begin; i < end; ++i) fn(i);
    });
  }
}

}  // namespace detail

// Dense row-major matrix of 32-bit reals. Every element is finite.
class Tensor2D {
 public:
  Tensor2D(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols) {
    check_dims(rows, cols);
    data_.assign(rows * cols, 0.0f);
  }

  Tensor2D(std::size_t rows, std::size_t cols, std::vector<float> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    check_dims(rows, cols);
    if (data_.size() != rows * cols) {
      throw shape_error("tensor data length " + std::to_string(data_.size()) +
                        " does not match " + std::to_string(rows) + "x" +
                        std::to_string(cols));
    }
    for (float v : data_) {
      if (!std::isfinite(v)) throw data_error("tensor contains a non-finite value");
    }
  }

  static Tensor2D from_rows(std::initializer_list<std::initializer_list<float>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<float> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw shape_error("ragged initializer rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor2D(r, c, std::move(data));
  }

  [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
  [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }

  [[nodiscard]] std::span<const float> data() const noexcept { return data_; }
  [[nodiscard]] std::span<float> data() noexcept { return data_; }

  [[nodiscard]] std::span<const float> row(std::size_t r) const noexcept {
    return std::span<const float>(data_).subspan(r * cols_, cols_);
  }

  float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  [[nodiscard]] float max_abs() const noexcept {
    float m = 0.0f;
    for (float v : data_) m = std::max(m, std::fabs(v));
    return m;
  }

  friend bool operator==(const Tensor2D&, const Tensor2D&) = default;

 private:
  static void check_dims(std::size_t rows, std::size_t cols) {
    if (rows == 0 || cols == 0) {
      throw shape_error("tensor dimensions must be positive, got " + std::to_string(rows) + "x" +
                        std::to_string(cols));
    }
  }

  std::size_t rows_;
  std::size_t cols_;
  std::vector<float> data_;
};

inline std::string shape_str(const Tensor2D& t) {
  return std::to_string(t.rows()) + "x" + std::to_string(t.cols());
}

inline Tensor2D identity(std::size_t n) {
  Tensor2D t(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0f;
  return t;
}

inline Tensor2D transpose(const Tensor2D& a) {
  Tensor2D t(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) t(c, r) = a(r, c);
  return t;
}

// FP reference product. Each output element is a left-to-right dot product
// accumulated in double and rounded to float once, so the result does not
// depend on `threads`.
inline Tensor2D matmul_ref(const Tensor2D& a, const Tensor2D& b, unsigned threads = 1) {
  if (a.cols() != b.rows()) {
    throw shape_error("matmul_ref: " + shape_str(a) + " times " + shape_str(b));
  }
  Tensor2D out(a.rows(), b.cols());
  const std::size_t inner = a.cols();
  detail::parallel_for(a.rows(), threads, [&](std::size_t i) {
    const auto arow = a.row(i);
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < inner; ++p) {
        acc += static_cast<double>(arow[p]) * static_cast<double>(b(p, j));
      }
      out(i, j) = static_cast<float>(acc);
    }
  });
  return out;
}

inline void require_same_shape(const Tensor2D& a, const Tensor2D& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw shape_error(std::string(what) + ": " + shape_str(a) + " vs " + shape_str(b));
  }
}

inline Tensor2D add(const Tensor2D& a, const Tensor2D& b) {
  require_same_shape(a, b, "add");
  Tensor2D out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  return out;
}

inline Tensor2D subtract(const Tensor2D& a, const Tensor2D& b) {
  require_same_shape(a, b, "subtract");
  Tensor2D out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  return out;
}

inline double frobenius_norm(const Tensor2D& a) {
  double s = 0.0;
  for (float v : a.data()) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

// Frobenius norm of (a - b), computed in double without materialising a float difference.
inline double frobenius_distance(const Tensor2D& a, const Tensor2D& b) {
  require_same_shape(a, b, "frobenius_distance");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.data()[i]) - b.data()[i];
    s += d * d;
  }
  return std::sqrt(s);
}

inline double mean_squared_error(const Tensor2D& a, const Tensor2D& b) {
  const double d = frobenius_distance(a, b);
  return d * d / static_cast<double>(a.size());
}

inline double max_abs_difference(const Tensor2D& a, const Tensor2D& b) {
  require_same_shape(a, b, "max_abs_difference");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::fabs(static_cast<double>(a.data()[i]) - b.data()[i]));
  }
  return m;
}

}  // namespace splitq
