#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "splitq/tensor.hpp"

namespace splitq {

// Thin SVD in double precision: source = U * diag(sigma) * V^T, with U column
// j stored at u[j * rows .. (j+1) * rows) and V column j at v[j * cols ..).
// Singular values are sorted non-increasing.
struct ThinSvd {
  std::size_t rows{0};
  std::size_t cols{0};
  std::vector<double> u;
  std::vector<double> sigma;
  std::vector<double> v;
  int sweeps{0};
  bool converged{false};

  [[nodiscard]] std::size_t rank() const noexcept { return sigma.size(); }
  [[nodiscard]] double u_at(std::size_t i, std::size_t j) const { return u[j * rows + i]; }
  [[nodiscard]] double v_at(std::size_t i, std::size_t j) const { return v[j * cols + i]; }
};

struct JacobiOptions {
  double off_diagonal_tolerance{1e-10};
  int max_sweeps{60};
};

namespace detail {

// One-sided (Hestenes) Jacobi on an m x n column-major matrix with m >= n.
// Rotates column pairs until every pair is orthogonal to within the
// tolerance (|a_p . a_q| / (|a_p| |a_q|)).
inline ThinSvd jacobi_tall(std::vector<std::vector<double>> cols, std::size_t m,
                           const JacobiOptions& opt) {
  const std::size_t n = cols.size();
  std::vector<std::vector<double>> vcols(n, std::vector<double>(n, 0.0));
  for (std::size_t j = 0; j < n; ++j) vcols[j][j] = 1.0;

  auto dot = [](const std::vector<double>& x, const std::vector<double>& y) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
    return s;
  };
  auto rotate = [](std::vector<double>& x, std::vector<double>& y, double c, double s) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double xi = x[i];
      const double yi = y[i];
      x[i] = c * xi - s * yi;
      y[i] = s * xi + c * yi;
    }
  };

  ThinSvd out;
  out.rows = m;
  std::vector<double> norms(n);
  for (int sweep = 0; sweep < opt.max_sweeps; ++sweep) {
    for (std::size_t j = 0; j < n; ++j) norms[j] = dot(cols[j], cols[j]);
    double worst = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double alpha = norms[p];
        const double beta = norms[q];
        if (alpha == 0.0 || beta == 0.0) continue;
        const double gamma = dot(cols[p], cols[q]);
        const double ratio = std::fabs(gamma) / std::sqrt(alpha * beta);
        worst = std::max(worst, ratio);
        if (ratio < opt.off_diagonal_tolerance) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate(cols[p], cols[q], c, s);
        rotate(vcols[p], vcols[q], c, s);
        norms[p] = alpha - t * gamma;
        norms[q] = beta + t * gamma;
      }
    }
    out.sweeps = sweep + 1;
    if (worst < opt.off_diagonal_tolerance) {
      out.converged = true;
      break;
    }
  }

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) sigma[j] = std::sqrt(dot(cols[j], cols[j]));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

  out.cols = n;
  out.u.assign(m * n, 0.0);
  out.v.assign(n * n, 0.0);
  out.sigma.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t j = order[r];
    out.sigma[r] = sigma[j];
    if (sigma[j] > 0.0) {
      for (std::size_t i = 0; i < m; ++i) out.u[r * m + i] = cols[j][i] / sigma[j];
    }
    for (std::size_t i = 0; i < n; ++i) out.v[r * n + i] = vcols[j][i];
  }
  return out;
}

}  // namespace detail

// Full thin SVD of any matrix. Wide inputs are handled through the transpose.
inline ThinSvd thin_svd(const Tensor2D& w, const JacobiOptions& opt = {}) {
  const bool tall = w.rows() >= w.cols();
  const std::size_t m = tall ? w.rows() : w.cols();
  const std::size_t n = tall ? w.cols() : w.rows();
  std::vector<std::vector<double>> cols(n, std::vector<double>(m));
  for (std::size_t r = 0; r < w.rows(); ++r) {
    for (std::size_t c = 0; c < w.cols(); ++c) {
      if (tall) cols[c][r] = w(r, c);
      else cols[r][c] = w(r, c);
    }
  }
  ThinSvd s = detail::jacobi_tall(std::move(cols), m, opt);
  if (!tall) {
    std::swap(s.u, s.v);
    s.rows = w.rows();
    s.cols = w.cols();
  }
  return s;
}

// Where the singular values go when forming the two projection factors.
enum class SigmaPlacement {
  split,    // l1 = U_k sqrt(S_k), l2 = sqrt(S_k) V_k^T
  into_l2,  // l1 = U_k,           l2 = S_k V_k^T
};

struct LowRankFactors {
  Tensor2D l1;  // d_in x k
  Tensor2D l2;  // k x d_out
  std::vector<double> singular_values;
  std::size_t rank{0};
  SigmaPlacement placement{SigmaPlacement::split};
};

struct DecomposedWeight {
  LowRankFactors factors;
  Tensor2D residual;  // d_in x d_out
};

inline void check_rank(const Tensor2D& w, std::size_t k) {
  const std::size_t limit = std::min(w.rows(), w.cols());
  if (k < 1 || k > limit) {
    throw parameter_error("rank " + std::to_string(k) + " outside [1, " + std::to_string(limit) +
                          "] for " + shape_str(w) + " weight");
  }
}

inline LowRankFactors factors_from_svd(const ThinSvd& s, std::size_t k,
                                       SigmaPlacement placement = SigmaPlacement::split) {
  if (k < 1 || k > s.rank()) throw parameter_error("rank " + std::to_string(k) + " exceeds SVD rank");
  Tensor2D l1(s.rows, k);
  Tensor2D l2(k, s.cols);
  for (std::size_t r = 0; r < k; ++r) {
    const double left = placement == SigmaPlacement::split ? std::sqrt(s.sigma[r]) : 1.0;
    const double right = placement == SigmaPlacement::split ? std::sqrt(s.sigma[r]) : s.sigma[r];
    for (std::size_t i = 0; i < s.rows; ++i) l1(i, r) = static_cast<float>(s.u_at(i, r) * left);
    for (std::size_t j = 0; j < s.cols; ++j) l2(r, j) = static_cast<float>(s.v_at(j, r) * right);
  }
  std::vector<double> sv(s.sigma.begin(), s.sigma.begin() + static_cast<std::ptrdiff_t>(k));
  return LowRankFactors{std::move(l1), std::move(l2), std::move(sv), k, placement};
}

// Best rank-k factorisation of `w` (d_in x d_out) via Jacobi SVD.
inline LowRankFactors truncated_svd(const Tensor2D& w, std::size_t k,
                                    SigmaPlacement placement = SigmaPlacement::split) {
  check_rank(w, k);
  return factors_from_svd(thin_svd(w), k, placement);
}

// w - l1*l2 with the product accumulated in double and a single rounding.
inline Tensor2D residual_of(const Tensor2D& w, const LowRankFactors& f) {
  if (f.l1.rows() != w.rows() || f.l2.cols() != w.cols() || f.l1.cols() != f.l2.rows()) {
    throw shape_error("factors " + shape_str(f.l1) + " * " + shape_str(f.l2) +
                      " do not match weight " + shape_str(w));
  }
  Tensor2D r(w.rows(), w.cols());
  for (std::size_t i = 0; i < w.rows(); ++i) {
    for (std::size_t j = 0; j < w.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < f.rank; ++p) {
        acc += static_cast<double>(f.l1(i, p)) * f.l2(p, j);
      }
      r(i, j) = static_cast<float>(static_cast<double>(w(i, j)) - acc);
    }
  }
  return r;
}

inline DecomposedWeight decompose(const Tensor2D& w, std::size_t k,
                                  SigmaPlacement placement = SigmaPlacement::split) {
  LowRankFactors f = truncated_svd(w, k, placement);
  Tensor2D r = residual_of(w, f);
  return DecomposedWeight{std::move(f), std::move(r)};
}

// sqrt(sum_{i >= k} sigma_i^2): the optimal rank-k residual norm.
inline double tail_norm(const std::vector<double>& sigma, std::size_t k) {
  double s = 0.0;
  for (std::size_t i = k; i < sigma.size(); ++i) s += sigma[i] * sigma[i];
  return std::sqrt(s);
}

inline std::vector<double> channel_max_abs(const Tensor2D& acts) {
  std::vector<double> score(acts.cols(), 0.0);
  for (std::size_t r = 0; r < acts.rows(); ++r) {
    for (std::size_t c = 0; c < acts.cols(); ++c) {
      score[c] = std::max(score[c], static_cast<double>(std::fabs(acts(r, c))));
    }
  }
  return score;
}

// Input channels ranked by max |activation| over the calibration rows,
// ties to the lower index. The request is clamped to the channel count.
inline std::vector<std::size_t> identify_l1_sensitive(const Tensor2D& calib_acts,
                                                      std::size_t n_sensitive) {
  const std::vector<double> score = channel_max_abs(calib_acts);
  std::vector<std::size_t> order(score.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  order.resize(std::min(n_sensitive, order.size()));
  return order;
}

// Leading singular directions are the sensitive L2 input channels.
inline std::vector<std::size_t> l2_sensitive_indices(std::size_t k, std::size_t n_sensitive) {
  std::vector<std::size_t> idx(std::min(k, n_sensitive));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

inline constexpr std::size_t kDefaultL1Sensitive = 128;
inline constexpr std::size_t kDefaultL2Sensitive = 4;
inline constexpr std::size_t kDefaultRank = 16;

struct SaliencyReport {
  std::vector<std::size_t> l1_sensitive;
  std::vector<std::size_t> l2_sensitive;
  std::vector<double> channel_scores;
};

inline SaliencyReport analyze_saliency(const Tensor2D& calib_acts, std::size_t k,
                                       std::size_t n_l1 = kDefaultL1Sensitive,
                                       std::size_t n_l2 = kDefaultL2Sensitive) {
  return SaliencyReport{identify_l1_sensitive(calib_acts, n_l1), l2_sensitive_indices(k, n_l2),
                        channel_max_abs(calib_acts)};
}

}  // namespace splitq
