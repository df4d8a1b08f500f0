#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>

#include "splitq/tensor.hpp"

namespace splitq {

// Gaussian matrix whose leading `salient_channels` columns are scaled up,
// mimicking activations with outlier input channels.
struct SyntheticSpec {
  std::size_t rows{256};
  std::size_t cols{256};
  std::uint64_t seed{1};
  std::size_t salient_channels{8};
  double salient_gain{100.0};
  double base_std{1.0};

  void validate() const {
    if (rows == 0 || cols == 0) throw shape_error("synthetic spec needs positive dimensions");
    if (salient_channels > cols) {
      throw parameter_error("salient_channels " + std::to_string(salient_channels) +
                            " exceeds cols " + std::to_string(cols));
    }
    if (!(salient_gain >= 1.0) || !std::isfinite(salient_gain)) {
      throw parameter_error("salient_gain must be a finite value >= 1");
    }
    if (!(base_std > 0.0) || !std::isfinite(base_std)) {
      throw parameter_error("base_std must be a finite value > 0");
    }
  }
};

namespace detail {

// Box-Muller over mt19937_64. Both are fully specified, so the stream is
// bit-identical on every standard library (std::normal_distribution is not).
class GaussianStream {
 public:
  explicit GaussianStream(std::uint64_t seed) : engine_(seed) {}

  double next() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

 private:
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  std::mt19937_64 engine_;
  double spare_{0.0};
  bool has_spare_{false};
};

}  // namespace detail

inline Tensor2D gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  detail::GaussianStream gauss(spec.seed);
  Tensor2D out(spec.rows, spec.cols);
  for (std::size_t r = 0; r < spec.rows; ++r) {
    for (std::size_t c = 0; c < spec.cols; ++c) {
      double v = gauss.next() * spec.base_std;
      if (c < spec.salient_channels) v *= spec.salient_gain;
      out(r, c) = static_cast<float>(v);
    }
  }
  return out;
}

}  // namespace splitq
