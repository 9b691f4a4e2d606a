#pragma once

// Central finite-difference checks of the reverse-mode gradients.

#include "lift/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace lift {

/// Worst per-tensor relative error between analytic and central-difference
/// gradients of the scalar `build()` with respect to each input. Per tensor the
/// error is max|a - n| / max(max|a|, max|n|, 1e-3); the floor keeps gradients
/// that are identically zero (attention key biases) from dividing noise by
/// noise. `fault` scales the analytic gradient and exists only to exercise the
/// failure path.
template <typename Build>
double max_gradient_error(std::vector<Tensor<double>> inputs, Build&& build, double step = 1e-5,
                          double fault = 1.0) {
  for (auto& t : inputs) t.clear_grad();
  {
    Tape<double> tape;
    Tensor<double> l = build();
    backward(l, tape);
  }
  std::vector<Matrix<double>> analytic;
  for (auto& t : inputs) {
    analytic.push_back(t.has_grad() ? Matrix<double>(t.grad() * fault)
                                    : Matrix<double>::Zero(t.rows(), t.cols()));
    t.clear_grad();
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Matrix<double>& v = inputs[i].mutable_value();
    Matrix<double> numeric(v.rows(), v.cols());
    for (Index k = 0; k < v.size(); ++k) {
      const double saved = v.data()[k];
      v.data()[k] = saved + step;
      const double up = build().item();
      v.data()[k] = saved - step;
      const double down = build().item();
      v.data()[k] = saved;
      numeric.data()[k] = (up - down) / (2.0 * step);
    }
    const double scale = std::max({analytic[i].cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff(), 1e-3});
    worst = std::max(worst, (analytic[i] - numeric).cwiseAbs().maxCoeff() / scale);
  }
  return worst;
}

struct GradcheckResult {
  std::string name;
  double worst_rel_err = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct GradcheckOptions {
  std::uint64_t seed = 20240917;
  double step = 1e-5;
  std::string inject_fault;  // name of a check whose analytic gradient is perturbed
};

inline constexpr double kPrimitiveTolerance = 1e-6;
inline constexpr double kBlockTolerance = 1e-5;
inline constexpr double kComposedTolerance = 1e-4;

/// Every differentiable primitive, every block, and the composed tiny head
/// (L=2, h=2, d=8, n_patches=4), all at 64-bit.
std::vector<GradcheckResult> run_gradcheck_suite(const GradcheckOptions& opts = {});

}  // namespace lift
