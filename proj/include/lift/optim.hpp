#pragma once

#include "lift/nn.hpp"
#include "lift/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace lift {

/// Inverse square-root schedule with linear warmup:
/// max_lr * min(step / warmup, sqrt(warmup / step)). Peaks at step == warmup.
inline double lr_at(std::int64_t step, double max_lr, std::int64_t warmup_steps) {
  if (step < 1) throw std::invalid_argument("lr_at: step must be >= 1, got " + std::to_string(step));
  if (warmup_steps < 1) throw std::invalid_argument("lr_at: warmup_steps must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup_steps);
  return max_lr * std::min(s / w, std::sqrt(w / s));
}

class MissingGradientError : public std::runtime_error {
 public:
  explicit MissingGradientError(const std::string& name)
      : std::runtime_error("adam_step: parameter '" + name + "' has no gradient"), name_(name) {}
  const std::string& name() const { return name_; }

 private:
  std::string name_;
};

template <typename S>
struct AdamState {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  std::vector<Matrix<S>> first_moment;
  std::vector<Matrix<S>> second_moment;
  std::int64_t step = 0;

  bool initialized() const { return !first_moment.empty(); }
};

/// One bias-corrected Adam update over every parameter, then clears the
/// gradients. Moments are created on first use with the parameter shapes.
template <typename S>
void adam_step(const std::vector<NamedTensor<S>>& params, AdamState<S>& state, double lr) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) throw MissingGradientError(p.name);
  }
  if (!state.initialized()) {
    for (const auto& p : params) {
      state.first_moment.push_back(Matrix<S>::Zero(p.tensor.rows(), p.tensor.cols()));
      state.second_moment.push_back(Matrix<S>::Zero(p.tensor.rows(), p.tensor.cols()));
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw std::invalid_argument("adam_step: optimizer state tracks " +
                                std::to_string(state.first_moment.size()) + " tensors, got " +
                                std::to_string(params.size()));
  }
  ++state.step;
  using A = AdamState<S>;
  const double t = static_cast<double>(state.step);
  const S c1 = static_cast<S>(1.0 / (1.0 - std::pow(A::kBeta1, t)));
  const S c2 = static_cast<S>(1.0 / (1.0 - std::pow(A::kBeta2, t)));
  const S b1 = static_cast<S>(A::kBeta1);
  const S b2 = static_cast<S>(A::kBeta2);
  const S eps = static_cast<S>(A::kEps);
  const S rate = static_cast<S>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<S> p = params[i].tensor;
    const Matrix<S>& g = p.grad();
    Matrix<S>& m = state.first_moment[i];
    Matrix<S>& v = state.second_moment[i];
    m = b1 * m + (S(1) - b1) * g;
    v = b2 * v + (S(1) - b2) * g.cwiseAbs2();
    p.mutable_value().array() -=
        rate * (m.array() * c1) / ((v.array() * c2).sqrt() + eps);
    p.clear_grad();
  }
}

}  // namespace lift
