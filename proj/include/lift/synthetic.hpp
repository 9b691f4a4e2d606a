#pragma once

// Backbone-free stand-in task. Ground-truth poses are sampled directly and
// pushed through a fixed random linear map to produce patch features, so the
// head has a learnable signal without images or a convolutional backbone.

#include "lift/head.hpp"
#include "lift/training.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

namespace lift {

struct SyntheticConfig {
  std::uint64_t seed = 0;
  double noise_sigma = 0.01;
  double keypoint_std = 0.3;
};

template <typename S>
class SyntheticTask {
 public:
  SyntheticTask(const HeadConfig& head, const SyntheticConfig& cfg) : head_(head), cfg_(cfg) {
    head.validate();
    if (!(cfg.noise_sigma >= 0.0)) throw ConfigError("data.noise_sigma", "must be >= 0");
    const Index rows = head.n_patches * head.c_in;
    if (rows < target_dim()) {
      throw ConfigError("head.c_in", "n_patches * c_in must be at least the target size " +
                                         std::to_string(target_dim()));
    }
    std::seed_seq seq{cfg.seed, std::uint64_t{0x6d6978}};
    Rng rng(seq);
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(target_dim())));
    mixing_.resize(rows, target_dim());
    for (Index i = 0; i < mixing_.size(); ++i) mixing_.data()[i] = dist(rng);
  }

  /// Flattened target length: keypoints, twist pairs, then beta.
  Index target_dim() const {
    return head_.n_joints * kKeypointDim + head_.n_twists * kTwistDim + head_.beta_dim;
  }

  /// (n_patches * c_in) x target_dim, applied to flattened targets.
  const Eigen::MatrixXd& mixing_map() const { return mixing_; }

  Eigen::VectorXd flatten(const PoseOutput<S>& p) const {
    Eigen::VectorXd v(target_dim());
    Index o = 0;
    for (const Tensor<S>* t : {&p.keypoints, &p.twists, &p.beta}) {
      for (Index i = 0; i < t->size(); ++i) v(o++) = static_cast<double>(t->value().data()[i]);
    }
    return v;
  }

  /// `split` selects an independent sample stream over the same mixing map.
  std::vector<Sample<S>> generate(std::size_t n, std::uint64_t split = 0) const {
    if (n == 0) throw std::invalid_argument("generate: need at least one sample");
    std::seed_seq seq{cfg_.seed, split, std::uint64_t{0x73616d}};
    Rng rng(seq);
    std::normal_distribution<double> kpt(0.0, cfg_.keypoint_std);
    std::uniform_real_distribution<double> angle(-std::numbers::pi, std::numbers::pi);
    std::normal_distribution<double> shape(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);

    std::vector<Sample<S>> out;
    out.reserve(n);
    for (std::size_t s = 0; s < n; ++s) {
      Matrix<double> k(head_.n_joints, kKeypointDim);
      for (Index i = 0; i < k.size(); ++i) k.data()[i] = kpt(rng);
      Matrix<double> t(head_.n_twists, kTwistDim);
      for (Index r = 0; r < t.rows(); ++r) {
        const double phi = angle(rng);
        t(r, 0) = std::cos(phi);
        t(r, 1) = std::sin(phi);
      }
      Matrix<double> b(1, head_.beta_dim);
      for (Index i = 0; i < b.size(); ++i) b.data()[i] = shape(rng);

      PoseOutput<S> target{Tensor<S>::constant(k.cast<S>()),
                           Tensor<S>::constant(t.cast<S>()),
                           Tensor<S>::constant(b.cast<S>(), 1)};
      // Unit norm must survive the cast to S.
      target.twists.mutable_value().rowwise().normalize();

      Eigen::VectorXd f = mixing_ * flatten(target);
      if (cfg_.noise_sigma > 0.0) {
        for (Index i = 0; i < f.size(); ++i) f(i) += cfg_.noise_sigma * noise(rng);
      }
      Matrix<S> features =
          Eigen::Map<const Matrix<double>>(f.data(), head_.n_patches, head_.c_in).cast<S>();
      out.push_back({Tensor<S>::constant(std::move(features)), std::move(target)});
    }
    return out;
  }

 private:
  HeadConfig head_;
  SyntheticConfig cfg_;
  Eigen::MatrixXd mixing_;
};

}  // namespace lift
