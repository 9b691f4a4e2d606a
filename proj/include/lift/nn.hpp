#pragma once

// Attention, multi-head attention, and the feed-forward block, plus the
// parameter containers they read from.

#include "lift/tensor.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace lift {

template <typename S>
struct NamedTensor {
  std::string name;
  Tensor<S> tensor;
};

template <typename S>
struct LinearParams {
  Tensor<S> weight;  // d_in x d_out
  Tensor<S> bias;    // 1 x d_out

  Index in_features() const { return weight.rows(); }
  Index out_features() const { return weight.cols(); }

  template <typename F>
  void for_each_param(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
};

/// x W + b for every row of x.
template <typename S>
Tensor<S> linear(const LinearParams<S>& p, const Tensor<S>& x) {
  return add_row(matmul(x, p.weight), p.bias);
}

/// Xavier-uniform weights in (-a, a), a = sqrt(6 / (fan_in + fan_out)); zero bias.
template <typename S>
LinearParams<S> init_params(Rng& rng, Index fan_in, Index fan_out) {
  if (fan_in <= 0 || fan_out <= 0) {
    throw std::invalid_argument("init_params: dimensions must be positive");
  }
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  Matrix<S> w(fan_in, fan_out);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<S>(dist(rng));
  return {Tensor<S>::parameter(std::move(w)), Tensor<S>::parameter(Matrix<S>::Zero(1, fan_out), 1)};
}

template <typename S>
struct LayerNormParams {
  Tensor<S> gamma;
  Tensor<S> beta;

  static LayerNormParams make(Index d) {
    return {Tensor<S>::parameter(Matrix<S>::Ones(1, d), 1),
            Tensor<S>::parameter(Matrix<S>::Zero(1, d), 1)};
  }

  template <typename F>
  void for_each_param(const std::string& prefix, F&& f) {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
};

inline constexpr double kLayerNormEps = 1e-5;

template <typename S>
Tensor<S> layer_norm(const LayerNormParams<S>& p, const Tensor<S>& x) {
  return layer_norm(x, p.gamma, p.beta, static_cast<S>(kLayerNormEps));
}

template <typename S>
struct HeadProjection {
  LinearParams<S> query;
  LinearParams<S> key;
  LinearParams<S> value;
};

template <typename S>
struct MHAParams {
  std::vector<HeadProjection<S>> heads;  // each d x (d/h)
  LinearParams<S> output;                // d x d

  Index heads_count() const { return static_cast<Index>(heads.size()); }
  Index width() const { return output.out_features(); }

  static MHAParams make(Rng& rng, Index d, Index h) {
    if (h <= 0 || d % h != 0) {
      throw std::invalid_argument("MHAParams: width " + std::to_string(d) +
                                  " not divisible by head count " + std::to_string(h));
    }
    MHAParams p;
    const Index dh = d / h;
    for (Index i = 0; i < h; ++i) {
      HeadProjection<S> hp;
      hp.query = init_params<S>(rng, d, dh);
      hp.key = init_params<S>(rng, d, dh);
      hp.value = init_params<S>(rng, d, dh);
      p.heads.push_back(std::move(hp));
    }
    p.output = init_params<S>(rng, d, d);
    return p;
  }

  template <typename F>
  void for_each_param(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < heads.size(); ++i) {
      const std::string hp = prefix + ".head" + std::to_string(i);
      heads[i].query.for_each_param(hp + ".query", f);
      heads[i].key.for_each_param(hp + ".key", f);
      heads[i].value.for_each_param(hp + ".value", f);
    }
    output.for_each_param(prefix + ".output", f);
  }
};

inline constexpr int kFeedForwardLayers = 3;

template <typename S>
struct FFNParams {
  std::vector<LinearParams<S>> layers;  // kFeedForwardLayers, all d x d

  static FFNParams make(Rng& rng, Index d) {
    FFNParams p;
    for (int i = 0; i < kFeedForwardLayers; ++i) p.layers.push_back(init_params<S>(rng, d, d));
    return p;
  }

  template <typename F>
  void for_each_param(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      layers[i].for_each_param(prefix + ".layer" + std::to_string(i), f);
    }
  }
};

/// softmax(q k^T / sqrt(scale_dim)) v.
template <typename S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, Index scale_dim) {
  if (q.cols() != k.cols()) {
    throw ShapeError("attention: query width " + std::to_string(q.cols()) + " != key width " +
                     std::to_string(k.cols()));
  }
  if (k.rows() != v.rows()) {
    throw ShapeError("attention: " + std::to_string(k.rows()) + " keys but " +
                     std::to_string(v.rows()) + " values");
  }
  if (scale_dim <= 0) throw std::invalid_argument("attention: scale_dim must be positive");
  const S inv = S(1) / std::sqrt(static_cast<S>(scale_dim));
  return matmul(softmax_rows(scale(matmul(q, transpose(k)), inv)), v);
}

/// Dropout configuration threaded through a forward pass.
struct DropoutContext {
  double p = 0.0;
  bool training = false;
  Rng* rng = nullptr;

  template <typename S>
  Tensor<S> apply(const Tensor<S>& x) const {
    if (!training || p == 0.0) return x;
    if (rng == nullptr) throw std::invalid_argument("dropout: training mode needs a generator");
    return dropout(x, p, *rng, training);
  }
};

/// concat(h_1 .. h_h) W_O with h_i = attention(q Wq_i, k Wk_i, v Wv_i).
/// scale_dim is the attention divisor width; 0 selects the model width d.
template <typename S>
Tensor<S> multi_head_attention(const MHAParams<S>& p, const Tensor<S>& q, const Tensor<S>& k,
                               const Tensor<S>& v, Index scale_dim = 0) {
  const Index d = p.width();
  for (const Tensor<S>* t : {&q, &k, &v}) {
    if (t->cols() != d) {
      throw ShapeError("multi_head_attention: input width " + std::to_string(t->cols()) +
                       " != model width " + std::to_string(d));
    }
  }
  const Index divisor = scale_dim > 0 ? scale_dim : d;
  std::vector<Tensor<S>> heads;
  heads.reserve(p.heads.size());
  for (const auto& hp : p.heads) {
    heads.push_back(attention(linear(hp.query, q), linear(hp.key, k), linear(hp.value, v), divisor));
  }
  return linear(p.output, concat_cols(heads));
}

/// linear -> relu -> linear -> relu -> linear, dropout on hidden activations.
template <typename S>
Tensor<S> feed_forward(const FFNParams<S>& p, const Tensor<S>& x, const DropoutContext& drop = {}) {
  if (p.layers.empty() || x.cols() != p.layers.front().in_features()) {
    throw ShapeError("feed_forward: input width " + std::to_string(x.cols()) + " does not match");
  }
  Tensor<S> h = x;
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    h = linear(p.layers[i], h);
    if (i + 1 < p.layers.size()) h = drop.apply(relu(h));
  }
  return h;
}

}  // namespace lift
