#include "lift/gradcheck.hpp"

#include "lift/head.hpp"
#include "lift/nn.hpp"

#include <functional>
#include <random>

namespace lift {
namespace {

using T = Tensor<double>;

T uniform(Rng& rng, Index r, Index c) {
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  Matrix<double> m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return T::parameter(std::move(m));
}

// sum(out * w) for a fixed random w, so every output element matters.
T weighted_sum(const T& out, Rng& rng) {
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  Matrix<double> w(out.rows(), out.cols());
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = d(rng);
  return sum(mul(out, T::constant(std::move(w))));
}

class Suite {
 public:
  explicit Suite(const GradcheckOptions& opts) : opts_(opts), rng_(opts.seed) {}

  // `fn` maps inputs to the checked output; the projection weights are drawn
  // once so every evaluation sees the same loss.
  void check(const std::string& name, double tol, std::vector<T> inputs,
             const std::function<T()>& fn) {
    Rng wrng(rng_());
    const std::uint64_t wseed = wrng();
    auto build = [&fn, wseed] {
      Rng r(wseed);
      return weighted_sum(fn(), r);
    };
    const double fault = opts_.inject_fault == name ? 1.001 : 1.0;
    const double err = max_gradient_error(std::move(inputs), build, opts_.step, fault);
    results_.push_back({name, err, tol, err < tol});
  }

  Rng& rng() { return rng_; }
  std::vector<GradcheckResult> take() { return std::move(results_); }

 private:
  GradcheckOptions opts_;
  Rng rng_;
  std::vector<GradcheckResult> results_;
};

template <typename P>
std::vector<T> params_of(P& p, const std::string& prefix) {
  std::vector<T> out;
  p.for_each_param(prefix, [&out](const std::string&, T& t) { out.push_back(t); });
  return out;
}

void append(std::vector<T>& a, const std::vector<T>& b) { a.insert(a.end(), b.begin(), b.end()); }

// Layer-norm gains/shifts start at 1/0; randomize them so their gradients are exercised.
void jitter(std::vector<T>& ts, Rng& rng) {
  std::uniform_real_distribution<double> d(-0.5, 0.5);
  for (auto& t : ts) {
    for (Index i = 0; i < t.size(); ++i) t.mutable_value().data()[i] += d(rng);
  }
}

}  // namespace

std::vector<GradcheckResult> run_gradcheck_suite(const GradcheckOptions& opts) {
  Suite s(opts);
  Rng& rng = s.rng();
  const double P = kPrimitiveTolerance;

  {
    T a = uniform(rng, 4, 4), b = uniform(rng, 4, 4);
    s.check("matmul", P, {a, b}, [=] { return matmul(a, b); });
  }
  {
    T a = uniform(rng, 3, 5);
    s.check("transpose", P, {a}, [=] { return transpose(a); });
  }
  {
    T a = uniform(rng, 3, 4), b = uniform(rng, 3, 4);
    s.check("add", P, {a, b}, [=] { return add(a, b); });
    s.check("sub", P, {a, b}, [=] { return sub(a, b); });
    s.check("mul", P, {a, b}, [=] { return mul(a, b); });
  }
  {
    T x = uniform(rng, 3, 4), r = uniform(rng, 1, 4);
    s.check("add_row", P, {x, r}, [=] { return add_row(x, r); });
    s.check("scale", P, {x}, [=] { return scale(x, 0.37); });
    s.check("relu", P, {x}, [=] { return relu(x); });
    s.check("abs", P, {x}, [=] { return abs(x); });
    s.check("square", P, {x}, [=] { return square(x); });
    s.check("sum", P, {x}, [=] { return scale(sum(x), 1.0); });
    s.check("mean", P, {x}, [=] { return mean(x); });
    s.check("softmax_rows", P, {x}, [=] { return softmax_rows(x); });
    s.check("normalize_rows", P, {x}, [=] { return normalize_rows(x, 1e-8); });
  }
  {
    T x = uniform(rng, 3, 5), g = uniform(rng, 1, 5), b = uniform(rng, 1, 5);
    s.check("layer_norm", P, {x, g, b}, [=] { return layer_norm(x, g, b, 1e-5); });
  }
  {
    T a = uniform(rng, 3, 2), b = uniform(rng, 3, 3), c = uniform(rng, 2, 2);
    s.check("concat_cols", P, {a, b}, [=] { return concat_cols<double>({a, b}); });
    s.check("concat_rows", P, {a, c}, [=] { return concat_rows<double>({a, c}); });
    s.check("slice_rows", P, {b}, [=] { return slice_rows(b, 1, 3); });
    s.check("gather_rows", P, {b}, [=] { return gather_rows(b, {2, 0, 2}); });
  }
  {
    T x = uniform(rng, 4, 6);
    const std::uint64_t seed = rng();
    s.check("dropout", P, {x}, [=] {
      Rng r(seed);
      return dropout(x, 0.3, r, true);
    });
  }

  // Blocks at d = 8, h = 2.
  const Index d = 8;
  const double B = kBlockTolerance;
  {
    T q = uniform(rng, 2, 4), k = uniform(rng, 3, 4), v = uniform(rng, 3, 4);
    s.check("attention", B, {q, k, v}, [=] { return attention(q, k, v, d); });
  }
  {
    auto p = MHAParams<double>::make(rng, d, 2);
    T q = uniform(rng, 3, d), kv = uniform(rng, 5, d);
    std::vector<T> in = params_of(p, "mha");
    jitter(in, rng);
    append(in, {q, kv});
    s.check("multi_head_attention", B, in, [=] { return multi_head_attention(p, q, kv, kv); });
  }
  {
    auto p = FFNParams<double>::make(rng, d);
    T x = uniform(rng, 3, d);
    std::vector<T> in = params_of(p, "ffn");
    jitter(in, rng);
    in.push_back(x);
    s.check("feed_forward", B, in, [=] { return feed_forward(p, x); });
  }
  {
    HeadConfig cfg;
    cfg.width = d;
    cfg.heads = 2;
    auto bp = BlockParams<double>::make(rng, cfg);
    std::vector<T> in = params_of(bp, "block");
    jitter(in, rng);
    T e2 = uniform(rng, 4, d), e3 = uniform(rng, 6, d);
    std::vector<T> in2 = in;
    append(in2, {e2});
    s.check("encode_2d_block", B, in2, [=] { return encode_2d_block(cfg, bp, e2); });
    std::vector<T> in3 = in;
    append(in3, {e3});
    s.check("encode_templates_block", B, in3, [=] { return encode_templates_block(cfg, bp, e3); });
    std::vector<T> in4 = in;
    append(in4, {e3, e2});
    s.check("decode_block", B, in4, [=] { return decode_block(cfg, bp, e3, e2); });
  }

  // Composed head.
  {
    HeadConfig cfg;
    cfg.blocks = 2;
    cfg.heads = 2;
    cfg.width = d;
    cfg.n_patches = 4;
    cfg.c_in = 6;
    cfg.dropout = 0.0;
    auto hp = HeadParams<double>::make(cfg, rng);
    std::vector<T> in;
    hp.for_each_param([&in](const std::string&, T& t) { in.push_back(t); });
    jitter(in, rng);
    T features = uniform(rng, cfg.n_patches, cfg.c_in);
    const std::uint64_t wseed = rng();
    s.check("lifting_head", kComposedTolerance, in, [=] {
      PoseOutput<double> out = forward(hp, features);
      Rng r(wseed);
      return weighted_sum(out.keypoints, r) + weighted_sum(out.twists, r) +
             weighted_sum(out.beta, r);
    });
  }
  return s.take();
}

}  // namespace lift
