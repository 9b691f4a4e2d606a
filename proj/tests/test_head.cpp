#include <doctest.h>

#include "lift/efficiency.hpp"
#include "lift/gradcheck.hpp"
#include "lift/head.hpp"

#include <algorithm>
#include <numeric>

using namespace lift;
using M = Matrix<double>;

namespace {

HeadConfig small_config() {
  HeadConfig c = HeadConfig::tiny();
  c.width = 8;
  c.n_patches = 4;
  c.c_in = 6;
  c.dropout = 0.0;
  return c;
}

M random_matrix(Rng& rng, Index r, Index c) {
  std::normal_distribution<double> d(0.0, 1.0);
  M m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

template <typename S>
Matrix<S> max_diff_rows(const Tensor<S>& a, const Tensor<S>& b) {
  return (a.value() - b.value()).cwiseAbs();
}

template <typename S>
double pose_diff(const PoseOutput<S>& a, const PoseOutput<S>& b) {
  return static_cast<double>(std::max({max_diff_rows(a.keypoints, b.keypoints).maxCoeff(),
                                       max_diff_rows(a.twists, b.twists).maxCoeff(),
                                       max_diff_rows(a.beta, b.beta).maxCoeff()}));
}

}  // namespace

TEST_CASE("config validation") {
  HeadConfig c;
  c.width = 30;
  c.heads = 8;
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "head.width");
  }
  HeadConfig z;
  z.blocks = 0;
  CHECK_THROWS_AS(z.validate(), ConfigError);
  HeadConfig p;
  p.dropout = 1.0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  CHECK_NOTHROW(HeadConfig::paper().validate());
  CHECK_NOTHROW(HeadConfig::tiny().validate());
}

TEST_CASE("embed_source") {
  Rng rng(21);
  const HeadConfig cfg = small_config();
  auto params = HeadParams<double>::make(cfg, rng);
  const auto& t = params.templates;

  M zero_out = embed_source(t, Tensor<double>::constant(M::Zero(cfg.n_patches, cfg.c_in))).value();
  M expected = t.pos_enc.value();
  expected.rowwise() += t.input_proj.bias.value().row(0);
  CHECK((zero_out - expected).cwiseAbs().maxCoeff() == 0.0);

  M f = random_matrix(rng, cfg.n_patches, cfg.c_in);
  M full = embed_source(t, Tensor<double>::constant(f)).value();
  M manual = f * t.input_proj.weight.value() + t.pos_enc.value();
  manual.rowwise() += t.input_proj.bias.value().row(0);
  CHECK((full - manual).cwiseAbs().maxCoeff() < 1e-12);

  const std::vector<Index> subset{1, 3};
  M sub = embed_source(t, Tensor<double>::constant(f), &subset).value();
  CHECK(sub.rows() == 2);
  CHECK((sub.row(0) - full.row(1)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((sub.row(1) - full.row(3)).cwiseAbs().maxCoeff() < 1e-12);

  CHECK_THROWS_AS(embed_source(t, Tensor<double>::constant(M::Zero(cfg.n_patches, cfg.c_in + 1))), ShapeError);
  CHECK_THROWS_AS(embed_source(t, Tensor<double>::constant(M::Zero(cfg.n_patches + 1, cfg.c_in))), ShapeError);
}

TEST_CASE("assemble_templates") {
  Rng rng(22);
  const HeadConfig cfg = small_config();
  auto params = HeadParams<double>::make(cfg, rng);
  auto& t = params.templates;

  M out = assemble_templates(cfg, t).value();
  CHECK(out.rows() == cfg.template_rows());
  CHECK(out.cols() == cfg.width);
  const M& j = t.joint_emb.value();
  const M& ty = t.type_emb.value();
  for (Index r = 0; r < cfg.n_joints; ++r) CHECK((out.row(r) - (j.row(r) + ty.row(0))).cwiseAbs().maxCoeff() == 0.0);
  for (Index r = 0; r < cfg.n_twists; ++r) {
    CHECK((out.row(cfg.n_joints + r) - (j.row(r + 1) + ty.row(1))).cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK((out.row(cfg.template_rows() - 1) - (j.row(0) + ty.row(2))).cwiseAbs().maxCoeff() == 0.0);

  CHECK(assemble_templates(cfg, t).value() == out);

  t.joint_emb.mutable_value().setZero();
  t.type_emb.mutable_value().setZero();
  CHECK(assemble_templates(cfg, t).value() == M::Zero(cfg.template_rows(), cfg.width));
}

TEST_CASE("block composition") {
  Rng rng(23);
  const HeadConfig cfg = small_config();
  auto params = HeadParams<double>::make(cfg, rng);
  const auto& b = params.blocks[0];
  using T = Tensor<double>;
  const double divisor = static_cast<double>(cfg.attention_divisor());

  T e2 = T::constant(random_matrix(rng, cfg.n_patches, cfg.width));
  T e3 = T::constant(random_matrix(rng, cfg.template_rows(), cfg.width));

  T a = multi_head_attention(b.mha_2d, e2, e2, e2, static_cast<Index>(divisor));
  M want_2d = feed_forward(b.ffn_2d, relu(layer_norm(b.ln_2d, a + e2))).value();
  M got_2d = encode_2d_block(cfg, b, e2).value();
  CHECK(got_2d.rows() == cfg.n_patches);
  CHECK((got_2d - want_2d).cwiseAbs().maxCoeff() < 1e-12);

  T a3 = multi_head_attention(b.mha_3d, e3, e3, e3);
  M want_3d = relu(layer_norm(b.ln_3d, a3 + e3)).value();
  M got_3d = encode_templates_block(cfg, b, e3).value();
  CHECK(got_3d.rows() == cfg.template_rows());
  CHECK((got_3d - want_3d).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(got_3d.minCoeff() >= 0.0);

  T ac = multi_head_attention(b.mha_cross, e3, e2, e2);
  M want_dec = feed_forward(b.ffn_3d, relu(layer_norm(b.ln_cross, ac + e3))).value();
  M got_dec = decode_block(cfg, b, e3, e2).value();
  CHECK((got_dec - want_dec).cwiseAbs().maxCoeff() < 1e-12);

  for (Index n : {1, 3, 9}) {
    T src = T::constant(random_matrix(rng, n, cfg.width));
    M d = decode_block(cfg, b, e3, src).value();
    CHECK(d.rows() == cfg.template_rows());
    CHECK(d.cols() == cfg.width);
  }
}

TEST_CASE("zero attention output reduces the template stage to a normalized residual") {
  Rng rng(24);
  const HeadConfig cfg = small_config();
  auto params = HeadParams<double>::make(cfg, rng);
  auto& b = params.blocks[0];
  b.mha_3d.output.weight.mutable_value().setZero();
  b.mha_3d.output.bias.mutable_value().setZero();
  Tensor<double> e3 = Tensor<double>::constant(random_matrix(rng, cfg.template_rows(), cfg.width));
  M expected = relu(layer_norm(b.ln_3d, e3)).value();
  CHECK((encode_templates_block(cfg, b, e3).value() - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("single source patch gives every query the same cross-attention output") {
  Rng rng(25);
  const HeadConfig cfg = small_config();
  auto params = HeadParams<double>::make(cfg, rng);
  const auto& b = params.blocks[0];
  Tensor<double> e3 = Tensor<double>::constant(random_matrix(rng, cfg.template_rows(), cfg.width));
  Tensor<double> src = Tensor<double>::constant(random_matrix(rng, 1, cfg.width));
  M a = multi_head_attention(b.mha_cross, e3, src, src).value();
  for (Index r = 1; r < a.rows(); ++r) CHECK((a.row(r) - a.row(0)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("forward arity and determinism") {
  Rng rng(26);
  const HeadConfig cfg = HeadConfig::tiny();
  auto params = HeadParams<float>::make(cfg, rng);
  Tensor<float> f = Tensor<float>::constant(random_matrix(rng, cfg.n_patches, cfg.c_in).cast<float>());

  Tensor<float> e_last = forward_trunk(params, f);
  CHECK(e_last.rows() == cfg.template_rows());
  CHECK(e_last.cols() == cfg.width);

  auto out = forward(params, f);
  CHECK(out.keypoints.shape() == std::vector<Index>{24, 3});
  CHECK(out.twists.shape() == std::vector<Index>{23, 2});
  CHECK(out.beta.size() == 10);
  for (Index r = 0; r < out.twists.rows(); ++r) CHECK(std::abs(out.twists.value().row(r).norm() - 1.0f) < 1e-6f);

  auto again = forward(params, f);
  CHECK(pose_diff(out, again) == 0.0);

  // Training mode with dropout draws from the supplied generator.
  HeadConfig dcfg = cfg;
  dcfg.dropout = 0.3;
  params.config = dcfg;
  Rng d1(1), d2(1), d3(2);
  auto t1 = forward(params, f, {true, &d1, nullptr});
  auto t2 = forward(params, f, {true, &d2, nullptr});
  auto t3 = forward(params, f, {true, &d3, nullptr});
  CHECK(pose_diff(t1, t2) == 0.0);
  CHECK(pose_diff(t1, t3) > 0.0);
  // Eval mode ignores dropout.
  CHECK(pose_diff(forward(params, f), out) == 0.0);
}

TEST_CASE("patch permutation") {
  Rng rng(27);
  const HeadConfig cfg = HeadConfig::tiny();
  for (int trial = 0; trial < 5; ++trial) {
    auto params = HeadParams<float>::make(cfg, rng);
    Matrix<float> f = random_matrix(rng, cfg.n_patches, cfg.c_in).cast<float>();
    auto base = forward(params, Tensor<float>::constant(f));

    std::vector<Index> perm(static_cast<std::size_t>(cfg.n_patches));
    std::iota(perm.begin(), perm.end(), Index{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix<float> fp(f.rows(), f.cols());
    Matrix<float> pos = params.templates.pos_enc.value();
    for (Index i = 0; i < f.rows(); ++i) {
      fp.row(i) = f.row(perm[static_cast<std::size_t>(i)]);
      params.templates.pos_enc.mutable_value().row(i) = pos.row(perm[static_cast<std::size_t>(i)]);
    }
    auto permuted = forward(params, Tensor<float>::constant(fp));
    CHECK(pose_diff(base, permuted) <= 1e-5);
  }
}

TEST_CASE("project_outputs") {
  Rng rng(28);
  const HeadConfig cfg = small_config();
  auto params = HeadParams<double>::make(cfg, rng);
  Tensor<double> e = Tensor<double>::constant(M::Zero(cfg.template_rows(), cfg.width));

  params.proj_twist.bias.mutable_value() << 1.0, 0.0;
  auto out = project_outputs(cfg, e, params.proj_kpt, params.proj_twist, params.proj_beta);
  for (Index r = 0; r < out.twists.rows(); ++r) {
    CHECK(out.twists(r, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(out.twists(r, 1) == doctest::Approx(0.0));
  }

  Tensor<double> er = Tensor<double>::constant(random_matrix(rng, cfg.template_rows(), cfg.width));
  auto generic = project_outputs(cfg, er, params.proj_kpt, params.proj_twist, params.proj_beta);
  for (Index r = 0; r < generic.twists.rows(); ++r) {
    CHECK(std::abs(generic.twists.value().row(r).norm() - 1.0) < 1e-6);
  }
  M kpt = er.value().topRows(cfg.n_joints) * params.proj_kpt.weight.value();
  kpt.rowwise() += params.proj_kpt.bias.value().row(0);
  CHECK((generic.keypoints.value() - kpt).cwiseAbs().maxCoeff() < 1e-12);

  params.proj_twist.bias.mutable_value().setZero();
  CHECK_THROWS_AS(project_outputs(cfg, e, params.proj_kpt, params.proj_twist, params.proj_beta),
                  DegenerateTwistError);
  // Training mode guards the normalization instead of raising.
  CHECK_NOTHROW(project_outputs(cfg, e, params.proj_kpt, params.proj_twist, params.proj_beta, true));

  Tensor<double> bad = Tensor<double>::constant(M::Zero(cfg.template_rows() - 1, cfg.width));
  CHECK_THROWS_AS(project_outputs(cfg, bad, params.proj_kpt, params.proj_twist, params.proj_beta), ShapeError);
}

TEST_CASE("composed head gradient check") {
  bool seen = false;
  for (const auto& r : run_gradcheck_suite()) {
    if (r.tolerance != kComposedTolerance) continue;
    seen = true;
    INFO(r.name << " err " << r.worst_rel_err);
    CHECK(r.worst_rel_err < 1e-4);
  }
  CHECK(seen);
}

TEST_CASE("swapping joint embeddings swaps keypoint outputs") {
  Rng rng(29);
  HeadConfig cfg = small_config();
  auto params = HeadParams<double>::make(cfg, rng);
  Tensor<double> f = Tensor<double>::constant(random_matrix(rng, cfg.n_patches, cfg.c_in));
  // Keep the twist rows fixed so only keypoint templates are relabeled: the
  // last two joints are swapped and the twists that share them are compared
  // in swapped order too.
  const Index a = cfg.n_joints - 2, b = cfg.n_joints - 1;
  auto base = forward(params, f);
  M& j = params.templates.joint_emb.mutable_value();
  j.row(a).swap(j.row(b));
  auto swapped = forward(params, f);
  CHECK((swapped.keypoints.value().row(a) - base.keypoints.value().row(b)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((swapped.keypoints.value().row(b) - base.keypoints.value().row(a)).cwiseAbs().maxCoeff() < 1e-12);
  for (Index r = 0; r < cfg.n_joints; ++r) {
    if (r == a || r == b) continue;
    CHECK((swapped.keypoints.value().row(r) - base.keypoints.value().row(r)).cwiseAbs().maxCoeff() < 1e-12);
  }
  const Index ta = a - cfg.twist_template_offset, tb = b - cfg.twist_template_offset;
  CHECK((swapped.twists.value().row(ta) - base.twists.value().row(tb)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((swapped.twists.value().row(tb) - base.twists.value().row(ta)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((swapped.beta.value() - base.beta.value()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gradient reach") {
  Rng rng(30);
  const HeadConfig cfg = small_config();
  auto params = HeadParams<double>::make(cfg, rng);
  Tensor<double> f = Tensor<double>::constant(random_matrix(rng, cfg.n_patches, cfg.c_in));
  {
    Tape<double> tape;
    auto out = forward(params, f);
    Tensor<double> l = mean(square(out.keypoints - Tensor<double>::constant(M::Ones(cfg.n_joints, 3)))) +
                       mean(square(out.twists)) + mean(square(out.beta));
    backward(l, tape);
  }
  for (const auto& [name, t] : params.named_parameters()) {
    INFO(name);
    REQUIRE(t.has_grad());
    const bool key_bias = name.find(".key.bias") != std::string::npos;
    if (key_bias) {
      CHECK(t.grad().cwiseAbs().maxCoeff() < 1e-10);
    } else {
      CHECK(t.grad().cwiseAbs().maxCoeff() > 0.0);
    }
  }
  // Every joint and type embedding row, not just every tensor.
  const M& jg = params.templates.joint_emb.grad();
  for (Index r = 0; r < jg.rows(); ++r) CHECK(jg.row(r).cwiseAbs().maxCoeff() > 0.0);
  const M& tg = params.templates.type_emb.grad();
  for (Index r = 0; r < tg.rows(); ++r) CHECK(tg.row(r).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("parameter accounting matches the instantiated model") {
  Rng rng(31);
  CHECK(transformer_head_params(HeadConfig::paper()) == HeadParams<float>::make(HeadConfig::paper(), rng).element_count());
  std::uniform_int_distribution<Index> small(1, 4);
  for (int trial = 0; trial < 20; ++trial) {
    HeadConfig c;
    c.blocks = small(rng);
    c.heads = small(rng);
    c.width = c.heads * (1 + small(rng));
    c.n_patches = small(rng) * 2;
    c.c_in = small(rng) * 3;
    INFO("trial " << trial);
    CHECK(transformer_head_params(c) == HeadParams<float>::make(c, rng).element_count());
  }
}

TEST_CASE("named parameters and clone") {
  Rng rng(32);
  auto params = HeadParams<double>::make(small_config(), rng);
  auto names = params.named_parameters();
  std::vector<std::string> sorted;
  for (const auto& n : names) sorted.push_back(n.name);
  std::sort(sorted.begin(), sorted.end());
  CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());

  auto copy = params.clone();
  copy.proj_beta.bias.mutable_value().setConstant(7.0);
  CHECK(params.proj_beta.bias.value().maxCoeff() == 0.0);
}
