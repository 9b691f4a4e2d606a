#pragma once

// The transformer lifting head: a 2D feature encoder stream, a 3D template
// encoder stream and a cross-attention decoder, interleaved over L blocks,
// followed by row-wise output projections.

#include "lift/nn.hpp"
#include "lift/tensor.hpp"

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace lift {

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

class DegenerateTwistError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr Index kKeypointDim = 3;
inline constexpr Index kTwistDim = 2;
inline constexpr Index kOutputTypes = 3;  // keypoint, twist, shape
inline constexpr double kTwistEps = 1e-8;

enum class OutputType : Index { kKeypoint = 0, kTwist = 1, kShape = 2 };

struct HeadConfig {
  Index blocks = 6;
  Index heads = 8;
  Index width = 512;
  Index n_patches = 64;  // 8x8 grid
  Index c_in = 512;
  double dropout = 0.1;
  Index n_joints = 24;
  Index n_twists = 23;
  Index beta_dim = 10;
  Index attn_scale_dim = 0;        // 0: model width
  Index shape_template_joint = 0;  // joint embedding carried by the shape template
  Index twist_template_offset = 1; // twist j uses joint embedding j + offset

  Index template_rows() const { return n_joints + n_twists + 1; }
  Index attention_divisor() const { return attn_scale_dim > 0 ? attn_scale_dim : width; }

  void validate() const {
    auto positive = [](const char* name, Index v) {
      if (v <= 0) throw ConfigError(name, "must be positive, got " + std::to_string(v));
    };
    positive("head.blocks", blocks);
    positive("head.heads", heads);
    positive("head.width", width);
    positive("head.n_patches", n_patches);
    positive("head.c_in", c_in);
    positive("head.n_joints", n_joints);
    positive("head.n_twists", n_twists);
    positive("head.beta_dim", beta_dim);
    if (width % heads != 0) {
      throw ConfigError("head.width", "width " + std::to_string(width) +
                                          " not divisible by heads " + std::to_string(heads));
    }
    if (width < 2) throw ConfigError("head.width", "layer norm needs width >= 2");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("head.dropout", "must lie in [0, 1)");
    if (attn_scale_dim < 0) throw ConfigError("head.attn_scale_dim", "must be >= 0");
    if (shape_template_joint < 0 || shape_template_joint >= n_joints) {
      throw ConfigError("head.shape_template_joint", "out of joint range");
    }
    if (twist_template_offset < 0 || twist_template_offset + n_twists > n_joints) {
      throw ConfigError("head.twist_template_offset", "twist templates run past the joint range");
    }
  }

  static HeadConfig paper() { return HeadConfig{}; }

  static HeadConfig tiny() {
    HeadConfig c;
    c.blocks = 2;
    c.heads = 2;
    c.width = 32;
    c.n_patches = 16;
    c.c_in = 32;
    return c;
  }
};

template <typename S>
struct Templates {
  Tensor<S> joint_emb;  // n_joints x d
  Tensor<S> type_emb;   // 3 x d
  Tensor<S> pos_enc;    // n_patches x d
  LinearParams<S> input_proj;  // c_in x d

  template <typename F>
  void for_each_param(F&& f) {
    input_proj.for_each_param("input_proj", f);
    f("pos_enc", pos_enc);
    f("joint_emb", joint_emb);
    f("type_emb", type_emb);
  }
};

template <typename S>
struct BlockParams {
  MHAParams<S> mha_2d;
  LayerNormParams<S> ln_2d;
  FFNParams<S> ffn_2d;
  MHAParams<S> mha_3d;
  LayerNormParams<S> ln_3d;
  MHAParams<S> mha_cross;
  LayerNormParams<S> ln_cross;
  FFNParams<S> ffn_3d;

  static BlockParams make(Rng& rng, const HeadConfig& cfg) {
    BlockParams b;
    const Index d = cfg.width;
    b.mha_2d = MHAParams<S>::make(rng, d, cfg.heads);
    b.ln_2d = LayerNormParams<S>::make(d);
    b.ffn_2d = FFNParams<S>::make(rng, d);
    b.mha_3d = MHAParams<S>::make(rng, d, cfg.heads);
    b.ln_3d = LayerNormParams<S>::make(d);
    b.mha_cross = MHAParams<S>::make(rng, d, cfg.heads);
    b.ln_cross = LayerNormParams<S>::make(d);
    b.ffn_3d = FFNParams<S>::make(rng, d);
    return b;
  }

  template <typename F>
  void for_each_param(const std::string& prefix, F&& f) {
    mha_2d.for_each_param(prefix + ".mha_2d", f);
    ln_2d.for_each_param(prefix + ".ln_2d", f);
    ffn_2d.for_each_param(prefix + ".ffn_2d", f);
    mha_3d.for_each_param(prefix + ".mha_3d", f);
    ln_3d.for_each_param(prefix + ".ln_3d", f);
    mha_cross.for_each_param(prefix + ".mha_cross", f);
    ln_cross.for_each_param(prefix + ".ln_cross", f);
    ffn_3d.for_each_param(prefix + ".ffn_3d", f);
  }
};

template <typename S>
struct HeadParams {
  HeadConfig config;
  Templates<S> templates;
  std::vector<BlockParams<S>> blocks;
  LinearParams<S> proj_kpt;    // d x 3
  LinearParams<S> proj_twist;  // d x 2
  LinearParams<S> proj_beta;   // d x beta_dim

  static HeadParams make(const HeadConfig& cfg, Rng& rng) {
    cfg.validate();
    HeadParams p;
    p.config = cfg;
    const Index d = cfg.width;
    auto normal = [&rng, d](Index rows, double stddev) {
      std::normal_distribution<double> dist(0.0, stddev);
      Matrix<S> m(rows, d);
      for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(dist(rng));
      return Tensor<S>::parameter(std::move(m));
    };
    p.templates.input_proj = init_params<S>(rng, cfg.c_in, d);
    p.templates.pos_enc = normal(cfg.n_patches, 0.1);
    p.templates.joint_emb = normal(cfg.n_joints, 1.0);
    p.templates.type_emb = normal(kOutputTypes, 1.0);
    for (Index l = 0; l < cfg.blocks; ++l) p.blocks.push_back(BlockParams<S>::make(rng, cfg));
    p.proj_kpt = init_params<S>(rng, d, kKeypointDim);
    p.proj_twist = init_params<S>(rng, d, kTwistDim);
    p.proj_beta = init_params<S>(rng, d, cfg.beta_dim);
    return p;
  }

  /// Visits every learnable tensor in a fixed order with a stable name.
  template <typename F>
  void for_each_param(F&& f) {
    templates.for_each_param(f);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      blocks[l].for_each_param("block" + std::to_string(l), f);
    }
    proj_kpt.for_each_param("proj_kpt", f);
    proj_twist.for_each_param("proj_twist", f);
    proj_beta.for_each_param("proj_beta", f);
  }

  std::vector<NamedTensor<S>> named_parameters() const {
    std::vector<NamedTensor<S>> out;
    const_cast<HeadParams*>(this)->for_each_param(
        [&out](const std::string& name, Tensor<S>& t) { out.push_back({name, t}); });
    return out;
  }

  /// Independent copy: same structure, fresh leaves holding copied values.
  HeadParams clone() const {
    HeadParams c = *this;
    c.for_each_param([](const std::string&, Tensor<S>& t) { t = t.detached_copy(); });
    return c;
  }

  Index element_count() const {
    Index n = 0;
    for (const auto& p : named_parameters()) n += p.tensor.size();
    return n;
  }

  void clear_grads() {
    for_each_param([](const std::string&, Tensor<S>& t) { t.clear_grad(); });
  }
};

template <typename S>
struct PoseOutput {
  Tensor<S> keypoints;  // n_joints x 3
  Tensor<S> twists;     // n_twists x 2, unit rows (cos, sin)
  Tensor<S> beta;       // 1 x beta_dim
};

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;                             // dropout source in training mode
  const std::vector<Index>* patch_subset = nullptr;  // retained patch rows, sorted
};

/// input_proj(features) + pos_enc. With a subset, only those patch rows (and
/// their position encodings) are used.
template <typename S>
Tensor<S> embed_source(const Templates<S>& t, const Tensor<S>& features,
                       const std::vector<Index>* subset = nullptr) {
  if (features.cols() != t.input_proj.in_features() || features.rows() != t.pos_enc.rows()) {
    throw ShapeError("embed_source: features " + detail::shape_str(features.rows(), features.cols()) +
                     " do not match (" + std::to_string(t.pos_enc.rows()) + "x" +
                     std::to_string(t.input_proj.in_features()) + ")");
  }
  if (subset == nullptr) return linear(t.input_proj, features) + t.pos_enc;
  return linear(t.input_proj, gather_rows(features, *subset)) + gather_rows(t.pos_enc, *subset);
}

/// Query template matrix: keypoint rows, then twist rows, then one shape row.
/// Each row is a joint embedding plus its output-type embedding.
template <typename S>
Tensor<S> assemble_templates(const HeadConfig& cfg, const Templates<S>& t) {
  std::vector<Index> joint;
  std::vector<Index> type;
  for (Index j = 0; j < cfg.n_joints; ++j) {
    joint.push_back(j);
    type.push_back(static_cast<Index>(OutputType::kKeypoint));
  }
  for (Index j = 0; j < cfg.n_twists; ++j) {
    joint.push_back(j + cfg.twist_template_offset);
    type.push_back(static_cast<Index>(OutputType::kTwist));
  }
  joint.push_back(cfg.shape_template_joint);
  type.push_back(static_cast<Index>(OutputType::kShape));
  return gather_rows(t.joint_emb, joint) + gather_rows(t.type_emb, type);
}

/// a = MHA(e, e, e); b = relu(LN(a + e)); return FFN(b).
template <typename S>
Tensor<S> encode_2d_block(const HeadConfig& cfg, const BlockParams<S>& p, const Tensor<S>& e_prev,
                          const DropoutContext& drop = {}) {
  Tensor<S> a = drop.apply(multi_head_attention(p.mha_2d, e_prev, e_prev, e_prev,
                                                cfg.attention_divisor()));
  Tensor<S> b = relu(layer_norm(p.ln_2d, a + e_prev));
  return feed_forward(p.ffn_2d, b, drop);
}

/// a = MHA(e, e, e); return relu(LN(a + e)). This stage has no FFN.
template <typename S>
Tensor<S> encode_templates_block(const HeadConfig& cfg, const BlockParams<S>& p,
                                 const Tensor<S>& e_prev_3d, const DropoutContext& drop = {}) {
  Tensor<S> a = drop.apply(multi_head_attention(p.mha_3d, e_prev_3d, e_prev_3d, e_prev_3d,
                                                cfg.attention_divisor()));
  return relu(layer_norm(p.ln_3d, a + e_prev_3d));
}

/// a = MHA(e_3d_t, e_2d, e_2d); b = relu(LN(a + e_3d_t)); return FFN(b).
template <typename S>
Tensor<S> decode_block(const HeadConfig& cfg, const BlockParams<S>& p, const Tensor<S>& e_3d_t,
                       const Tensor<S>& e_2d, const DropoutContext& drop = {}) {
  Tensor<S> a =
      drop.apply(multi_head_attention(p.mha_cross, e_3d_t, e_2d, e_2d, cfg.attention_divisor()));
  Tensor<S> b = relu(layer_norm(p.ln_cross, a + e_3d_t));
  return feed_forward(p.ffn_3d, b, drop);
}

/// Runs all blocks and returns the final decoder state e_L (template_rows x d).
template <typename S>
Tensor<S> forward_trunk(const HeadParams<S>& params, const Tensor<S>& features,
                        const ForwardOptions& opts = {}) {
  const HeadConfig& cfg = params.config;
  const DropoutContext drop{cfg.dropout, opts.training, opts.rng};
  // Patch subsets are a training-time augmentation only.
  const std::vector<Index>* subset = opts.training ? opts.patch_subset : nullptr;
  Tensor<S> e_2d = embed_source(params.templates, features, subset);
  Tensor<S> e_3d = assemble_templates(cfg, params.templates);
  for (const auto& block : params.blocks) {
    e_2d = encode_2d_block(cfg, block, e_2d, drop);
    Tensor<S> e_3d_t = encode_templates_block(cfg, block, e_3d, drop);
    e_3d = decode_block(cfg, block, e_3d_t, e_2d, drop);
  }
  return e_3d;
}

/// Keypoint rows -> proj_kpt, twist rows -> proj_twist then unit-normalized,
/// last row -> proj_beta. In eval mode a twist vector shorter than 1e-8 is an
/// error; in training mode the normalization is epsilon-guarded.
template <typename S>
PoseOutput<S> project_outputs(const HeadConfig& cfg, const Tensor<S>& e_last,
                              const LinearParams<S>& proj_kpt, const LinearParams<S>& proj_twist,
                              const LinearParams<S>& proj_beta, bool training = false) {
  if (e_last.rows() != cfg.template_rows() || e_last.cols() != proj_kpt.in_features()) {
    throw ShapeError("project_outputs: decoder state " +
                     detail::shape_str(e_last.rows(), e_last.cols()) + " does not match (" +
                     std::to_string(cfg.template_rows()) + "x" +
                     std::to_string(proj_kpt.in_features()) + ")");
  }
  const Index nj = cfg.n_joints;
  const Index nt = cfg.n_twists;
  PoseOutput<S> out;
  out.keypoints = linear(proj_kpt, slice_rows(e_last, 0, nj));
  Tensor<S> raw_twist = linear(proj_twist, slice_rows(e_last, nj, nj + nt));
  if (!training) {
    for (Index r = 0; r < raw_twist.rows(); ++r) {
      if (raw_twist.value().row(r).norm() < static_cast<S>(kTwistEps)) {
        throw DegenerateTwistError("project_outputs: twist " + std::to_string(r) +
                                   " has near-zero norm");
      }
    }
  }
  out.twists = normalize_rows(raw_twist, static_cast<S>(kTwistEps));
  out.beta = linear(proj_beta, slice_rows(e_last, nj + nt, nj + nt + 1));
  return out;
}

template <typename S>
PoseOutput<S> forward(const HeadParams<S>& params, const Tensor<S>& features,
                      const ForwardOptions& opts = {}) {
  Tensor<S> e_last = forward_trunk(params, features, opts);
  return project_outputs(params.config, e_last, params.proj_kpt, params.proj_twist,
                         params.proj_beta, opts.training);
}

}  // namespace lift
