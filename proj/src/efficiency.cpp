#include "lift/efficiency.hpp"

#include <iomanip>
#include <sstream>

namespace lift {
namespace {

std::int64_t linear_params(std::int64_t in, std::int64_t out) { return in * out + out; }

std::int64_t mha_params(std::int64_t d, std::int64_t h) {
  const std::int64_t dh = d / h;
  return h * 3 * linear_params(d, dh) + linear_params(d, d);
}

std::int64_t ffn_params(std::int64_t d) { return kFeedForwardLayers * linear_params(d, d); }

// Multiply-adds count as 2 FLOPs; bias, softmax, norm and activations are excluded.
std::int64_t mha_flops(std::int64_t queries, std::int64_t keys, std::int64_t d, std::int64_t h) {
  const std::int64_t dh = d / h;
  const std::int64_t per_head = 2 * queries * d * dh + 2 * 2 * keys * d * dh +
                                2 * queries * keys * dh + 2 * queries * keys * dh;
  return h * per_head + 2 * queries * d * d;
}

std::int64_t ffn_flops(std::int64_t rows, std::int64_t d) {
  return kFeedForwardLayers * 2 * rows * d * d;
}

// Counting needs only positive sizes and whole heads; the width >= 2 and
// template-range checks of a trainable config do not apply.
void check_countable(const HeadConfig& cfg) {
  for (Index v : {cfg.blocks, cfg.heads, cfg.width, cfg.n_patches, cfg.c_in, cfg.n_joints,
                  cfg.n_twists, cfg.beta_dim}) {
    if (v <= 0) throw ConfigError("head", "all sizes must be positive");
  }
  if (cfg.width % cfg.heads != 0) throw ConfigError("head.width", "not divisible by heads");
}

std::string join(const std::vector<std::int64_t>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

}  // namespace

std::int64_t transformer_head_params(const HeadConfig& cfg) {
  check_countable(cfg);
  const std::int64_t d = cfg.width;
  const std::int64_t h = cfg.heads;
  const std::int64_t embeddings = linear_params(cfg.c_in, d) + cfg.n_patches * d +
                                  (cfg.n_joints + kOutputTypes) * d;
  const std::int64_t block = 3 * mha_params(d, h) + 3 * 2 * d + 2 * ffn_params(d);
  const std::int64_t outputs =
      linear_params(d, kKeypointDim) + linear_params(d, kTwistDim) + linear_params(d, cfg.beta_dim);
  return embeddings + cfg.blocks * block + outputs;
}

std::int64_t transformer_head_flops(const HeadConfig& cfg) {
  check_countable(cfg);
  const std::int64_t d = cfg.width;
  const std::int64_t h = cfg.heads;
  const std::int64_t n = cfg.n_patches;
  const std::int64_t t = cfg.template_rows();
  const std::int64_t block = mha_flops(n, n, d, h) + ffn_flops(n, d) + mha_flops(t, t, d, h) +
                             mha_flops(t, n, d, h) + ffn_flops(t, d);
  const std::int64_t outputs = 2 * cfg.n_joints * d * kKeypointDim +
                               2 * cfg.n_twists * d * kTwistDim + 2 * d * cfg.beta_dim;
  return 2 * n * cfg.c_in * d + cfg.blocks * block + outputs;
}

std::int64_t deconv_head_params(const DeconvConfig& cfg) {
  std::int64_t total = 0;
  std::int64_t c = cfg.in_channels;
  for (std::int64_t out : cfg.channels) {
    total += cfg.kernel * cfg.kernel * c * out + out;
    c = out;
  }
  return total + c * cfg.heatmap_channels + cfg.heatmap_channels;
}

std::int64_t deconv_head_flops(const DeconvConfig& cfg) {
  std::int64_t total = 0;
  std::int64_t c = cfg.in_channels;
  std::int64_t side = cfg.input_size;
  for (std::int64_t out : cfg.channels) {
    side *= cfg.stride;
    total += 2 * cfg.kernel * cfg.kernel * c * out * side * side;
    c = out;
  }
  return total + 2 * c * cfg.heatmap_channels * side * side;
}

EfficiencyReport efficiency_report(const HeadConfig& cfg, const DeconvConfig& deconv) {
  EfficiencyReport r;
  r.transformer_head_params = transformer_head_params(cfg);
  r.deconv_head_params = deconv_head_params(deconv);
  r.param_ratio = static_cast<double>(r.deconv_head_params) / static_cast<double>(r.transformer_head_params);
  r.transformer_head_flops = transformer_head_flops(cfg);
  r.deconv_head_flops = deconv_head_flops(deconv);
  r.flop_ratio = static_cast<double>(r.deconv_head_flops) / static_cast<double>(r.transformer_head_flops);

  auto& a = r.assumptions;
  auto add = [&a](const std::string& k, auto v) {
    std::ostringstream os;
    os << v;
    a.emplace_back(k, os.str());
  };
  add("transformer.blocks", cfg.blocks);
  add("transformer.heads", cfg.heads);
  add("transformer.width", cfg.width);
  add("transformer.n_patches", cfg.n_patches);
  add("transformer.c_in", cfg.c_in);
  add("transformer.template_rows", cfg.template_rows());
  add("transformer.ffn_layers", kFeedForwardLayers);
  add("deconv.in_channels", deconv.in_channels);
  add("deconv.channels", join(deconv.channels));
  add("deconv.kernel", deconv.kernel);
  add("deconv.stride", deconv.stride);
  add("deconv.input_size", deconv.input_size);
  add("deconv.n_joints", deconv.n_joints);
  add("deconv.depth_bins", deconv.depth_bins);
  add("deconv.heatmap_channels", deconv.heatmap_channels);
  add("deconv.source", "conventional baseline configuration, not measured");
  add("flops.convention", "multiply-add=2; bias, softmax, norm, activation excluded");
  add("claim.gpu_memory", "not reproduced (hardware-bound)");
  add("claim.epoch_time", "not reproduced (hardware-bound)");
  return r;
}

std::string EfficiencyReport::to_text() const {
  std::ostringstream os;
  os << "transformer_head_params\t" << transformer_head_params << '\n';
  os << "deconv_head_params\t" << deconv_head_params << '\n';
  os << "param_ratio_deconv_over_transformer\t" << std::setprecision(17) << param_ratio << '\n';
  os << "transformer_head_flops\t" << transformer_head_flops << '\n';
  os << "deconv_head_flops\t" << deconv_head_flops << '\n';
  os << "flop_ratio_deconv_over_transformer\t" << std::setprecision(17) << flop_ratio << '\n';
  for (const auto& [k, v] : assumptions) os << "assumption." << k << '\t' << v << '\n';
  return os.str();
}

}  // namespace lift
