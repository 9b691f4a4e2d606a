#pragma once

// Closed-form parameter and FLOP accounting for the transformer head and the
// deconvolution heatmap head it replaces.

#include "lift/head.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace lift {

/// Deconvolution + 1x1 convolution heatmap head. Every value here is an
/// assumption about the baseline and is echoed in the report.
struct DeconvConfig {
  std::int64_t in_channels = 512;
  std::vector<std::int64_t> channels = {256, 256, 256};  // one entry per deconv layer
  std::int64_t kernel = 4;
  std::int64_t stride = 2;
  std::int64_t input_size = 8;  // square input grid side
  std::int64_t n_joints = 24;
  std::int64_t depth_bins = 64;
  std::int64_t heatmap_channels = 24 * 64;
};

std::int64_t transformer_head_params(const HeadConfig& cfg);
std::int64_t transformer_head_flops(const HeadConfig& cfg);
std::int64_t deconv_head_params(const DeconvConfig& cfg);
std::int64_t deconv_head_flops(const DeconvConfig& cfg);

struct EfficiencyReport {
  std::int64_t transformer_head_params = 0;
  std::int64_t deconv_head_params = 0;
  double param_ratio = 0.0;  // deconv / transformer
  std::int64_t transformer_head_flops = 0;
  std::int64_t deconv_head_flops = 0;
  double flop_ratio = 0.0;  // deconv / transformer
  std::vector<std::pair<std::string, std::string>> assumptions;

  /// One `key<TAB>value` line per field in a fixed order.
  std::string to_text() const;
};

EfficiencyReport efficiency_report(const HeadConfig& cfg, const DeconvConfig& deconv);

}  // namespace lift
