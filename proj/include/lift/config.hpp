#pragma once

// Run configuration: head, training, synthetic data and paths, read from a
// flat sectioned `key = value` file and overridden by command-line flags.
//
//   [head]
//   blocks = 2
//   [train]
//   max_lr = 0.002

#include "lift/head.hpp"
#include "lift/synthetic.hpp"
#include "lift/training.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace lift {

struct RunConfig {
  std::string profile = "paper";
  HeadConfig head;
  TrainConfig train;
  SyntheticConfig data;
  std::int64_t n_train = 64;
  std::int64_t n_eval = 64;
  std::string out_dir = "run";
  std::string metrics_file;  // empty: <out_dir>/metrics.tsv

  std::filesystem::path metrics_path() const;
  void validate() const;
};

/// Resets `cfg` to the named profile ("paper" or "tiny").
void apply_profile(RunConfig& cfg, const std::string& profile);

/// Sets one `section.key` field from its text form. Throws ConfigError naming
/// the field for unknown keys or unparsable values.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);

/// Parses config text into ordered (section.key, value) pairs.
std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text);

void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);

/// Every field in a fixed order as (section.key, value).
std::vector<std::pair<std::string, std::string>> resolved_settings(const RunConfig& cfg);

}  // namespace lift
