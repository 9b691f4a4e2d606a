#pragma once

// Small configurations shared by the test binaries.

#include "lift/head.hpp"
#include "lift/synthetic.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace lift::testing {

/// 3 joints, 2 twists, 2 shape coefficients: a 15-dim target over 4x4 features.
inline HeadConfig micro_head() {
  HeadConfig c;
  c.blocks = 1;
  c.heads = 2;
  c.width = 8;
  c.n_patches = 4;
  c.c_in = 4;
  c.dropout = 0.0;
  c.n_joints = 3;
  c.n_twists = 2;
  c.beta_dim = 2;
  return c;
}

template <typename S>
std::vector<Sample<S>> micro_data(std::size_t n, std::uint64_t seed = 3) {
  SyntheticConfig sc;
  sc.seed = seed;
  return SyntheticTask<S>(micro_head(), sc).generate(n);
}

/// Fresh, empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("lift_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace lift::testing
