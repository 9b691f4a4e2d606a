#pragma once

// Binary checkpoint files (little-endian):
//   "LIFTCKPT" | u32 version = 1 | u32 tensor count
//   per tensor: u16 name length | name | u8 rank | u64 dims[rank] | u8 dtype | raw values
//   u32 CRC32 of every preceding byte
// dtype 0 is 32-bit float, 1 is 64-bit float.

#include "lift/head.hpp"
#include "lift/optim.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace lift {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { kFloat32 = 0, kFloat64 = 1 };

/// One tensor as it appears in a checkpoint file. Values are held in double,
/// which represents both stored precisions exactly.
struct StoredTensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  DType dtype = DType::kFloat32;
  std::vector<double> values;
};

std::vector<std::uint8_t> encode_checkpoint(const std::vector<StoredTensor>& tensors);
std::vector<StoredTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint_file(const std::filesystem::path& path,
                           const std::vector<StoredTensor>& tensors);
std::vector<StoredTensor> read_checkpoint_file(const std::filesystem::path& path);

template <typename S>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>);
  return std::is_same_v<S, float> ? DType::kFloat32 : DType::kFloat64;
}

namespace detail {

template <typename S>
StoredTensor to_stored(const std::string& name, const Matrix<S>& m, int rank) {
  StoredTensor st;
  st.name = name;
  st.dtype = dtype_of<S>();
  if (rank == 1) {
    st.dims = {static_cast<std::uint64_t>(m.cols())};
  } else if (rank == 2) {
    st.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  }
  st.values.assign(m.data(), m.data() + m.size());
  return st;
}

template <typename S>
void fill_from(const StoredTensor& st, Matrix<S>& m) {
  if (static_cast<std::size_t>(m.size()) != st.values.size()) {
    throw CheckpointError("checkpoint tensor '" + st.name + "' has " +
                          std::to_string(st.values.size()) + " values, expected " +
                          std::to_string(m.size()));
  }
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(st.values[i]);
}

inline std::vector<std::uint64_t> dims_of(Index rows, Index cols, int rank) {
  if (rank == 1) return {static_cast<std::uint64_t>(cols)};
  return {static_cast<std::uint64_t>(rows), static_cast<std::uint64_t>(cols)};
}

}  // namespace detail

template <typename S>
std::vector<StoredTensor> to_stored(const HeadParams<S>& params, const AdamState<S>* opt) {
  std::vector<StoredTensor> out;
  const auto named = params.named_parameters();
  for (const auto& p : named) {
    out.push_back(detail::to_stored<S>(p.name, p.tensor.value(), p.tensor.rank()));
  }
  if (opt != nullptr && opt->initialized()) {
    for (std::size_t i = 0; i < named.size(); ++i) {
      const int rank = named[i].tensor.rank();
      out.push_back(detail::to_stored<S>("adam.m/" + named[i].name, opt->first_moment[i], rank));
      out.push_back(detail::to_stored<S>("adam.v/" + named[i].name, opt->second_moment[i], rank));
    }
    StoredTensor step;
    step.name = "adam.step";
    step.dims = {1};
    step.dtype = DType::kFloat64;
    step.values = {static_cast<double>(opt->step)};
    out.push_back(step);
  }
  return out;
}

template <typename S>
struct LoadedCheckpoint {
  HeadParams<S> params;
  std::optional<AdamState<S>> optimizer;
};

/// Rebuilds parameters for `cfg` from stored tensors. Every parameter must be
/// present with its exact shape; unknown names are rejected.
template <typename S>
LoadedCheckpoint<S> from_stored(const std::vector<StoredTensor>& tensors, const HeadConfig& cfg) {
  std::map<std::string, const StoredTensor*> by_name;
  for (const auto& t : tensors) {
    if (!by_name.emplace(t.name, &t).second) {
      throw CheckpointError("checkpoint has duplicate tensor '" + t.name + "'");
    }
  }
  Rng rng(0);
  LoadedCheckpoint<S> out{HeadParams<S>::make(cfg, rng), std::nullopt};
  auto named = out.params.named_parameters();
  std::size_t consumed = 0;
  auto lookup = [&by_name, &consumed](const std::string& name, Index rows, Index cols,
                                      int rank) -> const StoredTensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint is missing tensor '" + name + "'");
    if (it->second->dims != detail::dims_of(rows, cols, rank)) {
      throw CheckpointError("checkpoint tensor '" + name + "' has the wrong shape");
    }
    ++consumed;
    return *it->second;
  };
  for (auto& p : named) {
    const auto& st = lookup(p.name, p.tensor.rows(), p.tensor.cols(), p.tensor.rank());
    detail::fill_from<S>(st, p.tensor.mutable_value());
  }
  if (by_name.count("adam.step") != 0) {
    AdamState<S> opt;
    for (auto& p : named) {
      const Index r = p.tensor.rows();
      const Index c = p.tensor.cols();
      Matrix<S> m(r, c);
      Matrix<S> v(r, c);
      detail::fill_from<S>(lookup("adam.m/" + p.name, r, c, p.tensor.rank()), m);
      detail::fill_from<S>(lookup("adam.v/" + p.name, r, c, p.tensor.rank()), v);
      opt.first_moment.push_back(std::move(m));
      opt.second_moment.push_back(std::move(v));
    }
    const StoredTensor& step = *by_name.at("adam.step");
    if (step.values.size() != 1) throw CheckpointError("checkpoint 'adam.step' must hold one value");
    opt.step = static_cast<std::int64_t>(step.values[0]);
    ++consumed;
    out.optimizer = std::move(opt);
  }
  if (consumed != tensors.size()) {
    for (const auto& t : tensors) {
      bool known = t.name == "adam.step";
      for (const auto& p : named) {
        known = known || t.name == p.name || t.name == "adam.m/" + p.name ||
                t.name == "adam.v/" + p.name;
      }
      if (!known) throw CheckpointError("checkpoint has unexpected tensor '" + t.name + "'");
    }
    throw CheckpointError("checkpoint optimizer moments present without 'adam.step'");
  }
  return out;
}

template <typename S>
void save_checkpoint(const HeadParams<S>& params, const AdamState<S>* opt,
                     const std::filesystem::path& path) {
  write_checkpoint_file(path, to_stored(params, opt));
}

template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::filesystem::path& path, const HeadConfig& cfg) {
  return from_stored<S>(read_checkpoint_file(path), cfg);
}

}  // namespace lift
