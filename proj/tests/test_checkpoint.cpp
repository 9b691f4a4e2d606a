#include <doctest.h>

#include "fixtures.hpp"
#include "lift/checkpoint.hpp"
#include "lift/training.hpp"

#include <zlib.h>

#include <fstream>
#include <iterator>

using namespace lift;
using lift::testing::micro_head;
using lift::testing::scratch_dir;

namespace {

std::vector<std::uint8_t> slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream os(p, std::ios::binary);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// Re-seal a tampered payload so the checksum passes and the inner check fires.
void reseal(std::vector<std::uint8_t>& bytes) {
  const std::size_t body = bytes.size() - 4;
  const auto crc = static_cast<std::uint32_t>(crc32(0L, bytes.data(), static_cast<uInt>(body)));
  for (int i = 0; i < 4; ++i) bytes[body + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(crc >> (8 * i));
}

std::string error_of(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    return e.what();
  }
  return "";
}

template <typename S>
HeadParams<S> trained_params(AdamState<S>& opt) {
  Rng rng(51);
  auto p = HeadParams<S>::make(micro_head(), rng);
  // Give the optimizer non-trivial moments.
  for (int k = 0; k < 2; ++k) {
    p.for_each_param([&rng](const std::string&, Tensor<S>& t) {
      std::normal_distribution<double> g(0.0, 1.0);
      Matrix<S>& grad = t.mutable_grad();
      for (Index i = 0; i < grad.size(); ++i) grad.data()[i] = static_cast<S>(g(rng));
    });
    adam_step(p.named_parameters(), opt, 1e-3);
  }
  return p;
}

template <typename S>
void check_round_trip() {
  AdamState<S> opt;
  auto params = trained_params(opt);
  auto dir = scratch_dir(std::string("roundtrip_") + (sizeof(S) == 4 ? "f" : "d"));
  save_checkpoint(params, &opt, dir / "a.ckpt");
  auto loaded = load_checkpoint<S>(dir / "a.ckpt", micro_head());
  auto a = params.named_parameters();
  auto b = loaded.params.named_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(a[i].tensor.value() == b[i].tensor.value());
    CHECK(a[i].tensor.rank() == b[i].tensor.rank());
  }
  REQUIRE(loaded.optimizer.has_value());
  CHECK(loaded.optimizer->step == opt.step);
  for (std::size_t i = 0; i < opt.first_moment.size(); ++i) {
    CHECK(loaded.optimizer->first_moment[i] == opt.first_moment[i]);
    CHECK(loaded.optimizer->second_moment[i] == opt.second_moment[i]);
  }
  save_checkpoint(loaded.params, &*loaded.optimizer, dir / "b.ckpt");
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
}

}  // namespace

TEST_CASE("round trip is exact and byte-stable") {
  check_round_trip<float>();
  check_round_trip<double>();
}

TEST_CASE("parameters-only checkpoint") {
  Rng rng(52);
  auto p = HeadParams<float>::make(micro_head(), rng);
  auto dir = scratch_dir("params_only");
  save_checkpoint(p, static_cast<const AdamState<float>*>(nullptr), dir / "p.ckpt");
  auto loaded = load_checkpoint<float>(dir / "p.ckpt", micro_head());
  CHECK_FALSE(loaded.optimizer.has_value());
}

TEST_CASE("encode/decode of raw tensors") {
  StoredTensor a{"x", {2, 3}, DType::kFloat64, {1, 2, 3, 4, 5, 6.5}};
  StoredTensor b{"y", {}, DType::kFloat32, {0.25}};
  auto bytes = encode_checkpoint({a, b});
  CHECK(std::string(bytes.begin(), bytes.begin() + 8) == "LIFTCKPT");
  auto back = decode_checkpoint(bytes);
  REQUIRE(back.size() == 2);
  CHECK(back[0].name == "x");
  CHECK(back[0].dims == a.dims);
  CHECK(back[0].values == a.values);
  CHECK(back[1].dims.empty());
  CHECK(back[1].dtype == DType::kFloat32);
  CHECK(back[1].values == b.values);

  StoredTensor bad{"z", {4}, DType::kFloat32, {1, 2}};
  CHECK_THROWS_AS(encode_checkpoint({bad}), CheckpointError);
}

TEST_CASE("corruption is detected") {
  Rng rng(53);
  auto p = HeadParams<float>::make(micro_head(), rng);
  auto dir = scratch_dir("corrupt");
  save_checkpoint(p, static_cast<const AdamState<float>*>(nullptr), dir / "good.ckpt");
  const auto good = slurp(dir / "good.ckpt");

  auto truncated = good;
  truncated.resize(good.size() / 2);
  spit(dir / "trunc.ckpt", truncated);
  try {
    load_checkpoint<float>(dir / "trunc.ckpt", micro_head());
    FAIL("expected CheckpointError");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("checksum failure") != std::string::npos);
  }
  CHECK(error_of(std::vector<std::uint8_t>(good.begin(), good.begin() + 5)).find("checksum failure") !=
        std::string::npos);

  auto flipped = good;
  flipped[good.size() / 2] ^= 0x40;
  CHECK(error_of(flipped).find("checksum failure") != std::string::npos);

  auto magic = good;
  magic[0] = 'X';
  reseal(magic);
  CHECK(error_of(magic).find("magic") != std::string::npos);

  auto version = good;
  version[8] = 7;
  reseal(version);
  CHECK(error_of(version).find("version") != std::string::npos);

  CHECK_THROWS_AS(load_checkpoint<float>(dir / "missing.ckpt", micro_head()), CheckpointError);
}

TEST_CASE("structural mismatches are rejected") {
  Rng rng(54);
  auto p = HeadParams<float>::make(micro_head(), rng);
  auto stored = to_stored(p, static_cast<const AdamState<float>*>(nullptr));

  HeadConfig wider = micro_head();
  wider.width = 12;
  try {
    from_stored<float>(stored, wider);
    FAIL("expected CheckpointError");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("wrong shape") != std::string::npos);
  }

  auto missing = stored;
  missing.pop_back();
  CHECK_THROWS_WITH_AS(from_stored<float>(missing, micro_head()), doctest::Contains("missing"), CheckpointError);

  auto extra = stored;
  extra.push_back({"stray", {1}, DType::kFloat32, {0}});
  CHECK_THROWS_WITH_AS(from_stored<float>(extra, micro_head()), doctest::Contains("unexpected"), CheckpointError);

  auto dup = stored;
  dup.push_back(stored.front());
  CHECK_THROWS_WITH_AS(from_stored<float>(dup, micro_head()), doctest::Contains("duplicate"), CheckpointError);
}
