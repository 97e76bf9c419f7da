#include "helpers.hpp"

#include <rgm/checkpoint.hpp>

#include <doctest.h>

#include <cstring>
#include <filesystem>

using namespace rgm;
using testing_support::random_tensor;

namespace {

ParameterSet sample_set(std::uint64_t seed) {
  Rng rng(seed, Stream::Test);
  ParameterSet p;
  p.add("a.weight", random_tensor(3, 2, rng));
  p.add("a.bias", random_tensor(1, 2, rng));
  p.add("scalar", random_tensor(1, 1, rng));
  return p;
}

}  // namespace

TEST_CASE("encode then decode reproduces names, shapes and bits") {
  const ParameterSet p = sample_set(1);
  const auto flat = flatten_groups({{"net", &p}});
  const auto back = decode_checkpoint(encode_checkpoint(flat));
  REQUIRE(back.size() == flat.size());
  for (std::size_t i = 0; i < flat.size(); ++i) {
    CHECK(back[i].name == flat[i].name);
    CHECK(back[i].value.rows() == flat[i].value.rows());
    CHECK(back[i].value.cols() == flat[i].value.cols());
    CHECK(std::memcmp(back[i].value.data(), flat[i].value.data(), sizeof(double) * flat[i].value.size()) == 0);
  }
}

TEST_CASE("byte layout is little-endian with the documented header") {
  ParameterSet p;
  p.add("x", Tensord::Constant(1, 1, 1.0));
  const std::string bytes = encode_checkpoint(flatten_groups({{"g", &p}}));
  CHECK(bytes.substr(0, 8) == std::string("RGMCKPT\0", 8));
  CHECK(static_cast<unsigned char>(bytes[8]) == 1);  // version, low byte first
  CHECK(static_cast<unsigned char>(bytes[12]) == 1);  // one parameter
  CHECK(static_cast<unsigned char>(bytes[16]) == 3);  // name length of "g/x"
  CHECK(bytes.substr(20, 3) == "g/x");
  // 1.0 is 0x3FF0000000000000; little-endian puts 0xF0 0x3F last
  CHECK(static_cast<unsigned char>(bytes[bytes.size() - 1]) == 0x3F);
  CHECK(static_cast<unsigned char>(bytes[bytes.size() - 2]) == 0xF0);
  CHECK(bytes.size() == 8 + 4 + 4 + 4 + 3 + 4 + 8 + 8 + 8);
}

TEST_CASE("corrupted payloads are rejected") {
  const ParameterSet p = sample_set(2);
  const std::string good = encode_checkpoint(flatten_groups({{"net", &p}}));
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad_magic), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint(good.substr(0, good.size() - 3)), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint(good + "x"), CheckpointError);
  std::string bad_version = good;
  bad_version[8] = 7;
  CHECK_THROWS_AS(decode_checkpoint(bad_version), CheckpointError);
}

TEST_CASE("files round-trip and groups restore independently") {
  const auto dir = std::filesystem::temp_directory_path() / "rgm_checkpoint_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "net.ckpt";
  const ParameterSet a = sample_set(3);
  const ParameterSet b = sample_set(4);
  save_checkpoint(path, {{"first", &a}, {"second", &b}});
  const auto loaded = load_checkpoint(path);
  CHECK(has_group(loaded, "first"));
  CHECK(has_group(loaded, "second"));
  CHECK_FALSE(has_group(loaded, "third"));

  ParameterSet target = sample_set(5);
  restore_group(target, "second", loaded);
  for (std::size_t i = 0; i < target.size(); ++i) CHECK(target[i].value == b[i].value);
  std::filesystem::remove_all(dir);
}

TEST_CASE("restoring into a different shape or a missing name fails") {
  const ParameterSet a = sample_set(6);
  const auto loaded = flatten_groups({{"net", &a}});
  ParameterSet wrong;
  wrong.add("a.weight", Tensord::Zero(2, 2));
  CHECK_THROWS_AS(restore_group(wrong, "net", loaded), ShapeError);
  ParameterSet missing;
  missing.add("other", Tensord::Zero(1, 1));
  CHECK_THROWS_AS(restore_group(missing, "net", loaded), CheckpointError);
}

TEST_CASE("loading a missing file reports the path") {
  try {
    (void)load_checkpoint("/nonexistent/dir/model.ckpt");
    FAIL("expected CheckpointError");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("/nonexistent/dir/model.ckpt") != std::string::npos);
  }
}
