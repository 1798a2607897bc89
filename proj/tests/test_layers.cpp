#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>

#include "voxfuse/archive.hpp"
#include "voxfuse/layers.hpp"

using namespace voxfuse;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  auto p = fs::temp_directory_path() / "voxfuse_layers_test";
  fs::create_directories(p);
  return p;
}

std::vector<LayerSpec> small_specs() {
  return {
      LayerSpec::conv3d("block1", 9, 16, 3, 1, 1),
      LayerSpec::batchnorm("block1_bn", 16),
      LayerSpec::activation("block1_act", Act::leaky_relu, 0.2),
      LayerSpec::conv3d("head", 16, 1, 1, 1, 0, /*bias=*/true),
  };
}

}  // namespace

TEST_CASE("init_params: deterministic and role-correct") {
  auto specs = small_specs();
  auto a = init_params<float>(specs, 42);
  auto b = init_params<float>(specs, 42);
  REQUIRE(a.entries.size() == b.entries.size());
  for (const auto& [name, t] : a.entries) {
    const auto& u = b.at(name);
    CHECK(std::memcmp(t.ptr(), u.ptr(), sizeof(float) * t.size()) == 0);
  }

  for (float v : a.at("block1_bn.gamma").values()) CHECK(v == 1.0f);
  for (float v : a.at("block1_bn.beta").values()) CHECK(v == 0.0f);
  for (float v : a.at("block1_bn.running_mean").values()) CHECK(v == 0.0f);
  for (float v : a.at("block1_bn.running_var").values()) CHECK(v == 1.0f);
  for (float v : a.at("head.bias").values()) CHECK(v == 0.0f);

  // weight init does not depend on list order
  auto rev = specs;
  std::reverse(rev.begin(), rev.end());
  auto c = init_params<float>(rev, 42);
  CHECK(std::memcmp(a.at("block1.weight").ptr(), c.at("block1.weight").ptr(),
                    sizeof(float) * a.at("block1.weight").size()) == 0);
}

TEST_CASE("init_params: duplicate names rejected") {
  std::vector<LayerSpec> dup = {LayerSpec::conv3d("x", 1, 2, 3),
                                LayerSpec::conv3d("x", 1, 2, 3)};
  CHECK_THROWS_AS(init_params<float>(dup, 1), ConfigError);
}

TEST_CASE("param shapes: conv3d(in=9,out=16,k=3) weight is [16,9,3,3,3]") {
  auto shapes = param_shapes(LayerSpec::conv3d("s", 9, 16, 3, 1, 1));
  REQUIRE(shapes.size() == 1);
  CHECK(shapes[0].second == std::vector<int>{16, 9, 3, 3, 3});

  auto tshapes = param_shapes(LayerSpec::conv_transpose3d("t", 128, 64, 4, 2, 1));
  CHECK(tshapes[0].second == std::vector<int>{128, 64, 4, 4, 4});
}

TEST_CASE("param_count: hand-counted values") {
  // conv3d 1->8 k3 with bias: 8*1*27 + 8 = 224
  CHECK(param_count({LayerSpec::conv3d("c", 1, 8, 3, 1, 1, true)}) == 224);
  // fully connected 2048 -> 8192 with bias
  CHECK(param_count({LayerSpec::fully_connected("fc", 2048, 8192)}) == 16785408);
  // batchnorm counts gamma+beta only (running stats excluded)
  CHECK(param_count({LayerSpec::batchnorm("bn", 32)}) == 64);
  // pooling and activations carry nothing
  CHECK(param_count({LayerSpec::maxpool3d("p", 2),
                     LayerSpec::activation("a", Act::relu)}) == 0);
}

TEST_CASE("param_count: additive and order-invariant") {
  auto specs = small_specs();
  std::int64_t total = param_count(specs);
  std::int64_t sum = 0;
  for (const auto& s : specs) sum += param_count({s});
  CHECK(total == sum);
  auto rev = specs;
  std::reverse(rev.begin(), rev.end());
  CHECK(param_count(rev) == total);
}

TEST_CASE("layer_forward: dispatch and shape annotations") {
  auto specs = small_specs();
  auto store = init_params<float>(specs, 7);

  auto x = Tensor<float>::ones({2, 9, 8, 8, 8});
  auto y = forward_chain(specs, store, x, Mode::eval);
  CHECK(y.shape() == std::vector<int>{2, 1, 8, 8, 8});

  auto act = LayerSpec::activation("a", Act::relu);
  auto v = Tensor<float>::from_data({2}, {-1, 1});
  CHECK(layer_forward(act, store, v, Mode::eval).values() ==
        std::vector<float>{0, 1});

  auto pool = LayerSpec::maxpool3d("p", 2);
  auto cube = Tensor<float>::ones({1, 1, 32, 32, 32});
  CHECK(layer_forward(pool, store, cube, Mode::eval).shape() ==
        std::vector<int>{1, 1, 16, 16, 16});

  // shape failures carry the layer name
  auto bad = Tensor<float>::ones({2, 4, 8, 8, 8});
  try {
    forward_chain(specs, store, bad, Mode::eval);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("block1") != std::string::npos);
  }
}

TEST_CASE("layer_forward: eval is side-effect free; train touches only bn stats") {
  auto specs = small_specs();
  auto store = init_params<float>(specs, 7);
  std::map<std::string, std::vector<float>> snap;
  for (auto& [n, t] : store.entries) snap[n] = t.values();

  auto x = Tensor<float>::he_normal({2, 9, 4, 4, 4}, 99);
  (void)forward_chain(specs, store, x, Mode::eval);
  for (auto& [n, t] : store.entries) CHECK(t.values() == snap[n]);

  (void)forward_chain(specs, store, x, Mode::train);
  for (auto& [n, t] : store.entries) {
    const bool is_stat = n.find("running_") != std::string::npos;
    if (is_stat) {
      CHECK(t.values() != snap[n]);
    } else {
      CHECK(t.values() == snap[n]);
    }
  }
}

TEST_CASE("archive: save/load round trip is bitwise exact") {
  auto specs = small_specs();
  auto store = init_params<double>(specs, 1234);
  const auto path = temp_dir() / "roundtrip.vxa";
  save_params(store, path);
  auto loaded = load_params<double>(path, specs);
  REQUIRE(loaded.entries.size() == store.entries.size());
  for (const auto& [name, t] : store.entries) {
    const auto& u = loaded.at(name);
    REQUIRE(u.shape() == t.shape());
    CHECK(std::memcmp(t.ptr(), u.ptr(), sizeof(double) * t.size()) == 0);
  }
  // byte-identical re-encode
  CHECK(encode_archive(store.entries) == encode_archive(loaded.entries));
}

TEST_CASE("archive: negative cases are distinct, named faults") {
  auto specs = small_specs();
  auto store = init_params<float>(specs, 5);
  const auto dir = temp_dir();

  SUBCASE("missing entry names the layer") {
    auto entries = store.entries;
    entries.erase("head.weight");
    write_archive(dir / "missing.vxa", entries);
    try {
      load_params<float>(dir / "missing.vxa", specs);
      FAIL("expected ArchiveError");
    } catch (const ArchiveError& e) {
      CHECK(e.fault == ArchiveFault::missing_entry);
      CHECK(std::string(e.what()).find("head.weight") != std::string::npos);
    }
  }

  SUBCASE("unknown extra tensor is rejected") {
    auto entries = store.entries;
    entries.emplace("rogue.weight", Tensor<float>::ones({2, 2}));
    write_archive(dir / "extra.vxa", entries);
    try {
      load_params<float>(dir / "extra.vxa", specs);
      FAIL("expected ArchiveError");
    } catch (const ArchiveError& e) {
      CHECK(e.fault == ArchiveFault::unknown_name);
    }
  }

  SUBCASE("shape mismatch is reported") {
    auto entries = store.entries;
    entries.at("head.bias") = Tensor<float>::ones({3});
    write_archive(dir / "shape.vxa", entries);
    try {
      load_params<float>(dir / "shape.vxa", specs);
      FAIL("expected ArchiveError");
    } catch (const ArchiveError& e) {
      CHECK(e.fault == ArchiveFault::shape_mismatch);
    }
  }

  SUBCASE("bad magic") {
    std::string blob = encode_archive(store.entries);
    blob[0] = 'X';
    try {
      decode_archive<float>(blob);
      FAIL("expected ArchiveError");
    } catch (const ArchiveError& e) {
      CHECK(e.fault == ArchiveFault::bad_magic);
    }
  }

  SUBCASE("bad version") {
    std::string blob = encode_archive(store.entries);
    blob[4] = 99;
    try {
      decode_archive<float>(blob);
      FAIL("expected ArchiveError");
    } catch (const ArchiveError& e) {
      CHECK(e.fault == ArchiveFault::bad_version);
    }
  }

  SUBCASE("truncation") {
    std::string blob = encode_archive(store.entries);
    blob.resize(blob.size() / 2);
    try {
      decode_archive<float>(blob);
      FAIL("expected ArchiveError");
    } catch (const ArchiveError& e) {
      CHECK(e.fault == ArchiveFault::truncated);
    }
  }

  SUBCASE("flipped payload byte fails the checksum") {
    std::string blob = encode_archive(store.entries);
    // flip a byte well inside the first weight buffer
    const std::size_t payload = blob.find('\n') + 200;
    blob[payload] ^= 0x01;
    try {
      decode_archive<float>(blob);
      FAIL("expected ArchiveError");
    } catch (const ArchiveError& e) {
      CHECK(e.fault == ArchiveFault::checksum_mismatch);
    }
  }

  SUBCASE("dtype mismatch") {
    write_archive(dir / "f32.vxa", store.entries);
    try {
      read_archive<double>(dir / "f32.vxa");
      FAIL("expected ArchiveError");
    } catch (const ArchiveError& e) {
      CHECK(e.fault == ArchiveFault::dtype_mismatch);
    }
  }
}
