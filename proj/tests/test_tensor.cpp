#include <doctest.h>

#include <cstring>

#include "voxfuse/ops.hpp"
#include "voxfuse/tensor.hpp"

using namespace voxfuse;

TEST_CASE("fills: zeros, constant, ones") {
  auto z = Tensor<float>::zeros({2, 3});
  CHECK(z.size() == 6);
  for (float v : z.values()) CHECK(v == 0.0f);

  auto c = Tensor<double>::full({1}, 0.3);
  CHECK(c.values()[0] == doctest::Approx(0.3));

  auto o = Tensor<float>::ones({4});
  for (float v : o.values()) CHECK(v == 1.0f);
}

TEST_CASE("fills: he_normal is deterministic and scaled") {
  auto a = Tensor<float>::he_normal({64, 3, 3, 3}, 7);
  auto b = Tensor<float>::he_normal({64, 3, 3, 3}, 7);
  CHECK(std::memcmp(a.ptr(), b.ptr(), sizeof(float) * a.size()) == 0);

  auto c = Tensor<float>::he_normal({64, 3, 3, 3}, 8);
  CHECK(std::memcmp(a.ptr(), c.ptr(), sizeof(float) * a.size()) != 0);

  // stddev should be near sqrt(2 / fan_in), fan_in = 3*27 = 81
  double acc = 0.0;
  for (float v : a.values()) acc += double(v) * v;
  const double sd = std::sqrt(acc / double(a.size()));
  CHECK(sd == doctest::Approx(std::sqrt(2.0 / 81.0)).epsilon(0.1));
}

TEST_CASE("shape validation rejects non-positive extents") {
  CHECK_THROWS_AS(Tensor<float>::zeros({0, 2}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>::zeros({3, -1}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>::zeros({}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>::from_data({2, 2}, {1.0f, 2.0f}), ShapeError);
}

TEST_CASE("elementwise arithmetic") {
  auto a = Tensor<float>::from_data({2}, {1, 2});
  auto b = Tensor<float>::from_data({2}, {3, 4});
  auto s = add(a, b);
  CHECK(s.values() == std::vector<float>{4, 6});

  auto d = sub(b, a);
  CHECK(d.values() == std::vector<float>{2, 2});

  auto m = mul(Tensor<float>::from_data({2}, {2, 3}),
               Tensor<float>::from_data({2}, {4, 5}));
  CHECK(m.values() == std::vector<float>{8, 15});

  auto zero = mul_scalar(b, 0.0f);
  CHECK(zero.values() == std::vector<float>{0, 0});

  auto shifted = add_scalar(a, 10.0f);
  CHECK(shifted.values() == std::vector<float>{11, 12});

  auto bad = Tensor<float>::zeros({3});
  CHECK_THROWS_AS(add(a, bad), ShapeError);
  CHECK_THROWS_AS(mul(a, bad), ShapeError);
}

TEST_CASE("activations") {
  auto x = Tensor<float>::from_data({2}, {-1, 2});
  CHECK(relu(x).values() == std::vector<float>{0, 2});

  auto s = sigmoid(Tensor<float>::from_data({1}, {0}));
  CHECK(s.values()[0] == doctest::Approx(0.5));

  auto l = leaky_relu(Tensor<double>::from_data({1}, {-5.0}), 0.2);
  CHECK(l.values()[0] == doctest::Approx(-1.0));

  auto e = elu(Tensor<double>::from_data({2}, {-1.0, 3.0}));
  CHECK(e.values()[0] == doctest::Approx(std::expm1(-1.0)));
  CHECK(e.values()[1] == doctest::Approx(3.0));

  // sigmoid output strictly inside (0,1), even for large magnitudes
  auto w = sigmoid(Tensor<float>::from_data({2}, {-40.0f, 40.0f}));
  CHECK(w.values()[0] > 0.0f);
  CHECK(w.values()[1] < 1.0f);
}

TEST_CASE("matmul") {
  auto eye = Tensor<float>::from_data({2, 2}, {1, 0, 0, 1});
  auto m = Tensor<float>::from_data({2, 2}, {1, 2, 3, 4});
  CHECK(matmul(eye, m).values() == m.values());

  auto a = Tensor<float>::from_data({1, 2}, {1, 2});
  auto b = Tensor<float>::from_data({2, 1}, {3, 4});
  CHECK(matmul(a, b).values() == std::vector<float>{11});

  CHECK_THROWS_AS(matmul(a, Tensor<float>::zeros({3, 1})), ShapeError);
}

TEST_CASE("reductions") {
  auto x = Tensor<double>::from_data({4}, {1, 2, 3, 4});
  CHECK(sum(x).item() == doctest::Approx(10.0));
  CHECK(mean(x).item() == doctest::Approx(2.5));
}

TEST_CASE("reshape and concat") {
  auto x = Tensor<float>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto r = reshape(x, {3, 2});
  CHECK(r.shape() == std::vector<int>{3, 2});
  CHECK(r.values() == x.values());
  CHECK_THROWS_AS(reshape(x, {4, 2}), ShapeError);

  auto a = Tensor<float>::full({1, 2, 2, 2, 2}, 1.0f);
  auto b = Tensor<float>::full({1, 1, 2, 2, 2}, 2.0f);
  auto cat = concat_channels(std::vector<Tensor<float>>{a, b});
  CHECK(cat.shape() == std::vector<int>{1, 3, 2, 2, 2});
  CHECK(cat.values()[0] == 1.0f);
  CHECK(cat.values()[16] == 2.0f);

  // concat of a single tensor is the identity
  auto one = concat_channels(std::vector<Tensor<float>>{b});
  CHECK(one.values() == b.values());

  auto bad = Tensor<float>::full({1, 1, 3, 2, 2}, 0.0f);
  CHECK_THROWS_AS(concat_channels(std::vector<Tensor<float>>{a, bad}), ShapeError);
  CHECK_THROWS_AS(concat_channels(std::vector<Tensor<float>>{}), ContractError);
}

TEST_CASE("concat then split round-trips") {
  Rng rng(11);
  auto a = Tensor<float>::zeros({1, 8, 4, 4, 4});
  auto b = Tensor<float>::zeros({1, 1, 4, 4, 4});
  for (auto& v : a.values()) v = float(rng.normal());
  for (auto& v : b.values()) v = float(rng.normal());
  auto cat = concat_channels(std::vector<Tensor<float>>{a, b});
  CHECK(cat.extent(1) == 9);
  // split back at channel 8 by slicing the flat buffer
  const auto& cv = cat.values();
  std::vector<float> first(cv.begin(), cv.begin() + a.size());
  std::vector<float> second(cv.begin() + a.size(), cv.end());
  CHECK(first == a.values());
  CHECK(second == b.values());
}

TEST_CASE("determinism: identical inputs give bitwise identical op outputs") {
  Rng rng(3);
  auto x = Tensor<float>::zeros({2, 3, 8, 8});
  for (auto& v : x.values()) v = float(rng.normal());
  auto w = Tensor<float>::he_normal({4, 3, 3, 3}, 5);
  auto y1 = conv2d(x, w, std::nullopt, 1, 1);
  auto y2 = conv2d(x, w, std::nullopt, 1, 1);
  CHECK(std::memcmp(y1.ptr(), y2.ptr(), sizeof(float) * y1.size()) == 0);
  for (float v : y1.values()) CHECK(std::isfinite(v));
}
