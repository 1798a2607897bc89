#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "voxfuse/adam.hpp"
#include "voxfuse/run_config.hpp"
#include "voxfuse/synth.hpp"
#include "voxfuse/training.hpp"

using namespace voxfuse;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  auto p = fs::temp_directory_path() / "voxfuse_training_test";
  fs::create_directories(p);
  return p;
}

template <typename T>
std::vector<Sample<T>> toy_dataset(int count, int views, std::uint64_t seed) {
  std::vector<Sample<T>> out;
  const auto& kinds = all_shape_kinds();
  for (int i = 0; i < count; ++i) {
    out.push_back(synth_generate<T>(kinds[i % kinds.size()], seed + i, views,
                                    32, 16));
  }
  return out;
}

template <typename T>
bool stores_equal(const ParamStore<T>& a, const ParamStore<T>& b) {
  if (a.entries.size() != b.entries.size()) return false;
  for (const auto& [name, t] : a.entries) {
    const auto& u = b.at(name);
    if (t.shape() != u.shape()) return false;
    if (std::memcmp(t.ptr(), u.ptr(), sizeof(T) * t.size()) != 0) return false;
  }
  return true;
}

template <typename T>
TrainConfig<T> tiny_config(std::uint64_t seed, int s1, int s2) {
  TrainConfig<T> tc;
  tc.batch_size = 4;
  tc.stage1_epochs = s1;
  tc.stage2_epochs = s2;
  tc.decay_epoch = 2;
  tc.n_max = 3;
  tc.seed = seed;
  tc.val_every = 0;
  return tc;
}

}  // namespace

TEST_CASE("adam: hand-evaluated first step") {
  ParamStore<double> store;
  auto theta = Tensor<double>::zeros({1});
  theta.set_requires_grad(true);
  theta.grad()[0] = 1.0;
  store.entries.emplace("w.weight", theta);

  AdamState<double> adam(store, {"w.weight"});
  adam.step(store, 0.001);
  // bias correction makes m_hat / sqrt(v_hat) = 1 at step 1
  CHECK(store.at("w.weight").values()[0] ==
        doctest::Approx(-0.001).epsilon(1e-6));
}

TEST_CASE("adam: zero gradient leaves parameters unchanged at step 1") {
  ParamStore<float> store;
  auto theta = Tensor<float>::from_data({3}, {1, 2, 3});
  theta.set_requires_grad(true);
  store.entries.emplace("w.weight", theta);
  AdamState<float> adam(store, {"w.weight"});
  adam.step(store, 0.1f);
  CHECK(store.at("w.weight").values() == std::vector<float>{1, 2, 3});
}

TEST_CASE("adam: missing gradient raises a contract error naming the entry") {
  ParamStore<float> store;
  store.entries.emplace("odd.weight", Tensor<float>::ones({2}).set_requires_grad(true));
  AdamState<float> adam(store, {"odd.weight"});
  store.entries.at("odd.weight").set_requires_grad(false);
  try {
    adam.step(store, 0.1f);
    FAIL("expected ContractError");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("odd.weight") != std::string::npos);
  }
}

TEST_CASE("adam: matches a scalar brute-force trajectory to 1e-12") {
  // independent reimplementation of the update rule
  double m = 0, v = 0, theta = 0.37;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8, lr = 0.01;

  ParamStore<double> store;
  auto t = Tensor<double>::from_data({1}, {0.37});
  t.set_requires_grad(true);
  store.entries.emplace("w.weight", t);
  AdamState<double> adam(store, {"w.weight"});

  Rng rng(99);
  for (int step = 1; step <= 100; ++step) {
    const double g = rng.normal();
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, step));
    const double vhat = v / (1 - std::pow(b2, step));
    theta -= lr * mhat / (std::sqrt(vhat) + eps);

    store.at("w.weight").grad()[0] = g;
    adam.step(store, lr);
    CHECK(std::abs(store.at("w.weight").values()[0] - theta) < 1e-12);
    store.at("w.weight").zero_grad();
  }
}

TEST_CASE("lr_at: base before the threshold, halved at and after it") {
  TrainConfig<double> tc;
  tc.base_lr = 0.001;
  tc.decay_epoch = 150;
  tc.decay_factor = 2;
  CHECK(lr_at(tc, 0) == doctest::Approx(0.001));
  CHECK(lr_at(tc, 149) == doctest::Approx(0.001));
  CHECK(lr_at(tc, 150) == doctest::Approx(0.0005));
  CHECK(lr_at(tc, 400) == doctest::Approx(0.0005));

  tc.decay_factor = 1;
  CHECK(lr_at(tc, 0) == lr_at(tc, 1000));
  CHECK_THROWS_AS(lr_at(tc, -1), ContractError);
}

TEST_CASE("training: deterministic under seed, bitwise") {
  auto cfg = build_config(Variant::Toy, {32, 16, false});
  auto data = toy_dataset<float>(8, 3, 500);

  auto run_once = [&]() {
    TrainRun<float> run(cfg, tiny_config<float>(7, 1, 1));
    run.set_data(data, {});
    run.init_fresh();
    run.run();
    return run.params();
  };
  auto a = run_once();
  auto b = run_once();
  CHECK(stores_equal(a, b));
}

TEST_CASE("training: stage 1 leaves scoring parameters bitwise untouched") {
  auto cfg = build_config(Variant::Toy, {32, 16, false});
  auto data = toy_dataset<float>(8, 3, 600);

  TrainRun<float> run(cfg, tiny_config<float>(11, 2, 0));
  run.set_data(data, {});
  run.init_fresh();
  auto before = run.params();  // handles share buffers; snapshot the values
  std::map<std::string, std::vector<float>> snap;
  for (auto& [n, t] : before.entries) snap[n] = t.values();
  run.run();

  bool nonscorer_changed = false;
  for (auto& [n, t] : run.params().entries) {
    const bool scorer = n.rfind("tscore", 0) == 0;
    if (scorer) {
      CHECK(t.values() == snap[n]);
    } else if (t.values() != snap[n]) {
      nonscorer_changed = true;
    }
  }
  CHECK(nonscorer_changed);
}

TEST_CASE("training: stage 2 updates scoring parameters") {
  auto cfg = build_config(Variant::Toy, {32, 16, false});
  auto data = toy_dataset<float>(8, 3, 700);

  TrainRun<float> run(cfg, tiny_config<float>(13, 1, 2));
  run.set_data(data, {});
  run.init_fresh();
  std::map<std::string, std::vector<float>> snap;
  for (auto& [n, t] : run.params().entries) snap[n] = t.values();
  run.run();

  bool scorer_changed = false;
  for (auto& [n, t] : run.params().entries) {
    if (n.rfind("tscore", 0) == 0 && n.find("running_") == std::string::npos &&
        t.values() != snap[n]) {
      scorer_changed = true;
    }
  }
  CHECK(scorer_changed);
}

TEST_CASE("training: loss decreases on a small run") {
  auto cfg = build_config(Variant::Toy, {32, 16, false});
  auto data = toy_dataset<float>(16, 2, 800);

  TrainRun<float> run(cfg, tiny_config<float>(17, 6, 0));
  run.set_data(data, {});
  run.init_fresh();
  run.run();
  REQUIRE(run.log().size() == 6);
  CHECK(run.log().back().loss < run.log().front().loss);
}

TEST_CASE("checkpoint: save/load round trips parameters bitwise") {
  auto cfg = build_config(Variant::Toy, {32, 16, true});
  auto store = init_params<float>(cfg.all_specs(), 23);
  AdamState<float> adam(store, store.trainable_names());

  CheckpointMeta meta;
  meta.next_epoch = 3;
  meta.stage = 2;
  meta.adam_step = adam.step_count();
  meta.config_hash = 0xabcdef;
  meta.rng_state = Rng(5).state();
  meta.precision = "f32";
  const auto path = temp_dir() / "rt.vxc";
  save_checkpoint(path, meta, store, adam);

  auto loaded = load_checkpoint<float>(path);
  CHECK(loaded.meta.next_epoch == 3);
  CHECK(loaded.meta.stage == 2);
  CHECK(loaded.meta.config_hash == 0xabcdef);
  auto [store2, moments] = split_checkpoint_entries(loaded.entries, cfg.all_specs());
  CHECK(stores_equal(store, store2));
  CHECK(moments.size() == 2 * store.trainable_names().size());
}

TEST_CASE("checkpoint: resume reproduces the uninterrupted run bitwise") {
  auto cfg = build_config(Variant::Toy, {32, 16, false});
  auto data = toy_dataset<float>(8, 3, 900);
  const auto tc = tiny_config<float>(29, 2, 2);

  // uninterrupted
  TrainRun<float> full(cfg, tc);
  full.set_data(data, {});
  full.init_fresh();
  full.run();

  // interrupted after two epochs, then resumed in a fresh run
  const auto ckpt = temp_dir() / "mid.vxc";
  TrainRun<float> first(cfg, tc);
  first.set_data(data, {});
  first.set_config_hash(1234);
  first.init_fresh();
  first.run(2);
  first.save(ckpt);

  TrainRun<float> second(cfg, tc);
  second.set_data(data, {});
  second.set_config_hash(1234);
  second.resume_from(ckpt);
  second.run();

  CHECK(stores_equal(full.params(), second.params()));
}

TEST_CASE("checkpoint: mismatched config hash is refused") {
  auto cfg = build_config(Variant::Toy, {32, 16, false});
  auto data = toy_dataset<float>(4, 2, 950);
  const auto tc = tiny_config<float>(31, 1, 0);

  const auto ckpt = temp_dir() / "hash.vxc";
  TrainRun<float> run(cfg, tc);
  run.set_data(data, {});
  run.set_config_hash(42);
  run.init_fresh();
  run.run();
  run.save(ckpt);

  TrainRun<float> other(cfg, tc);
  other.set_data(data, {});
  other.set_config_hash(43);
  try {
    other.resume_from(ckpt);
    FAIL("expected ArchiveError");
  } catch (const ArchiveError& e) {
    CHECK(e.fault == ArchiveFault::bad_version);
  }
}

TEST_CASE("evaluate: oracle predictor scores IoU 1.0 everywhere") {
  auto data = toy_dataset<double>(10, 5, 1000);
  Predictor<double> oracle = [](const Sample<double>& s, int) {
    return s.gt.to_tensor<double>();
  };
  auto table = evaluate_with(oracle, data, {1, 2, 3, 4, 5, 8 > 5 ? 5 : 8}, 0.3);
  for (const auto& row : table.mean_iou)
    for (double v : row) CHECK(v == 1.0);
  CHECK(table.rows.back() == "overall");
}

TEST_CASE("evaluate: order invariance and view-count validation") {
  auto cfg = build_config(Variant::Toy, {32, 16, false});
  auto store = init_params<float>(cfg.all_specs(), 37);
  auto data = toy_dataset<float>(6, 3, 1100);

  auto t1 = evaluate(cfg, store, data, {1, 3});
  auto shuffled = data;
  std::swap(shuffled[0], shuffled[4]);
  std::swap(shuffled[1], shuffled[5]);
  auto t2 = evaluate(cfg, store, shuffled, {1, 3});
  REQUIRE(t1.rows == t2.rows);
  for (std::size_t r = 0; r < t1.mean_iou.size(); ++r)
    CHECK(t1.mean_iou[r] == t2.mean_iou[r]);

  CHECK_THROWS_AS(evaluate(cfg, store, data, {4}), DataError);

  // pure: a second call gives the identical table
  auto t3 = evaluate(cfg, store, data, {1, 3});
  for (std::size_t r = 0; r < t1.mean_iou.size(); ++r)
    CHECK(t1.mean_iou[r] == t3.mean_iou[r]);
}

TEST_CASE("evaluate: table carries the requested view-count columns") {
  auto data = toy_dataset<double>(4, 5, 1200);
  Predictor<double> oracle = [](const Sample<double>& s, int) {
    return s.gt.to_tensor<double>();
  };
  auto table = evaluate_with(oracle, data, {1, 2, 3, 4, 5}, 0.3);
  CHECK(table.view_counts == std::vector<int>{1, 2, 3, 4, 5});
  const auto text = table.to_text();
  CHECK(text.find("1 view") != std::string::npos);
  CHECK(text.find("5 views") != std::string::npos);
  CHECK(text.find("overall") != std::string::npos);
}

TEST_CASE("run config: parsing, defaults, and unknown-key rejection") {
  nlohmann::json j;
  j["variant"] = "Toy";
  j["stage1_epochs"] = 3;
  j["seed"] = 9;
  auto rc = parse_run_config(j);
  CHECK(rc.stage1_epochs == 3);
  CHECK(rc.batch_size == 8);  // default
  CHECK(rc.threshold == 0.3);

  nlohmann::json bad = j;
  bad["stage_one_epochs"] = 3;
  CHECK_THROWS_AS(parse_run_config(bad), ConfigError);

  nlohmann::json neg = j;
  neg["stage1_epochs"] = -4;
  auto rcneg = parse_run_config(neg);
  CHECK_THROWS_AS(rcneg.train_config<float>(), ConfigError);

  nlohmann::json badp = j;
  badp["precision"] = "f16";
  CHECK_THROWS_AS(parse_run_config(badp), ConfigError);

  // canonical hash is stable and sensitive
  auto h1 = parse_run_config(j).hash();
  auto h2 = parse_run_config(j).hash();
  CHECK(h1 == h2);
  j["seed"] = 10;
  CHECK(parse_run_config(j).hash() != h1);
}
