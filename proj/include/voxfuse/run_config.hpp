#pragma once

// Run configuration file (JSON). Unknown keys are rejected; all defaults
// live here and are documented in the README. The canonical re-serialized
// form (defaults filled, keys sorted) is hashed into checkpoints so a resume
// against a different configuration is refused.

#include <filesystem>
#include <string>

#include <json.hpp>

#include "voxfuse/archive.hpp"
#include "voxfuse/model.hpp"
#include "voxfuse/training.hpp"

namespace voxfuse {

struct RunConfig {
  std::string variant = "Toy";
  int toy_vox_res = 32;
  bool toy_refiner = false;
  std::string data;  // manifest path (required for training)
  std::string out_dir = "out";
  std::string precision = "f32";
  double val_fraction = 0.15;
  // training fields (mirrors TrainConfig)
  int batch_size = 8;
  double base_lr = 1e-3;
  int decay_epoch = 150;
  double decay_factor = 2.0;
  int stage1_epochs = 250;
  int stage2_epochs = 100;
  int n_max = 5;
  std::uint64_t seed = 0;
  double lambda_fused = 1.0;
  double threshold = 0.3;
  int val_every = 1;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["variant"] = variant;
    j["toy_vox_res"] = toy_vox_res;
    j["toy_refiner"] = toy_refiner;
    j["data"] = data;
    j["out_dir"] = out_dir;
    j["precision"] = precision;
    j["val_fraction"] = val_fraction;
    j["batch_size"] = batch_size;
    j["base_lr"] = base_lr;
    j["decay_epoch"] = decay_epoch;
    j["decay_factor"] = decay_factor;
    j["stage1_epochs"] = stage1_epochs;
    j["stage2_epochs"] = stage2_epochs;
    j["n_max"] = n_max;
    j["seed"] = seed;
    j["lambda_fused"] = lambda_fused;
    j["threshold"] = threshold;
    j["val_every"] = val_every;
    return j;
  }

  std::uint64_t hash() const { return fnv1a64(to_json().dump()); }

  NetworkConfig network() const {
    const Variant v = parse_variant(variant);
    if (v == Variant::Toy) {
      return build_config(v, ToyOptions{32, toy_vox_res, toy_refiner});
    }
    return build_config(v);
  }

  template <Scalar T>
  TrainConfig<T> train_config() const {
    TrainConfig<T> tc;
    tc.batch_size = batch_size;
    tc.base_lr = static_cast<T>(base_lr);
    tc.decay_epoch = decay_epoch;
    tc.decay_factor = static_cast<T>(decay_factor);
    tc.stage1_epochs = stage1_epochs;
    tc.stage2_epochs = stage2_epochs;
    tc.n_max = n_max;
    tc.seed = seed;
    tc.lambda_fused = static_cast<T>(lambda_fused);
    tc.threshold = threshold;
    tc.val_every = val_every;
    validate_train_config(tc);
    return tc;
  }
};

inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig rc;
  static const std::set<std::string> known = {
      "variant", "toy_vox_res", "toy_refiner", "data", "out_dir", "precision",
      "val_fraction", "batch_size", "base_lr", "decay_epoch", "decay_factor",
      "stage1_epochs", "stage2_epochs", "n_max", "seed", "lambda_fused",
      "threshold", "val_every"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) {
      throw ConfigError("config: unknown key '" + it.key() + "'");
    }
  }
  try {
    rc.variant = j.value("variant", rc.variant);
    rc.toy_vox_res = j.value("toy_vox_res", rc.toy_vox_res);
    rc.toy_refiner = j.value("toy_refiner", rc.toy_refiner);
    rc.data = j.value("data", rc.data);
    rc.out_dir = j.value("out_dir", rc.out_dir);
    rc.precision = j.value("precision", rc.precision);
    rc.val_fraction = j.value("val_fraction", rc.val_fraction);
    rc.batch_size = j.value("batch_size", rc.batch_size);
    rc.base_lr = j.value("base_lr", rc.base_lr);
    rc.decay_epoch = j.value("decay_epoch", rc.decay_epoch);
    rc.decay_factor = j.value("decay_factor", rc.decay_factor);
    rc.stage1_epochs = j.value("stage1_epochs", rc.stage1_epochs);
    rc.stage2_epochs = j.value("stage2_epochs", rc.stage2_epochs);
    rc.n_max = j.value("n_max", rc.n_max);
    rc.seed = j.value("seed", rc.seed);
    rc.lambda_fused = j.value("lambda_fused", rc.lambda_fused);
    rc.threshold = j.value("threshold", rc.threshold);
    rc.val_every = j.value("val_every", rc.val_every);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  (void)parse_variant(rc.variant);
  if (rc.precision != "f32" && rc.precision != "f64") {
    throw ConfigError("config: precision must be f32 or f64");
  }
  if (rc.val_fraction < 0.0 || rc.val_fraction >= 1.0) {
    throw ConfigError("config: val_fraction must lie in [0, 1)");
  }
  return rc;
}

inline RunConfig read_run_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(slurp_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: cannot parse '" + path.string() + "': " + e.what());
  }
  return parse_run_config(j);
}

}  // namespace voxfuse
