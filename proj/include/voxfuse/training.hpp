#pragma once

// Two-stage training, checkpointing, and evaluation.
//
// Stage 1 trains encoder + decoder (+ refiner) on single views; the scoring
// network is excluded and, since single-view fusion is the identity, never
// even runs, so its parameters and batchnorm stats stay bitwise untouched.
// Stage 2 trains everything jointly with a per-batch view count drawn
// uniformly from {1..n_max}.
//
// The loss is bce(refined) + lambda * bce(fused) when a refiner exists and
// bce(fused) otherwise. Epoch indices are global across stages and the
// learning rate halves (by decay_factor) from decay_epoch onward.
//
// Training is deterministic under (seed, precision, build): sample order,
// view draws and view counts come from one serializable RNG whose state is
// checkpointed, so resuming reproduces the uninterrupted run bitwise.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxfuse/adam.hpp"
#include "voxfuse/archive.hpp"
#include "voxfuse/dataset.hpp"
#include "voxfuse/model.hpp"
#include "voxfuse/objective.hpp"

namespace voxfuse {

template <Scalar T>
struct TrainConfig {
  int batch_size = 8;
  T base_lr = T(1e-3);
  int decay_epoch = 150;  // global epoch at which lr is divided by decay_factor
  T decay_factor = T(2);
  int stage1_epochs = 250;
  int stage2_epochs = 100;
  int n_max = 5;
  std::uint64_t seed = 0;
  T lambda_fused = T(1);  // weight of the fused-volume loss term
  double threshold = 0.3;
  int val_every = 1;  // epochs between validation passes; 0 disables
};

template <Scalar T>
void validate_train_config(const TrainConfig<T>& tc) {
  if (tc.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (tc.stage1_epochs < 0 || tc.stage2_epochs < 0) {
    throw ConfigError("train: epoch counts must be non-negative");
  }
  if (tc.n_max < 1) throw ConfigError("train: n_max must be >= 1");
  if (!(tc.decay_factor > T(0))) throw ConfigError("train: decay factor must be > 0");
  if (!(tc.base_lr > T(0))) throw ConfigError("train: base_lr must be > 0");
  if (tc.threshold <= 0 || tc.threshold >= 1) {
    throw ConfigError("train: threshold must lie in (0, 1)");
  }
}

template <Scalar T>
T lr_at(const TrainConfig<T>& tc, int epoch) {
  if (epoch < 0) throw ContractError("lr_at: negative epoch");
  return epoch < tc.decay_epoch ? tc.base_lr : tc.base_lr / tc.decay_factor;
}

// --------------------------------------------------------------------------
// Evaluation: mean IoU by (category, view count) plus an overall row that
// averages over all samples. Pure in (params, samples, view_counts, t);
// samples are visited in id order so dataset order cannot matter.

struct EvalTable {
  std::vector<int> view_counts;
  std::vector<std::string> rows;  // sorted categories, then "overall"
  std::vector<std::vector<double>> mean_iou;

  double at(const std::string& row, int views) const {
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r] != row) continue;
      for (std::size_t c = 0; c < view_counts.size(); ++c) {
        if (view_counts[c] == views) return mean_iou[r][c];
      }
    }
    throw ContractError("EvalTable: no cell (" + row + ", " +
                        std::to_string(views) + ")");
  }

  double overall(int views) const { return at("overall", views); }

  std::string to_text() const {
    std::ostringstream os;
    os << "category";
    for (int v : view_counts) os << "\t" << v << (v == 1 ? " view" : " views");
    os << "\n";
    for (std::size_t r = 0; r < rows.size(); ++r) {
      os << rows[r];
      for (double v : mean_iou[r]) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%.4f", v);
        os << "\t" << buf;
      }
      os << "\n";
    }
    return os.str();
  }

  std::string to_tsv() const {
    std::ostringstream os;
    os << "category";
    for (int v : view_counts) os << "\t" << v;
    os << "\n";
    for (std::size_t r = 0; r < rows.size(); ++r) {
      os << rows[r];
      for (double v : mean_iou[r]) {
        char buf[24];
        std::snprintf(buf, sizeof(buf), "%.6f", v);
        os << "\t" << buf;
      }
      os << "\n";
    }
    return os.str();
  }
};

// Prediction seam: maps (sample, view count) to an occupancy-probability
// volume. The model-backed predictor is the production path; tests may
// substitute an oracle.
template <Scalar T>
using Predictor = std::function<Tensor<T>(const Sample<T>&, int)>;

template <Scalar T>
EvalTable evaluate_with(const Predictor<T>& predict,
                        const std::vector<Sample<T>>& samples,
                        const std::vector<int>& view_counts, double threshold) {
  if (samples.empty()) throw ConfigError("evaluate: empty dataset");
  if (view_counts.empty()) throw ConfigError("evaluate: no view counts");
  for (const auto& s : samples) {
    for (int k : view_counts) {
      if (k < 1 || k > static_cast<int>(s.views.size())) {
        throw DataError("evaluate: sample '" + s.id + "' has " +
                        std::to_string(s.views.size()) + " views, need " +
                        std::to_string(k));
      }
    }
  }

  std::vector<const Sample<T>*> order;
  for (const auto& s : samples) order.push_back(&s);
  std::sort(order.begin(), order.end(),
            [](const Sample<T>* a, const Sample<T>* b) { return a->id < b->id; });

  std::map<std::string, std::vector<double>> cat_sum;
  std::map<std::string, int> cat_n;
  std::vector<double> all_sum(view_counts.size(), 0.0);
  for (const Sample<T>* s : order) {
    auto& acc = cat_sum.try_emplace(s->category,
                                    std::vector<double>(view_counts.size(), 0.0))
                    .first->second;
    cat_n[s->category]++;
    for (std::size_t c = 0; c < view_counts.size(); ++c) {
      auto pred = predict(*s, view_counts[c]);
      const double v = iou(pred, s->gt, threshold);
      acc[c] += v;
      all_sum[c] += v;
    }
  }

  EvalTable table;
  table.view_counts = view_counts;
  for (const auto& [cat, sums] : cat_sum) {
    table.rows.push_back(cat);
    std::vector<double> row;
    for (double v : sums) row.push_back(v / cat_n[cat]);
    table.mean_iou.push_back(std::move(row));
  }
  table.rows.push_back("overall");
  std::vector<double> row;
  for (double v : all_sum) row.push_back(v / double(samples.size()));
  table.mean_iou.push_back(std::move(row));
  return table;
}

template <Scalar T>
Predictor<T> model_predictor(const NetworkConfig& cfg, ParamStore<T>& store,
                             FusionKind fusion) {
  return [&cfg, &store, fusion](const Sample<T>& s, int k) {
    std::vector<Tensor<T>> views(s.views.begin(), s.views.begin() + k);
    auto out = model_forward(cfg, store, views, Mode::eval, fusion);
    return final_volume(out);
  };
}

template <Scalar T>
EvalTable evaluate(const NetworkConfig& cfg, ParamStore<T>& store,
                   const std::vector<Sample<T>>& samples,
                   const std::vector<int>& view_counts, double threshold = 0.3,
                   FusionKind fusion = FusionKind::context) {
  return evaluate_with(model_predictor(cfg, store, fusion), samples,
                       view_counts, threshold);
}

// --------------------------------------------------------------------------
// Checkpoints: "VXCK" magic, version, a JSON metadata section, then an
// embedded named-tensor archive holding parameters and optimizer moments.

struct CheckpointMeta {
  int next_epoch = 0;  // global epoch index to execute next
  int stage = 1;
  std::int64_t adam_step = 0;
  std::uint64_t config_hash = 0;
  std::string rng_state;
  std::string precision;  // "f32" or "f64"
  std::string run_config_json;
};

namespace detail {
constexpr char kCkptMagic[4] = {'V', 'X', 'C', 'K'};
constexpr std::uint32_t kCkptVersion = 1;
}  // namespace detail

template <Scalar T>
void save_checkpoint(const std::filesystem::path& path, const CheckpointMeta& meta,
                     const ParamStore<T>& store, const AdamState<T>& adam) {
  nlohmann::json j;
  j["next_epoch"] = meta.next_epoch;
  j["stage"] = meta.stage;
  j["adam_step"] = meta.adam_step;
  j["config_hash"] = meta.config_hash;
  j["rng_state"] = meta.rng_state;
  j["precision"] = meta.precision;
  j["run_config"] = meta.run_config_json;
  const std::string js = j.dump();

  std::map<std::string, Tensor<T>> entries = store.entries;
  for (auto& [name, t] : adam.export_entries()) entries.emplace(name, t);

  std::string out;
  out.append(detail::kCkptMagic, 4);
  detail::put_u32(out, detail::kCkptVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(js.size()));
  out += js;
  out += encode_archive(entries);
  spew_file(path, out);
}

template <Scalar T>
struct LoadedCheckpoint {
  CheckpointMeta meta;
  std::map<std::string, Tensor<T>> entries;  // params + opt.m/opt.v moments
};

// Reads only the metadata header (used to pick the precision before
// instantiating the typed loader).
inline CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path) {
  const std::string blob = slurp_file(path);
  if (blob.size() < 12 || std::memcmp(blob.data(), detail::kCkptMagic, 4) != 0) {
    throw ArchiveError(ArchiveFault::bad_magic, "not a checkpoint file");
  }
  const auto* base = reinterpret_cast<const unsigned char*>(blob.data());
  if (detail::get_u32(base + 4) != detail::kCkptVersion) {
    throw ArchiveError(ArchiveFault::bad_version, "unsupported checkpoint version");
  }
  const std::uint32_t jlen = detail::get_u32(base + 8);
  if (blob.size() < 12 + std::size_t(jlen)) {
    throw ArchiveError(ArchiveFault::truncated, "checkpoint metadata");
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(blob.substr(12, jlen));
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveError(ArchiveFault::corrupt_index,
                       std::string("checkpoint metadata: ") + e.what());
  }
  CheckpointMeta meta;
  meta.next_epoch = j.at("next_epoch").get<int>();
  meta.stage = j.at("stage").get<int>();
  meta.adam_step = j.at("adam_step").get<std::int64_t>();
  meta.config_hash = j.at("config_hash").get<std::uint64_t>();
  meta.rng_state = j.at("rng_state").get<std::string>();
  meta.precision = j.at("precision").get<std::string>();
  meta.run_config_json = j.at("run_config").get<std::string>();
  return meta;
}

template <Scalar T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  const std::string blob = slurp_file(path);
  if (blob.size() < 12 || std::memcmp(blob.data(), detail::kCkptMagic, 4) != 0) {
    throw ArchiveError(ArchiveFault::bad_magic, "not a checkpoint file");
  }
  const auto* base = reinterpret_cast<const unsigned char*>(blob.data());
  if (detail::get_u32(base + 4) != detail::kCkptVersion) {
    throw ArchiveError(ArchiveFault::bad_version, "unsupported checkpoint version");
  }
  const std::uint32_t jlen = detail::get_u32(base + 8);
  if (blob.size() < 12 + std::size_t(jlen)) {
    throw ArchiveError(ArchiveFault::truncated, "checkpoint metadata");
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(blob.substr(12, jlen));
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveError(ArchiveFault::corrupt_index,
                       std::string("checkpoint metadata: ") + e.what());
  }
  LoadedCheckpoint<T> out;
  out.meta.next_epoch = j.at("next_epoch").get<int>();
  out.meta.stage = j.at("stage").get<int>();
  out.meta.adam_step = j.at("adam_step").get<std::int64_t>();
  out.meta.config_hash = j.at("config_hash").get<std::uint64_t>();
  out.meta.rng_state = j.at("rng_state").get<std::string>();
  out.meta.precision = j.at("precision").get<std::string>();
  out.meta.run_config_json = j.at("run_config").get<std::string>();
  out.entries = decode_archive<T>(blob.substr(12 + jlen));
  return out;
}

// Splits checkpoint entries into a validated ParamStore (against specs) and
// optimizer moments.
template <Scalar T>
std::pair<ParamStore<T>, std::map<std::string, Tensor<T>>> split_checkpoint_entries(
    std::map<std::string, Tensor<T>> entries, const std::vector<LayerSpec>& specs) {
  std::map<std::string, Tensor<T>> moments;
  for (auto it = entries.begin(); it != entries.end();) {
    if (it->first.rfind("opt.", 0) == 0) {
      moments.emplace(it->first, it->second);
      it = entries.erase(it);
    } else {
      ++it;
    }
  }
  ParamStore<T> store;
  for (const auto& s : specs) {
    for (const auto& [name, shape] : param_shapes(s)) {
      auto it = entries.find(name);
      if (it == entries.end()) {
        throw ArchiveError(ArchiveFault::missing_entry,
                           "checkpoint missing '" + name + "'");
      }
      if (it->second.shape() != shape) {
        throw ArchiveError(ArchiveFault::shape_mismatch,
                           "checkpoint entry '" + name + "'");
      }
      Tensor<T> t = it->second;
      if (param_trainable(name)) t.set_requires_grad(true);
      store.entries.emplace(name, std::move(t));
      entries.erase(it);
    }
  }
  if (!entries.empty()) {
    throw ArchiveError(ArchiveFault::unknown_name,
                       "checkpoint has unknown entry '" + entries.begin()->first + "'");
  }
  return {std::move(store), std::move(moments)};
}

// --------------------------------------------------------------------------
// The training run.

template <Scalar T>
struct TrainLogEntry {
  int epoch = 0;
  int stage = 0;
  T lr = T(0);
  double loss = 0;
  double val_iou = -1;  // -1 when validation was skipped

  std::string line() const {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "epoch=%d stage=%d lr=%.8g loss=%.8g val_iou=%.6g",
                  epoch, stage, double(lr), loss, val_iou);
    return buf;
  }
};

template <Scalar T>
class TrainRun {
 public:
  TrainRun(NetworkConfig cfg, TrainConfig<T> tc)
      : cfg_(std::move(cfg)), tc_(tc), order_rng_(derive_seed(tc.seed, "order")) {
    validate_train_config(tc_);
  }

  void set_data(std::vector<Sample<T>> train, std::vector<Sample<T>> val) {
    if (train.empty()) throw ConfigError("train: empty training set");
    train_ = std::move(train);
    val_ = std::move(val);
  }

  void set_checkpoint_path(std::filesystem::path p) { ckpt_path_ = std::move(p); }
  void set_log_sink(std::function<void(const std::string&)> sink) {
    sink_ = std::move(sink);
  }
  void set_config_hash(std::uint64_t h) { config_hash_ = h; }
  void set_run_config_json(std::string j) { run_config_json_ = std::move(j); }

  void init_fresh() {
    store_ = init_params<T>(cfg_.all_specs(), derive_seed(tc_.seed, "init"));
    next_epoch_ = 0;
    stage_ = tc_.stage1_epochs > 0 ? 1 : 2;
    adam_ = AdamState<T>(store_, trainable_for_stage(stage_));
  }

  void resume_from(const std::filesystem::path& path) {
    auto loaded = load_checkpoint<T>(path);
    if (config_hash_ != 0 && loaded.meta.config_hash != config_hash_) {
      throw ArchiveError(ArchiveFault::bad_version,
                         "checkpoint was produced under a different run config");
    }
    auto [store, moments] = split_checkpoint_entries(loaded.entries, cfg_.all_specs());
    store_ = std::move(store);
    adam_ = AdamState<T>::restore(moments, loaded.meta.adam_step);
    next_epoch_ = loaded.meta.next_epoch;
    stage_ = loaded.meta.stage;
    order_rng_.set_state(loaded.meta.rng_state);
  }

  // Runs remaining epochs of both stages; max_epochs caps how many epochs
  // this call executes (for interrupt/resume scenarios), -1 means all.
  void run(int max_epochs = -1) {
    const int total = tc_.stage1_epochs + tc_.stage2_epochs;
    int executed = 0;
    for (int e = next_epoch_; e < total; ++e) {
      if (max_epochs >= 0 && executed++ >= max_epochs) break;
      const int stage = e < tc_.stage1_epochs ? 1 : 2;
      if (stage != stage_) {
        stage_ = stage;
        adam_ = AdamState<T>(store_, trainable_for_stage(stage));  // fresh moments
      }
      run_epoch(e, stage);
      next_epoch_ = e + 1;
      if (!ckpt_path_.empty()) save(ckpt_path_);
    }
  }

  void save(const std::filesystem::path& path) const {
    CheckpointMeta meta;
    meta.next_epoch = next_epoch_;
    meta.stage = stage_;
    meta.adam_step = adam_.step_count();
    meta.config_hash = config_hash_;
    meta.rng_state = order_rng_.state();
    meta.precision = sizeof(T) == 4 ? "f32" : "f64";
    meta.run_config_json = run_config_json_;
    save_checkpoint(path, meta, store_, adam_);
  }

  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  const NetworkConfig& network() const { return cfg_; }
  const std::vector<TrainLogEntry<T>>& log() const { return log_; }

 private:
  std::vector<std::string> trainable_for_stage(int stage) const {
    std::vector<std::string> names = store_.trainable_names();
    if (stage == 1) {
      std::set<std::string> scorer_layers;
      for (const auto& s : cfg_.scorer) scorer_layers.insert(s.name);
      std::vector<std::string> kept;
      for (auto& n : names) {
        const std::string layer = n.substr(0, n.rfind('.'));
        if (!scorer_layers.count(layer)) kept.push_back(n);
      }
      return kept;
    }
    return names;
  }

  void run_epoch(int epoch, int stage) {
    const T lr = lr_at(tc_, epoch);
    const auto trainable = trainable_for_stage(stage);

    std::vector<int> order(train_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = int(i);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[order_rng_.uniform_int(0, std::int64_t(i) - 1)]);
    }

    double loss_sum = 0;
    int loss_n = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += tc_.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + tc_.batch_size);
      const int bsize = int(b1 - b0);
      int nviews = 1;
      if (stage == 2) nviews = int(order_rng_.uniform_int(1, tc_.n_max));

      for (const auto& name : trainable) store_.at(name).zero_grad();

      for (std::size_t bi = b0; bi < b1; ++bi) {
        const Sample<T>& s = train_[order[bi]];
        const int avail = int(s.views.size());
        const int k = std::min(nviews, avail);
        // draw k distinct view indices
        std::vector<int> pool(avail);
        for (int i = 0; i < avail; ++i) pool[i] = i;
        std::vector<Tensor<T>> views;
        for (int i = 0; i < k; ++i) {
          const int j = int(order_rng_.uniform_int(i, avail - 1));
          std::swap(pool[i], pool[j]);
          views.push_back(s.views[pool[i]]);
        }

        Tape<T> tape;
        typename Tape<T>::Scope scope(tape);
        auto out = model_forward(cfg_, store_, views, Mode::train,
                                 FusionKind::context);
        Tensor<T> loss = bce_loss(out.fused, s.gt);
        if (out.refined) {
          loss = add(bce_loss(*out.refined, s.gt),
                     mul_scalar(loss, tc_.lambda_fused));
        }
        loss_sum += double(loss.item());
        ++loss_n;
        Tensor<T> scaled = mul_scalar(loss, T(1) / T(bsize));
        tape.backward(scaled);
      }
      adam_.step(store_, lr);
    }

    TrainLogEntry<T> entry;
    entry.epoch = epoch;
    entry.stage = stage;
    entry.lr = lr;
    entry.loss = loss_n ? loss_sum / loss_n : 0.0;
    if (!val_.empty() && tc_.val_every > 0 && (epoch + 1) % tc_.val_every == 0) {
      entry.val_iou =
          evaluate(cfg_, store_, val_, {1}, tc_.threshold).overall(1);
    }
    log_.push_back(entry);
    if (sink_) sink_(entry.line());
  }

  NetworkConfig cfg_;
  TrainConfig<T> tc_;
  ParamStore<T> store_;
  AdamState<T> adam_;
  Rng order_rng_;
  std::vector<Sample<T>> train_, val_;
  std::vector<TrainLogEntry<T>> log_;
  std::filesystem::path ckpt_path_;
  std::function<void(const std::string&)> sink_;
  std::uint64_t config_hash_ = 0;
  std::string run_config_json_;
  int next_epoch_ = 0;
  int stage_ = 1;
};

// Spec-level stage entry points: each runs exactly one stage of the
// procedure on an existing store.
template <Scalar T>
void train_stage1(const NetworkConfig& cfg, ParamStore<T>& store,
                  std::vector<Sample<T>> train, std::vector<Sample<T>> val,
                  TrainConfig<T> tc,
                  std::function<void(const std::string&)> sink = {}) {
  tc.stage2_epochs = 0;
  TrainRun<T> run(cfg, tc);
  run.set_data(std::move(train), std::move(val));
  if (sink) run.set_log_sink(std::move(sink));
  run.init_fresh();
  run.params() = store;
  run.run();
  store = run.params();
}

template <Scalar T>
void train_stage2(const NetworkConfig& cfg, ParamStore<T>& store,
                  std::vector<Sample<T>> train, std::vector<Sample<T>> val,
                  TrainConfig<T> tc,
                  std::function<void(const std::string&)> sink = {}) {
  tc.stage1_epochs = 0;
  TrainRun<T> run(cfg, tc);
  run.set_data(std::move(train), std::move(val));
  if (sink) run.set_log_sink(std::move(sink));
  run.init_fresh();
  run.params() = store;
  run.run();
  store = run.params();
}

}  // namespace voxfuse
