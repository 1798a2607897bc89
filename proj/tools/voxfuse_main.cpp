// voxfuse command-line tool: dataset generation, two-stage training,
// evaluation, reconstruction, score-map inspection, parameter counting, and
// gradient checking.
//
// Exit codes: 0 success, 2 usage/configuration error, 3 data or I/O error.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "voxfuse/voxfuse.hpp"

namespace fs = std::filesystem;
using namespace voxfuse;

namespace {

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<int> parse_view_counts(const std::string& s) {
  std::vector<int> out;
  for (const auto& tok : split_commas(s)) {
    try {
      out.push_back(std::stoi(tok));
    } catch (...) {
      throw ConfigError("bad view count '" + tok + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty view-count list");
  return out;
}

// Loads the checkpoint's stored run configuration and rebuilds its network.
struct CheckpointContext {
  CheckpointMeta meta;
  RunConfig rc;
  NetworkConfig cfg;
};

CheckpointContext checkpoint_context(const fs::path& ckpt) {
  CheckpointContext c;
  c.meta = read_checkpoint_meta(ckpt);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(c.meta.run_config_json);
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveError(ArchiveFault::corrupt_index,
                       std::string("checkpoint run config: ") + e.what());
  }
  c.rc = parse_run_config(j);
  c.cfg = c.rc.network();
  return c;
}

template <Scalar T>
ParamStore<T> checkpoint_params(const fs::path& ckpt, const NetworkConfig& cfg) {
  auto loaded = load_checkpoint<T>(ckpt);
  auto [store, moments] = split_checkpoint_entries(loaded.entries, cfg.all_specs());
  (void)moments;
  return store;
}

// Sorts view images into a content-derived canonical order so reconstruction
// output is byte-identical under input permutations.
template <Scalar T>
std::vector<Tensor<T>> canonical_views(std::vector<Tensor<T>> views) {
  std::vector<std::pair<std::uint64_t, int>> keys;
  for (std::size_t i = 0; i < views.size(); ++i) {
    keys.emplace_back(fnv1a64(views[i].ptr(), sizeof(T) * views[i].size()),
                      int(i));
  }
  std::sort(keys.begin(), keys.end());
  std::vector<Tensor<T>> out;
  for (const auto& [h, i] : keys) out.push_back(views[i]);
  return out;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& out, int count, const std::string& kinds_csv,
                 int views, int res, std::uint64_t seed, int side, bool jitter) {
  std::vector<ShapeKind> kinds;
  for (const auto& name : split_commas(kinds_csv)) {
    kinds.push_back(parse_shape_kind(name));
  }
  if (kinds.empty()) throw ConfigError("gen-data: no shape kinds given");
  if (count < 1) throw ConfigError("gen-data: count must be >= 1");

  const fs::path root(out);
  std::error_code ec;
  fs::create_directories(root / "voxels", ec);
  fs::create_directories(root / "views", ec);
  if (!fs::exists(root / "voxels") || !fs::exists(root / "views")) {
    throw IoError("gen-data: cannot create output directory '" + out + "'");
  }

  DatasetManifest manifest;
  manifest.root = root;
  for (int i = 0; i < count; ++i) {
    const ShapeKind kind = kinds[i % kinds.size()];
    auto sample = synth_generate<float>(kind, derive_seed(seed, std::to_string(i)),
                                        views, side, res, jitter);
    char idbuf[64];
    std::snprintf(idbuf, sizeof(idbuf), "%04d_%s", i, shape_kind_name(kind));
    sample.id = idbuf;

    ManifestRecord rec;
    rec.id = sample.id;
    rec.category = sample.category;
    rec.gt_path = "voxels/" + sample.id + ".binvox";
    write_binvox(sample.gt, root / rec.gt_path);
    for (std::size_t v = 0; v < sample.views.size(); ++v) {
      rec.view_paths.push_back("views/" + sample.id + "_" + std::to_string(v) +
                               ".ppm");
      write_ppm(sample.views[v], root / rec.view_paths.back());
    }
    manifest.records.push_back(std::move(rec));
  }
  write_manifest(manifest, root / "manifest.txt");
  std::printf("wrote %d samples (%d views each, %d^3) under %s\n", count, views,
              res, out.c_str());
  return 0;
}

template <Scalar T>
int run_training(const RunConfig& rc, const std::string& resume) {
  auto cfg = rc.network();
  if (rc.data.empty()) throw ConfigError("train: config is missing 'data'");
  auto manifest = read_manifest(rc.data);
  if (manifest.records.empty()) throw DataError("train: dataset is empty");

  std::vector<Sample<T>> train, val;
  if (rc.val_fraction > 0.0) {
    auto splits = split_dataset(
        manifest, {1.0 - rc.val_fraction, rc.val_fraction, 0.0},
        derive_seed(rc.seed, "split"));
    train = load_all_samples<T>(splits[0], cfg.image_side);
    val = load_all_samples<T>(splits[1], cfg.image_side);
  } else {
    train = load_all_samples<T>(manifest, cfg.image_side);
  }
  if (train.empty()) throw DataError("train: training split is empty");

  fs::create_directories(rc.out_dir);
  std::ofstream log(fs::path(rc.out_dir) / "train.log", std::ios::app);

  TrainRun<T> run(cfg, rc.train_config<T>());
  run.set_data(std::move(train), std::move(val));
  run.set_checkpoint_path(fs::path(rc.out_dir) / "ckpt_latest.vxc");
  run.set_config_hash(rc.hash());
  run.set_run_config_json(rc.to_json().dump());
  run.set_log_sink([&log](const std::string& line) {
    log << line << "\n";
    log.flush();
    std::puts(line.c_str());
  });
  if (!resume.empty()) {
    run.resume_from(resume);
  } else {
    run.init_fresh();
  }
  run.run();
  run.save(fs::path(rc.out_dir) / "ckpt_final.vxc");
  std::printf("checkpoint: %s\n",
              (fs::path(rc.out_dir) / "ckpt_final.vxc").string().c_str());
  return 0;
}

template <Scalar T>
int run_eval(const CheckpointContext& ctx, const fs::path& ckpt,
             const std::string& data, const std::vector<int>& views,
             double threshold, FusionKind fusion, const std::string& out_file) {
  auto store = checkpoint_params<T>(ckpt, ctx.cfg);
  auto manifest = read_manifest(data);
  if (manifest.records.empty()) throw DataError("eval: dataset is empty");
  auto samples = load_all_samples<T>(manifest, ctx.cfg.image_side);
  auto table = evaluate(ctx.cfg, store, samples, views, threshold, fusion);
  std::fputs(table.to_text().c_str(), stdout);
  if (!out_file.empty()) {
    std::ofstream f(out_file, std::ios::trunc);
    if (!f) throw IoError("eval: cannot write '" + out_file + "'");
    f << table.to_tsv();
  }
  return 0;
}

template <Scalar T>
int run_reconstruct(const CheckpointContext& ctx, const fs::path& ckpt,
                    const std::vector<std::string>& images,
                    const std::string& out, double threshold,
                    FusionKind fusion) {
  auto store = checkpoint_params<T>(ckpt, ctx.cfg);
  std::vector<Tensor<T>> views;
  for (const auto& p : images) views.push_back(load_image<T>(p, ctx.cfg.image_side));
  views = canonical_views(std::move(views));
  auto result = model_forward(ctx.cfg, store, views, Mode::eval, fusion);
  auto grid = binarize(final_volume(result), threshold);
  write_binvox(grid, out);
  std::printf("wrote %s (%zu of %d voxels occupied)\n", out.c_str(),
              grid.count_occupied(),
              ctx.cfg.vox_res * ctx.cfg.vox_res * ctx.cfg.vox_res);
  return 0;
}

template <Scalar T>
int run_inspect_scores(const CheckpointContext& ctx, const fs::path& ckpt,
                       const std::vector<std::string>& images,
                       const std::string& out_dir) {
  auto store = checkpoint_params<T>(ckpt, ctx.cfg);
  if (images.size() < 2) {
    std::fprintf(stderr,
                 "warning: score maps are informative only for two or more "
                 "views; emitting the trivial all-ones normalized map\n");
  }
  std::vector<Tensor<T>> views;
  for (const auto& p : images) views.push_back(load_image<T>(p, ctx.cfg.image_side));

  auto feats = encoder_forward_batched(ctx.cfg, store, stack_views(ctx.cfg, views),
                                       Mode::eval);
  auto [coarse, contexts] = decoder_forward_batched(ctx.cfg, store, feats, Mode::eval);
  auto raw = split_axis0(context_score(ctx.cfg.scorer, store, contexts, Mode::eval));
  auto norm = normalize_scores(raw);

  fs::create_directories(out_dir);
  std::ofstream summary(fs::path(out_dir) / "scores_summary.txt", std::ios::trunc);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    std::map<std::string, Tensor<T>> entries;
    entries.emplace("raw_score", raw[i]);
    entries.emplace("normalized_score", norm[i]);
    const auto path =
        fs::path(out_dir) / ("scores_view" + std::to_string(i) + ".vxa");
    write_archive(path, entries);
    double mr = 0, mn = 0;
    for (std::int64_t k = 0; k < raw[i].size(); ++k) {
      mr += double(raw[i].ptr()[k]);
      mn += double(norm[i].ptr()[k]);
    }
    mr /= double(raw[i].size());
    mn /= double(norm[i].size());
    char line[128];
    std::snprintf(line, sizeof(line), "view=%zu mean_raw=%.6f mean_normalized=%.6f",
                  i, mr, mn);
    summary << line << "\n";
    std::puts(line);
  }
  return 0;
}

int run_param_count(const std::string& variant, int toy_res, bool toy_refiner) {
  const Variant v = parse_variant(variant);
  NetworkConfig cfg = v == Variant::Toy
                          ? build_config(v, ToyOptions{32, toy_res, toy_refiner})
                          : build_config(v);
  std::printf("%" PRId64 "\n", param_count(cfg.all_specs()));
  return 0;
}

template <Scalar T>
int run_gradcheck(double threshold) {
  auto cfg = build_config(Variant::Toy, ToyOptions{32, 8, true});
  auto store = init_params<T>(cfg.all_specs(), 1);
  Rng vr(101);
  std::vector<Tensor<T>> views;
  for (int i = 0; i < 2; ++i) {
    auto v = Tensor<T>::zeros({3, 32, 32});
    for (auto& x : v.values()) x = static_cast<T>(vr.uniform());
    views.push_back(std::move(v));
  }
  Rng gr(102);
  BinaryGrid gt(8);
  for (auto& c : gt.cells) c = gr.uniform() < 0.5;

  std::vector<Tensor<T>> leaves;
  for (const auto& name : store.trainable_names()) leaves.push_back(store.at(name));
  auto objective = [&]() {
    auto out = model_forward(cfg, store, views, Mode::train);
    return bce_loss(final_volume(out), gt);
  };
  const double err = finite_difference_gradcheck<T>(objective, leaves,
                                                    static_cast<T>(1e-6), 4, 11);
  std::printf("max relative error: %.3e (threshold %.1e)\n", err, threshold);
  return err < threshold ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-view voxel reconstruction with context-aware fusion"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::string gen_out, gen_kinds = "box,table,lshape,cross,sphere";
  int gen_count = 100, gen_views = 5, gen_res = 32, gen_side = 32;
  std::uint64_t gen_seed = 0;
  bool gen_jitter = false;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--count", gen_count, "number of samples");
  gen->add_option("--kinds", gen_kinds, "comma-separated shape kinds");
  gen->add_option("--views", gen_views, "views per sample");
  gen->add_option("--res", gen_res, "voxel resolution (16 or 32)");
  gen->add_option("--side", gen_side, "image side in pixels");
  gen->add_option("--seed", gen_seed, "generation seed");
  gen->add_flag("--jitter", gen_jitter, "apply brightness/contrast jitter");

  // train
  auto* train = app.add_subcommand("train", "run two-stage training");
  std::string train_config, train_resume;
  train->add_option("--config", train_config, "run configuration JSON file")
      ->required();
  train->add_option("--resume", train_resume, "checkpoint to resume from");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate IoU by category and view count");
  std::string eval_ckpt, eval_data, eval_views = "1", eval_fusion = "context";
  std::string eval_out;
  double eval_threshold = 0.3;
  eval->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--data", eval_data, "dataset manifest")->required();
  eval->add_option("--views", eval_views, "comma-separated view counts");
  eval->add_option("--threshold", eval_threshold, "binarization threshold");
  eval->add_option("--fusion", eval_fusion, "context | average");
  eval->add_option("--out", eval_out, "machine-readable TSV output file");

  // reconstruct
  auto* rec = app.add_subcommand("reconstruct", "reconstruct a volume from images");
  std::string rec_ckpt, rec_images, rec_out = "reconstruction.binvox";
  std::string rec_fusion = "context";
  double rec_threshold = 0.3;
  rec->add_option("--ckpt", rec_ckpt, "checkpoint file")->required();
  rec->add_option("--images", rec_images, "comma-separated image paths")->required();
  rec->add_option("--out", rec_out, "output binvox path");
  rec->add_option("--threshold", rec_threshold, "binarization threshold");
  rec->add_option("--fusion", rec_fusion, "context | average");

  // inspect-scores
  auto* ins = app.add_subcommand("inspect-scores", "dump per-view fusion score maps");
  std::string ins_ckpt, ins_images, ins_out;
  ins->add_option("--ckpt", ins_ckpt, "checkpoint file")->required();
  ins->add_option("--images", ins_images, "comma-separated image paths")->required();
  ins->add_option("--out", ins_out, "output directory")->required();

  // param-count
  auto* pc = app.add_subcommand("param-count", "print the learnable parameter count");
  std::string pc_variant;
  int pc_toy_res = 32;
  bool pc_toy_refiner = false;
  pc->add_option("--variant", pc_variant, "F | A | Toy")->required();
  pc->add_option("--toy-res", pc_toy_res, "toy voxel resolution");
  pc->add_flag("--toy-refiner", pc_toy_refiner, "toy refiner enabled");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the toy model");
  std::string gc_variant = "Toy", gc_precision = "f64";
  double gc_threshold = 1e-4;
  gc->add_option("--variant", gc_variant, "must be Toy");
  gc->add_option("--precision", gc_precision, "f32 | f64");
  gc->add_option("--threshold", gc_threshold, "pass/fail threshold");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      return cmd_gen_data(gen_out, gen_count, gen_kinds, gen_views, gen_res,
                          gen_seed, gen_side, gen_jitter);
    }
    if (train->parsed()) {
      const RunConfig rc = read_run_config(train_config);
      return rc.precision == "f64" ? run_training<double>(rc, train_resume)
                                   : run_training<float>(rc, train_resume);
    }
    if (eval->parsed()) {
      auto ctx = checkpoint_context(eval_ckpt);
      const auto views = parse_view_counts(eval_views);
      const auto fusion = parse_fusion(eval_fusion);
      return ctx.meta.precision == "f64"
                 ? run_eval<double>(ctx, eval_ckpt, eval_data, views,
                                    eval_threshold, fusion, eval_out)
                 : run_eval<float>(ctx, eval_ckpt, eval_data, views,
                                   eval_threshold, fusion, eval_out);
    }
    if (rec->parsed()) {
      auto ctx = checkpoint_context(rec_ckpt);
      const auto images = split_commas(rec_images);
      if (images.empty()) throw ConfigError("reconstruct: no images given");
      const auto fusion = parse_fusion(rec_fusion);
      return ctx.meta.precision == "f64"
                 ? run_reconstruct<double>(ctx, rec_ckpt, images, rec_out,
                                           rec_threshold, fusion)
                 : run_reconstruct<float>(ctx, rec_ckpt, images, rec_out,
                                          rec_threshold, fusion);
    }
    if (ins->parsed()) {
      auto ctx = checkpoint_context(ins_ckpt);
      const auto images = split_commas(ins_images);
      if (images.empty()) throw ConfigError("inspect-scores: no images given");
      return ctx.meta.precision == "f64"
                 ? run_inspect_scores<double>(ctx, ins_ckpt, images, ins_out)
                 : run_inspect_scores<float>(ctx, ins_ckpt, images, ins_out);
    }
    if (pc->parsed()) {
      return run_param_count(pc_variant, pc_toy_res, pc_toy_refiner);
    }
    if (gc->parsed()) {
      if (parse_variant(gc_variant) != Variant::Toy) {
        throw ConfigError("gradcheck: only the Toy variant is supported");
      }
      if (gc_precision != "f32" && gc_precision != "f64") {
        throw ConfigError("gradcheck: precision must be f32 or f64");
      }
      return gc_precision == "f32" ? run_gradcheck<float>(gc_threshold)
                                   : run_gradcheck<double>(gc_threshold);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 2;
}
