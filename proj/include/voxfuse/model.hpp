#pragma once

// Pipeline assembly: encoder -> per-view decoder -> score-based fusion ->
// optional refiner. Three variants:
//
//   F    224px input, VGG16-style backbone through conv4_1 (512x28x28),
//        embedding convs 512/256/128 (pool 4), feature length 2048, decoder
//        channels 128/64/32/8/1, no refiner.
//   A    backbone as F, embedding convs 512/512/256 (pool 3), feature
//        length 16384, decoder 512/128/32/8/1, 3-stage refiner with
//        skip concatenations and 2048/8192 fully connected bottleneck.
//   Toy  32px input, 3-block encoder, small decoder to a configurable
//        resolution, 2-layer scorer, optional small refiner; sized for
//        CPU-scale end-to-end training.
//
// Encoder and decoder weights are shared across views: views travel through
// the network batched along axis 0. The context of each view is the
// 8-channel penultimate decoder output concatenated with its 1-channel
// coarse volume. Every variant's shape chain is validated symbolically at
// construction.

#include <optional>
#include <string>
#include <vector>

#include "voxfuse/fusion.hpp"
#include "voxfuse/layers.hpp"
#include "voxfuse/ops.hpp"
#include "voxfuse/tensor.hpp"

namespace voxfuse {

enum class Variant { F, A, Toy };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::F: return "F";
    case Variant::A: return "A";
    case Variant::Toy: return "Toy";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "F" || s == "f") return Variant::F;
  if (s == "A" || s == "a") return Variant::A;
  if (s == "Toy" || s == "toy") return Variant::Toy;
  throw ConfigError("unknown variant '" + s + "' (expected F, A, or Toy)");
}

struct ToyOptions {
  int image_side = 32;
  int vox_res = 32;  // 8, 16, or 32
  bool with_refiner = false;
};

struct RefinerPlan {
  std::vector<std::vector<LayerSpec>> enc_stages;  // each ends in a pool
  std::vector<LayerSpec> mid;                      // fc bottleneck + reshape
  std::vector<std::vector<LayerSpec>> dec_stages;  // stage i consumes
                                                   // concat(prev, skip[last-i])
};

struct NetworkConfig {
  Variant variant = Variant::Toy;
  int image_side = 32;
  int vox_res = 32;
  int feature_len = 0;

  std::vector<LayerSpec> encoder;
  std::vector<LayerSpec> decoder;  // starts with the reshape to [C0, 2, 2, 2]
  std::vector<LayerSpec> scorer;
  bool has_refiner = false;
  RefinerPlan refiner;

  // spatial landmarks recorded by the construction-time validator
  std::vector<int> encoder_chain;        // side after each encoder layer
  std::vector<int> decoder_chain;        // side after each decoder layer
  std::vector<int> refiner_enc_chain;    // side after each refiner enc layer

  std::vector<LayerSpec> refiner_specs() const {
    std::vector<LayerSpec> out;
    for (const auto& st : refiner.enc_stages)
      out.insert(out.end(), st.begin(), st.end());
    out.insert(out.end(), refiner.mid.begin(), refiner.mid.end());
    for (const auto& st : refiner.dec_stages)
      out.insert(out.end(), st.begin(), st.end());
    return out;
  }

  std::vector<LayerSpec> all_specs() const {
    std::vector<LayerSpec> out = encoder;
    out.insert(out.end(), decoder.begin(), decoder.end());
    out.insert(out.end(), scorer.begin(), scorer.end());
    const auto ref = refiner_specs();
    out.insert(out.end(), ref.begin(), ref.end());
    return out;
  }
};

namespace detail {

// conv + batchnorm + activation block (bias-free conv: bias is redundant
// under batchnorm).
inline void conv_bn_act_2d(std::vector<LayerSpec>& out, const std::string& name,
                           int in, int ch, int k, int p, Act act,
                           double leak = 0.2) {
  out.push_back(LayerSpec::conv2d(name, in, ch, k, 1, p));
  out.push_back(LayerSpec::batchnorm(name + "_bn", ch));
  out.push_back(LayerSpec::activation(name + "_act", act, leak));
}

inline void conv_bn_act_3d(std::vector<LayerSpec>& out, const std::string& name,
                           int in, int ch, int k, int p, Act act,
                           double leak = 0.2) {
  out.push_back(LayerSpec::conv3d(name, in, ch, k, 1, p));
  out.push_back(LayerSpec::batchnorm(name + "_bn", ch));
  out.push_back(LayerSpec::activation(name + "_act", act, leak));
}

inline void convt_bn_relu(std::vector<LayerSpec>& out, const std::string& name,
                          int in, int ch, int k, int s, int p) {
  out.push_back(LayerSpec::conv_transpose3d(name, in, ch, k, s, p));
  out.push_back(LayerSpec::batchnorm(name + "_bn", ch));
  out.push_back(LayerSpec::activation(name + "_act", Act::relu));
}

// VGG16-style backbone slice through conv4_1 with batchnorm:
// 224 -> (2 convs) -> pool -> (2 convs) -> pool -> (3 convs) -> pool ->
// conv4_1, yielding a 512 x 28 x 28 feature map.
inline void vgg_backbone(std::vector<LayerSpec>& enc) {
  conv_bn_act_2d(enc, "enc1_1", 3, 64, 3, 1, Act::relu);
  conv_bn_act_2d(enc, "enc1_2", 64, 64, 3, 1, Act::relu);
  enc.push_back(LayerSpec::maxpool2d("enc_pool1", 2));
  conv_bn_act_2d(enc, "enc2_1", 64, 128, 3, 1, Act::relu);
  conv_bn_act_2d(enc, "enc2_2", 128, 128, 3, 1, Act::relu);
  enc.push_back(LayerSpec::maxpool2d("enc_pool2", 2));
  conv_bn_act_2d(enc, "enc3_1", 128, 256, 3, 1, Act::relu);
  conv_bn_act_2d(enc, "enc3_2", 256, 256, 3, 1, Act::relu);
  conv_bn_act_2d(enc, "enc3_3", 256, 256, 3, 1, Act::relu);
  enc.push_back(LayerSpec::maxpool2d("enc_pool3", 2));
  conv_bn_act_2d(enc, "enc4_1", 256, 512, 3, 1, Act::relu);
}

// Five 3x3x3 scoring convolutions over the 9-channel context, output
// channels 9, 16, 8, 4, 1, each followed by batchnorm and leaky ReLU.
inline void full_scorer(std::vector<LayerSpec>& sc) {
  const int chans[] = {9, 16, 8, 4, 1};
  int in = 9;
  for (int i = 0; i < 5; ++i) {
    conv_bn_act_3d(sc, "score" + std::to_string(i + 1), in, chans[i], 3, 1,
                   Act::leaky_relu);
    in = chans[i];
  }
}

// Decoder: reshape to [feat/8, 2, 2, 2], four stride-2 transposed convs
// doubling the side to 32, then a 1x1x1 conv + sigmoid for the occupancy
// volume. The 8-channel stage before the head is the context source.
inline void full_decoder(std::vector<LayerSpec>& dec, int feature_len,
                         const int chans[4]) {
  const int c0 = feature_len / 8;
  dec.push_back(LayerSpec::reshape("dec_reshape", {c0, 2, 2, 2}));
  int in = c0;
  for (int i = 0; i < 4; ++i) {
    convt_bn_relu(dec, "dec" + std::to_string(i + 1), in, chans[i], 4, 2, 1);
    in = chans[i];
  }
  dec.push_back(LayerSpec::conv3d("dec_out", in, 1, 1, 1, 0, /*bias=*/true));
  dec.push_back(LayerSpec::activation("dec_out_act", Act::sigmoid));
}

// 3D encoder-decoder refiner with skip concatenations. Encoder stages are
// conv(k=4, p=2) + bn + leaky ReLU + pool(2); mirrored decoder stages are
// transposed convs (k=4, s=2, p=1) whose input is the concatenation of the
// previous stage and the matching encoder output; the head ends in sigmoid.
inline RefinerPlan make_refiner(const std::vector<int>& enc_chans, int fc_hidden,
                                double leak = 0.2) {
  RefinerPlan r;
  const int nstages = static_cast<int>(enc_chans.size());
  int in = 1;
  for (int i = 0; i < nstages; ++i) {
    std::vector<LayerSpec> st;
    const std::string name = "ref_enc" + std::to_string(i + 1);
    conv_bn_act_3d(st, name, in, enc_chans[i], 4, 2, Act::leaky_relu, leak);
    st.push_back(LayerSpec::maxpool3d(name + "_pool", 2));
    r.enc_stages.push_back(std::move(st));
    in = enc_chans[i];
  }
  const int flat = enc_chans.back() * 4 * 4 * 4;
  r.mid.push_back(LayerSpec::fully_connected("ref_fc1", flat, fc_hidden));
  r.mid.push_back(LayerSpec::activation("ref_fc1_act", Act::relu));
  r.mid.push_back(LayerSpec::fully_connected("ref_fc2", fc_hidden, flat));
  r.mid.push_back(LayerSpec::activation("ref_fc2_act", Act::relu));
  r.mid.push_back(LayerSpec::reshape("ref_reshape", {enc_chans.back(), 4, 4, 4}));
  for (int i = nstages - 1; i >= 0; --i) {
    std::vector<LayerSpec> st;
    const std::string name = "ref_dec" + std::to_string(nstages - i);
    const int cat_in = enc_chans[i] * 2;
    if (i > 0) {
      convt_bn_relu(st, name, cat_in, enc_chans[i - 1], 4, 2, 1);
    } else {
      st.push_back(LayerSpec::conv_transpose3d(name, cat_in, 1, 4, 2, 1,
                                               /*bias=*/true));
      st.push_back(LayerSpec::activation(name + "_act", Act::sigmoid));
    }
    r.dec_stages.push_back(std::move(st));
  }
  return r;
}

// Symbolic per-sample shape walker used to validate configs at build time.
struct SymShape {
  std::vector<int> dims;  // [C, spatial...] or [features]
};

inline SymShape walk_layer(const LayerSpec& s, SymShape in) {
  auto& d = in.dims;
  switch (s.kind) {
    case LayerKind::conv2d:
      if (d.size() != 3 || d[0] != s.in_channels)
        throw ContractError("config: conv2d '" + s.name + "' input mismatch");
      return {{s.out_channels, conv_out_extent(d[1], s.kernel, s.stride, s.pad),
               conv_out_extent(d[2], s.kernel, s.stride, s.pad)}};
    case LayerKind::conv3d:
      if (d.size() != 4 || d[0] != s.in_channels)
        throw ContractError("config: conv3d '" + s.name + "' input mismatch");
      return {{s.out_channels, conv_out_extent(d[1], s.kernel, s.stride, s.pad),
               conv_out_extent(d[2], s.kernel, s.stride, s.pad),
               conv_out_extent(d[3], s.kernel, s.stride, s.pad)}};
    case LayerKind::conv_transpose3d:
      if (d.size() != 4 || d[0] != s.in_channels)
        throw ContractError("config: convT '" + s.name + "' input mismatch");
      return {{s.out_channels,
               conv_transpose_out_extent(d[1], s.kernel, s.stride, s.pad),
               conv_transpose_out_extent(d[2], s.kernel, s.stride, s.pad),
               conv_transpose_out_extent(d[3], s.kernel, s.stride, s.pad)}};
    case LayerKind::maxpool2d:
      return {{d[0], pool_out_extent(d[1], s.kernel, s.stride),
               pool_out_extent(d[2], s.kernel, s.stride)}};
    case LayerKind::maxpool3d:
      return {{d[0], pool_out_extent(d[1], s.kernel, s.stride),
               pool_out_extent(d[2], s.kernel, s.stride),
               pool_out_extent(d[3], s.kernel, s.stride)}};
    case LayerKind::fully_connected: {
      std::int64_t flat = 1;
      for (int e : d) flat *= e;
      if (flat != s.fc_in)
        throw ContractError("config: fc '" + s.name + "' expects " +
                            std::to_string(s.fc_in) + " inputs, got " +
                            std::to_string(flat));
      return {{s.fc_out}};
    }
    case LayerKind::reshape: {
      std::int64_t flat = 1, want = 1;
      for (int e : d) flat *= e;
      for (int e : s.target_shape) want *= e;
      if (flat != want)
        throw ContractError("config: reshape '" + s.name + "' size mismatch");
      return {s.target_shape};
    }
    default:
      return in;  // batchnorm, activation
  }
}

inline SymShape walk_chain(const std::vector<LayerSpec>& specs, SymShape x,
                           std::vector<int>* side_log = nullptr) {
  for (const auto& s : specs) {
    x = walk_layer(s, x);
    if (side_log) side_log->push_back(x.dims.back());
  }
  return x;
}

}  // namespace detail

inline NetworkConfig build_config(Variant v, ToyOptions toy = {}) {
  using namespace detail;
  NetworkConfig cfg;
  cfg.variant = v;

  if (v == Variant::F || v == Variant::A) {
    cfg.image_side = 224;
    cfg.vox_res = 32;
    vgg_backbone(cfg.encoder);
    if (v == Variant::F) {
      conv_bn_act_2d(cfg.encoder, "embed1", 512, 512, 1, 0, Act::elu);
      conv_bn_act_2d(cfg.encoder, "embed2", 512, 256, 3, 0, Act::elu);
      cfg.encoder.push_back(LayerSpec::maxpool2d("embed_pool", 4));
      conv_bn_act_2d(cfg.encoder, "embed3", 256, 128, 3, 0, Act::elu);
      cfg.feature_len = 128 * 4 * 4;  // 2048
      const int chans[4] = {128, 64, 32, 8};
      full_decoder(cfg.decoder, cfg.feature_len, chans);
    } else {
      conv_bn_act_2d(cfg.encoder, "embed1", 512, 512, 3, 0, Act::elu);
      conv_bn_act_2d(cfg.encoder, "embed2", 512, 512, 3, 0, Act::elu);
      cfg.encoder.push_back(LayerSpec::maxpool2d("embed_pool", 3));
      conv_bn_act_2d(cfg.encoder, "embed3", 512, 256, 1, 0, Act::elu);
      cfg.feature_len = 256 * 8 * 8;  // 16384
      const int chans[4] = {512, 128, 32, 8};
      full_decoder(cfg.decoder, cfg.feature_len, chans);
    }
    full_scorer(cfg.scorer);
    if (v == Variant::A) {
      cfg.has_refiner = true;
      cfg.refiner = make_refiner({32, 64, 128}, 2048);
    }
  } else {
    if (toy.vox_res != 8 && toy.vox_res != 16 && toy.vox_res != 32) {
      throw ConfigError("Toy vox_res must be 8, 16, or 32");
    }
    if (toy.image_side != 32 && toy.image_side != 48 && toy.image_side != 64) {
      throw ConfigError("Toy image side must be 32, 48, or 64");
    }
    cfg.image_side = toy.image_side;
    cfg.vox_res = toy.vox_res;
    conv_bn_act_2d(cfg.encoder, "tenc1", 3, 16, 3, 1, Act::relu);
    cfg.encoder.push_back(LayerSpec::maxpool2d("tenc1_pool", 2));
    conv_bn_act_2d(cfg.encoder, "tenc2", 16, 32, 3, 1, Act::relu);
    cfg.encoder.push_back(LayerSpec::maxpool2d("tenc2_pool", 2));
    conv_bn_act_2d(cfg.encoder, "tenc3", 32, 64, 3, 1, Act::relu);
    cfg.encoder.push_back(LayerSpec::maxpool2d("tenc3_pool", 2));
    const int fside = toy.image_side / 8;
    cfg.feature_len = 64 * fside * fside;

    // stride-2 transposed convs (k=2) doubling 2 -> vox_res; the stage
    // before the head always has 8 channels so the context stays 9-wide
    std::vector<int> chans;
    if (toy.vox_res == 32) chans = {64, 32, 16, 8};
    else if (toy.vox_res == 16) chans = {32, 16, 8};
    else chans = {16, 8};
    cfg.decoder.push_back(LayerSpec::reshape(
        "dec_reshape", {cfg.feature_len / 8, 2, 2, 2}));
    int in = cfg.feature_len / 8;
    for (std::size_t i = 0; i < chans.size(); ++i) {
      convt_bn_relu(cfg.decoder, "dec" + std::to_string(i + 1), in, chans[i],
                    2, 2, 0);
      in = chans[i];
    }
    cfg.decoder.push_back(LayerSpec::conv3d("dec_out", 8, 1, 1, 1, 0, true));
    cfg.decoder.push_back(LayerSpec::activation("dec_out_act", Act::sigmoid));

    conv_bn_act_3d(cfg.scorer, "tscore1", 9, 4, 3, 1, Act::leaky_relu);
    conv_bn_act_3d(cfg.scorer, "tscore2", 4, 1, 3, 1, Act::leaky_relu);

    if (toy.with_refiner) {
      cfg.has_refiner = true;
      int nstages = 1;
      if (toy.vox_res == 32) nstages = 3;
      else if (toy.vox_res == 16) nstages = 2;
      std::vector<int> rchans{8, 16, 32};
      rchans.resize(nstages);
      const int flat = rchans.back() * 64;
      cfg.refiner = make_refiner(rchans, flat / 8);
    }
  }

  // construction-time shape validation
  auto enc_out = walk_chain(cfg.encoder,
                            {{3, cfg.image_side, cfg.image_side}},
                            &cfg.encoder_chain);
  std::int64_t flat = 1;
  for (int e : enc_out.dims) flat *= e;
  if (flat != cfg.feature_len) {
    throw ContractError("config: encoder produces " + std::to_string(flat) +
                        " features, expected " + std::to_string(cfg.feature_len));
  }
  auto dec_out = walk_chain(cfg.decoder, {{cfg.feature_len}},
                            &cfg.decoder_chain);
  if (dec_out.dims != std::vector<int>{1, cfg.vox_res, cfg.vox_res, cfg.vox_res}) {
    throw ContractError("config: decoder does not end at a 1-channel " +
                        std::to_string(cfg.vox_res) + "^3 volume");
  }
  auto sc_out = walk_chain(cfg.scorer,
                           {{9, cfg.vox_res, cfg.vox_res, cfg.vox_res}});
  if (sc_out.dims != std::vector<int>{1, cfg.vox_res, cfg.vox_res, cfg.vox_res}) {
    throw ContractError("config: scorer does not preserve the volume extent");
  }
  if (cfg.has_refiner) {
    detail::SymShape x{{1, cfg.vox_res, cfg.vox_res, cfg.vox_res}};
    std::vector<detail::SymShape> skips;
    for (const auto& st : cfg.refiner.enc_stages) {
      x = walk_chain(st, x, &cfg.refiner_enc_chain);
      skips.push_back(x);
    }
    x = walk_chain(cfg.refiner.mid, x);
    for (std::size_t i = 0; i < cfg.refiner.dec_stages.size(); ++i) {
      auto skip = skips[skips.size() - 1 - i];
      detail::SymShape cat{x.dims};
      cat.dims[0] += skip.dims[0];
      x = walk_chain(cfg.refiner.dec_stages[i], cat);
    }
    if (x.dims != std::vector<int>{1, cfg.vox_res, cfg.vox_res, cfg.vox_res}) {
      throw ContractError("config: refiner does not return to the input extent");
    }
  }
  return cfg;
}

// --------------------------------------------------------------------------
// Forward passes.

enum class FusionKind { context, average };

inline FusionKind parse_fusion(const std::string& s) {
  if (s == "context") return FusionKind::context;
  if (s == "average") return FusionKind::average;
  throw ConfigError("unknown fusion strategy '" + s + "'");
}

template <Scalar T>
struct ModelOut {
  std::vector<Tensor<T>> coarse;       // per view, [1, 1, R, R, R]
  std::vector<Tensor<T>> contexts;     // per view, [1, 9, R, R, R]
  std::vector<Tensor<T>> raw_scores;   // empty unless context fusion ran
  std::vector<Tensor<T>> norm_scores;  // all-ones for a single view
  Tensor<T> fused;                     // [1, 1, R, R, R]
  std::optional<Tensor<T>> refined;    // present when the config has a refiner
};

// Stacks per-view [3, H, W] images into a [n, 3, H, W] leaf batch.
template <Scalar T>
Tensor<T> stack_views(const NetworkConfig& cfg,
                      const std::vector<Tensor<T>>& views) {
  if (views.empty()) throw ContractError("model: need at least one view");
  const std::vector<int> want{3, cfg.image_side, cfg.image_side};
  for (const auto& v : views) {
    if (v.shape() != want) {
      throw ShapeError("model: view shape " + shape_str(v.shape()) +
                       ", expected " + shape_str(want));
    }
  }
  const int n = static_cast<int>(views.size());
  Tensor<T> batch = Tensor<T>::zeros({n, 3, cfg.image_side, cfg.image_side});
  const std::int64_t block = views[0].size();
  for (int r = 0; r < n; ++r) {
    std::copy(views[r].ptr(), views[r].ptr() + block, batch.ptr() + r * block);
  }
  return batch;
}

// Per-view feature extraction with shared weights; views are batched.
// Returns [n, feature_len].
template <Scalar T>
Tensor<T> encoder_forward_batched(const NetworkConfig& cfg,
                                  ParamStore<T>& params,
                                  const Tensor<T>& images, Mode mode) {
  return flatten2(forward_chain(cfg.encoder, params, images, mode));
}

template <Scalar T>
std::vector<Tensor<T>> encoder_forward(const NetworkConfig& cfg,
                                       ParamStore<T>& params,
                                       const std::vector<Tensor<T>>& views,
                                       Mode mode) {
  auto feats = encoder_forward_batched(cfg, params, stack_views(cfg, views), mode);
  return split_axis0(feats);
}

// Decodes features into (coarse volume, 9-channel context), batched over
// views: [n, feature_len] -> ([n, 1, R^3], [n, 9, R^3]).
template <Scalar T>
std::pair<Tensor<T>, Tensor<T>> decoder_forward_batched(
    const NetworkConfig& cfg, ParamStore<T>& params, const Tensor<T>& features,
    Mode mode) {
  if (features.rank() != 2 || features.extent(1) != cfg.feature_len) {
    throw ShapeError("decoder: features must be [n, " +
                     std::to_string(cfg.feature_len) + "], got " +
                     shape_str(features.shape()));
  }
  const std::size_t tail = 2;  // occupancy head: 1x1x1 conv + sigmoid
  Tensor<T> x = features;
  for (std::size_t i = 0; i + tail < cfg.decoder.size(); ++i) {
    x = layer_forward(cfg.decoder[i], params, x, mode);
  }
  Tensor<T> penult = x;
  for (std::size_t i = cfg.decoder.size() - tail; i < cfg.decoder.size(); ++i) {
    x = layer_forward(cfg.decoder[i], params, x, mode);
  }
  Tensor<T> context = concat_channels(std::vector<Tensor<T>>{penult, x});
  return {x, context};
}

template <Scalar T>
std::pair<Tensor<T>, Tensor<T>> decoder_forward(const NetworkConfig& cfg,
                                                ParamStore<T>& params,
                                                const Tensor<T>& feature,
                                                Mode mode) {
  Tensor<T> batched = feature.rank() == 1
                          ? reshape(feature, {1, feature.extent(0)})
                          : feature;
  return decoder_forward_batched(cfg, params, batched, mode);
}

template <Scalar T>
Tensor<T> refiner_forward(const NetworkConfig& cfg, ParamStore<T>& params,
                          const Tensor<T>& fused, Mode mode) {
  if (!cfg.has_refiner) {
    throw ConfigError("refiner_forward: variant " +
                      std::string(variant_name(cfg.variant)) +
                      " has no refiner");
  }
  Tensor<T> x = fused;
  std::vector<Tensor<T>> skips;
  for (const auto& st : cfg.refiner.enc_stages) {
    x = forward_chain(st, params, x, mode);
    skips.push_back(x);
  }
  x = forward_chain(cfg.refiner.mid, params, x, mode);
  for (std::size_t i = 0; i < cfg.refiner.dec_stages.size(); ++i) {
    x = concat_channels(std::vector<Tensor<T>>{x, skips[skips.size() - 1 - i]});
    x = forward_chain(cfg.refiner.dec_stages[i], params, x, mode);
  }
  return x;
}

template <Scalar T>
ModelOut<T> model_forward(const NetworkConfig& cfg, ParamStore<T>& params,
                          const std::vector<Tensor<T>>& views, Mode mode,
                          FusionKind fusion = FusionKind::context) {
  ModelOut<T> out;
  const int n = static_cast<int>(views.size());
  auto feats = encoder_forward_batched(cfg, params, stack_views(cfg, views), mode);
  auto [coarse_batch, context_batch] =
      decoder_forward_batched(cfg, params, feats, mode);

  if (n == 1) {
    // softmax over one view is identically 1; fused equals the coarse volume
    out.fused = coarse_batch;
    out.norm_scores.push_back(Tensor<T>::ones(coarse_batch.shape()));
  } else if (fusion == FusionKind::average) {
    auto uniform =
        Tensor<T>::full(coarse_batch.shape(), T(1) / static_cast<T>(n));
    out.fused = weighted_sum_axis0(coarse_batch, uniform);
    for (int r = 0; r < n; ++r) {
      out.norm_scores.push_back(
          Tensor<T>::full({1, 1, cfg.vox_res, cfg.vox_res, cfg.vox_res},
                          T(1) / static_cast<T>(n)));
    }
  } else {
    auto raw_batch = context_score(cfg.scorer, params, context_batch, mode);
    auto norm_batch = softmax_axis0(raw_batch);
    out.fused = weighted_sum_axis0(coarse_batch, norm_batch);
    out.raw_scores = split_axis0(raw_batch);
    out.norm_scores = split_axis0(norm_batch);
  }

  if (cfg.has_refiner) {
    out.refined = refiner_forward(cfg, params, out.fused, mode);
  }
  out.coarse = split_axis0(coarse_batch);
  out.contexts = split_axis0(context_batch);
  return out;
}

// The volume a downstream consumer should treat as the model's prediction.
template <Scalar T>
const Tensor<T>& final_volume(const ModelOut<T>& out) {
  return out.refined ? *out.refined : out.fused;
}

}  // namespace voxfuse
