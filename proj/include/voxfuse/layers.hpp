#pragma once

// Named, parameterized layer specs with initialization, forward dispatch,
// and parameter accounting. A LayerSpec fully determines its parameter
// tensor shapes; a ParamStore maps "<layer>.<role>" names to tensors.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "voxfuse/common.hpp"
#include "voxfuse/ops.hpp"
#include "voxfuse/tensor.hpp"

namespace voxfuse {

enum class LayerKind {
  conv2d,
  conv3d,
  conv_transpose3d,
  maxpool2d,
  maxpool3d,
  batchnorm,
  fully_connected,
  activation,
  concat,
  reshape,
};

enum class Act { relu, elu, leaky_relu, sigmoid };

struct LayerSpec {
  LayerKind kind{};
  std::string name;
  int in_channels = 0, out_channels = 0;
  int kernel = 0, stride = 1, pad = 0;
  bool bias = false;
  Act act = Act::relu;
  double leak = 0.2;
  int fc_in = 0, fc_out = 0;
  double bn_eps = 1e-5, bn_momentum = 0.1;
  std::vector<int> target_shape;  // reshape target, excluding the batch axis

  static LayerSpec conv2d(std::string name, int in, int out, int k, int s = 1,
                          int p = 0, bool bias = false) {
    LayerSpec l;
    l.kind = LayerKind::conv2d;
    l.name = std::move(name);
    l.in_channels = in;
    l.out_channels = out;
    l.kernel = k;
    l.stride = s;
    l.pad = p;
    l.bias = bias;
    return l;
  }
  static LayerSpec conv3d(std::string name, int in, int out, int k, int s = 1,
                          int p = 0, bool bias = false) {
    LayerSpec l = conv2d(std::move(name), in, out, k, s, p, bias);
    l.kind = LayerKind::conv3d;
    return l;
  }
  static LayerSpec conv_transpose3d(std::string name, int in, int out, int k,
                                    int s, int p, bool bias = false) {
    LayerSpec l = conv2d(std::move(name), in, out, k, s, p, bias);
    l.kind = LayerKind::conv_transpose3d;
    return l;
  }
  static LayerSpec maxpool2d(std::string name, int k, int s = -1) {
    LayerSpec l;
    l.kind = LayerKind::maxpool2d;
    l.name = std::move(name);
    l.kernel = k;
    l.stride = s > 0 ? s : k;
    return l;
  }
  static LayerSpec maxpool3d(std::string name, int k, int s = -1) {
    LayerSpec l = maxpool2d(std::move(name), k, s);
    l.kind = LayerKind::maxpool3d;
    return l;
  }
  static LayerSpec batchnorm(std::string name, int channels) {
    LayerSpec l;
    l.kind = LayerKind::batchnorm;
    l.name = std::move(name);
    l.in_channels = channels;
    l.out_channels = channels;
    return l;
  }
  static LayerSpec fully_connected(std::string name, int in, int out,
                                   bool bias = true) {
    LayerSpec l;
    l.kind = LayerKind::fully_connected;
    l.name = std::move(name);
    l.fc_in = in;
    l.fc_out = out;
    l.bias = bias;
    return l;
  }
  static LayerSpec activation(std::string name, Act a, double leak = 0.2) {
    LayerSpec l;
    l.kind = LayerKind::activation;
    l.name = std::move(name);
    l.act = a;
    l.leak = leak;
    return l;
  }
  static LayerSpec reshape(std::string name, std::vector<int> shape) {
    LayerSpec l;
    l.kind = LayerKind::reshape;
    l.name = std::move(name);
    l.target_shape = std::move(shape);
    return l;
  }
};

// Parameter tensor shapes implied by a spec, in a fixed role order.
// Batchnorm running stats are part of the store but are not learnable.
inline std::vector<std::pair<std::string, std::vector<int>>> param_shapes(
    const LayerSpec& s) {
  std::vector<std::pair<std::string, std::vector<int>>> out;
  switch (s.kind) {
    case LayerKind::conv2d:
      out.push_back({s.name + ".weight",
                     {s.out_channels, s.in_channels, s.kernel, s.kernel}});
      if (s.bias) out.push_back({s.name + ".bias", {s.out_channels}});
      break;
    case LayerKind::conv3d:
      out.push_back({s.name + ".weight",
                     {s.out_channels, s.in_channels, s.kernel, s.kernel, s.kernel}});
      if (s.bias) out.push_back({s.name + ".bias", {s.out_channels}});
      break;
    case LayerKind::conv_transpose3d:
      out.push_back({s.name + ".weight",
                     {s.in_channels, s.out_channels, s.kernel, s.kernel, s.kernel}});
      if (s.bias) out.push_back({s.name + ".bias", {s.out_channels}});
      break;
    case LayerKind::batchnorm:
      out.push_back({s.name + ".gamma", {s.in_channels}});
      out.push_back({s.name + ".beta", {s.in_channels}});
      out.push_back({s.name + ".running_mean", {s.in_channels}});
      out.push_back({s.name + ".running_var", {s.in_channels}});
      break;
    case LayerKind::fully_connected:
      out.push_back({s.name + ".weight", {s.fc_out, s.fc_in}});
      if (s.bias) out.push_back({s.name + ".bias", {s.fc_out}});
      break;
    default:
      break;  // pooling, activation, concat, reshape carry no parameters
  }
  return out;
}

inline bool param_trainable(const std::string& entry_name) {
  const auto dot = entry_name.rfind('.');
  const std::string role = entry_name.substr(dot + 1);
  return role != "running_mean" && role != "running_var";
}

// Exact count of learnable scalars (weights + biases + gamma + beta).
// Additive over spec lists and independent of order.
inline std::int64_t param_count(const std::vector<LayerSpec>& specs) {
  std::int64_t n = 0;
  for (const auto& s : specs) {
    for (const auto& [name, shape] : param_shapes(s)) {
      if (param_trainable(name)) n += shape_size(shape);
    }
  }
  return n;
}

template <Scalar T>
struct ParamStore {
  std::map<std::string, Tensor<T>> entries;

  Tensor<T>& at(const std::string& name) {
    auto it = entries.find(name);
    if (it == entries.end()) {
      throw ContractError("ParamStore: no entry named '" + name + "'");
    }
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }
  bool has(const std::string& name) const { return entries.count(name) > 0; }

  // Names of learnable entries, in map (lexicographic) order.
  std::vector<std::string> trainable_names() const {
    std::vector<std::string> out;
    for (const auto& [name, t] : entries) {
      if (param_trainable(name)) out.push_back(name);
    }
    return out;
  }
};

// He-normal weights, zero biases, gamma = 1, beta = 0, running mean 0 /
// var 1. Each tensor's stream is derived from (seed, entry name), so a
// layer's init does not depend on its position in the list.
template <Scalar T>
ParamStore<T> init_params(const std::vector<LayerSpec>& specs,
                          std::uint64_t seed) {
  ParamStore<T> store;
  for (const auto& s : specs) {
    for (const auto& [name, shape] : param_shapes(s)) {
      if (store.entries.count(name)) {
        throw ConfigError("init_params: duplicate layer entry '" + name + "'");
      }
      const auto dot = name.rfind('.');
      const std::string role = name.substr(dot + 1);
      Tensor<T> t;
      if (role == "weight") {
        t = Tensor<T>::he_normal(shape, derive_seed(seed, name));
      } else if (role == "gamma" || role == "running_var") {
        t = Tensor<T>::ones(shape);
      } else {
        t = Tensor<T>::zeros(shape);
      }
      if (param_trainable(name)) t.set_requires_grad(true);
      store.entries.emplace(name, std::move(t));
    }
  }
  return store;
}

// Forward dispatch. Train mode only affects batchnorm (which updates its
// running stats in place); shape errors are annotated with the layer name.
template <Scalar T>
Tensor<T> layer_forward(const LayerSpec& s, ParamStore<T>& params,
                        const Tensor<T>& x, Mode mode) {
  try {
    switch (s.kind) {
      case LayerKind::conv2d:
      case LayerKind::conv3d: {
        const Tensor<T>& w = params.at(s.name + ".weight");
        OptTensor<T> b;
        if (s.bias) b = params.at(s.name + ".bias");
        return s.kind == LayerKind::conv2d
                   ? conv2d(x, w, b, s.stride, s.pad)
                   : conv3d(x, w, b, s.stride, s.pad);
      }
      case LayerKind::conv_transpose3d: {
        const Tensor<T>& w = params.at(s.name + ".weight");
        OptTensor<T> b;
        if (s.bias) b = params.at(s.name + ".bias");
        return conv_transpose3d(x, w, b, s.stride, s.pad);
      }
      case LayerKind::maxpool2d:
        return maxpool2d(x, s.kernel, s.stride);
      case LayerKind::maxpool3d:
        return maxpool3d(x, s.kernel, s.stride);
      case LayerKind::batchnorm:
        return batchnorm(x, params.at(s.name + ".gamma"),
                         params.at(s.name + ".beta"),
                         params.at(s.name + ".running_mean"),
                         params.at(s.name + ".running_var"), mode,
                         static_cast<T>(s.bn_eps), static_cast<T>(s.bn_momentum));
      case LayerKind::fully_connected: {
        const Tensor<T>& w = params.at(s.name + ".weight");
        OptTensor<T> b;
        if (s.bias) b = params.at(s.name + ".bias");
        return linear(flatten2(x), w, b);
      }
      case LayerKind::activation:
        switch (s.act) {
          case Act::relu: return relu(x);
          case Act::elu: return elu(x);
          case Act::leaky_relu: return leaky_relu(x, static_cast<T>(s.leak));
          case Act::sigmoid: return sigmoid(x);
        }
        throw ContractError("layer_forward: unknown activation");
      case LayerKind::reshape: {
        std::vector<int> shape{x.extent(0)};
        shape.insert(shape.end(), s.target_shape.begin(), s.target_shape.end());
        return reshape(x, std::move(shape));
      }
      case LayerKind::concat:
        throw ConfigError("layer_forward: concat takes multiple inputs and is "
                          "assembled by the model");
    }
    throw ContractError("layer_forward: unknown layer kind");
  } catch (const ShapeError& e) {
    throw ShapeError("[" + s.name + "] " + e.what());
  }
}

// Folds a spec list over an input.
template <Scalar T>
Tensor<T> forward_chain(const std::vector<LayerSpec>& specs,
                        ParamStore<T>& params, Tensor<T> x, Mode mode) {
  for (const auto& s : specs) x = layer_forward(s, params, x, mode);
  return x;
}

}  // namespace voxfuse
