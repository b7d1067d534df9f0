#pragma once

// Constrained encoder-decoder for single-view decomposition. The encoder is
// `levels` stages of two 3x3 same-padded convs + ReLU followed by a 2x2 max
// pool; channel width doubles per stage. Dropout sits immediately after the
// last encoder conv, so the deepest skip connection sees the dropped
// activations too. Each decoder stage nearest-upsamples, concatenates the
// matching skip, and applies two 3x3 convs + ReLU. A linear 3x3 head emits
// one channel per material layer, and a 1x1 fusion recombines those channels
// into a reconstruction of the input. The fusion can be a learnable conv
// (initialized to an exact channel sum) or a hard-wired channel sum.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "xdecomp/autodiff.hpp"
#include "xdecomp/projection.hpp"
#include "xdecomp/tensor.hpp"

namespace xdecomp {

enum class FusionMode { learnable, fixed_sum };

std::string to_string(FusionMode m);
FusionMode fusion_mode_from_string(const std::string& s);

struct NetworkConfig {
  int input_h = 64;
  int input_w = 64;
  int levels = 3;
  int base_channels = 8;
  int components = 3;  // decomposition channels d
  double dropout_p = 0.5;
  FusionMode fusion = FusionMode::learnable;

  int channels_at(int level) const { return base_channels << level; }
  void validate() const;
  std::string to_json_string() const;
  static NetworkConfig from_json_string(const std::string& s);
};

template <typename T>
struct ConvParamT {
  TensorT<T> w;  // (out_ch, in_ch, kh, kw)
  TensorT<T> b;  // (out_ch)
};

template <typename T>
struct NetworkParamsT {
  std::vector<ConvParamT<T>> encoder;  // two per level, shallow to deep
  std::vector<ConvParamT<T>> decoder;  // two per stage, deep to shallow
  ConvParamT<T> head;
  ConvParamT<T> fusion;

  // Fixed flattening used for serialization and for graph leaf order:
  // encoder convs, decoder convs, head, fusion; (w, b) per conv.
  std::vector<TensorT<T>*> all_tensors() {
    std::vector<TensorT<T>*> out;
    for (auto& c : encoder) {
      out.push_back(&c.w);
      out.push_back(&c.b);
    }
    for (auto& c : decoder) {
      out.push_back(&c.w);
      out.push_back(&c.b);
    }
    out.push_back(&head.w);
    out.push_back(&head.b);
    out.push_back(&fusion.w);
    out.push_back(&fusion.b);
    return out;
  }
  std::vector<const TensorT<T>*> all_tensors() const {
    auto ptrs = const_cast<NetworkParamsT*>(this)->all_tensors();
    return {ptrs.begin(), ptrs.end()};
  }

  // Parameters updated by the optimizer; the fusion conv is frozen in
  // fixed_sum mode (the forward pass ignores it there anyway).
  std::vector<TensorT<T>*> trainable(FusionMode mode) {
    auto out = all_tensors();
    if (mode == FusionMode::fixed_sum) {
      out.pop_back();
      out.pop_back();
    }
    return out;
  }

  template <typename U>
  NetworkParamsT<U> cast() const {
    NetworkParamsT<U> out;
    for (const auto& c : encoder)
      out.encoder.push_back({c.w.template cast<U>(), c.b.template cast<U>()});
    for (const auto& c : decoder)
      out.decoder.push_back({c.w.template cast<U>(), c.b.template cast<U>()});
    out.head = {head.w.template cast<U>(), head.b.template cast<U>()};
    out.fusion = {fusion.w.template cast<U>(), fusion.b.template cast<U>()};
    return out;
  }
};

using NetworkParams = NetworkParamsT<float>;

// Zero-filled parameters with the correct shapes for `cfg`.
NetworkParams make_network_shell(const NetworkConfig& cfg);

// He-initialized weights (std = sqrt(2 / fan_in)), zero biases; the fusion
// conv starts as an exact channel sum (unit weights, zero bias).
NetworkParams build_network(const NetworkConfig& cfg, std::uint64_t seed);

std::int64_t param_count(const NetworkParams& p);

// Graph leaves in all_tensors() order. With train_leaves set, everything in
// the trainable set requires gradients.
template <typename T>
std::vector<typename GraphT<T>::Value> register_params(GraphT<T>& g,
                                                       const NetworkParamsT<T>& p,
                                                       const NetworkConfig& cfg,
                                                       bool train_leaves) {
  auto all = p.all_tensors();
  std::vector<typename GraphT<T>::Value> out;
  out.reserve(all.size());
  for (std::size_t i = 0; i < all.size(); ++i) {
    const bool frozen =
        cfg.fusion == FusionMode::fixed_sum && i + 2 >= all.size();
    out.push_back(g.leaf(*all[i], train_leaves && !frozen));
  }
  return out;
}

template <typename T>
struct ForwardNodes {
  typename GraphT<T>::Value decomposition;   // (B, d, H, W), linear
  typename GraphT<T>::Value reconstruction;  // (B, 1, H, W)
};

template <typename T>
ForwardNodes<T> build_forward(GraphT<T>& g, const NetworkConfig& cfg,
                              const std::vector<typename GraphT<T>::Value>& params,
                              typename GraphT<T>::Value x, RunMode mode) {
  using V = typename GraphT<T>::Value;
  const int L = cfg.levels;
  if (params.size() != std::size_t(4 * L + 2) * 2)
    throw std::invalid_argument("build_forward: parameter count mismatch");
  // Conv slots: encoder level i -> 2i, 2i+1; decoder stage m -> 2L+2m, +1;
  // head 4L; fusion 4L+1.
  auto conv = [&](V in, int slot) {
    return g.conv2d(in, params[std::size_t(2 * slot)],
                    params[std::size_t(2 * slot + 1)], 1, Pad::same);
  };
  V cur = x;
  std::vector<V> skips;
  for (int i = 0; i < L; ++i) {
    cur = g.relu(conv(cur, 2 * i));
    cur = g.relu(conv(cur, 2 * i + 1));
    if (i == L - 1) cur = g.dropout(cur, cfg.dropout_p, mode);
    skips.push_back(cur);
    cur = g.maxpool2(cur);
  }
  for (int m = 0; m < L; ++m) {
    const int j = L - 1 - m;
    cur = g.upsample2(cur);
    cur = g.concat_channels(cur, skips[std::size_t(j)]);
    cur = g.relu(conv(cur, 2 * L + 2 * m));
    cur = g.relu(conv(cur, 2 * L + 2 * m + 1));
  }
  V decomp = conv(cur, 4 * L);
  V recon = cfg.fusion == FusionMode::fixed_sum ? g.sum_channels(decomp)
                                                : conv(decomp, 4 * L + 1);
  return {decomp, recon};
}

struct ForwardResult {
  Tensor decomposition;
  Tensor reconstruction;
};

ForwardResult forward(const NetworkParams& p, const NetworkConfig& cfg,
                      const Tensor& x, RunMode mode, std::uint64_t seed = 0);

// Per-layer inference for one projection. Components are the head outputs
// clamped at zero (absorbance is non-negative); the reconstruction image is
// the sum of the clamped components, which is also what the layer-sum
// deviation metric uses.
struct Prediction {
  std::vector<ProjectionImage> components;  // labels "layer0".."layer{d-1}"
  ProjectionImage reconstruction;           // label "reconstruction"
  Tensor raw;                               // (1, d, H, W) unclamped head output
};

Prediction predict_decomposition(const NetworkParams& p, const NetworkConfig& cfg,
                                 const ProjectionImage& input);

// XDC1 checkpoint: magic "XDC1", u32 JSON length, config JSON, then every
// parameter tensor in all_tensors() order, each framed as XDT1.
struct Checkpoint {
  NetworkConfig config;
  NetworkParams params;
};

void save_checkpoint(const std::filesystem::path& path, const NetworkParams& p,
                     const NetworkConfig& cfg);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace xdecomp
