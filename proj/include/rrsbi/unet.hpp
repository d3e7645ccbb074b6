// Copyright 2026 The rrsbi Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Masked 1-D U-Net autoencoder.
//
// Encoder: `levels` blocks of two (conv k=3 p=1, ReLU) layers, each followed by
// max-pooling, with channels base, 2*base, 4*base, ...; then a two-conv
// bottleneck with base * 2^levels channels. Decoder: per level, a k=2 s=2
// transposed conv halves the channels and doubles the length, the result is
// concatenated with the encoder skip and passed through another two-conv
// block. A 1x1 conv maps the finest decoder output to one channel.

#pragma once

#include <Eigen/Core>

#include <boost/random/uniform_int_distribution.hpp>
#include <boost/random/uniform_real_distribution.hpp>

#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "rrsbi/nn.hpp"
#include "rrsbi/simulators.hpp"

namespace rrsbi {

struct UNetConfig {
  int base_filters = 64;
  int levels = 3;
  int input_length = 64;

  int level_channels(int level) const { return base_filters << level; }  // 0-based level
  int bottleneck_channels() const { return base_filters << levels; }
  void validate() const;
};

template <typename S>
struct ConvBlock {
  nn::ConvLayer<S> first;
  nn::ConvLayer<S> second;
};

template <typename S>
struct UNetParams {
  std::vector<ConvBlock<S>> encoder;
  ConvBlock<S> bottleneck;
  std::vector<nn::TransposedConvLayer<S>> up;  // up[l] outputs level-l channels
  std::vector<ConvBlock<S>> decoder;           // decoder[l] runs at level l
  nn::ConvLayer<S> head;

  int levels() const { return static_cast<int>(encoder.size()); }
  int base_filters() const { return static_cast<int>(encoder.front().first.out_channels()); }

  static UNetParams zeros(const UNetConfig& cfg) {
    cfg.validate();
    auto block = [](Eigen::Index in, Eigen::Index out) {
      return ConvBlock<S>{nn::ConvLayer<S>::zeros(in, out, 3, 1, 1), nn::ConvLayer<S>::zeros(out, out, 3, 1, 1)};
    };
    UNetParams p;
    Eigen::Index in = 1;
    for (int l = 0; l < cfg.levels; ++l) {
      p.encoder.push_back(block(in, cfg.level_channels(l)));
      in = cfg.level_channels(l);
    }
    p.bottleneck = block(in, cfg.bottleneck_channels());
    for (int l = 0; l < cfg.levels; ++l) {
      p.up.push_back(nn::TransposedConvLayer<S>::zeros(cfg.level_channels(l + 1), cfg.level_channels(l), 2));
      p.decoder.push_back(block(2 * cfg.level_channels(l), cfg.level_channels(l)));
    }
    p.head = nn::ConvLayer<S>::zeros(cfg.base_filters, 1, 1, 1, 0);
    return p;
  }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases, one
  /// random stream per tensor.
  static UNetParams init(const UNetConfig& cfg, std::uint64_t seed) {
    UNetParams p = zeros(cfg);
    std::uint64_t index = 0;
    auto fill = [&](auto& weight, auto& bias, Eigen::Index fan_in) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      boost::random::uniform_real_distribution<double> dist(-bound, bound);
      Engine rng = make_engine(seed, 0x494e4954, index++);
      for (Eigen::Index i = 0; i < weight.size(); ++i) weight.data()[i] = static_cast<S>(dist(rng));
      for (Eigen::Index i = 0; i < bias.size(); ++i) bias.data()[i] = static_cast<S>(dist(rng));
    };
    auto conv = [&](nn::ConvLayer<S>& c) { fill(c.weight, c.bias, c.weight.cols()); };
    for (auto& b : p.encoder) conv(b.first), conv(b.second);
    conv(p.bottleneck.first), conv(p.bottleneck.second);
    for (int l = p.levels() - 1; l >= 0; --l) {
      fill(p.up[l].weight, p.up[l].bias, p.up[l].in_channels() * p.up[l].kernel);
      conv(p.decoder[l].first), conv(p.decoder[l].second);
    }
    conv(p.head);
    return p;
  }

  /// Calls f(name, tensor) for every parameter tensor in a fixed order.
  template <typename F>
  void visit(F&& f) {
    auto block = [&](const std::string& prefix, ConvBlock<S>& b) {
      f(prefix + ".conv1.weight", b.first.weight);
      f(prefix + ".conv1.bias", b.first.bias);
      f(prefix + ".conv2.weight", b.second.weight);
      f(prefix + ".conv2.bias", b.second.bias);
    };
    for (int l = 0; l < levels(); ++l) block("enc" + std::to_string(l + 1), encoder[l]);
    block("bottleneck", bottleneck);
    for (int l = levels() - 1; l >= 0; --l) {
      f("up" + std::to_string(l + 1) + ".weight", up[l].weight);
      f("up" + std::to_string(l + 1) + ".bias", up[l].bias);
      block("dec" + std::to_string(l + 1), decoder[l]);
    }
    f("head.weight", head.weight);
    f("head.bias", head.bias);
  }

  std::vector<nn::TensorRef<S>> tensor_refs(UNetParams& grads) {
    std::vector<std::pair<S*, Eigen::Index>> g;
    grads.visit([&](const std::string&, auto& t) { g.emplace_back(t.data(), t.size()); });
    std::vector<nn::TensorRef<S>> refs;
    std::size_t i = 0;
    visit([&](const std::string& name, auto& t) {
      if (i >= g.size() || g[i].second != t.size()) fail(ErrorKind::Shape, "gradient layout does not match parameters");
      refs.push_back({name, Eigen::Map<nn::Vector<S>>(t.data(), t.size()),
                      Eigen::Map<nn::Vector<S>>(g[i].first, g[i].second)});
      ++i;
    });
    return refs;
  }

  std::size_t num_parameters() {
    std::size_t n = 0;
    visit([&](const std::string&, auto& t) { n += static_cast<std::size_t>(t.size()); });
    return n;
  }

  void set_zero() {
    visit([](const std::string&, auto& t) { t.setZero(); });
  }

  UNetParams& operator+=(UNetParams& other) {
    std::vector<S*> dst;
    visit([&](const std::string&, auto& t) { dst.push_back(t.data()); });
    std::size_t i = 0;
    other.visit([&](const std::string&, auto& t) {
      Eigen::Map<nn::Vector<S>>(dst[i++], t.size()) += Eigen::Map<const nn::Vector<S>>(t.data(), t.size());
    });
    return *this;
  }

  template <typename T>
  UNetParams<T> cast() const {
    auto conv = [](const nn::ConvLayer<S>& c) {
      return nn::ConvLayer<T>{c.weight.template cast<T>(), c.bias.template cast<T>(), c.kernel, c.stride, c.padding};
    };
    auto block = [&](const ConvBlock<S>& b) { return ConvBlock<T>{conv(b.first), conv(b.second)}; };
    UNetParams<T> out;
    for (const auto& b : encoder) out.encoder.push_back(block(b));
    out.bottleneck = block(bottleneck);
    for (const auto& u : up)
      out.up.push_back({u.weight.template cast<T>(), u.bias.template cast<T>(), u.kernel});
    for (const auto& b : decoder) out.decoder.push_back(block(b));
    out.head = conv(head);
    return out;
  }

  std::vector<nn::NamedTensor> to_tensors() const {
    std::vector<nn::NamedTensor> t;
    auto conv = [&](const std::string& name, const nn::ConvLayer<S>& c) {
      t.push_back(nn::conv_weight_tensor(name + ".weight", c));
      t.push_back(nn::vector_tensor(name + ".bias", c.bias));
    };
    auto block = [&](const std::string& prefix, const ConvBlock<S>& b) {
      conv(prefix + ".conv1", b.first);
      conv(prefix + ".conv2", b.second);
    };
    for (int l = 0; l < levels(); ++l) block("enc" + std::to_string(l + 1), encoder[l]);
    block("bottleneck", bottleneck);
    for (int l = levels() - 1; l >= 0; --l) {
      const std::string name = "up" + std::to_string(l + 1);
      t.push_back(nn::transposed_weight_tensor(name + ".weight", up[l]));
      t.push_back(nn::vector_tensor(name + ".bias", up[l].bias));
      block("dec" + std::to_string(l + 1), decoder[l]);
    }
    conv("head", head);
    return t;
  }

  static UNetParams from_tensors(const std::vector<nn::NamedTensor>& tensors) {
    std::map<std::string, const nn::NamedTensor*> by_name;
    for (const auto& t : tensors) by_name[t.name] = &t;
    auto get = [&](const std::string& name) -> const nn::NamedTensor& {
      auto it = by_name.find(name);
      if (it == by_name.end()) fail(ErrorKind::Io, "checkpoint is missing tensor " + name);
      return *it->second;
    };
    auto conv = [&](const std::string& name, Eigen::Index padding) {
      return nn::conv_from_tensors<S>(get(name + ".weight"), get(name + ".bias"), 1, padding);
    };
    auto block = [&](const std::string& prefix) {
      return ConvBlock<S>{conv(prefix + ".conv1", 1), conv(prefix + ".conv2", 1)};
    };
    int levels = 0;
    while (by_name.count("enc" + std::to_string(levels + 1) + ".conv1.weight")) ++levels;
    if (levels == 0) fail(ErrorKind::Io, "checkpoint has no encoder blocks");
    UNetParams p;
    for (int l = 0; l < levels; ++l) p.encoder.push_back(block("enc" + std::to_string(l + 1)));
    p.bottleneck = block("bottleneck");
    p.up.resize(static_cast<std::size_t>(levels));
    p.decoder.resize(static_cast<std::size_t>(levels));
    for (int l = 0; l < levels; ++l) {
      const std::string up_name = "up" + std::to_string(l + 1);
      p.up[l] = nn::transposed_from_tensors<S>(get(up_name + ".weight"), get(up_name + ".bias"));
      p.decoder[l] = block("dec" + std::to_string(l + 1));
    }
    p.head = conv("head", 0);
    // Shape consistency is validated against a freshly built architecture.
    UNetConfig cfg{p.base_filters(), levels, 8 << levels};
    UNetParams ref = zeros(cfg);
    std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes;
    ref.visit([&](const std::string&, auto& t) { shapes.emplace_back(t.rows(), t.cols()); });
    std::size_t i = 0;
    p.visit([&](const std::string& name, auto& t) {
      if (shapes[i++] != std::make_pair(t.rows(), t.cols()))
        fail(ErrorKind::Io, "checkpoint tensor " + name + " has a shape inconsistent with the architecture");
    });
    return p;
  }
};

void save_weights(const std::filesystem::path& path, const UNetParams<float>& params);
UNetParams<float> load_weights(const std::filesystem::path& path);
std::uint64_t weights_checksum(const UNetParams<float>& params);

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

template <typename S>
struct EncoderFeatures {
  std::vector<nn::FeatureMap<S>> levels;  // e(1) ... e(L)
  nn::FeatureMap<S> bottleneck;
};

template <typename S>
struct UNetOutput {
  EncoderFeatures<S> features;
  nn::FeatureMap<S> reconstruction;
};

template <typename S>
struct BlockCache {
  nn::ConvCache<S> first, second;
  nn::FeatureMap<S> first_out, second_out;
};

template <typename S>
struct UNetCache {
  std::vector<BlockCache<S>> encoder;
  std::vector<nn::PoolCache> pool;
  BlockCache<S> bottleneck;
  std::vector<nn::TransposedConvCache<S>> up;
  std::vector<BlockCache<S>> decoder;
  nn::ConvCache<S> head;
};

template <typename S>
nn::FeatureMap<S> block_forward(const nn::FeatureMap<S>& x, const ConvBlock<S>& b, BlockCache<S>* cache) {
  auto a1 = nn::relu_forward(nn::conv1d_forward(x, b.first, cache ? &cache->first : nullptr));
  auto a2 = nn::relu_forward(nn::conv1d_forward(a1, b.second, cache ? &cache->second : nullptr));
  if (cache) {
    cache->first_out = std::move(a1);
    cache->second_out = a2;
  }
  return a2;
}

template <typename S>
nn::FeatureMap<S> block_backward(const nn::FeatureMap<S>& dy, const ConvBlock<S>& b, const BlockCache<S>& cache,
                                 ConvBlock<S>& grads) {
  auto g2 = nn::conv1d_backward(nn::relu_backward(dy, cache.second_out), b.second, cache.second);
  grads.second.weight += g2.weight;
  grads.second.bias += g2.bias;
  auto g1 = nn::conv1d_backward(nn::relu_backward(g2.input, cache.first_out), b.first, cache.first);
  grads.first.weight += g1.weight;
  grads.first.bias += g1.bias;
  return std::move(g1.input);
}

/// Encoder pass only. x is 1 x (B * T), already normalized and masked.
template <typename S>
EncoderFeatures<S> unet_encode(const UNetParams<S>& p, const nn::FeatureMap<S>& x, UNetCache<S>* cache = nullptr) {
  const int levels = p.levels();
  if (x.channels() != 1) fail(ErrorKind::Shape, "U-Net input must have one channel");
  if (x.length % (1 << levels) != 0)
    fail(ErrorKind::Shape, "input length " + std::to_string(x.length) + " is not divisible by 2^" +
                               std::to_string(levels));
  if (cache) {
    cache->encoder.resize(static_cast<std::size_t>(levels));
    cache->pool.resize(static_cast<std::size_t>(levels));
  }
  EncoderFeatures<S> f;
  nn::FeatureMap<S> h = x;
  for (int l = 0; l < levels; ++l) {
    f.levels.push_back(block_forward(h, p.encoder[l], cache ? &cache->encoder[l] : nullptr));
    h = nn::maxpool1d_forward(f.levels.back(), cache ? &cache->pool[l] : nullptr);
  }
  f.bottleneck = block_forward(h, p.bottleneck, cache ? &cache->bottleneck : nullptr);
  return f;
}

template <typename S>
UNetOutput<S> unet_forward(const UNetParams<S>& p, const nn::FeatureMap<S>& x, UNetCache<S>* cache = nullptr) {
  const int levels = p.levels();
  UNetOutput<S> out;
  out.features = unet_encode(p, x, cache);
  if (cache) {
    cache->up.resize(static_cast<std::size_t>(levels));
    cache->decoder.resize(static_cast<std::size_t>(levels));
  }
  nn::FeatureMap<S> d = out.features.bottleneck;
  for (int l = levels - 1; l >= 0; --l) {
    auto u = nn::transposed_conv1d_forward(d, p.up[l], cache ? &cache->up[l] : nullptr);
    d = block_forward(nn::concat_channels(u, out.features.levels[l]), p.decoder[l],
                      cache ? &cache->decoder[l] : nullptr);
  }
  out.reconstruction = nn::conv1d_forward(d, p.head, cache ? &cache->head : nullptr);
  return out;
}

/// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(reconstruction).
template <typename S>
void unet_backward(const UNetParams<S>& p, const UNetCache<S>& cache, const nn::FeatureMap<S>& d_recon,
                   UNetParams<S>& grads) {
  const int levels = p.levels();
  if (cache.decoder.size() != static_cast<std::size_t>(levels))
    fail(ErrorKind::Usage, "unet_backward: forward cache missing");
  auto gh = nn::conv1d_backward(d_recon, p.head, cache.head);
  grads.head.weight += gh.weight;
  grads.head.bias += gh.bias;

  std::vector<nn::FeatureMap<S>> d_skip(static_cast<std::size_t>(levels));
  nn::FeatureMap<S> d = std::move(gh.input);
  for (int l = 0; l < levels; ++l) {
    auto dz = block_backward(d, p.decoder[l], cache.decoder[l], grads.decoder[l]);
    auto [du, de] = nn::split_channels(dz, p.up[l].out_channels());
    d_skip[l] = std::move(de);
    auto gu = nn::transposed_conv1d_backward(du, p.up[l], cache.up[l]);
    grads.up[l].weight += gu.weight;
    grads.up[l].bias += gu.bias;
    d = std::move(gu.input);
  }
  d = block_backward(d, p.bottleneck, cache.bottleneck, grads.bottleneck);
  for (int l = levels - 1; l >= 0; --l) {
    auto de = nn::maxpool1d_backward(d, cache.pool[l]);
    de.data += d_skip[l].data;
    d = block_backward(de, p.encoder[l], cache.encoder[l], grads.encoder[l]);
  }
}

// ---------------------------------------------------------------------------
// Masking and loss
// ---------------------------------------------------------------------------

/// m_t = 1 marks a masked (hidden) position.
using Mask = Eigen::Array<std::uint8_t, Eigen::Dynamic, 1>;

struct MaskSpec {
  double ratio = 0.75;
  std::uint64_t seed = 0;
};

int kept_positions(double ratio, int length);
Mask make_mask(const MaskSpec& spec, int length);
LightCurve apply_mask(const LightCurve& x_norm, const Mask& m);

/// sum_t m_t (x_hat_t - x_t)^2 / sum_t m_t
double masked_loss(const Eigen::VectorXd& reconstruction, const Eigen::VectorXd& target, const Mask& m);

/// Mean masked loss over a batch; writes d(loss)/d(reconstruction) if asked.
template <typename S>
double masked_loss_batch(const nn::FeatureMap<S>& reconstruction, const nn::FeatureMap<S>& target,
                         std::span<const Mask> masks, nn::FeatureMap<S>* grad = nullptr) {
  const Eigen::Index batch = reconstruction.batch(), len = reconstruction.length;
  if (target.data.cols() != reconstruction.data.cols() || static_cast<Eigen::Index>(masks.size()) != batch)
    fail(ErrorKind::Shape, "masked_loss_batch: batch shapes disagree");
  if (grad) *grad = nn::FeatureMap<S>::zeros(1, len, batch);
  double total = 0.0;
  for (Eigen::Index b = 0; b < batch; ++b) {
    const Mask& m = masks[static_cast<std::size_t>(b)];
    if (m.size() != len) fail(ErrorKind::Shape, "masked_loss_batch: mask length mismatch");
    const double count = m.template cast<double>().sum();
    if (count == 0.0) fail(ErrorKind::Usage, "masked loss undefined: no masked positions");
    double sum = 0.0;
    for (Eigen::Index t = 0; t < len; ++t) {
      if (!m[t]) continue;
      const double e = static_cast<double>(reconstruction.data(0, b * len + t)) - static_cast<double>(target.data(0, b * len + t));
      sum += e * e;
      if (grad) grad->data(0, b * len + t) = static_cast<S>(2.0 * e / count / static_cast<double>(batch));
    }
    total += sum / count;
  }
  return total / static_cast<double>(batch);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  int epochs = 200;
  int batch_size = 64;
  double lr = 1e-5;  // linearly decayed to zero over `epochs`
  double mask_ratio = 0.75;
  std::uint64_t seed = 0;
  double validation_fraction = 0.0;
  nn::AdamWConfig adamw{};
  int chunk_size = 16;  // gradient-reduction granularity; fixed so results ignore thread count
  std::filesystem::path checkpoint_path;  // written after every epoch when non-empty
  bool verbose = false;
};

struct TrainResult {
  UNetParams<float> params;
  std::vector<double> loss_history;        // mean masked training loss per epoch
  std::vector<double> validation_history;  // per epoch, when a validation split is used
  double initial_validation_loss = std::numeric_limits<double>::quiet_NaN();
  bool diverged = false;
  std::string message;
};

TrainResult train(const SimulationBank& bank, const UNetConfig& arch, const TrainConfig& cfg);

/// Mean masked loss of `params` on the given bank rows with masks keyed by
/// (seed, row). Used for held-out evaluation.
double evaluate_masked_loss(const UNetParams<float>& params, const SimulationBank& bank,
                            std::span<const Eigen::Index> rows, double mask_ratio, std::uint64_t seed);

void write_loss_history(const std::filesystem::path& path, const TrainResult& result);

/// Normalized curves for bank rows `rows`, laid out as a 1 x (B * T) map.
nn::FeatureMap<float> normalized_batch(const SimulationBank& bank, std::span<const Eigen::Index> rows);

// ---------------------------------------------------------------------------
// Receptive field
// ---------------------------------------------------------------------------

struct RfLayer {
  int kernel = 3;
  int stride = 1;
};

/// Standard recursion: r += (k - 1) * jump; jump *= stride.
int receptive_field(std::span<const RfLayer> layers);
/// Receptive field of one bottleneck unit for the encoder described by cfg.
int receptive_field(const UNetConfig& cfg);

}  // namespace rrsbi
