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

// Dense 1-D feature-map operations with hand-written reverse-mode gradients.
//
// A FeatureMap stores a batch of C x L maps side by side as a C x (B * L)
// matrix: sample b owns columns [b * L, (b + 1) * L). With batch 1 this is the
// plain channel x time layout. Every op is a free function templated on the
// scalar type; forward functions optionally fill a cache that the matching
// backward consumes. float is used for training and inference, double for
// finite-difference checks.

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "rrsbi/core.hpp"

namespace rrsbi::nn {

using Eigen::Index;

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
struct FeatureMap {
  Matrix<S> data;
  Index length = 0;

  FeatureMap() = default;
  FeatureMap(Matrix<S> d, Index len) : data(std::move(d)), length(len) {
    if (length < 1 || data.cols() % length != 0)
      fail(ErrorKind::Shape, "feature map columns must be a multiple of its length");
  }
  static FeatureMap zeros(Index channels, Index len, Index batch = 1) {
    return FeatureMap(Matrix<S>::Zero(channels, len * batch), len);
  }

  Index channels() const { return data.rows(); }
  Index batch() const { return length ? data.cols() / length : 0; }
  auto sample(Index b) const { return data.middleCols(b * length, length); }
  auto sample(Index b) { return data.middleCols(b * length, length); }
};

// ---------------------------------------------------------------------------
// Convolution (cross-correlation), arbitrary kernel / stride / zero padding.
// weight is C_out x (k * C_in); column kk * C_in + ci holds tap kk of input
// channel ci, so each im2col column is k stacked input columns.
// ---------------------------------------------------------------------------

template <typename S>
struct ConvLayer {
  Matrix<S> weight;
  Vector<S> bias;
  Index kernel = 3;
  Index stride = 1;
  Index padding = 1;

  Index in_channels() const { return weight.cols() / kernel; }
  Index out_channels() const { return weight.rows(); }
  Index output_length(Index in_length) const { return (in_length + 2 * padding - kernel) / stride + 1; }

  static ConvLayer zeros(Index in_ch, Index out_ch, Index kernel, Index stride = 1, Index padding = 0) {
    return {Matrix<S>::Zero(out_ch, kernel * in_ch), Vector<S>::Zero(out_ch), kernel, stride, padding};
  }
};

template <typename S>
struct ConvCache {
  Matrix<S> columns;
  Index in_length = 0;
  bool valid = false;
};

template <typename S>
struct ConvGrads {
  FeatureMap<S> input;
  Matrix<S> weight;
  Vector<S> bias;
};

template <typename S>
FeatureMap<S> conv1d_forward(const FeatureMap<S>& x, const ConvLayer<S>& layer, ConvCache<S>* cache = nullptr) {
  const Index cin = layer.in_channels(), k = layer.kernel;
  if (x.channels() != cin)
    fail(ErrorKind::Shape, "conv1d: input has " + std::to_string(x.channels()) + " channels, layer expects " +
                               std::to_string(cin));
  const Index lin = x.length, lout = layer.output_length(lin), batch = x.batch();
  if (lout < 1) fail(ErrorKind::Shape, "conv1d: input too short for kernel");

  Matrix<S> cols = Matrix<S>::Zero(k * cin, batch * lout);
  for (Index b = 0; b < batch; ++b) {
    for (Index t = 0; t < lout; ++t) {
      const Index col = b * lout + t;
      for (Index kk = 0; kk < k; ++kk) {
        const Index src = t * layer.stride + kk - layer.padding;
        if (src >= 0 && src < lin) cols.block(kk * cin, col, cin, 1) = x.data.col(b * lin + src);
      }
    }
  }
  Matrix<S> y(layer.out_channels(), batch * lout);
  y.noalias() = layer.weight * cols;
  y.colwise() += layer.bias;
  if (cache) {
    cache->columns = std::move(cols);
    cache->in_length = lin;
    cache->valid = true;
  }
  return FeatureMap<S>(std::move(y), lout);
}

template <typename S>
ConvGrads<S> conv1d_backward(const FeatureMap<S>& dy, const ConvLayer<S>& layer, const ConvCache<S>& cache) {
  if (!cache.valid) fail(ErrorKind::Usage, "conv1d_backward: forward cache missing");
  const Index cin = layer.in_channels(), k = layer.kernel;
  const Index lin = cache.in_length, lout = dy.length, batch = dy.batch();
  if (dy.channels() != layer.out_channels() || cache.columns.cols() != dy.data.cols())
    fail(ErrorKind::Shape, "conv1d_backward: upstream gradient does not match cached forward");

  ConvGrads<S> g;
  g.weight.noalias() = dy.data * cache.columns.transpose();
  g.bias = dy.data.rowwise().sum();
  Matrix<S> dcols(k * cin, batch * lout);
  dcols.noalias() = layer.weight.transpose() * dy.data;
  g.input = FeatureMap<S>::zeros(cin, lin, batch);
  for (Index b = 0; b < batch; ++b) {
    for (Index t = 0; t < lout; ++t) {
      const Index col = b * lout + t;
      for (Index kk = 0; kk < k; ++kk) {
        const Index src = t * layer.stride + kk - layer.padding;
        if (src >= 0 && src < lin) g.input.data.col(b * lin + src) += dcols.block(kk * cin, col, cin, 1);
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Transposed convolution with kernel == stride (non-overlapping taps), which
// multiplies the length by `kernel`. weight is (k * C_out) x C_in; rows
// [kk * C_out, (kk + 1) * C_out) map an input column to output position
// t * k + kk.
// ---------------------------------------------------------------------------

template <typename S>
struct TransposedConvLayer {
  Matrix<S> weight;
  Vector<S> bias;
  Index kernel = 2;

  Index in_channels() const { return weight.cols(); }
  Index out_channels() const { return bias.size(); }

  static TransposedConvLayer zeros(Index in_ch, Index out_ch, Index kernel = 2) {
    return {Matrix<S>::Zero(kernel * out_ch, in_ch), Vector<S>::Zero(out_ch), kernel};
  }
};

template <typename S>
struct TransposedConvCache {
  Matrix<S> input;
  bool valid = false;
};

template <typename S>
FeatureMap<S> transposed_conv1d_forward(const FeatureMap<S>& x, const TransposedConvLayer<S>& layer,
                                        TransposedConvCache<S>* cache = nullptr) {
  if (x.channels() != layer.in_channels()) fail(ErrorKind::Shape, "transposed_conv1d: channel mismatch");
  const Index k = layer.kernel, cout = layer.out_channels(), lin = x.length, batch = x.batch();
  Matrix<S> z(k * cout, x.data.cols());
  z.noalias() = layer.weight * x.data;
  FeatureMap<S> y = FeatureMap<S>::zeros(cout, lin * k, batch);
  for (Index b = 0; b < batch; ++b)
    for (Index t = 0; t < lin; ++t)
      for (Index kk = 0; kk < k; ++kk)
        y.data.col(b * lin * k + t * k + kk) = z.block(kk * cout, b * lin + t, cout, 1) + layer.bias;
  if (cache) {
    cache->input = x.data;
    cache->valid = true;
  }
  return y;
}

template <typename S>
struct TransposedConvGrads {
  FeatureMap<S> input;
  Matrix<S> weight;
  Vector<S> bias;
};

template <typename S>
TransposedConvGrads<S> transposed_conv1d_backward(const FeatureMap<S>& dy, const TransposedConvLayer<S>& layer,
                                                  const TransposedConvCache<S>& cache) {
  if (!cache.valid) fail(ErrorKind::Usage, "transposed_conv1d_backward: forward cache missing");
  const Index k = layer.kernel, cout = layer.out_channels(), lin = dy.length / k, batch = dy.batch();
  if (dy.channels() != cout || dy.length % k != 0 || cache.input.cols() != lin * batch)
    fail(ErrorKind::Shape, "transposed_conv1d_backward: upstream gradient does not match cached forward");
  Matrix<S> dz(k * cout, lin * batch);
  for (Index b = 0; b < batch; ++b)
    for (Index t = 0; t < lin; ++t)
      for (Index kk = 0; kk < k; ++kk)
        dz.block(kk * cout, b * lin + t, cout, 1) = dy.data.col(b * lin * k + t * k + kk);
  TransposedConvGrads<S> g;
  g.weight.noalias() = dz * cache.input.transpose();
  g.bias = dy.data.rowwise().sum();
  Matrix<S> dx(layer.in_channels(), lin * batch);
  dx.noalias() = layer.weight.transpose() * dz;
  g.input = FeatureMap<S>(std::move(dx), lin);
  return g;
}

// ---------------------------------------------------------------------------
// Max pooling, kernel 2 / stride 2. Ties go to the lower index.
// ---------------------------------------------------------------------------

struct PoolCache {
  std::vector<std::uint8_t> pick_right;  // one per output element, column-major
  Index in_length = 0;
  bool valid = false;
};

template <typename S>
FeatureMap<S> maxpool1d_forward(const FeatureMap<S>& x, PoolCache* cache = nullptr) {
  if (x.length % 2 != 0) fail(ErrorKind::Shape, "maxpool1d: length " + std::to_string(x.length) + " is odd");
  const Index c = x.channels(), lout = x.length / 2, cols = x.batch() * lout;
  Matrix<S> y(c, cols);
  if (cache) {
    cache->pick_right.assign(static_cast<std::size_t>(c * cols), 0);
    cache->in_length = x.length;
    cache->valid = true;
  }
  for (Index j = 0; j < cols; ++j) {
    for (Index ch = 0; ch < c; ++ch) {
      const S left = x.data(ch, 2 * j), right = x.data(ch, 2 * j + 1);
      const bool r = right > left;
      y(ch, j) = r ? right : left;
      if (cache) cache->pick_right[static_cast<std::size_t>(j * c + ch)] = r;
    }
  }
  return FeatureMap<S>(std::move(y), lout);
}

template <typename S>
FeatureMap<S> maxpool1d_backward(const FeatureMap<S>& dy, const PoolCache& cache) {
  if (!cache.valid) fail(ErrorKind::Usage, "maxpool1d_backward: forward cache missing");
  const Index c = dy.channels(), cols = dy.data.cols();
  if (static_cast<std::size_t>(c * cols) != cache.pick_right.size())
    fail(ErrorKind::Shape, "maxpool1d_backward: gradient does not match cached forward");
  FeatureMap<S> dx = FeatureMap<S>::zeros(c, cache.in_length, dy.batch());
  for (Index j = 0; j < cols; ++j)
    for (Index ch = 0; ch < c; ++ch)
      dx.data(ch, 2 * j + cache.pick_right[static_cast<std::size_t>(j * c + ch)]) = dy.data(ch, j);
  return dx;
}

// ---------------------------------------------------------------------------
// Elementwise / reshaping ops.
// ---------------------------------------------------------------------------

template <typename S>
FeatureMap<S> relu_forward(const FeatureMap<S>& x) {
  return FeatureMap<S>(x.data.cwiseMax(S(0)), x.length);
}

// `output` is the forward result; relu(x) > 0 exactly where x > 0.
template <typename S>
FeatureMap<S> relu_backward(const FeatureMap<S>& dy, const FeatureMap<S>& output) {
  return FeatureMap<S>((output.data.array() > S(0)).select(dy.data, S(0)), dy.length);
}

/// Global average pooling over time; result is C x B (one column per sample).
template <typename S>
Matrix<S> global_avg_pool(const FeatureMap<S>& x) {
  Matrix<S> out(x.channels(), x.batch());
  for (Index b = 0; b < x.batch(); ++b)
    out.col(b) = (x.sample(b).template cast<double>().rowwise().sum() / static_cast<double>(x.length))
                     .template cast<S>();
  return out;
}

template <typename S>
FeatureMap<S> global_avg_pool_backward(const Matrix<S>& dy, Index length) {
  FeatureMap<S> dx = FeatureMap<S>::zeros(dy.rows(), length, dy.cols());
  for (Index b = 0; b < dy.cols(); ++b) dx.sample(b).colwise() = dy.col(b) / static_cast<S>(length);
  return dx;
}

template <typename S>
FeatureMap<S> concat_channels(const FeatureMap<S>& a, const FeatureMap<S>& b) {
  if (a.length != b.length || a.data.cols() != b.data.cols())
    fail(ErrorKind::Shape, "concat_channels: length/batch mismatch");
  Matrix<S> out(a.channels() + b.channels(), a.data.cols());
  out << a.data, b.data;
  return FeatureMap<S>(std::move(out), a.length);
}

template <typename S>
std::pair<FeatureMap<S>, FeatureMap<S>> split_channels(const FeatureMap<S>& dy, Index first_channels) {
  return {FeatureMap<S>(dy.data.topRows(first_channels), dy.length),
          FeatureMap<S>(dy.data.bottomRows(dy.channels() - first_channels), dy.length)};
}

// ---------------------------------------------------------------------------
// Parameter views and AdamW.
// ---------------------------------------------------------------------------

/// Flat view of one parameter tensor and its gradient.
template <typename S>
struct TensorRef {
  std::string name;
  Eigen::Map<Vector<S>> value;
  Eigen::Map<Vector<S>> grad;
};

struct AdamWConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

template <typename S>
struct AdamWState {
  AdamWConfig config;
  std::int64_t step = 0;
  std::vector<Vector<S>> first_moment;
  std::vector<Vector<S>> second_moment;

  bool operator==(const AdamWState& o) const {
    if (step != o.step || first_moment.size() != o.first_moment.size()) return false;
    for (std::size_t i = 0; i < first_moment.size(); ++i)
      if (first_moment[i] != o.first_moment[i] || second_moment[i] != o.second_moment[i]) return false;
    return true;
  }
};

/// One decoupled-weight-decay Adam update, in place. `lr` overrides
/// config.lr when non-negative (used by the learning-rate schedule).
template <typename S>
void adamw_step(std::vector<TensorRef<S>>& tensors, AdamWState<S>& state, double lr = -1.0) {
  const AdamWConfig& cfg = state.config;
  if (lr < 0.0) lr = cfg.lr;
  if (state.first_moment.empty()) {
    for (auto& t : tensors) {
      state.first_moment.push_back(Vector<S>::Zero(t.value.size()));
      state.second_moment.push_back(Vector<S>::Zero(t.value.size()));
    }
  }
  if (state.first_moment.size() != tensors.size())
    fail(ErrorKind::Shape, "adamw_step: optimizer state does not match parameter list");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (state.first_moment[i].size() != tensors[i].value.size() || tensors[i].grad.size() != tensors[i].value.size())
      fail(ErrorKind::Shape, "adamw_step: shape mismatch for " + tensors[i].name);
    if (!tensors[i].grad.allFinite())
      fail(ErrorKind::Numerical, "training diverged: non-finite gradient in " + tensors[i].name + " at step " +
                                     std::to_string(state.step + 1));
  }

  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
  const S decay = static_cast<S>(1.0 - lr * cfg.weight_decay);
  const S step_size = static_cast<S>(lr / bc1);
  const S inv_sqrt_bc2 = static_cast<S>(1.0 / std::sqrt(bc2));
  const S eps = static_cast<S>(cfg.eps);
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    auto& t = tensors[i];
    m = b1 * m + (S(1) - b1) * t.grad;
    v = b2 * v + (S(1) - b2) * t.grad.cwiseAbs2();
    t.value *= decay;
    t.value.array() -= step_size * m.array() / (v.array().sqrt() * inv_sqrt_bc2 + eps);
  }
}

// ---------------------------------------------------------------------------
// Weight checkpoint: "UNWT", version u32, layer count u32, then per tensor
// {name, rank u32, dims u32..., f32 data row-major}.
// ---------------------------------------------------------------------------

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<float> data;
};

void write_checkpoint(std::ostream& out, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_checkpoint(std::istream& in);

// Layout conversions between the in-memory weights and the conventional
// (C_out, C_in, k) / (C_in, C_out, k) row-major checkpoint order.
template <typename S>
NamedTensor conv_weight_tensor(const std::string& name, const ConvLayer<S>& layer) {
  const Index cout = layer.out_channels(), cin = layer.in_channels(), k = layer.kernel;
  NamedTensor t{name, {static_cast<std::uint32_t>(cout), static_cast<std::uint32_t>(cin), static_cast<std::uint32_t>(k)}, {}};
  t.data.reserve(static_cast<std::size_t>(cout * cin * k));
  for (Index o = 0; o < cout; ++o)
    for (Index i = 0; i < cin; ++i)
      for (Index kk = 0; kk < k; ++kk) t.data.push_back(static_cast<float>(layer.weight(o, kk * cin + i)));
  return t;
}

template <typename S>
NamedTensor transposed_weight_tensor(const std::string& name, const TransposedConvLayer<S>& layer) {
  const Index cout = layer.out_channels(), cin = layer.in_channels(), k = layer.kernel;
  NamedTensor t{name, {static_cast<std::uint32_t>(cin), static_cast<std::uint32_t>(cout), static_cast<std::uint32_t>(k)}, {}};
  t.data.reserve(static_cast<std::size_t>(cout * cin * k));
  for (Index i = 0; i < cin; ++i)
    for (Index o = 0; o < cout; ++o)
      for (Index kk = 0; kk < k; ++kk) t.data.push_back(static_cast<float>(layer.weight(kk * cout + o, i)));
  return t;
}

template <typename S>
NamedTensor vector_tensor(const std::string& name, const Vector<S>& v) {
  NamedTensor t{name, {static_cast<std::uint32_t>(v.size())}, {}};
  for (Index i = 0; i < v.size(); ++i) t.data.push_back(static_cast<float>(v[i]));
  return t;
}

template <typename S>
ConvLayer<S> conv_from_tensors(const NamedTensor& w, const NamedTensor& b, Index stride, Index padding) {
  if (w.shape.size() != 3 || b.shape.size() != 1 || b.shape[0] != w.shape[0])
    fail(ErrorKind::Io, "checkpoint tensor " + w.name + " has an unexpected shape");
  const Index cout = w.shape[0], cin = w.shape[1], k = w.shape[2];
  ConvLayer<S> layer = ConvLayer<S>::zeros(cin, cout, k, stride, padding);
  std::size_t idx = 0;
  for (Index o = 0; o < cout; ++o)
    for (Index i = 0; i < cin; ++i)
      for (Index kk = 0; kk < k; ++kk) layer.weight(o, kk * cin + i) = static_cast<S>(w.data[idx++]);
  for (Index o = 0; o < cout; ++o) layer.bias[o] = static_cast<S>(b.data[static_cast<std::size_t>(o)]);
  return layer;
}

template <typename S>
TransposedConvLayer<S> transposed_from_tensors(const NamedTensor& w, const NamedTensor& b) {
  if (w.shape.size() != 3 || b.shape.size() != 1 || b.shape[0] != w.shape[1])
    fail(ErrorKind::Io, "checkpoint tensor " + w.name + " has an unexpected shape");
  const Index cin = w.shape[0], cout = w.shape[1], k = w.shape[2];
  TransposedConvLayer<S> layer = TransposedConvLayer<S>::zeros(cin, cout, k);
  std::size_t idx = 0;
  for (Index i = 0; i < cin; ++i)
    for (Index o = 0; o < cout; ++o)
      for (Index kk = 0; kk < k; ++kk) layer.weight(kk * cout + o, i) = static_cast<S>(w.data[idx++]);
  for (Index o = 0; o < cout; ++o) layer.bias[o] = static_cast<S>(b.data[static_cast<std::size_t>(o)]);
  return layer;
}

}  // namespace rrsbi::nn
