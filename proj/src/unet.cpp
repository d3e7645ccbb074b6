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

#include "rrsbi/unet.hpp"

#include <chrono>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

namespace rrsbi {

void UNetConfig::validate() const {
  if (base_filters < 1) fail(ErrorKind::Config, "base_filters must be positive");
  if (levels < 1 || levels > 8) fail(ErrorKind::Config, "levels must be in [1, 8]");
  if (input_length < 1 || input_length % (1 << levels) != 0)
    fail(ErrorKind::Config, "input length " + std::to_string(input_length) + " must be divisible by 2^levels");
}

void save_weights(const std::filesystem::path& path, const UNetParams<float>& params) {
  // Write-then-rename so an interrupted run never leaves a torn checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) fail(ErrorKind::Io, "cannot open " + tmp.string() + " for writing");
    nn::write_checkpoint(out, params.to_tensors());
  }
  std::filesystem::rename(tmp, path);
}

UNetParams<float> load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  return UNetParams<float>::from_tensors(nn::read_checkpoint(in));
}

std::uint64_t weights_checksum(const UNetParams<float>& params) {
  std::ostringstream out(std::ios::binary);
  nn::write_checkpoint(out, params.to_tensors());
  const std::string bytes = std::move(out).str();
  return fnv1a_bytes(std::as_bytes(std::span(bytes.data(), bytes.size())));
}

// ---------------------------------------------------------------------------

int kept_positions(double ratio, int length) {
  if (!(ratio >= 0.0) || !(ratio < 1.0)) fail(ErrorKind::Config, "mask ratio must lie in [0, 1)");
  // The small offset keeps e.g. (1 - 0.9) * 10 from flooring to 0.
  const int keep = static_cast<int>(std::floor((1.0 - ratio) * length + 1e-9));
  if (keep < 1) fail(ErrorKind::Config, "mask ratio leaves no visible positions");
  return keep;
}

Mask make_mask(const MaskSpec& spec, int length) {
  const int keep = kept_positions(spec.ratio, length);
  Mask m = Mask::Ones(length);
  if (keep == length) return Mask::Zero(length);
  // Partial Fisher-Yates: the first `keep` entries of a random permutation.
  std::vector<int> perm(static_cast<std::size_t>(length));
  std::iota(perm.begin(), perm.end(), 0);
  Engine rng = make_engine(spec.seed, 0x4d41534b);
  for (int i = 0; i < keep; ++i) {
    boost::random::uniform_int_distribution<int> pick(i, length - 1);
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(pick(rng))]);
    m[perm[static_cast<std::size_t>(i)]] = 0;
  }
  return m;
}

LightCurve apply_mask(const LightCurve& x_norm, const Mask& m) {
  if (x_norm.size() != m.size()) fail(ErrorKind::Shape, "apply_mask: mask length differs from curve length");
  return {(1.0 - m.cast<double>()).matrix().cwiseProduct(x_norm.values), x_norm.is_normalized};
}

double masked_loss(const Eigen::VectorXd& reconstruction, const Eigen::VectorXd& target, const Mask& m) {
  if (reconstruction.size() != target.size() || target.size() != m.size())
    fail(ErrorKind::Shape, "masked_loss: length mismatch");
  const double count = m.cast<double>().sum();
  if (count == 0.0) fail(ErrorKind::Usage, "masked loss undefined: no masked positions");
  return (m.cast<double>() * (reconstruction - target).array().square()).sum() / count;
}

nn::FeatureMap<float> normalized_batch(const SimulationBank& bank, std::span<const Eigen::Index> rows) {
  const Eigen::Index len = bank.bins();
  nn::FeatureMap<float> x = nn::FeatureMap<float>::zeros(1, len, static_cast<Eigen::Index>(rows.size()));
  const float mu = static_cast<float>(bank.norm.mu), inv_sigma = static_cast<float>(1.0 / bank.norm.sigma);
  for (std::size_t b = 0; b < rows.size(); ++b)
    x.data.block(0, static_cast<Eigen::Index>(b) * len, 1, len) =
        ((bank.curves.col(rows[b]).array() - mu) * inv_sigma).transpose();
  return x;
}

namespace {

constexpr std::uint64_t kMaskStream = 0x6d61736b;
constexpr std::uint64_t kHeldOutEpoch = ~std::uint64_t{0};

Mask sample_mask(std::uint64_t seed, std::uint64_t epoch, Eigen::Index row, double ratio, int length) {
  return make_mask({ratio, stream_key(seed ^ kMaskStream, epoch, static_cast<std::uint64_t>(row))}, length);
}

// Loss and accumulated gradients for one chunk of rows.
double chunk_loss_and_grad(const UNetParams<float>& params, const SimulationBank& bank,
                           std::span<const Eigen::Index> rows, std::span<const Mask> masks, double scale,
                           UNetParams<float>& grads) {
  const Eigen::Index len = bank.bins();
  nn::FeatureMap<float> target = normalized_batch(bank, rows);
  nn::FeatureMap<float> input = target;
  for (std::size_t b = 0; b < rows.size(); ++b)
    for (Eigen::Index t = 0; t < len; ++t)
      if (masks[b][t]) input.data(0, static_cast<Eigen::Index>(b) * len + t) = 0.0f;
  UNetCache<float> cache;
  auto out = unet_forward(params, input, &cache);
  nn::FeatureMap<float> d_recon;
  const double loss = masked_loss_batch<float>(out.reconstruction, target, masks, &d_recon);
  d_recon.data *= static_cast<float>(scale);
  unet_backward(params, cache, d_recon, grads);
  return loss * static_cast<double>(rows.size());
}

}  // namespace

double evaluate_masked_loss(const UNetParams<float>& params, const SimulationBank& bank,
                            std::span<const Eigen::Index> rows, double mask_ratio, std::uint64_t seed) {
  if (rows.empty()) fail(ErrorKind::Usage, "evaluate_masked_loss: no rows");
  const int len = static_cast<int>(bank.bins());
  constexpr std::size_t kChunk = 64;
  const std::size_t n_chunks = (rows.size() + kChunk - 1) / kChunk;
  std::vector<double> sums(n_chunks, 0.0);
#pragma omp parallel for schedule(static)
  for (std::size_t c = 0; c < n_chunks; ++c) {
    auto chunk = rows.subspan(c * kChunk, std::min(kChunk, rows.size() - c * kChunk));
    std::vector<Mask> masks;
    for (auto r : chunk) masks.push_back(sample_mask(seed, kHeldOutEpoch, r, mask_ratio, len));
    nn::FeatureMap<float> target = normalized_batch(bank, chunk);
    nn::FeatureMap<float> input = target;
    for (std::size_t b = 0; b < chunk.size(); ++b)
      for (int t = 0; t < len; ++t)
        if (masks[b][t]) input.data(0, static_cast<Eigen::Index>(b) * len + t) = 0.0f;
    auto out = unet_forward(params, input);
    sums[c] = masked_loss_batch<float>(out.reconstruction, target, masks) * static_cast<double>(chunk.size());
  }
  return std::accumulate(sums.begin(), sums.end(), 0.0) / static_cast<double>(rows.size());
}

TrainResult train(const SimulationBank& bank, const UNetConfig& arch_in, const TrainConfig& cfg) {
  UNetConfig arch = arch_in;
  arch.input_length = static_cast<int>(bank.bins());
  arch.validate();
  if (cfg.epochs < 1) fail(ErrorKind::Config, "epochs must be at least 1");
  if (!(cfg.lr > 0.0)) fail(ErrorKind::Config, "learning rate must be positive");
  if (cfg.batch_size < 1 || cfg.chunk_size < 1) fail(ErrorKind::Config, "batch and chunk sizes must be positive");
  if (!(cfg.validation_fraction >= 0.0 && cfg.validation_fraction < 1.0))
    fail(ErrorKind::Config, "validation fraction must lie in [0, 1)");
  kept_positions(cfg.mask_ratio, arch.input_length);
  if (cfg.mask_ratio == 0.0) fail(ErrorKind::Config, "training needs a positive mask ratio");

  // Split rows into training and held-out sets.
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(bank.size()));
  std::iota(rows.begin(), rows.end(), Eigen::Index{0});
  std::vector<Eigen::Index> held_out;
  if (cfg.validation_fraction > 0.0) {
    Engine rng = make_engine(cfg.seed, 0x53504c54);
    for (std::size_t i = rows.size(); i > 1; --i) {
      boost::random::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(rows[i - 1], rows[pick(rng)]);
    }
    const auto n_val = static_cast<std::size_t>(cfg.validation_fraction * static_cast<double>(rows.size()));
    held_out.assign(rows.end() - static_cast<std::ptrdiff_t>(n_val), rows.end());
    rows.resize(rows.size() - n_val);
    std::sort(rows.begin(), rows.end());
    std::sort(held_out.begin(), held_out.end());
  }
  if (rows.empty()) fail(ErrorKind::Config, "no training rows left after the validation split");

  TrainResult result;
  result.params = UNetParams<float>::init(arch, cfg.seed);
  UNetParams<float> grads = UNetParams<float>::zeros(arch);
  auto refs = result.params.tensor_refs(grads);
  nn::AdamWState<float> opt{cfg.adamw, 0, {}, {}};
  UNetParams<float> last_good = result.params;

  if (!held_out.empty())
    result.initial_validation_loss = evaluate_masked_loss(result.params, bank, held_out, cfg.mask_ratio, cfg.seed);

  const auto batch_size = static_cast<std::size_t>(cfg.batch_size);
  const auto chunk_size = static_cast<std::size_t>(cfg.chunk_size);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = cfg.lr * (1.0 - static_cast<double>(epoch) / cfg.epochs);
    std::vector<Eigen::Index> order = rows;
    {
      Engine rng = make_engine(cfg.seed, 0x45504f43, static_cast<std::uint64_t>(epoch));
      for (std::size_t i = order.size(); i > 1; --i) {
        boost::random::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(order[i - 1], order[pick(rng)]);
      }
    }

    double epoch_sum = 0.0;
    try {
      for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const std::size_t bsz = std::min(batch_size, order.size() - start);
        std::span<const Eigen::Index> batch(order.data() + start, bsz);
        std::vector<Mask> masks;
        for (auto r : batch)
          masks.push_back(sample_mask(cfg.seed, static_cast<std::uint64_t>(epoch), r, cfg.mask_ratio,
                                      arch.input_length));

        const std::size_t n_chunks = (bsz + chunk_size - 1) / chunk_size;
        std::vector<UNetParams<float>> chunk_grads(n_chunks);
        std::vector<double> chunk_loss(n_chunks, 0.0);
#pragma omp parallel for schedule(dynamic)
        for (std::size_t c = 0; c < n_chunks; ++c) {
          const std::size_t off = c * chunk_size, n = std::min(chunk_size, bsz - off);
          chunk_grads[c] = UNetParams<float>::zeros(arch);
          chunk_loss[c] = chunk_loss_and_grad(result.params, bank, batch.subspan(off, n),
                                              std::span<const Mask>(masks).subspan(off, n),
                                              static_cast<double>(n) / static_cast<double>(bsz), chunk_grads[c]);
        }
        // Reduce in chunk order.
        grads.set_zero();
        double batch_sum = 0.0;
        for (std::size_t c = 0; c < n_chunks; ++c) {
          grads += chunk_grads[c];
          batch_sum += chunk_loss[c];
        }
        if (!std::isfinite(batch_sum))
          fail(ErrorKind::Numerical, "training diverged: non-finite loss at epoch " + std::to_string(epoch + 1));
        epoch_sum += batch_sum;
        nn::adamw_step(refs, opt, lr);
      }
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Numerical) throw;
      result.params = last_good;
      result.diverged = true;
      result.message = e.what();
      if (!cfg.checkpoint_path.empty()) save_weights(cfg.checkpoint_path, result.params);
      return result;
    }

    result.loss_history.push_back(epoch_sum / static_cast<double>(order.size()));
    if (!held_out.empty())
      result.validation_history.push_back(
          evaluate_masked_loss(result.params, bank, held_out, cfg.mask_ratio, cfg.seed));
    last_good = result.params;
    if (!cfg.checkpoint_path.empty()) save_weights(cfg.checkpoint_path, result.params);
    if (cfg.verbose) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cerr << "epoch " << epoch + 1 << "/" << cfg.epochs << " loss " << result.loss_history.back();
      if (!held_out.empty()) std::cerr << " val " << result.validation_history.back();
      std::cerr << " (" << secs << " s)\n";
    }
  }
  return result;
}

void write_loss_history(const std::filesystem::path& path, const TrainResult& result) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.precision(10);
  const bool with_val = !result.validation_history.empty();
  out << "epoch,mean_masked_loss" << (with_val ? ",validation_masked_loss" : "") << '\n';
  if (with_val) out << 0 << ",," << result.initial_validation_loss << '\n';
  for (std::size_t e = 0; e < result.loss_history.size(); ++e) {
    out << e + 1 << ',' << result.loss_history[e];
    if (with_val) out << ',' << result.validation_history[e];
    out << '\n';
  }
}

// ---------------------------------------------------------------------------

int receptive_field(std::span<const RfLayer> layers) {
  int field = 1, jump = 1;
  for (const auto& l : layers) {
    if (l.kernel < 1 || l.stride < 1) fail(ErrorKind::Config, "receptive_field: kernel and stride must be positive");
    field += (l.kernel - 1) * jump;
    jump *= l.stride;
  }
  return field;
}

int receptive_field(const UNetConfig& cfg) {
  std::vector<RfLayer> layers;
  for (int l = 0; l < cfg.levels; ++l) {
    layers.push_back({3, 1});
    layers.push_back({3, 1});
    layers.push_back({2, 2});
  }
  layers.push_back({3, 1});
  layers.push_back({3, 1});
  return receptive_field(layers);
}

}  // namespace rrsbi
