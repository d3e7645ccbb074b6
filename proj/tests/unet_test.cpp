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

#include <gtest/gtest.h>

#include <fstream>
#include <numeric>

#include "rrsbi/unet.hpp"

using namespace rrsbi;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an rrsbi::Error";
  return ErrorKind::Io;
}

nn::FeatureMap<float> random_input(std::uint64_t seed, int length, int batch = 1) {
  Engine rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  auto x = nn::FeatureMap<float>::zeros(1, length, batch);
  for (Eigen::Index i = 0; i < x.data.size(); ++i) x.data.data()[i] = n(rng);
  return x;
}

}  // namespace

TEST(UNetShapes, PaperArchitecture) {
  UNetConfig cfg;  // base 64, 3 levels, T = 64
  auto p = UNetParams<float>::init(cfg, 1);
  auto out = unet_forward(p, random_input(2, 64));
  ASSERT_EQ(out.features.levels.size(), 3u);
  const std::pair<Eigen::Index, Eigen::Index> expected[] = {{64, 64}, {128, 32}, {256, 16}};
  for (int l = 0; l < 3; ++l) {
    EXPECT_EQ(out.features.levels[l].channels(), expected[l].first);
    EXPECT_EQ(out.features.levels[l].length, expected[l].second);
  }
  EXPECT_EQ(out.features.bottleneck.channels(), 512);
  EXPECT_EQ(out.features.bottleneck.length, 8);
  EXPECT_EQ(out.reconstruction.channels(), 1);
  EXPECT_EQ(out.reconstruction.length, 64);
}

TEST(UNetShapes, LengthNotDivisibleIsRejected) {
  EXPECT_EQ(kind_of([] { UNetConfig{8, 3, 60}.validate(); }), ErrorKind::Config);
  auto p = UNetParams<float>::init({4, 3, 16}, 1);
  EXPECT_EQ(kind_of([&] { unet_forward(p, random_input(1, 12)); }), ErrorKind::Shape);
}

TEST(UNetForward, ZeroWeightsGiveHeadBias) {
  auto p = UNetParams<float>::zeros({8, 3, 64});
  p.head.bias[0] = 0.3f;
  auto out = unet_forward(p, random_input(3, 64));
  EXPECT_TRUE((out.reconstruction.data.array() == 0.3f).all());
}

TEST(UNetForward, RepeatedCallsBitIdentical) {
  auto p = UNetParams<float>::init({16, 3, 64}, 4);
  auto x = random_input(5, 64, 3);
  auto a = unet_forward(p, x), b = unet_forward(p, x);
  EXPECT_EQ(a.reconstruction.data, b.reconstruction.data);
  EXPECT_EQ(a.features.bottleneck.data, b.features.bottleneck.data);
}

TEST(UNetForward, BatchMatchesSingle) {
  auto p = UNetParams<float>::init({8, 3, 64}, 6);
  auto x = random_input(7, 64, 4);
  auto batched = unet_forward(p, x);
  for (Eigen::Index b = 0; b < 4; ++b) {
    nn::FeatureMap<float> xb(x.sample(b), 64);
    auto single = unet_forward(p, xb);
    EXPECT_EQ(single.reconstruction.data, batched.reconstruction.sample(b));
  }
}

TEST(UNetGradient, EndToEndMatchesFiniteDifferences) {
  const UNetConfig cfg{4, 3, 16};
  auto p = UNetParams<float>::init(cfg, 8).cast<double>();
  // He-scale the weights so deep-layer gradients stay well above round-off.
  p.visit([](const std::string& name, auto& t) {
    if (name.ends_with(".weight")) t *= std::sqrt(6.0);
  });
  const int batch = 2;
  nn::FeatureMap<double> input(random_input(9, 16, batch).data.cast<double>(), 16);
  std::vector<Mask> masks{make_mask({0.75, 1}, 16), make_mask({0.75, 2}, 16)};
  nn::FeatureMap<double> target(input.data * 1.5, 16);
  for (int b = 0; b < batch; ++b)
    for (int t = 0; t < 16; ++t)
      if (masks[static_cast<std::size_t>(b)][t]) input.data(0, b * 16 + t) = 0.0;

  auto loss = [&] {
    return masked_loss_batch<double>(unet_forward(p, input).reconstruction, target, masks);
  };
  UNetCache<double> cache;
  auto out = unet_forward(p, input, &cache);
  nn::FeatureMap<double> d_recon;
  masked_loss_batch<double>(out.reconstruction, target, masks, &d_recon);
  auto grads = UNetParams<double>::zeros(cfg);
  unet_backward(p, cache, d_recon, grads);

  std::vector<Eigen::Map<nn::Vector<double>>> analytic;
  grads.visit([&](const std::string&, auto& t) { analytic.emplace_back(t.data(), t.size()); });
  std::size_t index = 0;
  const double h = 1e-6;
  p.visit([&](const std::string& name, auto& t) {
    Eigen::VectorXd numeric(t.size());
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      const double saved = t.data()[i];
      t.data()[i] = saved + h;
      const double up = loss();
      t.data()[i] = saved - h;
      const double down = loss();
      t.data()[i] = saved;
      numeric[i] = (up - down) / (2 * h);
    }
    const auto& a = analytic[index++];
    const double scale = std::max({a.norm(), numeric.norm(), 1e-12});
    EXPECT_LT((a - numeric).norm() / scale, 1e-3) << name;
  });
}

TEST(Mask, KeepsFloorOfVisibleFraction) {
  auto m = make_mask({0.75, 3}, 64);
  EXPECT_EQ(m.cast<int>().sum(), 48);
  EXPECT_EQ(kept_positions(0.75, 64), 16);
  EXPECT_EQ(kept_positions(0.9, 10), 1);
  EXPECT_EQ(make_mask({0.75, 3}, 40).cast<int>().sum(), 30);
}

TEST(Mask, ZeroRatioMasksNothing) {
  EXPECT_EQ(make_mask({0.0, 11}, 64).cast<int>().sum(), 0);
}

TEST(Mask, RatioOutOfRangeIsConfigError) {
  EXPECT_EQ(kind_of([] { make_mask({1.0, 0}, 64); }), ErrorKind::Config);
  EXPECT_EQ(kind_of([] { make_mask({-0.1, 0}, 64); }), ErrorKind::Config);
  EXPECT_EQ(kind_of([] { make_mask({0.99, 0}, 64); }), ErrorKind::Config);
}

TEST(Mask, SeedDeterminism) {
  EXPECT_TRUE((make_mask({0.75, 5}, 64) == make_mask({0.75, 5}, 64)).all());
  int differing = 0;
  for (std::uint64_t s = 0; s < 100; ++s)
    differing += !(make_mask({0.75, s}, 64) == make_mask({0.75, s + 1000}, 64)).all();
  EXPECT_EQ(differing, 100);
}

TEST(Mask, PositionFrequencyIsUniform) {
  Eigen::ArrayXd freq = Eigen::ArrayXd::Zero(64);
  const int n = 10000;
  for (int s = 0; s < n; ++s) freq += make_mask({0.75, static_cast<std::uint64_t>(s)}, 64).cast<double>();
  freq /= n;
  EXPECT_LT((freq - 0.75).abs().maxCoeff(), 0.02);
}

TEST(ApplyMask, Semantics) {
  LightCurve x{Eigen::VectorXd::LinSpaced(8, 1, 8), true};
  EXPECT_EQ(apply_mask(x, Mask::Zero(8)).values, x.values);
  EXPECT_TRUE(apply_mask(x, Mask::Ones(8)).values.isZero(0));
  Mask one = Mask::Zero(8);
  one[3] = 1;
  Eigen::VectorXd diff = apply_mask(x, one).values - x.values;
  EXPECT_EQ(diff[3], -4.0);
  diff[3] = 0;
  EXPECT_TRUE(diff.isZero(0));
  EXPECT_EQ(kind_of([&] { apply_mask(x, Mask::Zero(7)); }), ErrorKind::Shape);
}

TEST(MaskedLoss, Examples) {
  Eigen::VectorXd x = Eigen::VectorXd::LinSpaced(6, -1, 1);
  Mask half(6);
  half << 1, 0, 1, 0, 1, 0;
  EXPECT_EQ(masked_loss(x, x, half), 0.0);
  Mask single = Mask::Zero(6);
  single[2] = 1;
  Eigen::VectorXd y = x;
  y[2] += 0.5;
  EXPECT_DOUBLE_EQ(masked_loss(y, x, single), 0.25);
  EXPECT_DOUBLE_EQ(masked_loss((x.array() + 1).matrix(), x, half), 1.0);
  EXPECT_EQ(kind_of([&] { masked_loss(x, x, Mask::Zero(6)); }), ErrorKind::Usage);
}

TEST(ReceptiveField, Recursion) {
  EXPECT_EQ(receptive_field(UNetConfig{}), 68);
  const RfLayer single[] = {{3, 1}};
  EXPECT_EQ(receptive_field(single), 3);
  // An extra k=3 conv at jump j adds 2j.
  std::vector<RfLayer> layers{{3, 1}, {2, 2}, {3, 1}, {2, 2}};
  const int before = receptive_field(layers);
  layers.push_back({3, 1});
  EXPECT_EQ(receptive_field(layers) - before, 2 * 4);
}

TEST(Weights, SaveLoadRoundTrip) {
  auto p = UNetParams<float>::init({4, 3, 16}, 12);
  auto path = std::filesystem::temp_directory_path() / "rrsbi_weights_test.bin";
  save_weights(path, p);
  auto q = load_weights(path);
  EXPECT_EQ(weights_checksum(p), weights_checksum(q));
  EXPECT_EQ(q.levels(), 3);
  EXPECT_EQ(q.base_filters(), 4);
  auto x = random_input(13, 16);
  EXPECT_EQ(unet_forward(p, x).reconstruction.data, unet_forward(q, x).reconstruction.data);
  std::filesystem::remove(path);
}

TEST(Weights, ParameterCount) {
  // Per conv: Cout * Cin * k + Cout.
  auto conv = [](int ci, int co, int k) { return co * ci * k + co; };
  const int b = 4;
  std::size_t expected = conv(1, b, 3) + conv(b, b, 3) + conv(b, 2 * b, 3) + conv(2 * b, 2 * b, 3) +
                         conv(2 * b, 4 * b, 3) + conv(4 * b, 4 * b, 3) + conv(4 * b, 8 * b, 3) +
                         conv(8 * b, 8 * b, 3);
  for (int l = 0; l < 3; ++l) expected += conv(2 * (b << l), b << l, 2) + conv(2 * (b << l), b << l, 3) +
                                          conv(b << l, b << l, 3);
  expected += conv(b, 1, 1);
  auto p = UNetParams<float>::zeros({b, 3, 16});
  EXPECT_EQ(p.num_parameters(), expected);
}

namespace {

SimulationBank toy_bank(std::int64_t n, std::uint64_t seed) {
  ToyPulseModel model;
  return generate_bank(model.space(), default_prior(model), n, model, false, seed);
}

}  // namespace

TEST(Train, SmokeOneEpoch) {
  auto bank = toy_bank(10, 1);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  cfg.lr = 1e-3;
  auto result = train(bank, {4, 3, 64}, cfg);
  ASSERT_EQ(result.loss_history.size(), 1u);
  EXPECT_TRUE(std::isfinite(result.loss_history[0]));
  EXPECT_FALSE(result.diverged);
}

TEST(Train, FixedSeedReproducible) {
  auto bank = toy_bank(40, 2);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.lr = 1e-3;
  cfg.seed = 77;
  cfg.validation_fraction = 0.25;
  auto a = train(bank, {4, 3, 64}, cfg), b = train(bank, {4, 3, 64}, cfg);
  EXPECT_EQ(a.loss_history, b.loss_history);
  EXPECT_EQ(a.validation_history, b.validation_history);
  EXPECT_EQ(weights_checksum(a.params), weights_checksum(b.params));
}

TEST(Train, IndependentOfThreadCount) {
  auto bank = toy_bank(48, 3);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 24;
  cfg.chunk_size = 8;
  cfg.lr = 1e-3;
  const int saved = max_threads();
  set_max_threads(1);
  auto a = train(bank, {4, 3, 64}, cfg);
  set_max_threads(4);
  auto b = train(bank, {4, 3, 64}, cfg);
  set_max_threads(saved);
  EXPECT_EQ(weights_checksum(a.params), weights_checksum(b.params));
}

TEST(Train, MemorizesConstantBank) {
  PhotopeakModel model;
  auto bank = generate_bank(model.space(), Prior::delta(PhotopeakModel::reference_params()), 32, model, false, 4);
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.batch_size = 8;
  cfg.lr = 3e-3;
  cfg.adamw.weight_decay = 0.0;
  auto result = train(bank, {8, 3, 40}, cfg);
  ASSERT_EQ(result.loss_history.size(), 50u);
  EXPECT_LT(result.loss_history.back(), 1e-2);
  EXPECT_LT(result.loss_history.back(), 0.02 * result.loss_history.front());
}

TEST(Train, NonFiniteLossRestoresLastGood) {
  auto bank = toy_bank(8, 5);
  bank.curves(3, 5) = std::numeric_limits<float>::quiet_NaN();
  auto path = std::filesystem::temp_directory_path() / "rrsbi_diverged.bin";
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.lr = 1e-3;
  cfg.mask_ratio = 0.5;
  cfg.checkpoint_path = path;
  auto result = train(bank, {4, 3, 64}, cfg);
  EXPECT_TRUE(result.diverged);
  EXPECT_FALSE(result.message.empty());
  EXPECT_EQ(weights_checksum(result.params), weights_checksum(UNetParams<float>::init({4, 3, 64}, cfg.seed)));
  EXPECT_EQ(weights_checksum(load_weights(path)), weights_checksum(result.params));
  std::filesystem::remove(path);
}

TEST(Train, LossHistoryCsv) {
  TrainResult r;
  r.loss_history = {0.5, 0.25};
  r.validation_history = {0.6, 0.3};
  r.initial_validation_loss = 1.0;
  auto path = std::filesystem::temp_directory_path() / "rrsbi_loss.csv";
  write_loss_history(path, r);
  std::ifstream in(path);
  std::string header, row0, row1;
  std::getline(in, header);
  std::getline(in, row0);
  std::getline(in, row1);
  EXPECT_EQ(header, "epoch,mean_masked_loss,validation_masked_loss");
  EXPECT_EQ(row0, "0,,1");
  EXPECT_EQ(row1, "1,0.5,0.6");
  std::filesystem::remove(path);
}

TEST(Train, HeldOutLossHalvesOnSyntheticBank) {
  auto bank = toy_bank(10000, 6);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 64;
  cfg.lr = 2e-3;
  cfg.seed = 6;
  cfg.validation_fraction = 0.1;
  auto result = train(bank, {8, 3, 64}, cfg);
  ASSERT_FALSE(result.diverged) << result.message;
  EXPECT_LT(result.validation_history.back(), 0.5 * result.initial_validation_loss);
}
