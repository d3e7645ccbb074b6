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

#include <cmath>
#include <filesystem>
#include <functional>
#include <sstream>

#include "rrsbi/embedding.hpp"

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

SimulationBank photopeak_bank(std::int64_t n, std::uint64_t seed) {
  PhotopeakModel model;
  return generate_bank(model.space(), default_prior(model), n, model, true, seed);
}

LightCurve normalized_row(const SimulationBank& bank, Eigen::Index i) { return bank.curve(i).normalized(bank.norm); }

}  // namespace

TEST(Embedding, PaperWidthIs768AndUnitNorm) {
  auto p = UNetParams<float>::init({64, 3, 40}, 1);
  EXPECT_EQ(embedding_dim(EmbeddingLevel::Multi, p), 768);
  EXPECT_EQ(embedding_dim(EmbeddingLevel::Single, p), 512);
  const auto bank = photopeak_bank(3, 2);
  for (Eigen::Index i = 0; i < bank.size(); ++i) {
    const Embedding e = embed_multi(p, normalized_row(bank, i));
    ASSERT_EQ(e.vector.size(), 768);
    EXPECT_FALSE(e.degenerate);
    EXPECT_NEAR(e.vector.cast<double>().norm(), 1.0, 1e-6);
  }
}

TEST(Embedding, SmallNetworkWidths) {
  auto p = UNetParams<float>::init({4, 3, 16}, 1);
  EXPECT_EQ(embedding_dim(EmbeddingLevel::Multi, p), 48);
  EXPECT_EQ(embedding_dim(EmbeddingLevel::Single, p), 32);
}

TEST(Embedding, NormalizeExample) {
  Eigen::VectorXd raw(2);
  raw << 3.0, 4.0;
  const Embedding e = normalize_embedding(raw, EmbeddingLevel::Single);
  EXPECT_NEAR(e.vector[0], 3.0 / (5.0 + 1e-8), 1e-7);
  EXPECT_NEAR(e.vector[1], 4.0 / (5.0 + 1e-8), 1e-7);
}

TEST(Embedding, ZeroWeightsGiveFlaggedZeroVector) {
  auto p = UNetParams<float>::zeros({8, 3, 40});
  const auto bank = photopeak_bank(2, 3);
  const Embedding e = embed_multi(p, normalized_row(bank, 0));
  EXPECT_TRUE(e.degenerate);
  EXPECT_TRUE(e.vector.isZero(0.0));
  EXPECT_TRUE(e.vector.allFinite());
}

TEST(Embedding, NonFiniteRawIsNumericalError) {
  Eigen::VectorXd raw = Eigen::VectorXd::Ones(4);
  raw[2] = std::nan("");
  EXPECT_EQ(kind_of([&] { normalize_embedding(raw, EmbeddingLevel::Multi); }), ErrorKind::Numerical);
}

TEST(Embedding, UnnormalizedInputIsRejected) {
  auto p = UNetParams<float>::init({4, 3, 40}, 1);
  const auto bank = photopeak_bank(1, 3);
  EXPECT_EQ(kind_of([&] { embed_multi(p, bank.curve(0)); }), ErrorKind::Usage);
}

TEST(Embedding, MultiIsEncoderPoolThenBottleneckPool) {
  auto p = UNetParams<float>::init({8, 3, 40}, 5);
  const auto x = normalized_row(photopeak_bank(1, 4), 0);
  const Embedding single = embed_single(p, x);

  // A dead bottleneck leaves only the deepest encoder level, in the first 4b slots.
  auto dead = p;
  dead.bottleneck.first.weight.setZero();
  dead.bottleneck.first.bias.setZero();
  dead.bottleneck.second.bias.setZero();
  const Embedding multi_dead = embed_multi(dead, x);
  EXPECT_FALSE(multi_dead.vector.head(32).isZero(0.0));
  EXPECT_TRUE(multi_dead.vector.tail(64).isZero(0.0));

  // Reassembling both halves by hand reproduces the multi-level vector.
  nn::FeatureMap<float> input(x.values.cast<float>().transpose(), x.size());
  const auto f = unet_encode(p, input);
  Eigen::VectorXd raw(96);
  raw << nn::global_avg_pool(f.levels.back()).col(0).cast<double>(),
      nn::global_avg_pool(f.bottleneck).col(0).cast<double>();
  const Embedding multi = embed_multi(p, x);
  EXPECT_EQ(multi.vector, (raw / (raw.norm() + kNormEpsilon)).cast<float>().eval());
  const Eigen::VectorXd b = raw.tail(64);
  EXPECT_EQ(single.vector, (b / (b.norm() + kNormEpsilon)).cast<float>().eval());
}

TEST(Embedding, BatchEqualsSingleBitwise) {
  auto p = UNetParams<float>::init({16, 3, 40}, 6);
  const auto bank = photopeak_bank(37, 7);
  const auto emb = build_embedding_bank(p, bank, EmbeddingLevel::Multi);
  ASSERT_EQ(emb.size(), 37);
  for (Eigen::Index i = 0; i < bank.size(); ++i) {
    const Embedding e = embed_multi(p, normalized_row(bank, i));
    EXPECT_EQ(emb.vectors.col(i), e.vector) << "row " << i;
  }
}

TEST(Embedding, SingleRowBankAndDuplicates) {
  auto p = UNetParams<float>::init({4, 3, 40}, 8);
  auto bank = photopeak_bank(1, 9);
  auto one = build_embedding_bank(p, bank, EmbeddingLevel::Single);
  EXPECT_EQ(one.size(), 1);
  EXPECT_EQ(one.dim(), 32);

  SimulationBank dup = photopeak_bank(3, 10);
  dup.curves.col(2) = dup.curves.col(0);
  auto emb = build_embedding_bank(p, dup, EmbeddingLevel::Multi);
  EXPECT_EQ(emb.vectors.col(0), emb.vectors.col(2));
}

TEST(Embedding, CosineEqualsDotProduct) {
  auto p = UNetParams<float>::init({8, 3, 40}, 11);
  const auto bank = photopeak_bank(20, 12);
  const auto emb = build_embedding_bank(p, bank, EmbeddingLevel::Multi);
  for (Eigen::Index i = 1; i < emb.size(); ++i) {
    const Eigen::VectorXd a = emb.vectors.col(0).cast<double>(), b = emb.vectors.col(i).cast<double>();
    const double cosine = a.dot(b) / (a.norm() * b.norm());
    EXPECT_LT(std::abs(cosine - a.dot(b)), 1e-6);
  }
}

TEST(Embedding, ThreadCountDoesNotChangeBank) {
  auto p = UNetParams<float>::init({8, 3, 40}, 13);
  const auto bank = photopeak_bank(50, 14);
  const auto a = build_embedding_bank(p, bank, EmbeddingLevel::Multi);
  const int before = max_threads();
  set_max_threads(1);
  const auto b = build_embedding_bank(p, bank, EmbeddingLevel::Multi);
  set_max_threads(before);
  EXPECT_EQ(a.vectors, b.vectors);
}

TEST(EmbeddingBankFile, RoundTripAndStaleness) {
  auto p = UNetParams<float>::init({4, 3, 40}, 15);
  const auto bank = photopeak_bank(10, 16);
  EmbedStats stats;
  const auto emb = build_embedding_bank(p, bank, EmbeddingLevel::Multi, &stats);
  EXPECT_GT(stats.rows_per_second, 0.0);
  EXPECT_EQ(stats.degenerate_rows, 0);

  std::stringstream ss;
  write_embedding_bank(ss, emb);
  EXPECT_EQ(ss.str().size(), 4u + 4 + 8 + 4 + 1 + 8 + 10 * 48 * 4);
  const auto back = read_embedding_bank(ss);
  EXPECT_EQ(back.vectors, emb.vectors);
  EXPECT_EQ(back.level, EmbeddingLevel::Multi);
  EXPECT_EQ(back.source_checksum, emb.source_checksum);
  EXPECT_NO_THROW(verify_embedding_bank(back, bank, p, EmbeddingLevel::Multi));

  auto retrained = p;
  retrained.head.bias[0] += 1.0f;
  EXPECT_EQ(kind_of([&] { verify_embedding_bank(back, bank, retrained, EmbeddingLevel::Multi); }),
            ErrorKind::StaleArtifact);
  const auto other = photopeak_bank(10, 17);
  EXPECT_EQ(kind_of([&] { verify_embedding_bank(back, other, p, EmbeddingLevel::Multi); }), ErrorKind::StaleArtifact);
  const auto shorter = photopeak_bank(9, 16);
  EXPECT_EQ(kind_of([&] { verify_embedding_bank(back, shorter, p, EmbeddingLevel::Multi); }),
            ErrorKind::StaleArtifact);
  EXPECT_EQ(kind_of([&] { verify_embedding_bank(back, bank, p, EmbeddingLevel::Single); }), ErrorKind::StaleArtifact);
}

TEST(EmbeddingBankFile, CorruptInputsRejected) {
  std::stringstream bad("XXXX");
  EXPECT_EQ(kind_of([&] { read_embedding_bank(bad); }), ErrorKind::Io);

  EmbeddingBank emb;
  emb.vectors = Eigen::MatrixXf::Ones(4, 3);
  std::stringstream ss;
  write_embedding_bank(ss, emb);
  std::string bytes = ss.str();
  bytes.resize(bytes.size() - 5);
  std::stringstream truncated(bytes);
  EXPECT_EQ(kind_of([&] { read_embedding_bank(truncated); }), ErrorKind::Io);
}

TEST(EmbeddingLevelNames, ParseRoundTrip) {
  EXPECT_EQ(parse_level("single"), EmbeddingLevel::Single);
  EXPECT_EQ(parse_level(level_name(EmbeddingLevel::Multi)), EmbeddingLevel::Multi);
  EXPECT_EQ(kind_of([] { parse_level("triple"); }), ErrorKind::Config);
}
