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

#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>

#include "rrsbi/simulators.hpp"
#include "rrsbi/unet.hpp"

namespace rrsbi {

enum class EmbeddingLevel : std::uint8_t {
  Single = 1,  // GAP(bottleneck)
  Multi = 2,   // GAP(deepest encoder level) followed by GAP(bottleneck)
};

std::string_view level_name(EmbeddingLevel level);
EmbeddingLevel parse_level(std::string_view name);

inline constexpr double kNormEpsilon = 1e-8;
inline constexpr double kDegenerateNorm = 1e-12;

/// Embedding width for a network: 8b (single) or 4b + 8b (multi).
int embedding_dim(EmbeddingLevel level, const UNetParams<float>& params);

struct Embedding {
  Eigen::VectorXf vector;
  EmbeddingLevel level = EmbeddingLevel::Multi;
  bool degenerate = false;  // raw norm below kDegenerateNorm; vector is zero
};

/// Pooled (unnormalized) features of sample b.
Eigen::VectorXd raw_embedding(const EncoderFeatures<float>& features, EmbeddingLevel level, Eigen::Index b = 0);

/// z = raw / (||raw|| + eps), or the zero vector flagged degenerate.
Embedding normalize_embedding(const Eigen::VectorXd& raw, EmbeddingLevel level);

Embedding embed(const UNetParams<float>& params, const LightCurve& x_norm, EmbeddingLevel level);
inline Embedding embed_single(const UNetParams<float>& params, const LightCurve& x_norm) {
  return embed(params, x_norm, EmbeddingLevel::Single);
}
inline Embedding embed_multi(const UNetParams<float>& params, const LightCurve& x_norm) {
  return embed(params, x_norm, EmbeddingLevel::Multi);
}

// ---------------------------------------------------------------------------
// Embedding bank: "SEMB", version u32, N u64, m u32, level u8, source
// checksum u64, then N x m f32 row-major.
// ---------------------------------------------------------------------------

struct EmbeddingBank {
  Eigen::MatrixXf vectors;  // m x N; column i is bank row i
  EmbeddingLevel level = EmbeddingLevel::Multi;
  std::uint64_t source_checksum = 0;

  Eigen::Index size() const { return vectors.cols(); }
  Eigen::Index dim() const { return vectors.rows(); }
};

struct EmbedStats {
  double seconds = 0.0;
  double rows_per_second = 0.0;
  std::int64_t degenerate_rows = 0;
};

/// Combined fingerprint of the simulation bank and the encoder weights.
std::uint64_t embedding_source_checksum(std::uint64_t bank_sum, std::uint64_t weights_sum);
std::uint64_t embedding_source_checksum(const SimulationBank& bank, const UNetParams<float>& params);

/// Embeds every bank row. Each row runs through its own forward pass, so a
/// row's embedding never depends on which rows it was processed with.
EmbeddingBank build_embedding_bank(const UNetParams<float>& params, const SimulationBank& bank,
                                   EmbeddingLevel level, EmbedStats* stats = nullptr);

/// Embeds normalized curves given as columns of `curves_norm` (T x B).
Eigen::MatrixXf embed_columns(const UNetParams<float>& params, const Eigen::MatrixXf& curves_norm,
                              EmbeddingLevel level, std::int64_t* degenerate = nullptr);

void write_embedding_bank(std::ostream& out, const EmbeddingBank& emb);
void write_embedding_bank(const std::filesystem::path& path, const EmbeddingBank& emb);
EmbeddingBank read_embedding_bank(std::istream& in);
EmbeddingBank read_embedding_bank(const std::filesystem::path& path);

/// Throws StaleArtifact if `emb` was not built from exactly this bank and
/// these weights, or if its width/level disagree with `level`.
void verify_embedding_bank(const EmbeddingBank& emb, const SimulationBank& bank, const UNetParams<float>& params,
                           EmbeddingLevel level);

}  // namespace rrsbi
