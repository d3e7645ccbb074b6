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

#include "rrsbi/embedding.hpp"

#include <chrono>
#include <fstream>

namespace rrsbi {

namespace {
constexpr std::uint32_t kEmbeddingVersion = 1;

Eigen::VectorXf encoder_input(const LightCurve& x_norm) {
  if (!x_norm.is_normalized) fail(ErrorKind::Usage, "embedding input must be z-score normalized");
  return x_norm.values.cast<float>();
}

Embedding embed_input(const UNetParams<float>& params, const Eigen::VectorXf& x, EmbeddingLevel level) {
  nn::FeatureMap<float> input(x.transpose(), x.size());
  return normalize_embedding(raw_embedding(unet_encode(params, input), level), level);
}
}  // namespace

std::string_view level_name(EmbeddingLevel level) {
  return level == EmbeddingLevel::Single ? "single" : "multi";
}

EmbeddingLevel parse_level(std::string_view name) {
  if (name == "single") return EmbeddingLevel::Single;
  if (name == "multi") return EmbeddingLevel::Multi;
  fail(ErrorKind::Config, "unknown embedding level \"" + std::string(name) + "\" (expected single or multi)");
}

int embedding_dim(EmbeddingLevel level, const UNetParams<float>& params) {
  const int bottleneck = static_cast<int>(params.bottleneck.second.out_channels());
  if (level == EmbeddingLevel::Single) return bottleneck;
  return bottleneck + static_cast<int>(params.encoder.back().second.out_channels());
}

Eigen::VectorXd raw_embedding(const EncoderFeatures<float>& features, EmbeddingLevel level, Eigen::Index b) {
  const Eigen::VectorXd pooled_b = nn::global_avg_pool(features.bottleneck).col(b).cast<double>();
  if (level == EmbeddingLevel::Single) return pooled_b;
  const Eigen::VectorXd pooled_e = nn::global_avg_pool(features.levels.back()).col(b).cast<double>();
  Eigen::VectorXd raw(pooled_e.size() + pooled_b.size());
  raw << pooled_e, pooled_b;
  return raw;
}

Embedding normalize_embedding(const Eigen::VectorXd& raw, EmbeddingLevel level) {
  const double norm = raw.norm();
  if (!std::isfinite(norm)) fail(ErrorKind::Numerical, "embedding is not finite");
  if (norm < kDegenerateNorm) return {Eigen::VectorXf::Zero(raw.size()), level, true};
  return {(raw / (norm + kNormEpsilon)).cast<float>(), level, false};
}

Embedding embed(const UNetParams<float>& params, const LightCurve& x_norm, EmbeddingLevel level) {
  return embed_input(params, encoder_input(x_norm), level);
}

Eigen::MatrixXf embed_columns(const UNetParams<float>& params, const Eigen::MatrixXf& curves_norm,
                              EmbeddingLevel level, std::int64_t* degenerate) {
  const Eigen::Index n = curves_norm.cols();
  Eigen::MatrixXf out(embedding_dim(level, params), n);
  std::int64_t flagged = 0;
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic, 64) reduction(+ : flagged)
  for (Eigen::Index i = 0; i < n; ++i) {
    try {
      Embedding e = embed_input(params, curves_norm.col(i), level);
      out.col(i) = e.vector;
      flagged += e.degenerate;
    } catch (...) {
#pragma omp critical
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  if (degenerate) *degenerate = flagged;
  return out;
}

std::uint64_t embedding_source_checksum(std::uint64_t bank_sum, std::uint64_t weights_sum) {
  Fnv1a h;
  for (std::uint64_t v : {bank_sum, weights_sum}) {
    v = le::to_le(v);
    h.update(std::as_bytes(std::span(&v, 1)));
  }
  return h.digest();
}

std::uint64_t embedding_source_checksum(const SimulationBank& bank, const UNetParams<float>& params) {
  return embedding_source_checksum(bank_checksum(bank), weights_checksum(params));
}

EmbeddingBank build_embedding_bank(const UNetParams<float>& params, const SimulationBank& bank,
                                   EmbeddingLevel level, EmbedStats* stats) {
  const auto t0 = std::chrono::steady_clock::now();
  // Same normalization path as a single query: double arithmetic, then f32.
  Eigen::MatrixXf normalized =
      ((bank.curves.cast<double>().array() - bank.norm.mu) / bank.norm.sigma).cast<float>().matrix();
  EmbeddingBank emb;
  emb.level = level;
  emb.source_checksum = embedding_source_checksum(bank, params);
  std::int64_t degenerate = 0;
  emb.vectors = embed_columns(params, normalized, level, &degenerate);
  if (degenerate > 0) warn(std::to_string(degenerate) + " bank rows produced degenerate (zero) embeddings");
  if (stats) {
    stats->seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    stats->rows_per_second = static_cast<double>(bank.size()) / std::max(stats->seconds, 1e-9);
    stats->degenerate_rows = degenerate;
  }
  return emb;
}

void write_embedding_bank(std::ostream& out, const EmbeddingBank& emb) {
  le::put_magic(out, "SEMB");
  le::put<std::uint32_t>(out, kEmbeddingVersion);
  le::put<std::uint64_t>(out, static_cast<std::uint64_t>(emb.size()));
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(emb.dim()));
  le::put<std::uint8_t>(out, static_cast<std::uint8_t>(emb.level));
  le::put<std::uint64_t>(out, emb.source_checksum);
  le::put_array<float>(out, std::span(emb.vectors.data(), static_cast<std::size_t>(emb.vectors.size())));
  if (!out) fail(ErrorKind::Io, "failed writing embedding bank");
}

void write_embedding_bank(const std::filesystem::path& path, const EmbeddingBank& emb) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  write_embedding_bank(out, emb);
}

EmbeddingBank read_embedding_bank(std::istream& in) {
  le::expect_magic(in, "SEMB");
  const auto version = le::get<std::uint32_t>(in);
  if (version != kEmbeddingVersion)
    fail(ErrorKind::Io, "unsupported embedding bank version " + std::to_string(version));
  const auto n = le::get<std::uint64_t>(in);
  const auto m = le::get<std::uint32_t>(in);
  const auto tag = le::get<std::uint8_t>(in);
  if (n == 0 || m == 0 || m > (1u << 20) || n > (std::uint64_t{1} << 40))
    fail(ErrorKind::Io, "embedding bank header has implausible dimensions");
  if (tag != 1 && tag != 2) fail(ErrorKind::Io, "embedding bank has unknown level tag " + std::to_string(tag));
  EmbeddingBank emb;
  emb.level = static_cast<EmbeddingLevel>(tag);
  emb.source_checksum = le::get<std::uint64_t>(in);
  emb.vectors.resize(m, static_cast<Eigen::Index>(n));
  le::get_array<float>(in, std::span(emb.vectors.data(), static_cast<std::size_t>(emb.vectors.size())));
  return emb;
}

EmbeddingBank read_embedding_bank(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  return read_embedding_bank(in);
}

void verify_embedding_bank(const EmbeddingBank& emb, const SimulationBank& bank, const UNetParams<float>& params,
                           EmbeddingLevel level) {
  if (emb.level != level || emb.dim() != embedding_dim(level, params))
    fail(ErrorKind::StaleArtifact, "embedding bank is " + std::string(level_name(emb.level)) + "-level with m=" +
                                       std::to_string(emb.dim()) + ", expected " + std::string(level_name(level)) +
                                       " with m=" + std::to_string(embedding_dim(level, params)));
  if (emb.size() != bank.size())
    fail(ErrorKind::StaleArtifact, "embedding bank has " + std::to_string(emb.size()) + " rows but the simulation bank has " +
                                       std::to_string(bank.size()) + "; rebuild the embeddings");
  const std::uint64_t expected = embedding_source_checksum(bank, params);
  if (emb.source_checksum != expected)
    fail(ErrorKind::StaleArtifact, "embedding bank source checksum " + hex64(emb.source_checksum) +
                                       " does not match bank+weights checksum " + hex64(expected) +
                                       "; rebuild the embeddings");
}

}  // namespace rrsbi
