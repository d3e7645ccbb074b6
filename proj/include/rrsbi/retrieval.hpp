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

// Two-stage retrieval: exact cosine top-n over an embedding bank, then an
// MdNSE re-rank of that pool in unnormalized signal space.

#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "rrsbi/embedding.hpp"
#include "rrsbi/simulators.hpp"

namespace rrsbi {

struct Scored {
  Eigen::Index index = 0;
  double score = 0.0;
};

/// True if a ranks before b: higher score first, then lower index.
inline bool ranks_before(const Scored& a, const Scored& b) {
  return a.score > b.score || (a.score == b.score && a.index < b.index);
}

/// Exact top-n rows of `vectors` (m x N, one unit vector per column) by inner
/// product with `query`, best first. f32 storage, f64 accumulation.
std::vector<Scored> cosine_topn(const Eigen::VectorXf& query, const Eigen::MatrixXf& vectors, Eigen::Index n);
inline std::vector<Scored> cosine_topn(const Embedding& query, const EmbeddingBank& bank, Eigen::Index n) {
  if (query.vector.size() != bank.dim())
    fail(ErrorKind::Shape, "query embedding has " + std::to_string(query.vector.size()) + " dims, bank has " +
                               std::to_string(bank.dim()));
  return cosine_topn(query.vector, bank.vectors, n);
}

/// Inner product with f64 accumulation.
double dot_f64(const float* a, const float* b, Eigen::Index m);

/// sum_t (x_ret - x)^2 / median(x)^2 on unnormalized values. Inputs flagged
/// as normalized are first mapped back with x = sigma * x~ + mu.
double mdnse(const LightCurve& query, const LightCurve& candidate, const NormStats& norm);
double median(Eigen::VectorXd values);

// ---------------------------------------------------------------------------

struct RetrievalConfig {
  Eigen::Index candidate_pool = 20000;
  Eigen::Index k = 4000;
  EmbeddingLevel level = EmbeddingLevel::Multi;

  void validate(Eigen::Index bank_size) const;
};

struct RetrievalResult {
  std::vector<Eigen::Index> indices;  // K rows, ascending MdNSE
  std::vector<double> cosines;
  std::vector<double> mdnse;
  std::vector<Scored> pool;          // stage-1 candidates, best cosine first
  std::vector<double> pool_mdnse;    // aligned with `pool`
};

struct PosteriorSample {
  Eigen::Index origin = 0;  // bank row
  ParamVector params;
  double cosine = std::numeric_limits<double>::quiet_NaN();
  double mdnse = std::numeric_limits<double>::quiet_NaN();
  double nll = std::numeric_limits<double>::quiet_NaN();
  double nll_initial = std::numeric_limits<double>::quiet_NaN();
  bool failed = false;
};

/// Equal-weight mixture of point masses.
struct EmpiricalPosterior {
  std::vector<PosteriorSample> samples;
  std::string stage = "initial";

  std::size_t size() const { return samples.size(); }
  Eigen::MatrixXd param_matrix() const;  // P x K
  double mean_nll() const;               // over non-failed samples
  EmpiricalPosterior top(std::size_t k) const;
};

/// Stage 1 + stage 2 for an unnormalized observed curve.
RetrievalResult retrieve(const LightCurve& query, const SimulationBank& bank, const EmbeddingBank& emb,
                         const UNetParams<float>& params, const RetrievalConfig& cfg);

/// Same, but skips the staleness check (caller has verified the artifacts).
RetrievalResult retrieve_unchecked(const LightCurve& query, const SimulationBank& bank, const EmbeddingBank& emb,
                                   const UNetParams<float>& params, const RetrievalConfig& cfg);

EmpiricalPosterior make_posterior(const RetrievalResult& result, const SimulationBank& bank);

void write_posterior_json(const std::filesystem::path& path, const EmpiricalPosterior& posterior);
EmpiricalPosterior read_posterior_json(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Similarity-space ablation
// ---------------------------------------------------------------------------

/// Per-curve z-score followed by unit normalization; zero for flat curves.
Eigen::VectorXf zscore_unit(const Eigen::VectorXd& curve);

struct AblationSpaces {
  Eigen::MatrixXf raw;     // T x N z-scored curves
  EmbeddingBank single;
  EmbeddingBank multi;
};

AblationSpaces build_ablation_spaces(const UNetParams<float>& params, const SimulationBank& bank);

struct AblationRow {
  std::string space;  // raw-cosine | bottleneck-only | multi-level
  Eigen::Index k = 0;
  double mean_mdnse = 0.0;
  double median_mdnse = 0.0;
  Eigen::Index top_index = 0;
};

/// Top-K by cosine in each space, scored by MdNSE against the query.
std::vector<AblationRow> ablation_compare(const LightCurve& query, const SimulationBank& bank,
                                          const UNetParams<float>& params, const AblationSpaces& spaces,
                                          Eigen::Index k);

void write_ablation_csv(const std::filesystem::path& path,
                        const std::vector<std::vector<AblationRow>>& repetitions);

}  // namespace rrsbi
