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

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rrsbi/retrieval.hpp"
#include "rrsbi/simulators.hpp"

namespace rrsbi {

inline constexpr double kKlFloor = 1e-12;
inline constexpr double kModeProminence = 0.1;

struct HistogramSpec {
  int bins = 50;
  double lower = 0.0;
  double upper = 1.0;

  void validate() const;
  Eigen::VectorXd edges() const;  // bins + 1 strictly increasing values
  static HistogramSpec for_parameter(const ParamSpace& space, int index, int bins = 50);
};

struct Histogram {
  Eigen::VectorXd edges;
  Eigen::VectorXd mass;  // sums to 1
  std::int64_t clamped = 0;
};

Histogram histogram(std::span<const double> values, const HistogramSpec& spec);
Histogram marginal_histogram(const EmpiricalPosterior& posterior, int param, const HistogramSpec& spec);

/// sum over p > 0 of p log(p / q~), q~ = (q + 1e-12) renormalized. Nats.
double kl_divergence(const Histogram& p_ref, const Histogram& q);

struct KlSweepResult {
  std::vector<Eigen::Index> ks;
  Eigen::MatrixXd kl;       // params x ks
  Eigen::VectorXd average;  // per K
  std::vector<Eigen::VectorXd> edges;  // per parameter, shared by every K
};

/// Posterior samples must be ranked (retrieval order); K-subsets are
/// prefixes. The reference is the K_max prefix, the last entry of `ks`.
KlSweepResult kl_vs_k_sweep(const EmpiricalPosterior& ranked, const ParamSpace& space,
                            std::vector<Eigen::Index> ks, int bins = 50);

/// Peaks of a histogram whose topographic prominence is at least
/// `threshold` times the largest bin.
int count_modes(const Eigen::VectorXd& mass, double threshold = kModeProminence);

struct ParameterSummary {
  std::string name;
  double mean = 0.0;
  double std = 0.0;
  double q05 = 0.0, q25 = 0.0, q50 = 0.0, q75 = 0.0, q95 = 0.0;
  int modes = 0;
};

struct PosteriorSummary {
  std::vector<ParameterSummary> params;
  int modes = 0;  // largest per-parameter mode count
};

/// Linear-interpolation quantile (h = (n - 1) q).
double quantile(std::vector<double> values, double q);

PosteriorSummary posterior_summary(const EmpiricalPosterior& posterior, const ParamSpace& space, int bins = 50);

struct DiagnosticsConfig {
  std::vector<Eigen::Index> ks{250, 500, 1000, 2000, 4000};
  int bins = 50;
};

/// Writes marginals.csv, kl_sweep.csv and summary.csv under out_dir. The
/// sweep runs on the refined posterior when given, else on the initial one.
KlSweepResult run_diagnostics(const EmpiricalPosterior& initial, const EmpiricalPosterior* refined,
                              const ParamSpace& space, const DiagnosticsConfig& cfg,
                              const std::filesystem::path& out_dir);

}  // namespace rrsbi
