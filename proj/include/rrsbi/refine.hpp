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

// Derivative-free block hill climbing on the Poisson NLL.

#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rrsbi/retrieval.hpp"
#include "rrsbi/simulators.hpp"

namespace rrsbi {

struct PoissonNllConfig {
  double pseudocount = 1e-8;
};

/// (1/T) sum_t [F_t - x_t log(F_t + eps_pc)].
double poisson_nll(const Eigen::VectorXd& expected, const Eigen::VectorXd& observed, const PoissonNllConfig& cfg = {});
double poisson_nll(const ParamVector& theta, const ForwardModel& model, const LightCurve& observed,
                   const PoissonNllConfig& cfg = {});

using Objective = std::function<double(const ParamVector&)>;

struct SignSearchResult {
  ParamVector theta;
  double value = 0.0;
  std::uint32_t sign_code = 0;  // bit (P-1-j) set means sigma_j = +1
  int evaluations = 0;
};

/// Evaluates all 2^P moves theta + sum_j sigma_j delta[I_j] e_{I_j}, clamped
/// to `space`, and returns the best (ties: lexicographically smallest sigma,
/// with -1 < +1). `delta` holds one step per parameter of the full vector.
SignSearchResult sign_search_step(const ParamVector& theta, std::span<const int> index_set,
                                  const Eigen::VectorXd& delta, const Objective& objective, const ParamSpace& space);

enum class RefineMode { Exhaustive, Stochastic };
RefineMode parse_refine_mode(std::string_view name);

struct RefinerConfig {
  int block_size = 3;                // P
  double initial_step_fraction = 0.01;
  double min_step_fraction = 1e-5;   // Delta_min as a fraction of each range
  double grow = 2.0;
  double shrink = 0.5;
  double tolerance = 1e-6;           // eps_tol, absolute NLL units
  int patience = 5;                  // 0 disables the plateau rule
  std::optional<double> target;      // tau
  int max_blocks = 200;
  std::int64_t max_evaluations = 0;  // 0 = unlimited
  RefineMode mode = RefineMode::Exhaustive;
  int trials_per_block = 20;
  double accept_low = 0.1;
  double accept_high = 0.5;
  double anneal_shrink = 0.5;
  int ramp_interval = 0;             // >0: block size grows 1 -> P every ramp_interval blocks
  std::uint64_t seed = 0;
  PoissonNllConfig nll{};

  void validate(int num_params) const;
};

/// Elementwise Delta * grow if improved, else Delta * shrink.
Eigen::VectorXd adapt_step(const Eigen::VectorXd& delta, bool improved, const RefinerConfig& cfg);

enum class StopReason { Plateau, Target, MaxBlocks, Budget, Failed };
std::string_view stop_reason_name(StopReason reason);

struct TraceEntry {
  int block = 0;
  bool accepted = false;
  double nll = 0.0;
  Eigen::VectorXd step;
  ParamVector theta;
};

struct RefinementTrace {
  std::vector<TraceEntry> entries;
  ParamVector best;
  double best_nll = 0.0;
  double initial_nll = 0.0;
  StopReason stop = StopReason::MaxBlocks;
  int blocks = 0;
  std::int64_t evaluations = 0;
  std::string diagnostic;  // set when stop == Failed
};

/// Hill climbing from theta0 on an arbitrary objective. `stream` selects the
/// random stream (the bank index for ensemble refinement).
RefinementTrace refine_objective(const ParamVector& theta0, const Objective& objective, const ParamSpace& space,
                                 const RefinerConfig& cfg, std::uint64_t stream = 0);

RefinementTrace refine_seed(const ParamVector& theta0, const LightCurve& observed, const ForwardModel& model,
                            const RefinerConfig& cfg, std::uint64_t stream = 0);

struct SummaryRow {
  std::string stage;  // "initial" or "refined"
  int block_size = 0;
  double mean_nll = 0.0;
  double delta_from_initial = 0.0;
};

struct RefineOutput {
  EmpiricalPosterior posterior;
  std::vector<RefinementTrace> traces;  // aligned with posterior.samples
  double mean_initial = 0.0;
  double mean_refined = 0.0;
  std::size_t failed = 0;
  std::vector<SummaryRow> summary;
};

RefineOutput refine_ensemble(const EmpiricalPosterior& posterior, const LightCurve& observed,
                             const ForwardModel& model, const RefinerConfig& cfg);

/// stage,P,mean_nll,delta_from_initial
void write_refine_summary(const std::filesystem::path& path, const std::vector<SummaryRow>& rows);

}  // namespace rrsbi
