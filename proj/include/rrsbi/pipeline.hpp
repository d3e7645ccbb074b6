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

// End-to-end orchestration: run config, manifest with checksums, cached
// stage execution, timing report and the ablation harness.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rrsbi/diagnostics.hpp"
#include "rrsbi/embedding.hpp"
#include "rrsbi/refine.hpp"
#include "rrsbi/retrieval.hpp"
#include "rrsbi/simulators.hpp"
#include "rrsbi/unet.hpp"

namespace rrsbi {

inline constexpr std::string_view kToolVersion = "rrsbi 0.1.0";

/// Pipeline stages in execution order.
inline constexpr std::string_view kStages[] = {"simulate-bank", "train", "embed", "retrieve", "refine", "diagnose"};

struct RunConfig {
  std::string model = "photopeak";
  std::uint64_t seed = 0;
  std::filesystem::path work_dir = "rrsbi-run";

  // Empty paths resolve to fixed names under work_dir.
  std::filesystem::path bank_path;
  std::filesystem::path weights_path;
  std::filesystem::path embedding_path;
  std::filesystem::path observed_path;  // external observation; synthesized from `truth` when empty

  std::int64_t bank_size = 100000;
  bool bank_noise = false;
  std::optional<ParamVector> truth;  // defaults to the model's reference point

  UNetConfig arch{16, 3, 0};  // input_length taken from the model
  TrainConfig train;
  RetrievalConfig retrieval;
  RefinerConfig refine;
  DiagnosticsConfig diagnostics;
  bool diagnostics_ks_set = false;

  /// INI text with sections [run], [paths], [simulate], [observation],
  /// [train], [retrieve], [refine], [diagnose]. Relative paths are taken
  /// relative to `base_dir`. Unknown sections or keys are Config errors.
  static RunConfig parse(std::istream& in, const std::filesystem::path& base_dir = ".");
  static RunConfig load(const std::filesystem::path& path);

  /// Checks cross-stage consistency against the model (bins, K <= pool <= N, ...).
  void validate() const;

  std::filesystem::path bank_file() const;
  std::filesystem::path weights_file() const;
  std::filesystem::path embedding_file() const;
  std::filesystem::path observed_file() const;
  std::filesystem::path loss_file() const { return work_dir / "loss.csv"; }
  std::filesystem::path posterior_file() const { return work_dir / "posterior.json"; }
  std::filesystem::path refined_file() const { return work_dir / "refined.json"; }
  std::filesystem::path refine_summary_file() const { return work_dir / "refine_summary.csv"; }
  std::filesystem::path diagnostics_dir() const { return work_dir / "diagnostics"; }
  std::filesystem::path manifest_file() const { return work_dir / "manifest.json"; }
  std::filesystem::path timing_file() const { return work_dir / "timing.csv"; }

  /// Canonical text of the settings one stage depends on.
  std::string stage_settings(std::string_view stage) const;
  /// Per-stage seed derived from the global seed.
  std::uint64_t stage_seed(std::string_view stage) const;
};

struct StageRecord {
  std::string stage;
  std::map<std::string, std::uint64_t> inputs;   // path -> FNV-1a
  std::map<std::string, std::uint64_t> outputs;  // path -> FNV-1a
  std::uint64_t key = 0;                         // settings + input checksums
  std::uint64_t seed = 0;
  double seconds = 0.0;
  bool cache_hit = false;
  std::string tool_version{kToolVersion};
};

/// Append-only record of stage executions. The latest record per stage wins.
struct Manifest {
  std::vector<StageRecord> records;

  const StageRecord* latest(std::string_view stage) const;
  /// Latest record that produced `path` as an output.
  const StageRecord* producer_of(const std::string& path) const;

  void write(std::ostream& out) const;
  static Manifest read(std::istream& in);
  /// Writes to a temporary file and renames it over `path`.
  void save(const std::filesystem::path& path) const;
  static Manifest load(const std::filesystem::path& path);  // empty if absent
};

struct PipelineOptions {
  bool force = false;  // rerun every stage regardless of cache state
  bool verbose = false;
};

/// simulate-bank -> train -> embed -> retrieve -> refine -> diagnose. A stage
/// whose settings and input checksums match its latest manifest record, and
/// whose outputs exist, is skipped and logged as a cache hit. Inputs are
/// checked against the checksums their producer recorded; a mismatch throws
/// StaleArtifact naming the file.
Manifest run_pipeline(const RunConfig& cfg, const PipelineOptions& opts = {});

struct TimingRow {
  std::string stage;
  std::string phase;  // offline | online | analysis | total
  double seconds = 0.0;
  bool cache_hit = false;
};

/// Latest record per stage plus offline/online/total rows. Missing stages
/// produce a warning and a partial table.
std::vector<TimingRow> timing_table(const Manifest& manifest);
void report_timing(const Manifest& manifest, const std::filesystem::path& csv_path);
std::string_view stage_phase(std::string_view stage);

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

struct AblationConfig {
  Eigen::Index k = 100;
  int repetitions = 10;
  std::uint64_t seed = 0;
  bool query_noise = true;
};

/// Repetition r draws theta_r from the model's default prior on stream
/// (seed, r), simulates it and (optionally) Poissonizes the query.
std::vector<std::vector<AblationRow>> run_ablation(const ForwardModel& model, const SimulationBank& bank,
                                                   const UNetParams<float>& params, const AblationConfig& cfg);

/// Repetitions where multi-level <= bottleneck-only <= raw-cosine on mean MdNSE.
int ablation_ordered_count(const std::vector<std::vector<AblationRow>>& reps);

}  // namespace rrsbi
