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
#include <memory>
#include <string>
#include <vector>

#include "rrsbi/core.hpp"

namespace rrsbi {

using ParamVector = Eigen::VectorXd;

/// Named, box-bounded parameter space.
struct ParamSpace {
  std::vector<std::string> names;
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;

  Eigen::Index size() const { return lower.size(); }
  Eigen::VectorXd range() const { return upper - lower; }
  void validate() const;
  ParamVector clamp(const ParamVector& theta) const;
  bool contains(const ParamVector& theta) const;
  bool operator==(const ParamSpace&) const = default;
};

/// Global z-score statistics over every flux value of a training bank.
struct NormStats {
  double mu = 0.0;
  double sigma = 1.0;
};

/// A binned signal. Unnormalized curves hold nonnegative counts/flux.
struct LightCurve {
  Eigen::VectorXd values;
  bool is_normalized = false;

  Eigen::Index size() const { return values.size(); }
  LightCurve normalized(const NormStats& norm) const;
  LightCurve unnormalized(const NormStats& norm) const;
};

struct EnergyGrid {
  double e_min = 156.0;
  double e_max = 164.0;
  int bins = 40;

  void validate() const;
  double width() const { return (e_max - e_min) / bins; }
  double center(int t) const { return e_min + (t + 0.5) * width(); }
  Eigen::VectorXd centers() const;
};

struct PhotopeakParams {
  double a = 0.0;    // amplitude (counts)
  double x_c = 0.0;  // peak center (keV)
  double w = 1.0;    // Gaussian standard deviation (keV)
  double y_0 = 0.0;  // constant background (counts)

  static PhotopeakParams from_vector(const ParamVector& theta);
  ParamVector to_vector() const;
};

double photopeak_value(const PhotopeakParams& theta, double energy);
LightCurve photopeak_forward(const PhotopeakParams& theta, const EnergyGrid& grid);

// Two wrapped-Gaussian peaks on phase [0, 1) over a constant baseline.
// theta = (amp1, loc1, width1, amp2, loc2, width2, baseline); bin t sits at
// phase t / T. Swapping the two peaks leaves the curve unchanged.
LightCurve toy_pulse_forward(const ParamVector& theta, int bins);

/// Replaces every bin with a Poisson draw whose mean is the bin value.
LightCurve poissonize(const LightCurve& curve, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Forward models
// ---------------------------------------------------------------------------

/// Pure parameter -> noiseless signal map; safe to call concurrently.
class ForwardModel {
 public:
  virtual ~ForwardModel() = default;
  virtual std::string name() const = 0;
  virtual const ParamSpace& space() const = 0;
  virtual int bins() const = 0;
  virtual Eigen::VectorXd simulate(const ParamVector& theta) const = 0;
};

class PhotopeakModel final : public ForwardModel {
 public:
  explicit PhotopeakModel(EnergyGrid grid = {});
  PhotopeakModel(EnergyGrid grid, ParamSpace space);
  std::string name() const override { return "photopeak"; }
  const ParamSpace& space() const override { return space_; }
  int bins() const override { return grid_.bins; }
  Eigen::VectorXd simulate(const ParamVector& theta) const override;
  const EnergyGrid& grid() const { return grid_; }

  /// Central photopeak used for prior construction (Ba-133 160.6 keV line).
  static ParamVector reference_params();

 private:
  EnergyGrid grid_;
  ParamSpace space_;
};

class ToyPulseModel final : public ForwardModel {
 public:
  explicit ToyPulseModel(int bins = 64);
  std::string name() const override { return "toypulse"; }
  const ParamSpace& space() const override { return space_; }
  int bins() const override { return bins_; }
  Eigen::VectorXd simulate(const ParamVector& theta) const override;

 private:
  int bins_;
  ParamSpace space_;
};

/// "photopeak" or "toypulse".
std::unique_ptr<ForwardModel> make_model(const std::string& name);

// ---------------------------------------------------------------------------
// Priors and bank generation
// ---------------------------------------------------------------------------

struct PriorDim {
  enum class Kind { Gaussian, Uniform };
  Kind kind = Kind::Uniform;
  double mean = 0.0;  // Gaussian only
  double std = 0.0;   // Gaussian only; 0 means a point mass at `mean`
};

/// Independent per-dimension prior, truncated to the parameter bounds.
struct Prior {
  std::vector<PriorDim> dims;

  ParamVector draw(Engine& rng, const ParamSpace& space) const;
  bool degenerate() const;
  static Prior uniform(const ParamSpace& space);
  static Prior gaussian(const ParamVector& mean, const ParamVector& std);
  static Prior delta(const ParamVector& at);
};

/// Default prior for a model: Gaussian with std = 5% of the reference value
/// for the photopeak, uniform over the box for the toy pulse.
Prior default_prior(const ForwardModel& model);

/// N (curve, parameter) pairs. Curves are stored unnormalized as float
/// columns of `curves` (T x N); parameters as columns of `params` (P x N).
struct SimulationBank {
  Eigen::MatrixXf curves;
  Eigen::MatrixXd params;
  NormStats norm;
  ParamSpace space;

  Eigen::Index size() const { return curves.cols(); }
  Eigen::Index bins() const { return curves.rows(); }
  LightCurve curve(Eigen::Index i) const;
};

NormStats compute_norm_stats(const Eigen::MatrixXf& curves);

SimulationBank generate_bank(const ParamSpace& space, const Prior& prior, std::int64_t n,
                             const ForwardModel& model, bool noise, std::uint64_t seed);

void write_bank(std::ostream& out, const SimulationBank& bank);
void write_bank(const std::filesystem::path& path, const SimulationBank& bank);
SimulationBank read_bank(std::istream& in);
SimulationBank read_bank(const std::filesystem::path& path);

/// FNV-1a of the serialized bank (equals fnv1a_file of a written bank file).
std::uint64_t bank_checksum(const SimulationBank& bank);

/// Plain-text two-column (bin, value) signal reader/writer. '#' starts a comment.
LightCurve read_observed(const std::filesystem::path& path);
void write_observed(const std::filesystem::path& path, const LightCurve& curve);

}  // namespace rrsbi
