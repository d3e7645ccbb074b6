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

#include "rrsbi/simulators.hpp"

#include <boost/random/normal_distribution.hpp>
#include <boost/random/poisson_distribution.hpp>
#include <boost/random/uniform_real_distribution.hpp>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace rrsbi {

void ParamSpace::validate() const {
  if (lower.size() < 1) fail(ErrorKind::Config, "parameter space must have at least one dimension");
  if (upper.size() != lower.size() || static_cast<Eigen::Index>(names.size()) != lower.size())
    fail(ErrorKind::Config, "parameter space names/bounds have different lengths");
  std::set<std::string> seen;
  for (Eigen::Index j = 0; j < lower.size(); ++j) {
    if (!(lower[j] < upper[j]))
      fail(ErrorKind::Config, "parameter '" + names[j] + "' has lower >= upper");
    if (!seen.insert(names[j]).second)
      fail(ErrorKind::Config, "duplicate parameter name '" + names[j] + "'");
  }
}

ParamVector ParamSpace::clamp(const ParamVector& theta) const {
  return theta.cwiseMax(lower).cwiseMin(upper);
}

bool ParamSpace::contains(const ParamVector& theta) const {
  return theta.size() == size() && (theta.array() >= lower.array()).all() &&
         (theta.array() <= upper.array()).all();
}

LightCurve LightCurve::normalized(const NormStats& norm) const {
  if (is_normalized) fail(ErrorKind::Usage, "curve is already normalized");
  return {(values.array() - norm.mu) / norm.sigma, true};
}

LightCurve LightCurve::unnormalized(const NormStats& norm) const {
  if (!is_normalized) fail(ErrorKind::Usage, "curve is not normalized");
  return {values.array() * norm.sigma + norm.mu, false};
}

void EnergyGrid::validate() const {
  if (!(e_min < e_max)) fail(ErrorKind::Config, "energy grid needs e_min < e_max");
  if (bins < 2) fail(ErrorKind::Config, "energy grid needs at least 2 bins");
}

Eigen::VectorXd EnergyGrid::centers() const {
  Eigen::VectorXd c(bins);
  for (int t = 0; t < bins; ++t) c[t] = center(t);
  return c;
}

PhotopeakParams PhotopeakParams::from_vector(const ParamVector& theta) {
  if (theta.size() != 4) fail(ErrorKind::Shape, "photopeak expects 4 parameters");
  return {theta[0], theta[1], theta[2], theta[3]};
}

ParamVector PhotopeakParams::to_vector() const { return ParamVector{{a, x_c, w, y_0}}; }

double photopeak_value(const PhotopeakParams& theta, double energy) {
  const double d = energy - theta.x_c;
  return theta.a * std::exp(-d * d / (2.0 * theta.w * theta.w)) + theta.y_0;
}

LightCurve photopeak_forward(const PhotopeakParams& theta, const EnergyGrid& grid) {
  grid.validate();
  if (!(theta.w > 0.0)) fail(ErrorKind::InvalidInput, "photopeak width must be positive");
  if (theta.a < 0.0 || theta.y_0 < 0.0)
    fail(ErrorKind::InvalidInput, "photopeak amplitude and background must be nonnegative");
  LightCurve out{Eigen::VectorXd(grid.bins), false};
  for (int t = 0; t < grid.bins; ++t) out.values[t] = photopeak_value(theta, grid.center(t));
  return out;
}

LightCurve toy_pulse_forward(const ParamVector& theta, int bins) {
  if (theta.size() != 7) fail(ErrorKind::Shape, "toy pulse expects 7 parameters");
  if (bins < 2) fail(ErrorKind::Config, "toy pulse needs at least 2 bins");
  if (!(theta[2] > 0.0) || !(theta[5] > 0.0))
    fail(ErrorKind::InvalidInput, "toy pulse widths must be positive");
  LightCurve out{Eigen::VectorXd::Constant(bins, theta[6]), false};
  for (int peak = 0; peak < 2; ++peak) {
    const double amp = theta[3 * peak], loc = theta[3 * peak + 1], width = theta[3 * peak + 2];
    const double inv2w2 = 1.0 / (2.0 * width * width);
    // Images beyond +-3 periods contribute < exp(-2.5^2 / (2 * 0.25^2)) ~ 1e-22
    // for widths up to a quarter period.
    for (int t = 0; t < bins; ++t) {
      const double phase = static_cast<double>(t) / bins;
      double acc = 0.0;
      for (int k = -3; k <= 3; ++k) {
        const double d = phase - loc + k;
        acc += std::exp(-d * d * inv2w2);
      }
      out.values[t] += amp * acc;
    }
  }
  return out;
}

LightCurve poissonize(const LightCurve& curve, std::uint64_t seed) {
  if (curve.is_normalized) fail(ErrorKind::Usage, "poissonize needs an unnormalized curve");
  LightCurve out{Eigen::VectorXd(curve.size()), false};
  Engine rng = make_engine(seed, 0x504f4953);
  for (Eigen::Index t = 0; t < curve.size(); ++t) {
    const double mean = curve.values[t];
    if (!(mean >= 0.0) || !std::isfinite(mean))
      fail(ErrorKind::InvalidInput, "poissonize: bin " + std::to_string(t) + " is negative or non-finite");
    if (mean == 0.0) {
      out.values[t] = 0.0;
      continue;
    }
    boost::random::poisson_distribution<std::int64_t, double> dist(mean);
    out.values[t] = static_cast<double>(dist(rng));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

ParamSpace photopeak_space(const EnergyGrid& grid) {
  const ParamVector ref = PhotopeakModel::reference_params();
  ParamSpace s;
  s.names = {"a", "x_c", "w", "y_0"};
  s.lower = ParamVector{{0.75 * ref[0], grid.e_min, 0.75 * ref[2], 0.75 * ref[3]}};
  s.upper = ParamVector{{1.25 * ref[0], grid.e_max, 1.25 * ref[2], 1.25 * ref[3]}};
  return s;
}

}  // namespace

PhotopeakModel::PhotopeakModel(EnergyGrid grid) : PhotopeakModel(grid, photopeak_space(grid)) {}

PhotopeakModel::PhotopeakModel(EnergyGrid grid, ParamSpace space)
    : grid_(grid), space_(std::move(space)) {
  grid_.validate();
  space_.validate();
  if (space_.size() != 4) fail(ErrorKind::Config, "photopeak space must have 4 dimensions");
}

ParamVector PhotopeakModel::reference_params() { return ParamVector{{2500.0, 160.6, 0.9, 800.0}}; }

Eigen::VectorXd PhotopeakModel::simulate(const ParamVector& theta) const {
  return photopeak_forward(PhotopeakParams::from_vector(theta), grid_).values;
}

ToyPulseModel::ToyPulseModel(int bins) : bins_(bins) {
  if (bins < 2) fail(ErrorKind::Config, "toy pulse needs at least 2 bins");
  space_.names = {"amp1", "loc1", "width1", "amp2", "loc2", "width2", "baseline"};
  space_.lower = ParamVector{{0.0, 0.0, 0.02, 0.0, 0.0, 0.02, 10.0}};
  space_.upper = ParamVector{{200.0, 1.0, 0.15, 200.0, 1.0, 0.15, 100.0}};
}

Eigen::VectorXd ToyPulseModel::simulate(const ParamVector& theta) const {
  return toy_pulse_forward(theta, bins_).values;
}

std::unique_ptr<ForwardModel> make_model(const std::string& name) {
  if (name == "photopeak") return std::make_unique<PhotopeakModel>();
  if (name == "toypulse") return std::make_unique<ToyPulseModel>();
  fail(ErrorKind::Config, "unknown model '" + name + "' (expected photopeak or toypulse)");
}

// ---------------------------------------------------------------------------

ParamVector Prior::draw(Engine& rng, const ParamSpace& space) const {
  if (static_cast<Eigen::Index>(dims.size()) != space.size())
    fail(ErrorKind::Config, "prior dimension does not match parameter space");
  ParamVector theta(space.size());
  for (Eigen::Index j = 0; j < space.size(); ++j) {
    const PriorDim& d = dims[j];
    if (d.kind == PriorDim::Kind::Uniform) {
      theta[j] = boost::random::uniform_real_distribution<double>(space.lower[j], space.upper[j])(rng);
    } else if (d.std == 0.0) {
      theta[j] = d.mean;
    } else {
      // Truncation by rejection; the clamp below only matters if the bounds
      // sit so far out in the tail that rejection gives up.
      boost::random::normal_distribution<double> normal(d.mean, d.std);
      double v = normal(rng);
      for (int tries = 0; tries < 1000 && (v < space.lower[j] || v > space.upper[j]); ++tries)
        v = normal(rng);
      theta[j] = v;
    }
  }
  return space.clamp(theta);
}

bool Prior::degenerate() const {
  return std::all_of(dims.begin(), dims.end(),
                     [](const PriorDim& d) { return d.kind == PriorDim::Kind::Gaussian && d.std == 0.0; });
}

Prior Prior::uniform(const ParamSpace& space) {
  return Prior{std::vector<PriorDim>(space.size(), PriorDim{PriorDim::Kind::Uniform, 0.0, 0.0})};
}

Prior Prior::gaussian(const ParamVector& mean, const ParamVector& std) {
  Prior p;
  for (Eigen::Index j = 0; j < mean.size(); ++j)
    p.dims.push_back({PriorDim::Kind::Gaussian, mean[j], std[j]});
  return p;
}

Prior Prior::delta(const ParamVector& at) {
  return gaussian(at, ParamVector::Zero(at.size()));
}

Prior default_prior(const ForwardModel& model) {
  if (model.name() == "photopeak") {
    const ParamVector ref = PhotopeakModel::reference_params();
    return Prior::gaussian(ref, 0.05 * ref.cwiseAbs());
  }
  return Prior::uniform(model.space());
}

LightCurve SimulationBank::curve(Eigen::Index i) const {
  return {curves.col(i).cast<double>(), false};
}

NormStats compute_norm_stats(const Eigen::MatrixXf& curves) {
  const double count = static_cast<double>(curves.size());
  if (count == 0) fail(ErrorKind::InvalidInput, "cannot compute statistics of an empty bank");
  const double mean = curves.cast<double>().sum() / count;
  const double var = (curves.cast<double>().array() - mean).square().sum() / count;
  NormStats s{mean, std::sqrt(var)};
  if (!(s.sigma > 1e-12)) {
    warn("bank flux has zero variance; using sigma = 1");
    s.sigma = 1.0;
  }
  return s;
}

SimulationBank generate_bank(const ParamSpace& space, const Prior& prior, std::int64_t n,
                             const ForwardModel& model, bool noise, std::uint64_t seed) {
  space.validate();
  if (n < 1) fail(ErrorKind::Config, "bank size must be at least 1");
  if (prior.degenerate()) warn("prior has zero width on every dimension; all bank entries coincide");

  SimulationBank bank;
  bank.space = space;
  bank.curves.resize(model.bins(), n);
  bank.params.resize(space.size(), n);

#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    Engine rng = make_engine(seed, static_cast<std::uint64_t>(i), 0);
    const ParamVector theta = prior.draw(rng, space);
    LightCurve curve{model.simulate(theta), false};
    if (noise) curve = poissonize(curve, stream_key(seed, static_cast<std::uint64_t>(i), 1));
    bank.params.col(i) = theta;
    bank.curves.col(i) = curve.values.cast<float>();
  }
  bank.norm = compute_norm_stats(bank.curves);
  return bank;
}

// ---------------------------------------------------------------------------
// Bank file: "SBNK", version, N, T, P, mu, sigma, param-space block, records.
// ---------------------------------------------------------------------------

namespace {
constexpr std::uint32_t kBankVersion = 1;
}

void write_bank(std::ostream& out, const SimulationBank& bank) {
  const auto n = static_cast<std::uint64_t>(bank.size());
  const auto t = static_cast<std::uint32_t>(bank.bins());
  const auto p = static_cast<std::uint32_t>(bank.space.size());
  le::put_magic(out, "SBNK");
  le::put<std::uint32_t>(out, kBankVersion);
  le::put<std::uint64_t>(out, n);
  le::put<std::uint32_t>(out, t);
  le::put<std::uint32_t>(out, p);
  le::put<double>(out, bank.norm.mu);
  le::put<double>(out, bank.norm.sigma);
  for (std::uint32_t j = 0; j < p; ++j) {
    le::put_string(out, bank.space.names[j]);
    le::put<double>(out, bank.space.lower[j]);
    le::put<double>(out, bank.space.upper[j]);
  }
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    for (std::uint32_t k = 0; k < t; ++k) le::put<float>(out, bank.curves(k, ii));
    for (std::uint32_t j = 0; j < p; ++j) le::put<double>(out, bank.params(j, ii));
  }
  if (!out) fail(ErrorKind::Io, "failed writing bank");
}

void write_bank(const std::filesystem::path& path, const SimulationBank& bank) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  write_bank(out, bank);
}

SimulationBank read_bank(std::istream& in) {
  le::expect_magic(in, "SBNK");
  const auto version = le::get<std::uint32_t>(in);
  if (version != kBankVersion) fail(ErrorKind::Io, "unsupported bank version " + std::to_string(version));
  const auto n = le::get<std::uint64_t>(in);
  const auto t = le::get<std::uint32_t>(in);
  const auto p = le::get<std::uint32_t>(in);
  if (n == 0 || t == 0 || p == 0 || p > 4096 || t > (1u << 24))
    fail(ErrorKind::Io, "bank header has implausible dimensions");
  SimulationBank bank;
  bank.norm.mu = le::get<double>(in);
  bank.norm.sigma = le::get<double>(in);
  bank.space.lower.resize(p);
  bank.space.upper.resize(p);
  for (std::uint32_t j = 0; j < p; ++j) {
    bank.space.names.push_back(le::get_string(in, 4096));
    bank.space.lower[j] = le::get<double>(in);
    bank.space.upper[j] = le::get<double>(in);
  }
  bank.space.validate();
  bank.curves.resize(t, static_cast<Eigen::Index>(n));
  bank.params.resize(p, static_cast<Eigen::Index>(n));
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    for (std::uint32_t k = 0; k < t; ++k) bank.curves(k, ii) = le::get<float>(in);
    for (std::uint32_t j = 0; j < p; ++j) bank.params(j, ii) = le::get<double>(in);
  }
  return bank;
}

SimulationBank read_bank(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  std::vector<char> buf(1 << 20);
  in.rdbuf()->pubsetbuf(buf.data(), static_cast<std::streamsize>(buf.size()));
  return read_bank(in);
}

std::uint64_t bank_checksum(const SimulationBank& bank) {
  std::ostringstream out(std::ios::binary);
  write_bank(out, bank);
  const std::string bytes = std::move(out).str();
  return fnv1a_bytes(std::as_bytes(std::span(bytes.data(), bytes.size())));
}

LightCurve read_observed(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  std::vector<double> values;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream fields(line);
    double bin = 0.0, value = 0.0;
    if (!(fields >> bin)) continue;
    if (!(fields >> value))
      fail(ErrorKind::Io, path.string() + ":" + std::to_string(lineno) + ": expected two columns");
    values.push_back(value);
  }
  if (values.empty()) fail(ErrorKind::Io, path.string() + " contains no samples");
  return {Eigen::Map<Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size())), false};
}

void write_observed(const std::filesystem::path& path, const LightCurve& curve) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.precision(17);
  out << "# bin value\n";
  for (Eigen::Index t = 0; t < curve.size(); ++t) out << t << ' ' << curve.values[t] << '\n';
}

}  // namespace rrsbi
