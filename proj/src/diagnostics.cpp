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

#include "rrsbi/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <locale>

namespace rrsbi {

void HistogramSpec::validate() const {
  if (bins < 1) fail(ErrorKind::Config, "histogram needs at least one bin");
  if (!(lower < upper) || !std::isfinite(lower) || !std::isfinite(upper))
    fail(ErrorKind::Config, "histogram support must satisfy lower < upper");
}

Eigen::VectorXd HistogramSpec::edges() const {
  validate();
  Eigen::VectorXd e(bins + 1);
  const double width = (upper - lower) / bins;
  for (int i = 0; i < bins; ++i) e[i] = lower + i * width;
  e[bins] = upper;
  return e;
}

HistogramSpec HistogramSpec::for_parameter(const ParamSpace& space, int index, int bins) {
  if (index < 0 || index >= space.size()) fail(ErrorKind::Config, "parameter index out of range");
  return {bins, space.lower[index], space.upper[index]};
}

Histogram histogram(std::span<const double> values, const HistogramSpec& spec) {
  if (values.empty()) fail(ErrorKind::Usage, "histogram of an empty posterior");
  Histogram h;
  h.edges = spec.edges();
  h.mass = Eigen::VectorXd::Zero(spec.bins);
  const double width = (spec.upper - spec.lower) / spec.bins;
  for (double v : values) {
    if (!std::isfinite(v)) fail(ErrorKind::InvalidInput, "histogram sample is not finite");
    if (v < spec.lower || v > spec.upper) ++h.clamped;
    const auto bin = static_cast<int>(std::floor((v - spec.lower) / width));
    h.mass[std::clamp(bin, 0, spec.bins - 1)] += 1.0;
  }
  h.mass /= static_cast<double>(values.size());
  return h;
}

Histogram marginal_histogram(const EmpiricalPosterior& posterior, int param, const HistogramSpec& spec) {
  if (posterior.samples.empty()) fail(ErrorKind::Usage, "histogram of an empty posterior");
  std::vector<double> v;
  v.reserve(posterior.size());
  for (const auto& s : posterior.samples) {
    if (param < 0 || param >= s.params.size()) fail(ErrorKind::Config, "parameter index out of range");
    v.push_back(s.params[param]);
  }
  Histogram h = histogram(v, spec);
  if (h.clamped > 0)
    warn(std::to_string(h.clamped) + " samples of parameter " + std::to_string(param) +
         " fell outside the histogram support and were clamped to the edge bins");
  return h;
}

double kl_divergence(const Histogram& p_ref, const Histogram& q) {
  if (p_ref.edges.size() != q.edges.size() || p_ref.edges != q.edges)
    fail(ErrorKind::Usage, "KL divergence needs histograms on identical bin edges");
  // The regularization would otherwise leave ~1e-12 between identical histograms.
  if (p_ref.mass == q.mass) return 0.0;
  const Eigen::VectorXd q_reg = (q.mass.array() + kKlFloor).matrix() / (q.mass.sum() + kKlFloor * q.mass.size());
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p_ref.mass.size(); ++i)
    if (p_ref.mass[i] > 0.0) kl += p_ref.mass[i] * std::log(p_ref.mass[i] / q_reg[i]);
  // p = q gives tiny negative round-off through the regularization.
  return std::max(kl, 0.0);
}

KlSweepResult kl_vs_k_sweep(const EmpiricalPosterior& ranked, const ParamSpace& space,
                            std::vector<Eigen::Index> ks, int bins) {
  if (ks.empty()) fail(ErrorKind::Config, "K list is empty");
  if (!std::is_sorted(ks.begin(), ks.end()) || std::adjacent_find(ks.begin(), ks.end()) != ks.end())
    fail(ErrorKind::Config, "K list must be strictly ascending");
  if (ks.front() < 1) fail(ErrorKind::Config, "K values must be positive");
  if (ks.back() > static_cast<Eigen::Index>(ranked.size()))
    fail(ErrorKind::Config, "K=" + std::to_string(ks.back()) + " exceeds the retrieved pool of " +
                                std::to_string(ranked.size()));
  const int p = static_cast<int>(space.size());
  KlSweepResult r;
  r.ks = ks;
  r.kl.resize(p, static_cast<Eigen::Index>(ks.size()));
  const EmpiricalPosterior reference = ranked.top(static_cast<std::size_t>(ks.back()));
  for (int j = 0; j < p; ++j) {
    const auto spec = HistogramSpec::for_parameter(space, j, bins);
    r.edges.push_back(spec.edges());
    const Histogram p_ref = marginal_histogram(reference, j, spec);
    for (std::size_t c = 0; c < ks.size(); ++c) {
      const Histogram q = marginal_histogram(ranked.top(static_cast<std::size_t>(ks[c])), j, spec);
      r.kl(j, static_cast<Eigen::Index>(c)) = kl_divergence(p_ref, q);
    }
  }
  r.average = r.kl.colwise().mean().transpose();
  return r;
}

int count_modes(const Eigen::VectorXd& mass, double threshold) {
  const Eigen::Index n = mass.size();
  if (n == 0) return 0;
  const double top = mass.maxCoeff();
  if (!(top > 0.0)) return 0;
  // Zero padding lets a peak sit in an edge bin.
  Eigen::VectorXd h = Eigen::VectorXd::Zero(n + 2);
  h.segment(1, n) = mass;
  int modes = 0;
  for (Eigen::Index i = 1; i <= n; ++i) {
    if (!(h[i] > h[i - 1])) continue;
    Eigen::Index j = i;
    while (j + 1 <= n && h[j + 1] == h[i]) ++j;  // flat top
    if (!(h[j + 1] < h[i])) continue;
    // Lowest point on each side before reaching higher ground.
    double left_min = h[i], right_min = h[i];
    for (Eigen::Index k = i - 1; k >= 0 && h[k] <= h[i]; --k) left_min = std::min(left_min, h[k]);
    for (Eigen::Index k = j + 1; k < n + 2 && h[k] <= h[i]; ++k) right_min = std::min(right_min, h[k]);
    if (h[i] - std::max(left_min, right_min) >= threshold * top) ++modes;
    i = j;
  }
  return modes;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) fail(ErrorKind::Usage, "quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

PosteriorSummary posterior_summary(const EmpiricalPosterior& posterior, const ParamSpace& space, int bins) {
  if (posterior.samples.empty()) fail(ErrorKind::Usage, "summary of an empty posterior");
  PosteriorSummary out;
  for (int j = 0; j < space.size(); ++j) {
    std::vector<double> v;
    for (const auto& s : posterior.samples) v.push_back(s.params[j]);
    Eigen::Map<const Eigen::VectorXd> m(v.data(), static_cast<Eigen::Index>(v.size()));
    ParameterSummary ps;
    ps.name = space.names[static_cast<std::size_t>(j)];
    ps.mean = m.mean();
    ps.std = std::sqrt((m.array() - ps.mean).square().mean());
    ps.q05 = quantile(v, 0.05);
    ps.q25 = quantile(v, 0.25);
    ps.q50 = quantile(v, 0.50);
    ps.q75 = quantile(v, 0.75);
    ps.q95 = quantile(v, 0.95);
    ps.modes = count_modes(histogram(v, HistogramSpec::for_parameter(space, j, bins)).mass);
    out.modes = std::max(out.modes, ps.modes);
    out.params.push_back(std::move(ps));
  }
  return out;
}

namespace {

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.imbue(std::locale::classic());
  out.precision(12);
  return out;
}

}  // namespace

KlSweepResult run_diagnostics(const EmpiricalPosterior& initial, const EmpiricalPosterior* refined,
                              const ParamSpace& space, const DiagnosticsConfig& cfg,
                              const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::vector<std::pair<std::string, const EmpiricalPosterior*>> stages{{"initial", &initial}};
  if (refined) stages.emplace_back("refined", refined);

  {
    auto out = open_csv(out_dir / "marginals.csv");
    out << "parameter,bin_left,bin_right,mass,stage\n";
    for (const auto& [stage, post] : stages)
      for (int j = 0; j < space.size(); ++j) {
        const Histogram h = marginal_histogram(*post, j, HistogramSpec::for_parameter(space, j, cfg.bins));
        for (Eigen::Index b = 0; b < h.mass.size(); ++b)
          out << space.names[static_cast<std::size_t>(j)] << ',' << h.edges[b] << ',' << h.edges[b + 1] << ','
              << h.mass[b] << ',' << stage << '\n';
      }
  }

  const KlSweepResult sweep = kl_vs_k_sweep(refined ? *refined : initial, space, cfg.ks, cfg.bins);
  {
    auto out = open_csv(out_dir / "kl_sweep.csv");
    out << "K,param,kl,avg_kl\n";
    for (std::size_t c = 0; c < sweep.ks.size(); ++c)
      for (int j = 0; j < space.size(); ++j)
        out << sweep.ks[c] << ',' << space.names[static_cast<std::size_t>(j)] << ','
            << sweep.kl(j, static_cast<Eigen::Index>(c)) << ',' << sweep.average[static_cast<Eigen::Index>(c)] << '\n';
  }

  {
    auto out = open_csv(out_dir / "summary.csv");
    out << "stage,parameter,mean,std,q05,q25,q50,q75,q95,modes\n";
    for (const auto& [stage, post] : stages) {
      const PosteriorSummary s = posterior_summary(*post, space, cfg.bins);
      for (const auto& p : s.params)
        out << stage << ',' << p.name << ',' << p.mean << ',' << p.std << ',' << p.q05 << ',' << p.q25 << ','
            << p.q50 << ',' << p.q75 << ',' << p.q95 << ',' << p.modes << '\n';
    }
  }
  return sweep;
}

}  // namespace rrsbi
