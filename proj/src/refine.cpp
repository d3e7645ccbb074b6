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

#include "rrsbi/refine.hpp"

#include <boost/random/uniform_int_distribution.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace rrsbi {

double poisson_nll(const Eigen::VectorXd& expected, const Eigen::VectorXd& observed, const PoissonNllConfig& cfg) {
  if (expected.size() != observed.size() || expected.size() == 0)
    fail(ErrorKind::Shape, "poisson_nll: model output has " + std::to_string(expected.size()) +
                               " bins, observation has " + std::to_string(observed.size()));
  if (!(cfg.pseudocount > 0.0)) fail(ErrorKind::Config, "poisson_nll: pseudocount must be positive");
  double sum = 0.0;
  for (Eigen::Index t = 0; t < expected.size(); ++t) {
    const double f = expected[t], x = observed[t];
    if (f < 0.0) fail(ErrorKind::InvalidInput, "model contract violated: negative simulator output at bin " + std::to_string(t));
    if (x < 0.0) fail(ErrorKind::InvalidInput, "observed counts must be non-negative");
    sum += f - x * std::log(f + cfg.pseudocount);
  }
  return sum / static_cast<double>(expected.size());
}

double poisson_nll(const ParamVector& theta, const ForwardModel& model, const LightCurve& observed,
                   const PoissonNllConfig& cfg) {
  if (observed.is_normalized) fail(ErrorKind::Usage, "poisson_nll needs unnormalized observed counts");
  return poisson_nll(model.simulate(theta), observed.values, cfg);
}

SignSearchResult sign_search_step(const ParamVector& theta, std::span<const int> index_set,
                                  const Eigen::VectorXd& delta, const Objective& objective, const ParamSpace& space) {
  const int p = static_cast<int>(index_set.size());
  if (p < 1 || p > 20) fail(ErrorKind::Config, "sign search needs 1 <= P <= 20");
  for (int j : index_set) {
    if (j < 0 || j >= theta.size()) fail(ErrorKind::Config, "sign search index out of range");
    if (!(delta[j] > 0.0)) fail(ErrorKind::InvalidInput, "sign search step must be positive");
  }
  SignSearchResult best;
  best.value = std::numeric_limits<double>::infinity();
  bool any = false;
  for (std::uint32_t code = 0; code < (1u << p); ++code) {
    ParamVector cand = theta;
    for (int j = 0; j < p; ++j) {
      const int idx = index_set[static_cast<std::size_t>(j)];
      cand[idx] += ((code >> (p - 1 - j)) & 1u) ? delta[idx] : -delta[idx];
    }
    cand = space.clamp(cand);
    const double v = objective(cand);
    ++best.evaluations;
    if (std::isfinite(v) && (!any || v < best.value)) {
      any = true;
      best.value = v;
      best.theta = std::move(cand);
      best.sign_code = code;
    }
  }
  if (!any) fail(ErrorKind::Numerical, "objective is non-finite at all 2^P sign-search candidates");
  return best;
}

RefineMode parse_refine_mode(std::string_view name) {
  if (name == "exhaustive") return RefineMode::Exhaustive;
  if (name == "stochastic") return RefineMode::Stochastic;
  fail(ErrorKind::Config, "unknown refine mode \"" + std::string(name) + "\" (expected exhaustive or stochastic)");
}

void RefinerConfig::validate(int num_params) const {
  if (block_size < 1 || block_size > std::min(num_params, 20))
    fail(ErrorKind::Config, "block size P=" + std::to_string(block_size) + " must lie in [1, " +
                                std::to_string(std::min(num_params, 20)) + "]");
  if (!(grow > 1.0)) fail(ErrorKind::Config, "gamma_grow must exceed 1");
  if (!(shrink > 0.0 && shrink < 1.0)) fail(ErrorKind::Config, "gamma_shrink must lie in (0, 1)");
  if (!(anneal_shrink > 0.0 && anneal_shrink < 1.0)) fail(ErrorKind::Config, "annealing shrink must lie in (0, 1)");
  if (!(initial_step_fraction > 0.0) || !(min_step_fraction > 0.0))
    fail(ErrorKind::Config, "initial and minimum steps must be positive");
  if (!(tolerance >= 0.0)) fail(ErrorKind::Config, "improvement tolerance must be non-negative");
  if (patience < 0 || max_blocks < 0 || trials_per_block < 1 || max_evaluations < 0 || ramp_interval < 0)
    fail(ErrorKind::Config, "refiner counts must be non-negative");
  if (!(accept_low >= 0.0 && accept_low <= accept_high && accept_high <= 1.0))
    fail(ErrorKind::Config, "acceptance band must satisfy 0 <= low <= high <= 1");
}

Eigen::VectorXd adapt_step(const Eigen::VectorXd& delta, bool improved, const RefinerConfig& cfg) {
  return delta * (improved ? cfg.grow : cfg.shrink);
}

std::string_view stop_reason_name(StopReason reason) {
  switch (reason) {
    case StopReason::Plateau: return "plateau";
    case StopReason::Target: return "target";
    case StopReason::MaxBlocks: return "max-blocks";
    case StopReason::Budget: return "budget";
    case StopReason::Failed: return "failed";
  }
  return "unknown";
}

RefinementTrace refine_objective(const ParamVector& theta0, const Objective& objective, const ParamSpace& space,
                                 const RefinerConfig& cfg, std::uint64_t stream) {
  const int n_params = static_cast<int>(space.size());
  cfg.validate(n_params);
  if (theta0.size() != n_params) fail(ErrorKind::Shape, "seed has the wrong number of parameters");

  const Eigen::VectorXd range = space.range();
  Eigen::VectorXd delta = cfg.initial_step_fraction * range;
  const Eigen::VectorXd delta_min = cfg.min_step_fraction * range;
  Engine rng = make_engine(cfg.seed, 0x52454649, stream);

  RefinementTrace trace;
  ParamVector cur = space.clamp(theta0);
  auto evaluate = [&](const ParamVector& theta) {
    ++trace.evaluations;
    return objective(theta);
  };

  try {
    trace.initial_nll = evaluate(cur);
    if (!std::isfinite(trace.initial_nll)) fail(ErrorKind::Numerical, "objective is non-finite at the seed");
    double cur_nll = trace.initial_nll;
    int stall = 0;
    std::vector<int> all(static_cast<std::size_t>(n_params));
    std::iota(all.begin(), all.end(), 0);

    for (int b = 0;; ++b) {
      trace.best = cur;
      trace.best_nll = cur_nll;
      if (cfg.target && cur_nll <= *cfg.target) {
        trace.stop = StopReason::Target;
        break;
      }
      if ((delta.array() < delta_min.array()).all()) {
        trace.stop = StopReason::Plateau;
        break;
      }
      if (b >= cfg.max_blocks) {
        trace.stop = StopReason::MaxBlocks;
        break;
      }
      const int p = cfg.ramp_interval > 0 ? std::min(cfg.block_size, 1 + b / cfg.ramp_interval) : cfg.block_size;
      const std::int64_t cost =
          cfg.mode == RefineMode::Exhaustive ? (std::int64_t{1} << p) : std::int64_t{cfg.trials_per_block};
      if (cfg.max_evaluations > 0 && trace.evaluations + cost > cfg.max_evaluations) {
        trace.stop = StopReason::Budget;
        break;
      }

      // Random index set of size p, kept in ascending order.
      for (int i = 0; i < p; ++i) {
        boost::random::uniform_int_distribution<int> pick(i, n_params - 1);
        std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(pick(rng))]);
      }
      std::vector<int> index_set(all.begin(), all.begin() + p);
      std::sort(index_set.begin(), index_set.end());

      const double before = cur_nll;
      bool accepted = false;
      if (cfg.mode == RefineMode::Exhaustive) {
        auto r = sign_search_step(cur, index_set, delta, evaluate, space);
        if (r.value < cur_nll) {
          cur = std::move(r.theta);
          cur_nll = r.value;
          accepted = true;
        }
        const bool improved = r.value < before - cfg.tolerance;
        for (int j : index_set) delta[j] = adapt_step(delta.segment(j, 1), improved, cfg)[0];
      } else {
        int n_accepted = 0;
        for (int trial = 0; trial < cfg.trials_per_block; ++trial) {
          ParamVector prop = cur;
          for (int j : index_set) {
            boost::random::uniform_int_distribution<int> coin(0, 1);
            prop[j] += coin(rng) ? delta[j] : -delta[j];
          }
          prop = space.clamp(prop);
          const double v = evaluate(prop);
          if (std::isfinite(v) && v < cur_nll) {
            cur = std::move(prop);
            cur_nll = v;
            ++n_accepted;
          }
        }
        accepted = n_accepted > 0;
        const double rate = static_cast<double>(n_accepted) / cfg.trials_per_block;
        const double factor = rate < cfg.accept_low ? cfg.anneal_shrink : rate > cfg.accept_high ? cfg.grow : 1.0;
        for (int j : index_set) delta[j] *= factor;
      }
      delta = delta.cwiseMin(range);

      stall = (before - cur_nll < cfg.tolerance) ? stall + 1 : 0;
      trace.entries.push_back({b, accepted, cur_nll, delta, cur});
      trace.blocks = b + 1;
      if (cfg.patience > 0 && stall >= cfg.patience) {
        trace.best = cur;
        trace.best_nll = cur_nll;
        trace.stop = StopReason::Plateau;
        break;
      }
    }
  } catch (const Error& e) {
    if (trace.best.size() == 0) {
      trace.best = cur;
      trace.best_nll = std::numeric_limits<double>::quiet_NaN();
    }
    trace.stop = StopReason::Failed;
    trace.diagnostic = e.what();
  }
  return trace;
}

RefinementTrace refine_seed(const ParamVector& theta0, const LightCurve& observed, const ForwardModel& model,
                            const RefinerConfig& cfg, std::uint64_t stream) {
  if (observed.is_normalized) fail(ErrorKind::Usage, "refinement needs unnormalized observed counts");
  if (observed.size() != model.bins())
    fail(ErrorKind::Shape, "observed curve has " + std::to_string(observed.size()) + " bins, model produces " +
                               std::to_string(model.bins()));
  const Objective objective = [&](const ParamVector& theta) { return poisson_nll(theta, model, observed, cfg.nll); };
  return refine_objective(theta0, objective, model.space(), cfg, stream);
}

RefineOutput refine_ensemble(const EmpiricalPosterior& posterior, const LightCurve& observed,
                             const ForwardModel& model, const RefinerConfig& cfg) {
  if (posterior.samples.empty()) fail(ErrorKind::Usage, "cannot refine an empty posterior");
  cfg.validate(static_cast<int>(model.space().size()));
  RefineOutput out;
  out.posterior = posterior;
  out.posterior.stage = "refined-" + std::to_string(cfg.block_size);
  const auto n = static_cast<std::ptrdiff_t>(posterior.samples.size());
  out.traces.resize(posterior.samples.size());
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    try {
      const auto& seed = posterior.samples[static_cast<std::size_t>(i)];
      out.traces[static_cast<std::size_t>(i)] =
          refine_seed(seed.params, observed, model, cfg, static_cast<std::uint64_t>(seed.origin));
    } catch (...) {
#pragma omp critical
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);

  double sum_initial = 0.0, sum_refined = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < out.traces.size(); ++i) {
    auto& s = out.posterior.samples[i];
    const auto& t = out.traces[i];
    s.nll_initial = t.initial_nll;
    if (t.stop == StopReason::Failed) {
      s.failed = true;
      s.nll = t.initial_nll;
      ++out.failed;
      warn("seed " + std::to_string(s.origin) + " excluded: " + t.diagnostic);
      continue;
    }
    s.params = t.best;
    s.nll = t.best_nll;
    sum_initial += t.initial_nll;
    sum_refined += t.best_nll;
    ++counted;
  }
  if (counted == 0) fail(ErrorKind::Numerical, "refinement failed for every seed");
  out.mean_initial = sum_initial / static_cast<double>(counted);
  out.mean_refined = sum_refined / static_cast<double>(counted);
  if (out.failed * 10 > out.traces.size())
    warn(std::to_string(out.failed) + " of " + std::to_string(out.traces.size()) + " seeds failed refinement");
  out.summary = {{"initial", 0, out.mean_initial, 0.0},
                 {"refined", cfg.block_size, out.mean_refined, out.mean_refined - out.mean_initial}};
  return out;
}

void write_refine_summary(const std::filesystem::path& path, const std::vector<SummaryRow>& rows) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.precision(12);
  out << "stage,P,mean_nll,delta_from_initial\n";
  for (const auto& r : rows)
    out << r.stage << ',' << r.block_size << ',' << r.mean_nll << ',' << r.delta_from_initial << '\n';
}

}  // namespace rrsbi
