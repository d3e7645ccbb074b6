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

#include "rrsbi/retrieval.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace rrsbi {

namespace {

constexpr Eigen::Index kScanPartition = Eigen::Index{1} << 14;

Eigen::VectorXd unnormalized_values(const LightCurve& c, const NormStats& norm) {
  return c.is_normalized ? c.unnormalized(norm).values : c.values;
}

double query_median(const Eigen::VectorXd& query) {
  const double med = median(query);
  if (!(med != 0.0) || !std::isfinite(med))
    fail(ErrorKind::InvalidInput, "MdNSE undefined: the query's median flux is zero");
  return med;
}

double mdnse_with_median(const Eigen::VectorXd& query, const Eigen::VectorXd& candidate, double med) {
  if (query.size() != candidate.size()) fail(ErrorKind::Shape, "MdNSE: curves differ in length");
  return (candidate - query).squaredNorm() / (med * med);
}

std::vector<double> mdnse_rows(const Eigen::VectorXd& query, const SimulationBank& bank,
                               const std::vector<Eigen::Index>& rows) {
  const double med = query_median(query);
  std::vector<double> out(rows.size());
  const auto n = static_cast<std::ptrdiff_t>(rows.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i)
    out[static_cast<std::size_t>(i)] =
        mdnse_with_median(query, bank.curves.col(rows[static_cast<std::size_t>(i)]).cast<double>(), med);
  return out;
}

}  // namespace

double dot_f64(const float* a, const float* b, Eigen::Index m) {
  double acc = 0.0;
#pragma omp simd reduction(+ : acc)
  for (Eigen::Index j = 0; j < m; ++j) acc += static_cast<double>(a[j]) * static_cast<double>(b[j]);
  return acc;
}

std::vector<Scored> cosine_topn(const Eigen::VectorXf& query, const Eigen::MatrixXf& vectors, Eigen::Index n) {
  const Eigen::Index rows = vectors.cols(), m = vectors.rows();
  if (query.size() != m) fail(ErrorKind::Shape, "cosine_topn: query and bank dimensions differ");
  if (n < 1 || n > rows)
    fail(ErrorKind::Config, "cosine_topn: n=" + std::to_string(n) + " must lie in [1, " + std::to_string(rows) + "]");

  // Fixed partitions, so the merged result never depends on the thread count.
  const Eigen::Index parts = (rows + kScanPartition - 1) / kScanPartition;
  std::vector<std::vector<Scored>> tops(static_cast<std::size_t>(parts));
  std::atomic<bool> non_finite{false};
#pragma omp parallel for schedule(dynamic)
  for (Eigen::Index p = 0; p < parts; ++p) {
    auto& heap = tops[static_cast<std::size_t>(p)];
    const Eigen::Index begin = p * kScanPartition, end = std::min(rows, begin + kScanPartition);
    heap.reserve(static_cast<std::size_t>(std::min(n, end - begin)));
    for (Eigen::Index i = begin; i < end; ++i) {
      const Scored c{i, dot_f64(query.data(), vectors.col(i).data(), m)};
      if (!std::isfinite(c.score)) {
        non_finite = true;
        continue;
      }
      if (static_cast<Eigen::Index>(heap.size()) < n) {
        heap.push_back(c);
        std::push_heap(heap.begin(), heap.end(), ranks_before);  // front = worst kept
      } else if (ranks_before(c, heap.front())) {
        std::pop_heap(heap.begin(), heap.end(), ranks_before);
        heap.back() = c;
        std::push_heap(heap.begin(), heap.end(), ranks_before);
      }
    }
  }
  if (non_finite) fail(ErrorKind::Numerical, "cosine_topn: non-finite similarity (corrupt embeddings?)");

  std::vector<Scored> merged;
  for (auto& t : tops) merged.insert(merged.end(), t.begin(), t.end());
  const auto keep = std::min<std::size_t>(static_cast<std::size_t>(n), merged.size());
  std::partial_sort(merged.begin(), merged.begin() + static_cast<std::ptrdiff_t>(keep), merged.end(), ranks_before);
  merged.resize(keep);
  return merged;
}

double median(Eigen::VectorXd values) {
  const auto n = static_cast<std::size_t>(values.size());
  if (n == 0) fail(ErrorKind::InvalidInput, "median of an empty curve");
  double* v = values.data();
  std::nth_element(v, v + n / 2, v + n);
  const double upper = v[n / 2];
  if (n % 2 == 1) return upper;
  return 0.5 * (*std::max_element(v, v + n / 2) + upper);
}

double mdnse(const LightCurve& query, const LightCurve& candidate, const NormStats& norm) {
  const Eigen::VectorXd q = unnormalized_values(query, norm);
  return mdnse_with_median(q, unnormalized_values(candidate, norm), query_median(q));
}

// ---------------------------------------------------------------------------

void RetrievalConfig::validate(Eigen::Index bank_size) const {
  if (k < 1) fail(ErrorKind::Config, "K must be at least 1");
  if (k > candidate_pool)
    fail(ErrorKind::Config, "K=" + std::to_string(k) + " exceeds the candidate pool " + std::to_string(candidate_pool));
  if (candidate_pool > bank_size)
    fail(ErrorKind::Config, "candidate pool " + std::to_string(candidate_pool) + " exceeds the bank size " +
                                std::to_string(bank_size));
}

Eigen::MatrixXd EmpiricalPosterior::param_matrix() const {
  if (samples.empty()) return {};
  Eigen::MatrixXd m(samples.front().params.size(), static_cast<Eigen::Index>(samples.size()));
  for (std::size_t i = 0; i < samples.size(); ++i) m.col(static_cast<Eigen::Index>(i)) = samples[i].params;
  return m;
}

double EmpiricalPosterior::mean_nll() const {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& s : samples)
    if (!s.failed && std::isfinite(s.nll)) sum += s.nll, ++n;
  return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

EmpiricalPosterior EmpiricalPosterior::top(std::size_t k) const {
  if (k > samples.size()) fail(ErrorKind::Config, "requested more samples than the posterior holds");
  EmpiricalPosterior out;
  out.stage = stage;
  out.samples.assign(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(k));
  return out;
}

RetrievalResult retrieve_unchecked(const LightCurve& query, const SimulationBank& bank, const EmbeddingBank& emb,
                                   const UNetParams<float>& params, const RetrievalConfig& cfg) {
  cfg.validate(bank.size());
  if (emb.level != cfg.level)
    fail(ErrorKind::StaleArtifact, "embedding bank level is " + std::string(level_name(emb.level)) +
                                       " but retrieval asked for " + std::string(level_name(cfg.level)));
  const Eigen::VectorXd q = unnormalized_values(query, bank.norm);
  if (q.size() != bank.bins())
    fail(ErrorKind::Shape, "query has " + std::to_string(q.size()) + " bins, bank curves have " +
                               std::to_string(bank.bins()));
  const Embedding qe = embed(params, LightCurve{q, false}.normalized(bank.norm), cfg.level);

  RetrievalResult r;
  r.pool = cosine_topn(qe, emb, cfg.candidate_pool);
  std::vector<Eigen::Index> rows;
  rows.reserve(r.pool.size());
  for (const auto& s : r.pool) rows.push_back(s.index);
  r.pool_mdnse = mdnse_rows(q, bank, rows);

  std::vector<std::size_t> order(r.pool.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (r.pool_mdnse[a] != r.pool_mdnse[b]) return r.pool_mdnse[a] < r.pool_mdnse[b];
    return r.pool[a].index < r.pool[b].index;
  });
  for (std::size_t i = 0; i < static_cast<std::size_t>(cfg.k); ++i) {
    r.indices.push_back(r.pool[order[i]].index);
    r.cosines.push_back(r.pool[order[i]].score);
    r.mdnse.push_back(r.pool_mdnse[order[i]]);
  }
  return r;
}

RetrievalResult retrieve(const LightCurve& query, const SimulationBank& bank, const EmbeddingBank& emb,
                         const UNetParams<float>& params, const RetrievalConfig& cfg) {
  verify_embedding_bank(emb, bank, params, cfg.level);
  return retrieve_unchecked(query, bank, emb, params, cfg);
}

EmpiricalPosterior make_posterior(const RetrievalResult& result, const SimulationBank& bank) {
  EmpiricalPosterior post;
  for (std::size_t i = 0; i < result.indices.size(); ++i) {
    PosteriorSample s;
    s.origin = result.indices[i];
    s.params = bank.params.col(s.origin);
    s.cosine = result.cosines[i];
    s.mdnse = result.mdnse[i];
    post.samples.push_back(std::move(s));
  }
  return post;
}

void write_posterior_json(const std::filesystem::path& path, const EmpiricalPosterior& posterior) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : posterior.samples) {
    nlohmann::json j;
    j["index"] = s.origin;
    j["params"] = std::vector<double>(s.params.data(), s.params.data() + s.params.size());
    j["cosine"] = s.cosine;
    j["mdnse"] = s.mdnse;
    if (std::isfinite(s.nll)) j["nll"] = s.nll;
    if (std::isfinite(s.nll_initial)) j["nll_initial"] = s.nll_initial;
    if (s.failed) j["failed"] = true;
    arr.push_back(std::move(j));
  }
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) fail(ErrorKind::Io, "cannot open " + tmp.string() + " for writing");
    out << arr.dump(1) << '\n';
    if (!out) fail(ErrorKind::Io, "failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

EmpiricalPosterior read_posterior_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  nlohmann::json arr;
  try {
    in >> arr;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Io, path.string() + ": " + e.what());
  }
  if (!arr.is_array()) fail(ErrorKind::Io, path.string() + ": expected a JSON array of samples");
  const double nan = std::numeric_limits<double>::quiet_NaN();
  auto number = [&](const nlohmann::json& j, const char* key) {
    return j.contains(key) && j[key].is_number() ? j[key].get<double>() : nan;
  };
  EmpiricalPosterior post;
  for (const auto& j : arr) {
    if (!j.contains("index") || !j.contains("params") || !j["params"].is_array())
      fail(ErrorKind::Io, path.string() + ": sample lacks index/params");
    PosteriorSample s;
    s.origin = j["index"].get<Eigen::Index>();
    const auto p = j["params"].get<std::vector<double>>();
    s.params = Eigen::Map<const Eigen::VectorXd>(p.data(), static_cast<Eigen::Index>(p.size()));
    s.cosine = number(j, "cosine");
    s.mdnse = number(j, "mdnse");
    s.nll = number(j, "nll");
    s.nll_initial = number(j, "nll_initial");
    s.failed = j.value("failed", false);
    post.samples.push_back(std::move(s));
  }
  if (!post.samples.empty() && std::isfinite(post.samples.front().nll_initial)) post.stage = "refined";
  return post;
}

// ---------------------------------------------------------------------------

Eigen::VectorXf zscore_unit(const Eigen::VectorXd& curve) {
  const double mean = curve.mean();
  const double sd = std::sqrt((curve.array() - mean).square().mean());
  if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) return Eigen::VectorXf::Zero(curve.size());
  const Eigen::VectorXd z = (curve.array() - mean) / sd;
  return (z / (z.norm() + kNormEpsilon)).cast<float>();
}

AblationSpaces build_ablation_spaces(const UNetParams<float>& params, const SimulationBank& bank) {
  AblationSpaces s;
  s.raw.resize(bank.bins(), bank.size());
#pragma omp parallel for schedule(static)
  for (Eigen::Index i = 0; i < bank.size(); ++i) s.raw.col(i) = zscore_unit(bank.curves.col(i).cast<double>());
  s.single = build_embedding_bank(params, bank, EmbeddingLevel::Single);
  s.multi = build_embedding_bank(params, bank, EmbeddingLevel::Multi);
  return s;
}

std::vector<AblationRow> ablation_compare(const LightCurve& query, const SimulationBank& bank,
                                          const UNetParams<float>& params, const AblationSpaces& spaces,
                                          Eigen::Index k) {
  const Eigen::VectorXd q = unnormalized_values(query, bank.norm);
  const LightCurve q_norm = LightCurve{q, false}.normalized(bank.norm);
  auto row = [&](const std::string& name, const std::vector<Scored>& top) {
    std::vector<Eigen::Index> rows;
    for (const auto& s : top) rows.push_back(s.index);
    const auto scores = mdnse_rows(q, bank, rows);
    Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(scores.data(), static_cast<Eigen::Index>(scores.size()));
    return AblationRow{name, k, v.mean(), median(v), top.front().index};
  };
  return {
      row("raw-cosine", cosine_topn(zscore_unit(q), spaces.raw, k)),
      row("bottleneck-only", cosine_topn(embed(params, q_norm, EmbeddingLevel::Single), spaces.single, k)),
      row("multi-level", cosine_topn(embed(params, q_norm, EmbeddingLevel::Multi), spaces.multi, k)),
  };
}

void write_ablation_csv(const std::filesystem::path& path,
                        const std::vector<std::vector<AblationRow>>& repetitions) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.precision(10);
  out << "repetition,space,k,mean_mdnse,median_mdnse,top_index\n";
  for (std::size_t r = 0; r < repetitions.size(); ++r)
    for (const auto& row : repetitions[r])
      out << r << ',' << row.space << ',' << row.k << ',' << row.mean_mdnse << ',' << row.median_mdnse << ','
          << row.top_index << '\n';
}

}  // namespace rrsbi
