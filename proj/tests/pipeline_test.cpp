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

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>

#include "rrsbi/pipeline.hpp"

using namespace rrsbi;
namespace fs = std::filesystem;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an rrsbi::Error";
  return ErrorKind::Io;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

RunConfig parse_text(const std::string& text) {
  std::istringstream in(text);
  return RunConfig::parse(in, "/base");
}

const char* kTinyConfig = R"(
[run]
model = photopeak
seed = 11

[simulate]
n = 600

[train]
base_filters = 4
epochs = 2
batch = 32
lr = 1e-3

[retrieve]
pool = 200
k = 40

[refine]
p = 2
max_blocks = 8

[diagnose]
bins = 20
)";

RunConfig tiny(const fs::path& dir) {
  RunConfig cfg = parse_text(kTinyConfig);
  cfg.work_dir = dir;
  return cfg;
}

int warnings = 0;
void count_warning(const std::string&) { ++warnings; }

}  // namespace

TEST(RunConfig, ParsesSections) {
  const RunConfig cfg = parse_text(
      "[run]\nmodel = toypulse\nseed = 7\nwork_dir = out\n"
      "[paths]\nbank = /data/b.sbnk\n"
      "[simulate]\nn = 5000\nnoise = on\n"
      "[observation]\ntruth = 100, 0.3, 0.05, 100, 0.7, 0.05, 20\n"
      "[train]\nbase_filters = 8\nlevels = 2\nepochs = 3\nlr = 2e-4\nmask_ratio = 0.5\n"
      "[retrieve]\npool = 1000\nk = 100\nlevel = single\n"
      "[refine]\np = 4\nmode = stochastic\ntarget = 12.5\n"
      "[diagnose]\nk_sweep = 10, 50, 100\nbins = 30\n");
  EXPECT_EQ(cfg.model, "toypulse");
  EXPECT_EQ(cfg.seed, 7u);
  EXPECT_EQ(cfg.work_dir, fs::path("/base/out"));
  EXPECT_EQ(cfg.bank_file(), fs::path("/data/b.sbnk"));
  EXPECT_EQ(cfg.weights_file(), fs::path("/base/out/weights.unwt"));
  EXPECT_EQ(cfg.bank_size, 5000);
  EXPECT_TRUE(cfg.bank_noise);
  ASSERT_TRUE(cfg.truth.has_value());
  EXPECT_EQ(cfg.truth->size(), 7);
  EXPECT_DOUBLE_EQ((*cfg.truth)[6], 20.0);
  EXPECT_EQ(cfg.arch.base_filters, 8);
  EXPECT_EQ(cfg.arch.levels, 2);
  EXPECT_DOUBLE_EQ(cfg.train.lr, 2e-4);
  EXPECT_EQ(cfg.retrieval.level, EmbeddingLevel::Single);
  EXPECT_EQ(cfg.refine.block_size, 4);
  EXPECT_EQ(cfg.refine.mode, RefineMode::Stochastic);
  EXPECT_DOUBLE_EQ(*cfg.refine.target, 12.5);
  EXPECT_EQ(cfg.diagnostics.ks, (std::vector<Eigen::Index>{10, 50, 100}));
  EXPECT_EQ(cfg.diagnostics.bins, 30);
  EXPECT_NO_THROW(cfg.validate());
}

TEST(RunConfig, DefaultSweepIsHalvingsOfK) {
  const RunConfig cfg = parse_text("[retrieve]\nk = 1000\npool = 5000\n");
  EXPECT_EQ(cfg.diagnostics.ks, (std::vector<Eigen::Index>{62, 125, 250, 500, 1000}));
  const RunConfig small = parse_text("[retrieve]\nk = 3\n");
  EXPECT_EQ(small.diagnostics.ks, (std::vector<Eigen::Index>{1, 3}));
}

TEST(RunConfig, RejectsUnknownAndMalformed) {
  EXPECT_EQ(kind_of([] { parse_text("[train]\nepoch = 3\n"); }), ErrorKind::Config);
  EXPECT_EQ(kind_of([] { parse_text("[bogus]\nx = 1\n"); }), ErrorKind::Config);
  EXPECT_EQ(kind_of([] { parse_text("seed = 1\n"); }), ErrorKind::Config);
  EXPECT_EQ(kind_of([] { parse_text("[train]\nepochs = three\n"); }), ErrorKind::Config);
  EXPECT_EQ(kind_of([] { parse_text("[simulate]\nnoise = maybe\n"); }), ErrorKind::Config);
  EXPECT_EQ(kind_of([] { parse_text("[run]\nseed = 1\n[run\n"); }), ErrorKind::Config);
  try {
    parse_text("[refine]\nblock = 3\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("[refine] block"), std::string::npos);
  }
}

TEST(RunConfig, ValidateCrossChecks) {
  RunConfig cfg = parse_text("[simulate]\nn = 100\n[retrieve]\npool = 50\nk = 60\n");
  EXPECT_EQ(kind_of([&] { cfg.validate(); }), ErrorKind::Config);
  cfg = parse_text("[simulate]\nn = 100\n[retrieve]\npool = 50\nk = 10\n[observation]\ntruth = 1, 2\n");
  EXPECT_EQ(kind_of([&] { cfg.validate(); }), ErrorKind::Config);
  cfg = parse_text("[run]\nmodel = nope\n");
  EXPECT_EQ(kind_of([&] { cfg.validate(); }), ErrorKind::Config);
  cfg = parse_text("[simulate]\nn = 100\n[retrieve]\npool = 50\nk = 10\n[diagnose]\nk_sweep = 5, 20\n");
  EXPECT_EQ(kind_of([&] { cfg.validate(); }), ErrorKind::Config);
  cfg = parse_text("[simulate]\nn = 100\n[retrieve]\npool = 50\nk = 10\n[refine]\np = 9\n");
  EXPECT_EQ(kind_of([&] { cfg.validate(); }), ErrorKind::Config);
}

TEST(RunConfig, StageSeedsAndSettings) {
  const RunConfig cfg = parse_text("[run]\nseed = 3\n");
  std::set<std::uint64_t> seeds;
  for (auto s : kStages) seeds.insert(cfg.stage_seed(s));
  EXPECT_EQ(seeds.size(), std::size(kStages));
  EXPECT_EQ(kind_of([&] { cfg.stage_seed("bogus"); }), ErrorKind::Usage);

  RunConfig other = cfg;
  other.refine.block_size = 2;
  EXPECT_NE(cfg.stage_settings("refine"), other.stage_settings("refine"));
  EXPECT_EQ(cfg.stage_settings("train"), other.stage_settings("train"));
  other = cfg;
  other.train.lr = 1.0000000000000002e-5;
  EXPECT_NE(cfg.stage_settings("train"), other.stage_settings("train"));
}

TEST(Manifest, RoundTrip) {
  Manifest m;
  StageRecord r;
  r.stage = "train";
  r.inputs["a/bank.sbnk"] = 0xfedcba9876543210ull;
  r.outputs["a/weights.unwt"] = 1;
  r.key = ~0ull;
  r.seed = 1ull << 63;
  r.seconds = 1.25;
  r.cache_hit = true;
  m.records = {r, r};
  m.records[1].stage = "embed";
  std::stringstream s;
  m.write(s);
  const Manifest back = Manifest::read(s);
  ASSERT_EQ(back.records.size(), 2u);
  EXPECT_EQ(back.records[0].inputs, r.inputs);
  EXPECT_EQ(back.records[0].outputs, r.outputs);
  EXPECT_EQ(back.records[0].key, r.key);
  EXPECT_EQ(back.records[0].seed, r.seed);
  EXPECT_DOUBLE_EQ(back.records[0].seconds, 1.25);
  EXPECT_TRUE(back.records[0].cache_hit);
  EXPECT_EQ(back.latest("embed"), &back.records[1]);
  EXPECT_EQ(back.producer_of("a/weights.unwt"), &back.records[1]);
  EXPECT_EQ(back.latest("refine"), nullptr);

  std::istringstream bad("{\"records\": [{\"stage\": 3}]}");
  EXPECT_EQ(kind_of([&] { Manifest::read(bad); }), ErrorKind::Io);
  EXPECT_TRUE(Manifest::load("/nonexistent/manifest.json").records.empty());
}

TEST(Timing, RowsTotalsAndCacheTags) {
  Manifest m;
  double t = 1.0;
  for (auto s : kStages) {
    StageRecord r;
    r.stage = s;
    r.key = 42;
    r.seconds = t;
    t *= 2.0;
    m.records.push_back(r);
  }
  StageRecord hit;
  hit.stage = "train";
  hit.key = 42;
  hit.cache_hit = true;
  m.records.push_back(hit);

  const auto rows = timing_table(m);
  ASSERT_EQ(rows.size(), std::size(kStages) + 3);
  EXPECT_EQ(rows[1].stage, "train");
  EXPECT_TRUE(rows[1].cache_hit);
  EXPECT_DOUBLE_EQ(rows[1].seconds, 2.0);
  EXPECT_EQ(rows[3].phase, "online");
  EXPECT_EQ(rows[5].phase, "analysis");
  EXPECT_DOUBLE_EQ(rows[6].seconds, 1.0 + 2.0 + 4.0);
  EXPECT_DOUBLE_EQ(rows[7].seconds, 8.0 + 16.0);
  EXPECT_DOUBLE_EQ(rows[8].seconds, 63.0);

  warnings = 0;
  set_warning_handler(count_warning);
  Manifest partial;
  partial.records.assign(m.records.begin(), m.records.begin() + 2);
  const auto p = timing_table(partial);
  set_warning_handler(nullptr);
  EXPECT_EQ(warnings, 1);
  EXPECT_EQ(p.size(), 5u);
}

TEST(Ablation, OrderedCount) {
  auto rep = [](double multi, double single, double raw) {
    return std::vector<AblationRow>{{"raw-cosine", 5, raw, raw, 0},
                                    {"bottleneck-only", 5, single, single, 0},
                                    {"multi-level", 5, multi, multi, 0}};
  };
  EXPECT_EQ(ablation_ordered_count({rep(0.1, 0.2, 0.3), rep(0.1, 0.1, 0.1), rep(0.3, 0.2, 0.1)}), 2);
  EXPECT_EQ(kind_of([] { ablation_ordered_count({{{"raw-cosine", 5, 1, 1, 0}}}); }), ErrorKind::Usage);
}

class PipelineRun : public ::testing::Test {
 protected:
  static fs::path root;
  static void SetUpTestSuite() {
    root = fs::temp_directory_path() / "rrsbi_pipeline_test";
    fs::remove_all(root);
    run_pipeline(tiny(root / "a"));
  }
  static void TearDownTestSuite() { fs::remove_all(root); }
};
fs::path PipelineRun::root;

TEST_F(PipelineRun, ProducesEveryArtifact) {
  const RunConfig cfg = tiny(root / "a");
  for (const auto& p : {cfg.bank_file(), cfg.weights_file(), cfg.loss_file(), cfg.embedding_file(),
                        cfg.observed_file(), cfg.posterior_file(), cfg.refined_file(), cfg.refine_summary_file(),
                        cfg.diagnostics_dir() / "kl_sweep.csv", cfg.manifest_file(), cfg.timing_file()})
    EXPECT_TRUE(fs::exists(p)) << p;
  const Manifest m = Manifest::load(cfg.manifest_file());
  ASSERT_EQ(m.records.size(), std::size(kStages));
  for (const auto& r : m.records) EXPECT_FALSE(r.cache_hit) << r.stage;
  EXPECT_EQ(read_posterior_json(cfg.posterior_file()).size(), 40u);
  EXPECT_EQ(read_posterior_json(cfg.refined_file()).stage, "refined");
  const std::string timing = slurp(cfg.timing_file());
  EXPECT_EQ(timing.rfind("stage,phase,seconds,cache_hit\n", 0), 0u);
  EXPECT_NE(timing.find("online,total,"), std::string::npos);
}

TEST_F(PipelineRun, RerunIsAllCacheHits) {
  const RunConfig cfg = tiny(root / "a");
  const std::string before = slurp(cfg.refined_file());
  const Manifest m = run_pipeline(cfg);
  ASSERT_EQ(m.records.size(), 2 * std::size(kStages));
  for (std::size_t i = std::size(kStages); i < m.records.size(); ++i) EXPECT_TRUE(m.records[i].cache_hit);
  EXPECT_EQ(slurp(cfg.refined_file()), before);
  for (const auto& row : timing_table(m))
    if (row.phase != "total") EXPECT_TRUE(row.cache_hit);
}

TEST_F(PipelineRun, ChangedSettingRerunsDownstreamOnly) {
  fs::copy(root / "a", root / "b", fs::copy_options::recursive);
  // Record paths are work-dir specific, so a copied directory starts over.
  fs::remove(root / "b" / "manifest.json");
  RunConfig cfg = tiny(root / "b");
  run_pipeline(cfg);
  cfg.refine.block_size = 1;
  const Manifest m = run_pipeline(cfg);
  const std::size_t n = std::size(kStages);
  ASSERT_EQ(m.records.size(), 2 * n);
  for (std::size_t i = n; i < 2 * n; ++i) {
    const bool rerun = m.records[i].stage == "refine" || m.records[i].stage == "diagnose";
    EXPECT_EQ(m.records[i].cache_hit, !rerun) << m.records[i].stage;
  }
  fs::remove_all(root / "b");
}

TEST_F(PipelineRun, SameSeedSameBytes) {
  run_pipeline(tiny(root / "c"));
  const RunConfig a = tiny(root / "a"), c = tiny(root / "c");
  EXPECT_EQ(slurp(a.bank_file()), slurp(c.bank_file()));
  EXPECT_EQ(slurp(a.weights_file()), slurp(c.weights_file()));
  EXPECT_EQ(slurp(a.posterior_file()), slurp(c.posterior_file()));
  EXPECT_EQ(slurp(a.refined_file()), slurp(c.refined_file()));
  EXPECT_EQ(slurp(a.diagnostics_dir() / "summary.csv"), slurp(c.diagnostics_dir() / "summary.csv"));
}

TEST_F(PipelineRun, TamperedBankIsStale) {
  run_pipeline(tiny(root / "d"));
  const RunConfig cfg = tiny(root / "d");
  {
    std::fstream f(cfg.bank_file(), std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-3, std::ios::end);
    f.put('\x7f');
  }
  try {
    run_pipeline(cfg);
    FAIL() << "expected StaleArtifact";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::StaleArtifact);
    EXPECT_NE(std::string(e.what()).find("bank.sbnk"), std::string::npos);
    EXPECT_EQ(exit_code(e.kind()), 3);
  }
  const Manifest m = run_pipeline(cfg, {.force = true});
  EXPECT_FALSE(m.records.back().cache_hit);
}
