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

// rrsbi command-line driver.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rrsbi/pipeline.hpp"

namespace {

using namespace rrsbi;

void print_warning(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

const std::vector<std::string> kModels{"photopeak", "toypulse"};

struct SimulateArgs {
  std::string model = "photopeak";
  std::int64_t n = 100000;
  std::uint64_t seed = 0;
  std::string noise = "off";
  std::string out;
  std::string observed_out;
  std::vector<double> truth;
};

struct TrainArgs {
  std::string bank, out, loss_csv, checkpoint;
  int base_filters = 16;
  int levels = 3;
  TrainConfig cfg;
  bool verbose = false;
};

struct EmbedArgs {
  std::string weights, bank, out;
  std::string level = "multi";
};

struct RetrieveArgs {
  std::string query, bank, emb, weights, out;
  RetrievalConfig cfg;
  std::string level = "multi";
};

struct RefineArgs {
  std::string posterior, observed, out, summary;
  std::string model = "photopeak";
  std::string mode = "exhaustive";
  double target = 0.0;
  RefinerConfig cfg;
};

struct DiagnoseArgs {
  std::string posterior, refined, out_dir;
  std::string model = "photopeak";
  std::vector<Eigen::Index> ks{250, 500, 1000, 2000, 4000};
  int bins = 50;
};

struct RunArgs {
  std::string config;
  bool force = false;
  bool verbose = false;
};

struct AblateArgs {
  std::string bank, weights, out;
  std::string model = "photopeak";
  AblationConfig cfg;
};

void do_simulate(const SimulateArgs& a) {
  const auto model = make_model(a.model);
  const SimulationBank bank = generate_bank(model->space(), default_prior(*model), a.n, *model, a.noise == "on", a.seed);
  write_bank(a.out, bank);
  std::cerr << "wrote " << bank.size() << " curves x " << bank.bins() << " bins to " << a.out << " (checksum "
            << hex64(fnv1a_file(a.out)) << ")\n";
  if (!a.observed_out.empty()) {
    ParamVector truth = model->name() == "photopeak" ? PhotopeakModel::reference_params()
                                                     : ParamVector{{120.0, 0.3, 0.05, 120.0, 0.7, 0.05, 30.0}};
    if (!a.truth.empty()) {
      if (static_cast<Eigen::Index>(a.truth.size()) != model->space().size())
        fail(ErrorKind::Config, "--truth needs " + std::to_string(model->space().size()) + " values");
      truth = Eigen::Map<const Eigen::VectorXd>(a.truth.data(), static_cast<Eigen::Index>(a.truth.size()));
    }
    write_observed(a.observed_out, poissonize(LightCurve{model->simulate(truth), false}, stream_key(a.seed, 0x4f4253)));
  }
}

void do_train(TrainArgs a) {
  const SimulationBank bank = read_bank(a.bank);
  const UNetConfig arch{a.base_filters, a.levels, static_cast<int>(bank.bins())};
  a.cfg.verbose = a.verbose;
  a.cfg.checkpoint_path = a.checkpoint.empty() ? a.out + ".ckpt" : a.checkpoint;
  const TrainResult result = train(bank, arch, a.cfg);
  if (!a.loss_csv.empty()) write_loss_history(a.loss_csv, result);
  if (result.diverged)
    fail(ErrorKind::Numerical, "training diverged: " + result.message + "; last good weights in " +
                                   a.cfg.checkpoint_path.string());
  save_weights(a.out, result.params);
  std::cerr << "final masked loss " << result.loss_history.back() << ", weights " << a.out << '\n';
}

void do_embed(const EmbedArgs& a) {
  const SimulationBank bank = read_bank(a.bank);
  const auto params = load_weights(a.weights);
  EmbedStats stats;
  const auto emb = build_embedding_bank(params, bank, parse_level(a.level), &stats);
  write_embedding_bank(a.out, emb);
  std::cerr << "embedded " << emb.size() << " rows (dim " << emb.dim() << ") in " << stats.seconds << " s\n";
  if (stats.degenerate_rows > 0) warn(std::to_string(stats.degenerate_rows) + " rows had zero-norm embeddings");
}

void do_retrieve(RetrieveArgs a) {
  const SimulationBank bank = read_bank(a.bank);
  const auto params = load_weights(a.weights);
  const auto emb = read_embedding_bank(a.emb);
  a.cfg.level = parse_level(a.level);
  const auto result = retrieve(read_observed(a.query), bank, emb, params, a.cfg);
  write_posterior_json(a.out, make_posterior(result, bank));
  std::cerr << "retrieved " << result.indices.size() << " of " << result.pool.size() << " candidates; best MdNSE "
            << result.mdnse.front() << '\n';
}

void do_refine(RefineArgs a) {
  const auto model = make_model(a.model);
  a.cfg.mode = parse_refine_mode(a.mode);
  const auto out = refine_ensemble(read_posterior_json(a.posterior), read_observed(a.observed), *model, a.cfg);
  write_posterior_json(a.out, out.posterior);
  if (!a.summary.empty()) write_refine_summary(a.summary, out.summary);
  std::cerr << "mean NLL " << out.mean_initial << " -> " << out.mean_refined;
  if (out.failed > 0) std::cerr << " (" << out.failed << " seeds failed)";
  std::cerr << '\n';
}

void do_diagnose(const DiagnoseArgs& a) {
  const auto model = make_model(a.model);
  const auto initial = read_posterior_json(a.posterior);
  std::optional<EmpiricalPosterior> refined;
  if (!a.refined.empty()) refined = read_posterior_json(a.refined);
  DiagnosticsConfig cfg;
  cfg.ks = a.ks;
  cfg.bins = a.bins;
  run_diagnostics(initial, refined ? &*refined : nullptr, model->space(), cfg, a.out_dir);
}

void do_run(const RunArgs& a) {
  const RunConfig cfg = RunConfig::load(a.config);
  const Manifest m = run_pipeline(cfg, {a.force, a.verbose});
  for (const auto& row : timing_table(m))
    std::cout << row.stage << ',' << row.phase << ',' << row.seconds << ',' << row.cache_hit << '\n';
}

void do_ablate(const AblateArgs& a) {
  const auto model = make_model(a.model);
  const SimulationBank bank = read_bank(a.bank);
  const auto params = load_weights(a.weights);
  const auto reps = run_ablation(*model, bank, params, a.cfg);
  write_ablation_csv(a.out, reps);
  std::cout << "ordered (multi-level <= bottleneck-only <= raw-cosine): " << ablation_ordered_count(reps) << "/"
            << reps.size() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  set_warning_handler(print_warning);
  CLI::App app{"Retrieval-and-refine simulation-based inference"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Cap on worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);

  SimulateArgs sim;
  auto* s = app.add_subcommand("simulate-bank", "Draw parameters from the prior and simulate a bank");
  s->add_option("--model", sim.model)->check(CLI::IsMember(kModels));
  s->add_option("--n", sim.n, "Number of simulations")->check(CLI::PositiveNumber);
  s->add_option("--seed", sim.seed);
  s->add_option("--noise", sim.noise, "Poisson noise on bank curves")->check(CLI::IsMember({"on", "off"}));
  s->add_option("--out", sim.out)->required();
  s->add_option("--observed-out", sim.observed_out, "Also write a Poissonized observation of --truth");
  s->add_option("--truth", sim.truth, "Parameters of the observation (default: reference point)")->delimiter(',');

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Masked pretraining of the U-Net encoder");
  t->add_option("--bank", tr.bank)->required()->check(CLI::ExistingFile);
  t->add_option("--epochs", tr.cfg.epochs)->check(CLI::PositiveNumber);
  t->add_option("--batch", tr.cfg.batch_size)->check(CLI::PositiveNumber);
  t->add_option("--lr", tr.cfg.lr)->check(CLI::PositiveNumber);
  t->add_option("--mask-ratio", tr.cfg.mask_ratio)->check(CLI::Range(0.0, 1.0));
  t->add_option("--weight-decay", tr.cfg.adamw.weight_decay)->check(CLI::NonNegativeNumber);
  t->add_option("--validation", tr.cfg.validation_fraction, "Held-out fraction")->check(CLI::Range(0.0, 0.5));
  t->add_option("--seed", tr.cfg.seed);
  t->add_option("--base-filters", tr.base_filters)->check(CLI::PositiveNumber);
  t->add_option("--levels", tr.levels)->check(CLI::PositiveNumber);
  t->add_option("--loss-csv", tr.loss_csv);
  t->add_option("--checkpoint", tr.checkpoint, "Per-epoch checkpoint (default OUT.ckpt)");
  t->add_option("--out", tr.out)->required();
  t->add_flag("--verbose", tr.verbose);

  EmbedArgs em;
  auto* e = app.add_subcommand("embed", "Embed every bank curve");
  e->add_option("--weights", em.weights)->required()->check(CLI::ExistingFile);
  e->add_option("--bank", em.bank)->required()->check(CLI::ExistingFile);
  e->add_option("--level", em.level)->check(CLI::IsMember({"single", "multi"}));
  e->add_option("--out", em.out)->required();

  RetrieveArgs re;
  auto* r = app.add_subcommand("retrieve", "Two-stage nearest-neighbour retrieval");
  r->add_option("--query", re.query)->required()->check(CLI::ExistingFile);
  r->add_option("--bank", re.bank)->required()->check(CLI::ExistingFile);
  r->add_option("--emb", re.emb)->required()->check(CLI::ExistingFile);
  r->add_option("--weights", re.weights)->required()->check(CLI::ExistingFile);
  r->add_option("--pool", re.cfg.candidate_pool)->check(CLI::PositiveNumber);
  r->add_option("--k", re.cfg.k)->check(CLI::PositiveNumber);
  r->add_option("--level", re.level)->check(CLI::IsMember({"single", "multi"}));
  r->add_option("--out", re.out)->required();

  RefineArgs rf;
  auto* f = app.add_subcommand("refine", "Hill-climbing refinement of a retrieved posterior");
  f->add_option("--posterior", rf.posterior)->required()->check(CLI::ExistingFile);
  f->add_option("--observed", rf.observed)->required()->check(CLI::ExistingFile);
  f->add_option("--model", rf.model)->check(CLI::IsMember(kModels));
  f->add_option("--p", rf.cfg.block_size, "Block size")->check(CLI::PositiveNumber);
  f->add_option("--mode", rf.mode)->check(CLI::IsMember({"exhaustive", "stochastic"}));
  f->add_option("--seed", rf.cfg.seed);
  f->add_option("--max-blocks", rf.cfg.max_blocks)->check(CLI::PositiveNumber);
  f->add_option("--max-evaluations", rf.cfg.max_evaluations)->check(CLI::NonNegativeNumber);
  f->add_option("--tolerance", rf.cfg.tolerance)->check(CLI::NonNegativeNumber);
  f->add_option("--patience", rf.cfg.patience)->check(CLI::NonNegativeNumber);
  auto* target = f->add_option("--target", rf.target, "Stop once the NLL reaches this value");
  f->add_option("--out", rf.out)->required();
  f->add_option("--summary", rf.summary);

  DiagnoseArgs dg;
  auto* d = app.add_subcommand("diagnose", "Marginals, KL-vs-K sweep and summaries");
  d->add_option("--posterior", dg.posterior)->required()->check(CLI::ExistingFile);
  d->add_option("--refined", dg.refined)->check(CLI::ExistingFile);
  d->add_option("--model", dg.model, "Supplies parameter names and histogram ranges")->check(CLI::IsMember(kModels));
  d->add_option("--k-sweep", dg.ks)->delimiter(',');
  d->add_option("--bins", dg.bins)->check(CLI::PositiveNumber);
  d->add_option("--out-dir", dg.out_dir)->required();

  RunArgs ru;
  auto* u = app.add_subcommand("run", "Full pipeline from a run config");
  u->add_option("--config", ru.config)->required()->check(CLI::ExistingFile);
  u->add_flag("--force", ru.force, "Ignore cached stage outputs");
  u->add_flag("--verbose", ru.verbose);

  AblateArgs ab;
  auto* a = app.add_subcommand("ablate", "Compare raw, bottleneck and multi-level retrieval spaces");
  a->add_option("--bank", ab.bank)->required()->check(CLI::ExistingFile);
  a->add_option("--weights", ab.weights)->required()->check(CLI::ExistingFile);
  a->add_option("--model", ab.model)->check(CLI::IsMember(kModels));
  a->add_option("--k", ab.cfg.k)->check(CLI::PositiveNumber);
  a->add_option("--repetitions", ab.cfg.repetitions)->check(CLI::PositiveNumber);
  a->add_option("--seed", ab.cfg.seed);
  a->add_option("--out", ab.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (threads > 0) set_max_threads(threads);
    if (*target) rf.cfg.target = rf.target;
    if (s->parsed()) do_simulate(sim);
    if (t->parsed()) do_train(tr);
    if (e->parsed()) do_embed(em);
    if (r->parsed()) do_retrieve(re);
    if (f->parsed()) do_refine(rf);
    if (d->parsed()) do_diagnose(dg);
    if (u->parsed()) do_run(ru);
    if (a->parsed()) do_ablate(ab);
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return exit_code(err.kind());
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  }
  return 0;
}
