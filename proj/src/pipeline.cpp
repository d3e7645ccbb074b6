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

#include "rrsbi/pipeline.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <functional>
#include <iostream>
#include <locale>
#include <sstream>

#include "json.hpp"

namespace rrsbi {

namespace {

// ---------------------------------------------------------------------------
// Value parsing
// ---------------------------------------------------------------------------

std::string where(const std::string& section, const std::string& key) { return "[" + section + "] " + key; }

template <typename T>
T parse_number(const std::string& text, const std::string& ctx) {
  std::istringstream in(text);
  in.imbue(std::locale::classic());
  T v{};
  in >> v;
  if (!in || !(in >> std::ws).eof()) fail(ErrorKind::Config, ctx + ": cannot parse \"" + text + "\"");
  return v;
}

bool parse_bool(const std::string& text, const std::string& ctx) {
  if (text == "on" || text == "true" || text == "yes" || text == "1") return true;
  if (text == "off" || text == "false" || text == "no" || text == "0") return false;
  fail(ErrorKind::Config, ctx + ": expected on/off, got \"" + text + "\"");
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const std::string& ctx) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    out.push_back(parse_number<T>(item, ctx));
  }
  if (out.empty()) fail(ErrorKind::Config, ctx + ": empty list");
  return out;
}

std::string canonical(double v) {
  std::ostringstream out;
  out.imbue(std::locale::classic());
  out.precision(17);
  out << v;
  return out.str();
}

ParamVector default_truth(const ForwardModel& model) {
  if (model.name() == "photopeak") return PhotopeakModel::reference_params();
  // Two separated equal peaks: the swap degeneracy gives a bimodal posterior.
  return ParamVector{{120.0, 0.3, 0.05, 120.0, 0.7, 0.05, 30.0}};
}

std::uint64_t stage_index(std::string_view stage) {
  for (std::size_t i = 0; i < std::size(kStages); ++i)
    if (kStages[i] == stage) return i + 1;
  fail(ErrorKind::Usage, "unknown pipeline stage \"" + std::string(stage) + "\"");
}

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig
// ---------------------------------------------------------------------------

RunConfig RunConfig::parse(std::istream& in, const std::filesystem::path& base_dir) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    fail(ErrorKind::Config, std::string("run config: ") + e.what());
  }

  RunConfig cfg;
  auto path = [&](const std::string& v) {
    std::filesystem::path p(v);
    return p.is_absolute() ? p : base_dir / p;
  };
  using Setter = std::function<void(const std::string&, const std::string&)>;
  const std::map<std::string, std::map<std::string, Setter>> table{
      {"run",
       {{"model", [&](auto& v, auto&) { cfg.model = v; }},
        {"seed", [&](auto& v, auto& c) { cfg.seed = parse_number<std::uint64_t>(v, c); }},
        {"work_dir", [&](auto& v, auto&) { cfg.work_dir = path(v); }}}},
      {"paths",
       {{"bank", [&](auto& v, auto&) { cfg.bank_path = path(v); }},
        {"weights", [&](auto& v, auto&) { cfg.weights_path = path(v); }},
        {"embeddings", [&](auto& v, auto&) { cfg.embedding_path = path(v); }},
        {"observed", [&](auto& v, auto&) { cfg.observed_path = path(v); }}}},
      {"simulate",
       {{"n", [&](auto& v, auto& c) { cfg.bank_size = parse_number<std::int64_t>(v, c); }},
        {"noise", [&](auto& v, auto& c) { cfg.bank_noise = parse_bool(v, c); }}}},
      {"observation",
       {{"truth", [&](auto& v, auto& c) {
          const auto t = parse_list<double>(v, c);
          cfg.truth = Eigen::Map<const Eigen::VectorXd>(t.data(), static_cast<Eigen::Index>(t.size()));
        }}}},
      {"train",
       {{"base_filters", [&](auto& v, auto& c) { cfg.arch.base_filters = parse_number<int>(v, c); }},
        {"levels", [&](auto& v, auto& c) { cfg.arch.levels = parse_number<int>(v, c); }},
        {"epochs", [&](auto& v, auto& c) { cfg.train.epochs = parse_number<int>(v, c); }},
        {"batch", [&](auto& v, auto& c) { cfg.train.batch_size = parse_number<int>(v, c); }},
        {"lr", [&](auto& v, auto& c) { cfg.train.lr = parse_number<double>(v, c); }},
        {"mask_ratio", [&](auto& v, auto& c) { cfg.train.mask_ratio = parse_number<double>(v, c); }},
        {"validation_fraction",
         [&](auto& v, auto& c) { cfg.train.validation_fraction = parse_number<double>(v, c); }},
        {"weight_decay", [&](auto& v, auto& c) { cfg.train.adamw.weight_decay = parse_number<double>(v, c); }}}},
      {"retrieve",
       {{"pool", [&](auto& v, auto& c) { cfg.retrieval.candidate_pool = parse_number<Eigen::Index>(v, c); }},
        {"k", [&](auto& v, auto& c) { cfg.retrieval.k = parse_number<Eigen::Index>(v, c); }},
        {"level", [&](auto& v, auto&) { cfg.retrieval.level = parse_level(v); }}}},
      {"refine",
       {{"p", [&](auto& v, auto& c) { cfg.refine.block_size = parse_number<int>(v, c); }},
        {"mode", [&](auto& v, auto&) { cfg.refine.mode = parse_refine_mode(v); }},
        {"initial_step", [&](auto& v, auto& c) { cfg.refine.initial_step_fraction = parse_number<double>(v, c); }},
        {"min_step", [&](auto& v, auto& c) { cfg.refine.min_step_fraction = parse_number<double>(v, c); }},
        {"grow", [&](auto& v, auto& c) { cfg.refine.grow = parse_number<double>(v, c); }},
        {"shrink", [&](auto& v, auto& c) { cfg.refine.shrink = parse_number<double>(v, c); }},
        {"tolerance", [&](auto& v, auto& c) { cfg.refine.tolerance = parse_number<double>(v, c); }},
        {"patience", [&](auto& v, auto& c) { cfg.refine.patience = parse_number<int>(v, c); }},
        {"target", [&](auto& v, auto& c) { cfg.refine.target = parse_number<double>(v, c); }},
        {"max_blocks", [&](auto& v, auto& c) { cfg.refine.max_blocks = parse_number<int>(v, c); }},
        {"max_evaluations",
         [&](auto& v, auto& c) { cfg.refine.max_evaluations = parse_number<std::int64_t>(v, c); }},
        {"trials", [&](auto& v, auto& c) { cfg.refine.trials_per_block = parse_number<int>(v, c); }},
        {"ramp_interval", [&](auto& v, auto& c) { cfg.refine.ramp_interval = parse_number<int>(v, c); }}}},
      {"diagnose",
       {{"k_sweep",
         [&](auto& v, auto& c) {
           cfg.diagnostics.ks = parse_list<Eigen::Index>(v, c);
           cfg.diagnostics_ks_set = true;
         }},
        {"bins", [&](auto& v, auto& c) { cfg.diagnostics.bins = parse_number<int>(v, c); }}}},
  };

  for (const auto& [section, keys] : tree) {
    if (keys.empty() && !keys.data().empty())
      fail(ErrorKind::Config, "run config: key \"" + section + "\" must sit inside a [section]");
    const auto s = table.find(section);
    if (s == table.end()) fail(ErrorKind::Config, "run config: unknown section [" + section + "]");
    for (const auto& [key, value] : keys) {
      const auto k = s->second.find(key);
      if (k == s->second.end()) fail(ErrorKind::Config, "run config: unknown key " + where(section, key));
      k->second(value.data(), where(section, key));
    }
  }
  if (!cfg.diagnostics_ks_set) {
    // Halvings of K, smallest first.
    cfg.diagnostics.ks.clear();
    for (Eigen::Index k = cfg.retrieval.k, i = 0; i < 5 && k >= 1; ++i, k /= 2) cfg.diagnostics.ks.insert(cfg.diagnostics.ks.begin(), k);
  }
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Config, "cannot open run config " + path.string());
  return parse(in, path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
}

void RunConfig::validate() const {
  const auto m = make_model(model);
  if (bank_size < 1) fail(ErrorKind::Config, "[simulate] n must be positive");
  UNetConfig a = arch;
  a.input_length = m->bins();
  a.validate();
  retrieval.validate(bank_size);
  refine.validate(static_cast<int>(m->space().size()));
  if (train.epochs < 1 || train.batch_size < 1) fail(ErrorKind::Config, "[train] epochs and batch must be positive");
  if (!(train.lr > 0.0)) fail(ErrorKind::Config, "[train] lr must be positive");
  if (!(train.mask_ratio > 0.0 && train.mask_ratio < 1.0)) fail(ErrorKind::Config, "[train] mask_ratio must lie in (0, 1)");
  if (truth) {
    if (truth->size() != m->space().size())
      fail(ErrorKind::Config, "[observation] truth has " + std::to_string(truth->size()) + " values, model " + model +
                                  " has " + std::to_string(m->space().size()) + " parameters");
    if (!m->space().contains(*truth)) fail(ErrorKind::Config, "[observation] truth lies outside the parameter bounds");
  }
  if (diagnostics.ks.empty() || diagnostics.ks.back() > retrieval.k)
    fail(ErrorKind::Config, "[diagnose] k_sweep maximum must not exceed [retrieve] k=" + std::to_string(retrieval.k));
  if (diagnostics.bins < 1) fail(ErrorKind::Config, "[diagnose] bins must be positive");
}

std::filesystem::path RunConfig::bank_file() const { return bank_path.empty() ? work_dir / "bank.sbnk" : bank_path; }
std::filesystem::path RunConfig::weights_file() const {
  return weights_path.empty() ? work_dir / "weights.unwt" : weights_path;
}
std::filesystem::path RunConfig::embedding_file() const {
  return embedding_path.empty() ? work_dir / "embeddings.semb" : embedding_path;
}
std::filesystem::path RunConfig::observed_file() const {
  return observed_path.empty() ? work_dir / "observed.txt" : observed_path;
}

std::string RunConfig::stage_settings(std::string_view stage) const {
  std::ostringstream s;
  s.imbue(std::locale::classic());
  s << "stage=" << stage << ";seed=" << stage_seed(stage) << ";";
  if (stage == "simulate-bank") {
    s << "model=" << model << ";n=" << bank_size << ";noise=" << bank_noise << ";";
    if (observed_path.empty()) {
      const ParamVector t = truth ? *truth : default_truth(*make_model(model));
      s << "truth=";
      for (Eigen::Index j = 0; j < t.size(); ++j) s << canonical(t[j]) << ",";
    }
  } else if (stage == "train") {
    s << "base=" << arch.base_filters << ";levels=" << arch.levels << ";epochs=" << train.epochs
      << ";batch=" << train.batch_size << ";lr=" << canonical(train.lr) << ";mask=" << canonical(train.mask_ratio)
      << ";val=" << canonical(train.validation_fraction) << ";wd=" << canonical(train.adamw.weight_decay)
      << ";chunk=" << train.chunk_size;
  } else if (stage == "embed") {
    s << "level=" << level_name(retrieval.level);
  } else if (stage == "retrieve") {
    s << "pool=" << retrieval.candidate_pool << ";k=" << retrieval.k << ";level=" << level_name(retrieval.level);
  } else if (stage == "refine") {
    const auto& r = refine;
    s << "model=" << model << ";p=" << r.block_size << ";mode=" << static_cast<int>(r.mode)
      << ";d0=" << canonical(r.initial_step_fraction) << ";dmin=" << canonical(r.min_step_fraction)
      << ";grow=" << canonical(r.grow) << ";shrink=" << canonical(r.shrink) << ";tol=" << canonical(r.tolerance)
      << ";patience=" << r.patience << ";target=" << (r.target ? canonical(*r.target) : "none")
      << ";max_blocks=" << r.max_blocks << ";max_evals=" << r.max_evaluations << ";trials=" << r.trials_per_block
      << ";band=" << canonical(r.accept_low) << "," << canonical(r.accept_high)
      << ";anneal=" << canonical(r.anneal_shrink) << ";ramp=" << r.ramp_interval
      << ";pc=" << canonical(r.nll.pseudocount);
  } else if (stage == "diagnose") {
    s << "model=" << model << ";bins=" << diagnostics.bins << ";ks=";
    for (auto k : diagnostics.ks) s << k << ",";
  } else {
    stage_index(stage);
  }
  return s.str();
}

std::uint64_t RunConfig::stage_seed(std::string_view stage) const { return stream_key(seed, stage_index(stage)); }

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

const StageRecord* Manifest::latest(std::string_view stage) const {
  for (auto it = records.rbegin(); it != records.rend(); ++it)
    if (it->stage == stage) return &*it;
  return nullptr;
}

const StageRecord* Manifest::producer_of(const std::string& path) const {
  for (auto it = records.rbegin(); it != records.rend(); ++it)
    if (it->outputs.count(path)) return &*it;
  return nullptr;
}

void Manifest::write(std::ostream& out) const {
  nlohmann::json j;
  j["tool_version"] = kToolVersion;
  j["records"] = nlohmann::json::array();
  for (const auto& r : records) {
    nlohmann::json e;
    e["stage"] = r.stage;
    e["key"] = hex64(r.key);
    e["seed"] = r.seed;
    e["seconds"] = r.seconds;
    e["cache_hit"] = r.cache_hit;
    e["tool_version"] = r.tool_version;
    e["inputs"] = nlohmann::json::object();
    for (const auto& [p, c] : r.inputs) e["inputs"][p] = hex64(c);
    e["outputs"] = nlohmann::json::object();
    for (const auto& [p, c] : r.outputs) e["outputs"][p] = hex64(c);
    j["records"].push_back(std::move(e));
  }
  out << j.dump(1) << '\n';
}

Manifest Manifest::read(std::istream& in) {
  Manifest m;
  try {
    nlohmann::json j;
    in >> j;
    auto hex = [](const nlohmann::json& v) { return std::stoull(v.get<std::string>(), nullptr, 16); };
    for (const auto& e : j.at("records")) {
      StageRecord r;
      r.stage = e.at("stage").get<std::string>();
      r.key = hex(e.at("key"));
      r.seed = e.at("seed").get<std::uint64_t>();
      r.seconds = e.at("seconds").get<double>();
      r.cache_hit = e.at("cache_hit").get<bool>();
      r.tool_version = e.value("tool_version", std::string());
      for (const auto& [p, c] : e.at("inputs").items()) r.inputs[p] = hex(c);
      for (const auto& [p, c] : e.at("outputs").items()) r.outputs[p] = hex(c);
      m.records.push_back(std::move(r));
    }
  } catch (const std::exception& e) {
    fail(ErrorKind::Io, std::string("manifest is unreadable: ") + e.what());
  }
  return m;
}

void Manifest::save(const std::filesystem::path& path) const {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) fail(ErrorKind::Io, "cannot write " + tmp.string());
    write(out);
    if (!out) fail(ErrorKind::Io, "failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Manifest Manifest::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) return {};
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  return read(in);
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

Manifest run_pipeline(const RunConfig& cfg, const PipelineOptions& opts) {
  cfg.validate();
  const auto model = make_model(cfg.model);
  std::filesystem::create_directories(cfg.work_dir);
  Manifest manifest = Manifest::load(cfg.manifest_file());
  const bool synthesize_observation = cfg.observed_path.empty();

  auto name = [](const std::filesystem::path& p) { return p.lexically_normal().generic_string(); };
  auto log = [&](const std::string& msg) {
    if (opts.verbose) std::cerr << "[rrsbi] " << msg << '\n';
  };

  auto checksum_input = [&](const std::filesystem::path& p) {
    if (!std::filesystem::exists(p)) fail(ErrorKind::Io, "missing input " + p.string());
    const std::uint64_t sum = fnv1a_file(p);
    if (const StageRecord* producer = manifest.producer_of(name(p))) {
      const std::uint64_t recorded = producer->outputs.at(name(p));
      if (recorded != sum)
        fail(ErrorKind::StaleArtifact, p.string() + " has checksum " + hex64(sum) + " but stage '" + producer->stage +
                                           "' recorded " + hex64(recorded) +
                                           "; the file changed after it was produced. Delete it (or rerun with "
                                           "--force) to rebuild it and everything downstream.");
    }
    return sum;
  };

  auto run_stage = [&](std::string_view stage, const std::vector<std::filesystem::path>& inputs,
                       const std::vector<std::filesystem::path>& outputs, const std::function<void()>& body) {
    StageRecord rec;
    rec.stage = stage;
    rec.seed = cfg.stage_seed(stage);
    Fnv1a h;
    h.update(kToolVersion);
    h.update(cfg.stage_settings(stage));
    for (const auto& in : inputs) {
      const std::uint64_t sum = checksum_input(in);
      rec.inputs[name(in)] = sum;
      h.update(name(in));
      h.update(hex64(sum));
    }
    rec.key = h.digest();

    const StageRecord* prev = manifest.latest(stage);
    bool hit = !opts.force && prev && prev->key == rec.key && prev->outputs.size() == outputs.size();
    for (const auto& out : outputs)
      hit = hit && prev->outputs.count(name(out)) && std::filesystem::exists(out);
    if (hit) {
      rec.outputs = prev->outputs;
      rec.cache_hit = true;
      log(std::string(stage) + ": cache hit");
    } else {
      log(std::string(stage) + ": running");
      const auto t0 = std::chrono::steady_clock::now();
      body();
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      for (const auto& out : outputs) rec.outputs[name(out)] = fnv1a_file(out);
    }
    manifest.records.push_back(std::move(rec));
    manifest.save(cfg.manifest_file());
  };

  std::vector<std::filesystem::path> sim_outputs{cfg.bank_file()};
  if (synthesize_observation) sim_outputs.push_back(cfg.observed_file());
  run_stage("simulate-bank", {}, sim_outputs, [&] {
    const std::uint64_t seed = cfg.stage_seed("simulate-bank");
    const SimulationBank bank =
        generate_bank(model->space(), default_prior(*model), cfg.bank_size, *model, cfg.bank_noise, seed);
    write_bank(cfg.bank_file(), bank);
    if (synthesize_observation) {
      const ParamVector truth = cfg.truth ? *cfg.truth : default_truth(*model);
      const LightCurve clean{model->simulate(truth), false};
      write_observed(cfg.observed_file(), poissonize(clean, stream_key(seed, 0x4f4253)));
    }
  });

  const std::vector<std::filesystem::path> weights_outputs{cfg.weights_file(), cfg.loss_file()};
  run_stage("train", {cfg.bank_file()}, weights_outputs, [&] {
    const SimulationBank bank = read_bank(cfg.bank_file());
    UNetConfig arch = cfg.arch;
    arch.input_length = static_cast<int>(bank.bins());
    TrainConfig tc = cfg.train;
    tc.seed = cfg.stage_seed("train");
    tc.verbose = opts.verbose;
    tc.checkpoint_path = cfg.weights_file();
    tc.checkpoint_path += ".ckpt";
    const TrainResult result = train(bank, arch, tc);
    write_loss_history(cfg.loss_file(), result);
    if (result.diverged)
      fail(ErrorKind::Numerical, "training diverged: " + result.message + " (last good weights in " +
                                     tc.checkpoint_path.string() + ")");
    save_weights(cfg.weights_file(), result.params);
  });

  run_stage("embed", {cfg.bank_file(), cfg.weights_file()}, {cfg.embedding_file()}, [&] {
    const SimulationBank bank = read_bank(cfg.bank_file());
    const auto params = load_weights(cfg.weights_file());
    EmbedStats stats;
    const auto emb = build_embedding_bank(params, bank, cfg.retrieval.level, &stats);
    write_embedding_bank(cfg.embedding_file(), emb);
    log("embedded " + std::to_string(bank.size()) + " rows at " + std::to_string(stats.rows_per_second) + " rows/s");
  });

  run_stage("retrieve", {cfg.bank_file(), cfg.weights_file(), cfg.embedding_file(), cfg.observed_file()},
            {cfg.posterior_file()}, [&] {
              const SimulationBank bank = read_bank(cfg.bank_file());
              const auto params = load_weights(cfg.weights_file());
              const auto emb = read_embedding_bank(cfg.embedding_file());
              const LightCurve obs = read_observed(cfg.observed_file());
              const auto result = retrieve(obs, bank, emb, params, cfg.retrieval);
              write_posterior_json(cfg.posterior_file(), make_posterior(result, bank));
            });

  run_stage("refine", {cfg.posterior_file(), cfg.observed_file()}, {cfg.refined_file(), cfg.refine_summary_file()},
            [&] {
              const auto posterior = read_posterior_json(cfg.posterior_file());
              const LightCurve obs = read_observed(cfg.observed_file());
              RefinerConfig rc = cfg.refine;
              rc.seed = cfg.stage_seed("refine");
              const auto out = refine_ensemble(posterior, obs, *model, rc);
              write_posterior_json(cfg.refined_file(), out.posterior);
              write_refine_summary(cfg.refine_summary_file(), out.summary);
            });

  const auto dir = cfg.diagnostics_dir();
  run_stage("diagnose", {cfg.posterior_file(), cfg.refined_file()},
            {dir / "marginals.csv", dir / "kl_sweep.csv", dir / "summary.csv"}, [&] {
              const auto initial = read_posterior_json(cfg.posterior_file());
              const auto refined = read_posterior_json(cfg.refined_file());
              run_diagnostics(initial, &refined, model->space(), cfg.diagnostics, dir);
            });

  report_timing(manifest, cfg.timing_file());
  return manifest;
}

// ---------------------------------------------------------------------------
// Timing
// ---------------------------------------------------------------------------

std::string_view stage_phase(std::string_view stage) {
  if (stage == "retrieve" || stage == "refine") return "online";
  if (stage == "diagnose") return "analysis";
  return "offline";
}

std::vector<TimingRow> timing_table(const Manifest& manifest) {
  std::vector<TimingRow> rows;
  std::vector<std::string> missing;
  double offline = 0.0, online = 0.0, total = 0.0;
  for (std::string_view stage : kStages) {
    const StageRecord* rec = manifest.latest(stage);
    if (!rec) {
      missing.emplace_back(stage);
      continue;
    }
    // A cache hit costs nothing now; report what producing the artifact cost.
    double seconds = rec->seconds;
    if (rec->cache_hit)
      for (auto it = manifest.records.rbegin(); it != manifest.records.rend(); ++it)
        if (it->stage == stage && it->key == rec->key && !it->cache_hit) {
          seconds = it->seconds;
          break;
        }
    const std::string phase(stage_phase(stage));
    rows.push_back({std::string(stage), phase, seconds, rec->cache_hit});
    if (phase == "offline") offline += seconds;
    if (phase == "online") online += seconds;
    total += seconds;
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    warn("timing report is partial; manifest has no record for: " + list);
  }
  rows.push_back({"offline", "total", offline, false});
  rows.push_back({"online", "total", online, false});
  rows.push_back({"all", "total", total, false});
  return rows;
}

void report_timing(const Manifest& manifest, const std::filesystem::path& csv_path) {
  const auto rows = timing_table(manifest);
  std::ofstream out(csv_path);
  if (!out) fail(ErrorKind::Io, "cannot open " + csv_path.string() + " for writing");
  out.imbue(std::locale::classic());
  out.setf(std::ios::fixed);
  out.precision(3);
  out << "stage,phase,seconds,cache_hit\n";
  for (const auto& r : rows) out << r.stage << ',' << r.phase << ',' << r.seconds << ',' << r.cache_hit << '\n';
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

std::vector<std::vector<AblationRow>> run_ablation(const ForwardModel& model, const SimulationBank& bank,
                                                   const UNetParams<float>& params, const AblationConfig& cfg) {
  if (cfg.repetitions < 1) fail(ErrorKind::Config, "ablation needs at least one repetition");
  if (cfg.k < 1 || cfg.k > bank.size()) fail(ErrorKind::Config, "ablation K must lie in [1, bank size]");
  const AblationSpaces spaces = build_ablation_spaces(params, bank);
  const Prior prior = default_prior(model);
  std::vector<std::vector<AblationRow>> reps;
  for (int r = 0; r < cfg.repetitions; ++r) {
    Engine rng = make_engine(cfg.seed, 0x41424c, static_cast<std::uint64_t>(r));
    const ParamVector theta = prior.draw(rng, model.space());
    LightCurve query{model.simulate(theta), false};
    if (cfg.query_noise) query = poissonize(query, stream_key(cfg.seed, 0x414e, static_cast<std::uint64_t>(r)));
    reps.push_back(ablation_compare(query, bank, params, spaces, cfg.k));
  }
  return reps;
}

int ablation_ordered_count(const std::vector<std::vector<AblationRow>>& reps) {
  int ordered = 0;
  for (const auto& rows : reps) {
    std::map<std::string, double> m;
    for (const auto& r : rows) m[r.space] = r.mean_mdnse;
    if (!m.count("multi-level") || !m.count("bottleneck-only") || !m.count("raw-cosine"))
      fail(ErrorKind::Usage, "ablation repetition lacks one of the three spaces");
    ordered += m["multi-level"] <= m["bottleneck-only"] && m["bottleneck-only"] <= m["raw-cosine"];
  }
  return ordered;
}

}  // namespace rrsbi
