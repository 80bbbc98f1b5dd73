#include <omp.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cliqueflow/checkpoint.hpp"
#include "cliqueflow/config.hpp"
#include "cliqueflow/error.hpp"
#include "cliqueflow/experiments.hpp"
#include "cliqueflow/records_io.hpp"

namespace fs = std::filesystem;
using namespace cliqueflow;

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> profile;
  std::optional<std::string> out;
  std::optional<std::string> dataset;
  std::optional<std::string> checkpoint;
  int threads = 1;
  bool resume = false;
};

struct Context {
  RunConfig cfg;
  std::string hash;
  fs::path out;
};

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

// CSV with a header and a trailing config-hash comment.
class Csv {
 public:
  Csv(const fs::path& path, const std::vector<std::string>& header, std::string hash)
      : out_(path), path_(path), hash_(std::move(hash)) {
    if (!out_) throw Error("cannot write '" + path.string() + "'");
    row(header);
  }
  ~Csv() { out_ << "# config_hash=" << hash_ << '\n'; }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << '\n';
  }

 private:
  std::ofstream out_;
  fs::path path_;
  std::string hash_;
};

class Summary {
 public:
  Summary(const Context& ctx, const std::string& command) : path_(ctx.out / (command + "_summary.txt")) {
    add("command", command);
    add("seed", std::to_string(ctx.cfg.seed));
    add("profile", to_string(ctx.cfg.profile));
    add("config_hash", ctx.hash);
  }
  void add(const std::string& key, const std::string& value) { lines_.push_back(key + ": " + value); }
  void add(const std::string& key, double value) { add(key, num(value)); }
  void write() const {
    std::ofstream out(path_);
    if (!out) throw Error("cannot write '" + path_.string() + "'");
    for (const auto& l : lines_) out << l << '\n';
  }

 private:
  fs::path path_;
  std::vector<std::string> lines_;
};

Context make_context(const Options& o) {
  Json j = Json::object();
  if (!o.config_path.empty()) {
    std::ifstream in(o.config_path);
    if (!in) throw ConfigError("cannot open config file '" + o.config_path + "'");
    try {
      in >> j;
    } catch (const std::exception& e) {
      throw ConfigError("config file '" + o.config_path + "' is not valid JSON: " + e.what());
    }
  }
  if (o.profile) j["profile"] = *o.profile;
  if (o.seed) j["seed"] = *o.seed;
  if (o.out) j["paths"]["output"] = *o.out;
  if (o.dataset) j["paths"]["dataset"] = *o.dataset;
  if (o.checkpoint) j["paths"]["checkpoint"] = *o.checkpoint;
  Context ctx;
  ctx.cfg = run_config_from_json(j);
  ctx.cfg.validate();
  const Json canon = to_json(ctx.cfg);
  // Paths do not change results, so they stay out of the hash.
  Json hashed = canon;
  hashed.erase("paths");
  ctx.hash = hex64(config_hash(hashed));
  ctx.out = ctx.cfg.paths.output;
  fs::create_directories(ctx.out);
  std::ofstream(ctx.out / "config.json") << canon.dump(2) << '\n';
  return ctx;
}

fs::path dataset_path(const Context& ctx) {
  return ctx.cfg.paths.dataset.empty() ? ctx.out / "dataset.jsonl" : fs::path(ctx.cfg.paths.dataset);
}

fs::path checkpoint_path(const Context& ctx) {
  return ctx.cfg.paths.checkpoint.empty() ? ctx.out / "model.ckpt" : fs::path(ctx.cfg.paths.checkpoint);
}

DataSplit load_split(const Context& ctx) {
  const fs::path p = dataset_path(ctx);
  if (!fs::exists(p)) throw Error("dataset '" + p.string() + "' not found (run gen-data or set paths.dataset)");
  return split_dataset(read_records(p, ctx.cfg.model.limits()), ctx.cfg.seed);
}

LoadedCheckpoint load_model(const Context& ctx) {
  const fs::path p = checkpoint_path(ctx);
  if (!fs::exists(p)) throw Error("checkpoint '" + p.string() + "' not found (run train or set paths.checkpoint)");
  return load_checkpoint(p.string());
}

std::vector<MaterialRecord> starts(const Context& ctx, const DataSplit& split) {
  const std::size_t n = std::min(ctx.cfg.experiment.n_starts, split.test.size());
  if (n == 0) throw InvariantError("the test split is empty");
  return {split.test.begin(), split.test.begin() + static_cast<std::ptrdiff_t>(n)};
}

DiscoverConfig discover_config(const RunConfig& cfg) {
  DiscoverConfig d;
  d.es = cfg.es;
  d.beam_width = cfg.beam.width;
  d.flow_steps = cfg.flow.n_step;
  d.omega = cfg.flow.omega;
  return d;
}

int cmd_gen_data(const Context& ctx) {
  const OracleSpec spec = resolve_oracle(ctx.cfg);
  const ToyDataConfig& dc = ctx.cfg.data;
  const auto records = generate_dataset(ctx.cfg.experiment.n_records, spec, dc, Rng(ctx.cfg.seed, 0xda7a));
  const fs::path p = dataset_path(ctx);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  write_records(p, records);

  std::vector<std::size_t> counts(dc.max_atoms + 1, 0);
  double mean = 0.0;
  for (const auto& r : records) {
    ++counts[r.material.atom_count()];
    mean += r.property / static_cast<double>(records.size());
  }
  {
    Csv csv(ctx.out / "gen-data.csv", {"n_atoms", "count"}, ctx.hash);
    for (std::size_t n = 1; n < counts.size(); ++n) csv.row({std::to_string(n), std::to_string(counts[n])});
  }
  Summary s(ctx, "gen-data");
  s.add("dataset", p.string());
  s.add("records", std::to_string(records.size()));
  s.add("oracle", to_json(spec).dump());
  s.add("mean_property", mean);
  s.write();
  return 0;
}

int cmd_train(const Context& ctx, bool resume) {
  const DataSplit split = load_split(ctx);
  const fs::path ckpt = checkpoint_path(ctx);
  std::unique_ptr<CliqueFlowModel> model;
  std::optional<LoadedCheckpoint> loaded;
  TrainConfig tc = ctx.cfg.train;
  FlowConfig fc = ctx.cfg.flow;
  if (resume && fs::exists(ckpt)) {
    loaded = load_checkpoint(ckpt.string());
    model = std::move(loaded->model);
  } else {
    model = std::make_unique<CliqueFlowModel>(ctx.cfg.model, ctx.cfg.seed);
    model->prior = fit_length_prior(split.train);
  }
  Trainer trainer(*model, tc, fc, loaded ? loaded->meta.seed : ctx.cfg.seed);
  trainer.set_data(split.train, split.val);
  if (loaded) loaded->restore(trainer);

  const fs::path log_path = ctx.out / "train.csv";
  const bool append = loaded.has_value() && fs::exists(log_path);
  std::string previous;
  if (append) {
    // Drop the old trailing hash line; a new one closes the file.
    std::ifstream in(log_path);
    for (std::string line; std::getline(in, line);)
      if (!line.starts_with("#")) previous += line + '\n';
  }
  std::ofstream log(log_path, std::ios::trunc);
  log << previous;
  if (!log) throw Error("cannot write train log");
  if (!append) log << "step,atom,flow,pred,kl,total,beta,tau_pred,val_total,wall_ms\n";
  trainer.run(
      tc.gradient_steps,
      [&](const TrainLogRow& r) {
        log << r.step << ',' << num(r.train.atom) << ',' << num(r.train.flow) << ',' << num(r.train.pred) << ','
            << num(r.train.kl) << ',' << num(r.train.total) << ',' << num(r.sched.beta) << ','
            << num(r.sched.tau_pred) << ',' << (r.has_val ? num(r.val_total) : "") << ',' << num(r.wall_ms) << '\n';
        log.flush();
      },
      ctx.cfg.experiment.time_budget_seconds);
  log << "# config_hash=" << ctx.hash << '\n';
  save_checkpoint(ckpt.string(), trainer);

  const LossParts val = trainer.validate();
  Summary s(ctx, "train");
  s.add("checkpoint", ckpt.string());
  s.add("steps", std::to_string(trainer.current_step()));
  s.add("train_records", std::to_string(split.train.size()));
  s.add("val_total", val.total);
  s.add("val_atom", val.atom);
  s.add("val_flow", val.flow);
  s.write();
  return 0;
}

int cmd_optimize(const Context& ctx) {
  const DataSplit split = load_split(ctx);
  const LoadedCheckpoint ck = load_model(ctx);
  const CliqueFlowModel& model = *ck.model;
  const OracleSpec spec = resolve_oracle(ctx.cfg);
  const auto records = starts(ctx, split);
  OptimizeResult opt;
  const auto found = discover(model, records, discover_config(ctx.cfg), Rng(ctx.cfg.seed, 0x0b7), nullptr, &opt);

  std::vector<double> preds;
  for (const auto& d : found) preds.push_back(d.prediction);
  const auto kept = top_k_indices(preds, ctx.cfg.es.top_k_percent);
  std::vector<char> is_kept(found.size(), 0);
  for (auto i : kept) is_kept[i] = 1;

  double start_mean = 0.0, all_mean = 0.0, kept_mean = 0.0;
  {
    Csv csv(ctx.out / "optimize.csv",
            {"source", "kept", "n_atoms", "species", "initial_prediction", "prediction", "initial_oracle", "oracle"},
            ctx.hash);
    for (std::size_t i = 0; i < found.size(); ++i) {
      const auto& d = found[i];
      const double before = oracle(records[d.source].material, spec);
      const double after = oracle(d.material, spec);
      start_mean += before / static_cast<double>(found.size());
      all_mean += after / static_cast<double>(found.size());
      if (is_kept[i]) kept_mean += after / static_cast<double>(kept.size());
      csv.row({std::to_string(d.source), std::to_string(int(is_kept[i])), std::to_string(d.material.atom_count()),
               species_string(d.material.species), num(d.initial_prediction), num(d.prediction), num(before),
               num(after)});
    }
  }
  {
    Csv csv(ctx.out / "trace.csv", {"latent", "step", "prediction", "latent_norm"}, ctx.hash);
    for (std::size_t i = 0; i < opt.trace.size(); ++i)
      for (std::size_t s = 0; s < opt.trace[i].size(); ++s)
        csv.row({std::to_string(i), std::to_string(s), num(opt.trace[i][s]), num(opt.norms[i][s])});
  }
  Summary s(ctx, "optimize");
  s.add("starts", std::to_string(found.size()));
  s.add("mean_initial_oracle", start_mean);
  s.add("mean_oracle", all_mean);
  s.add("mean_oracle_top_k", kept_mean);
  s.add("top_k_percent", ctx.cfg.es.top_k_percent);
  s.add("relative_improvement", start_mean != 0.0 ? (start_mean - all_mean) / std::abs(start_mean) : 0.0);
  s.write();
  return 0;
}

int cmd_reconstruct(const Context& ctx) {
  const DataSplit split = load_split(ctx);
  const LoadedCheckpoint ck = load_model(ctx);
  const auto records = starts(ctx, split);
  const auto rows = reconstruct(*ck.model, records, ctx.cfg.experiment.omegas, ctx.cfg.beam.width,
                                ctx.cfg.flow.n_step, Rng(ctx.cfg.seed, 0x4ec));
  Summary s(ctx, "reconstruct");
  {
    Csv csv(ctx.out / "reconstruct.csv", {"omega", "n", "matched", "match_ratio", "species_matched", "species_ratio"},
            ctx.hash);
    for (const auto& r : rows) {
      csv.row({num(r.omega), std::to_string(r.n), std::to_string(r.matched), num(r.match_ratio()),
               std::to_string(r.species_matched), num(r.species_ratio())});
      s.add("species_match_ratio_omega_" + num(r.omega), r.species_ratio());
    }
  }
  s.add("match_criterion", "species equal; lengths 2% relative; angles 2 deg; positions 0.05 wrapped");
  s.write();
  return 0;
}

int cmd_interpolate(const Context& ctx) {
  const DataSplit split = load_split(ctx);
  if (split.test.size() < 2) throw InvariantError("interpolation needs two test records");
  const LoadedCheckpoint ck = load_model(ctx);
  const OracleSpec spec = resolve_oracle(ctx.cfg);
  const auto rows = interpolation_sweep(*ck.model, split.test[0].material, split.test[1].material,
                                        ctx.cfg.experiment.interpolation_steps, spec, ctx.cfg.beam.width,
                                        ctx.cfg.flow.n_step, ctx.cfg.flow.omega, Rng(ctx.cfg.seed, 0x1e7));
  {
    Csv csv(ctx.out / "interpolate.csv",
            {"mode", "clique", "step", "t", "prediction", "oracle", "n_atoms", "species"}, ctx.hash);
    for (const auto& r : rows)
      csv.row({r.mode, std::to_string(r.clique), std::to_string(r.step), num(r.t), num(r.prediction),
               num(r.oracle_value), std::to_string(r.material.atom_count()), species_string(r.material.species)});
  }
  Summary s(ctx, "interpolate");
  s.add("endpoints", "test records 0 and 1");
  s.add("rows", std::to_string(rows.size()));
  s.write();
  return 0;
}

int cmd_ablate(const Context& ctx) {
  const DataSplit split = load_split(ctx);
  const LoadedCheckpoint ck = load_model(ctx);
  const OracleSpec spec = resolve_oracle(ctx.cfg);
  AblationOptions opt;
  opt.decay_sweep = ctx.cfg.experiment.decay_sweep;
  opt.beam_width = ctx.cfg.beam.width;
  opt.flow_steps = ctx.cfg.flow.n_step;
  opt.omega = ctx.cfg.flow.omega;
  const auto rows = ablate_gradients(*ck.model, starts(ctx, split), spec, ctx.cfg.es, opt, Rng(ctx.cfg.seed, 0xab1));
  {
    Csv csv(ctx.out / "ablate-gradients.csv", {"method", "decay", "mean_pred_change", "mean_oracle_change"},
            ctx.hash);
    for (const auto& r : rows) csv.row({r.method, num(r.decay), num(r.mean_pred_change), num(r.mean_oracle_change)});
  }
  Summary s(ctx, "ablate-gradients");
  for (const auto& r : rows)
    if (r.method != "ES-sweep") s.add(r.method + "_oracle_change", r.mean_oracle_change);
  s.write();
  return 0;
}

int cmd_timing(const Context& ctx) {
  const DataSplit split = load_split(ctx);
  const LoadedCheckpoint ck = load_model(ctx);
  const auto rows = time_pipeline(*ck.model, split.test, ctx.cfg.experiment.timing_sizes,
                                  discover_config(ctx.cfg), Rng(ctx.cfg.seed, 0x71e));
  {
    Csv csv(ctx.out / "timing.csv", {"n", "mbo_seconds", "decode_seconds"}, ctx.hash);
    for (const auto& r : rows) csv.row({std::to_string(r.n), num(r.mbo_seconds), num(r.decode_seconds)});
  }
  Summary s(ctx, "timing");
  s.add("threads", std::to_string(omp_get_max_threads()));
  s.write();
  return 0;
}

int cmd_eval(const Context& ctx) {
  const DataSplit split = load_split(ctx);
  const LoadedCheckpoint ck = load_model(ctx);
  Trainer t(*ck.model, ck.meta.train, ck.meta.flow, ck.meta.seed);
  t.set_data(split.train, split.val);
  t.set_step(ck.meta.step);
  Summary s(ctx, "eval");
  {
    Csv csv(ctx.out / "eval.csv", {"split", "records", "atom", "flow", "pred", "kl", "total"}, ctx.hash);
    for (const auto& [name, recs] : std::vector<std::pair<std::string, const std::vector<MaterialRecord>*>>{
             {"val", &split.val}, {"test", &split.test}}) {
      if (recs->empty()) continue;
      const LossParts p = t.evaluate(*recs);
      csv.row({name, std::to_string(p.records), num(p.atom), num(p.flow), num(p.pred), num(p.kl), num(p.total)});
      s.add(name + "_total", p.total);
    }
  }
  s.add("checkpoint_step", std::to_string(ck.meta.step));
  s.write();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent-space crystal generation and optimization on a synthetic toy task"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "Run seed");
    sub->add_option("--out", o.out, "Output directory");
    sub->add_option("--profile", o.profile, "Default profile")->check(CLI::IsMember({"desk", "paper"}));
    sub->add_option("--threads", o.threads, "OpenMP threads (1 is bit-reproducible)")->check(CLI::PositiveNumber);
    sub->add_option("--dataset", o.dataset, "Dataset path (JSON lines)");
    sub->add_option("--checkpoint", o.checkpoint, "Checkpoint path");
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : std::vector<std::pair<std::string, std::string>>{
           {"gen-data", "Generate a labelled toy dataset"},
           {"train", "Train a model and write a checkpoint"},
           {"optimize", "Optimize encoded test materials and decode them"},
           {"reconstruct", "Encode-decode consistency per guidance strength"},
           {"interpolate", "Full and per-clique latent interpolation"},
           {"ablate-gradients", "Back-propagated vs evolution-strategy gradients and the decay sweep"},
           {"timing", "Wall time of optimization and decoding"},
           {"eval", "Losses of a checkpoint on the validation and test splits"}}) {
    subs[name] = app.add_subcommand(name, help);
    common(subs[name]);
  }
  subs["train"]->add_flag("--resume", o.resume, "Continue from the checkpoint if it exists");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    omp_set_num_threads(o.threads);
    const Context ctx = make_context(o);
    if (subs["gen-data"]->parsed()) return cmd_gen_data(ctx);
    if (subs["train"]->parsed()) return cmd_train(ctx, o.resume);
    if (subs["optimize"]->parsed()) return cmd_optimize(ctx);
    if (subs["reconstruct"]->parsed()) return cmd_reconstruct(ctx);
    if (subs["interpolate"]->parsed()) return cmd_interpolate(ctx);
    if (subs["ablate-gradients"]->parsed()) return cmd_ablate(ctx);
    if (subs["timing"]->parsed()) return cmd_timing(ctx);
    if (subs["eval"]->parsed()) return cmd_eval(ctx);
  } catch (const NonFiniteError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const DegenerateCellError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
