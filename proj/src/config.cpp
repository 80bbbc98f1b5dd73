#include "cliqueflow/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "cliqueflow/error.hpp"

namespace cliqueflow {

Profile profile_from_string(const std::string& s) {
  if (s == "desk") return Profile::kDesk;
  if (s == "paper") return Profile::kPaper;
  throw ConfigError("unknown profile '" + s + "' (expected desk or paper)");
}

std::string to_string(Profile p) { return p == Profile::kDesk ? "desk" : "paper"; }

namespace {

// Object reader that remembers which keys were consumed.
class Reader {
 public:
  Reader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(where() + "expected an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    auto it = j_.find(key);
    if (it == j_.end()) return;
    seen_.insert(key);
    read(*it, path_.empty() ? key : path_ + "." + key, out);
  }

  const Json* sub(const std::string& key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + child(it.key()) + "'");
  }

 private:
  std::string where() const { return path_.empty() ? "" : path_ + ": "; }

  static void read(const Json& v, const std::string& name, std::size_t& out) {
    if (!v.is_number_unsigned()) throw ConfigError("config key '" + name + "' must be a non-negative integer");
    out = v.get<std::size_t>();
  }
  static void read(const Json& v, const std::string& name, double& out) {
    if (!v.is_number()) throw ConfigError("config key '" + name + "' must be a number");
    out = v.get<double>();
  }
  static void read(const Json& v, const std::string& name, bool& out) {
    if (!v.is_boolean()) throw ConfigError("config key '" + name + "' must be true or false");
    out = v.get<bool>();
  }
  static void read(const Json& v, const std::string& name, std::string& out) {
    if (!v.is_string()) throw ConfigError("config key '" + name + "' must be a string");
    out = v.get<std::string>();
  }
  static void read(const Json& v, const std::string& name, std::vector<double>& out) {
    if (!v.is_array()) throw ConfigError("config key '" + name + "' must be an array of numbers");
    out.clear();
    for (const auto& x : v) {
      if (!x.is_number()) throw ConfigError("config key '" + name + "' must be an array of numbers");
      out.push_back(x.get<double>());
    }
  }
  static void read(const Json& v, const std::string& name, std::vector<std::size_t>& out) {
    if (!v.is_array()) throw ConfigError("config key '" + name + "' must be an array of integers");
    out.clear();
    for (const auto& x : v) {
      if (!x.is_number_unsigned()) throw ConfigError("config key '" + name + "' must be an array of integers");
      out.push_back(x.get<std::size_t>());
    }
  }
  static void read(const Json& v, const std::string& name, Vec3& out) {
    std::vector<double> tmp;
    read(v, name, tmp);
    if (tmp.size() != 3) throw ConfigError("config key '" + name + "' must hold 3 numbers");
    std::copy(tmp.begin(), tmp.end(), out.begin());
  }

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

nn::TransformerConfig transformer_from_json(const Json& j, nn::TransformerConfig c, const std::string& path) {
  Reader r(j, path);
  r.get("d_model", c.d_model);
  r.get("n_blocks", c.n_blocks);
  r.get("n_heads", c.n_heads);
  r.get("n_registers", c.n_registers);
  r.get("mlp_dim", c.mlp_dim);
  r.get("n_mlp", c.n_mlp);
  r.get("dropout", c.dropout);
  r.finish();
  return c;
}

LengthPrior prior_from_json(const Json& j, const std::string& path) {
  LengthPrior p;
  Reader r(j, path);
  r.get("mean", p.mean);
  r.get("stddev", p.stddev);
  r.finish();
  return p;
}

OracleSpec oracle_at(const Json& j, OracleSpec c, const std::string& path) {
  Reader r(j, path);
  std::string kind = to_string(c.kind);
  r.get("kind", kind);
  c.kind = oracle_kind_from_string(kind);
  r.get("weights", c.weights);
  r.get("target_density", c.target_density);
  r.get("coupling", c.coupling);
  r.get("lambda_reg", c.lambda_reg);
  r.get("tau_reg", c.tau_reg);
  if (const Json* p = r.sub("primary")) c.primary = std::make_shared<OracleSpec>(oracle_at(*p, {}, r.child("primary")));
  if (const Json* p = r.sub("constraint"))
    c.constraint = std::make_shared<OracleSpec>(oracle_at(*p, {}, r.child("constraint")));
  r.finish();
  return c;
}

}  // namespace

Json to_json(const nn::TransformerConfig& c) {
  return {{"d_model", c.d_model}, {"n_blocks", c.n_blocks}, {"n_heads", c.n_heads}, {"n_registers", c.n_registers},
          {"mlp_dim", c.mlp_dim}, {"n_mlp", c.n_mlp},       {"dropout", c.dropout}};
}

Json to_json(const ModelConfig& c) {
  return {{"species", c.vocab.species},
          {"max_atoms", c.max_atoms},
          {"transformer", to_json(c.transformer)},
          {"n_cliques", c.shape.n_cliques},
          {"d_clique", c.shape.d_clique},
          {"d_knot", c.shape.d_knot},
          {"predictor_hidden", c.predictor.hidden},
          {"predictor_layers", c.predictor.n_hidden},
          {"clique_embed_dim", c.predictor.embed_dim}};
}

Json to_json(const TrainConfig& c) {
  return {{"gradient_steps", c.gradient_steps}, {"batch_size", c.batch_size},   {"learning_rate", c.learning_rate},
          {"warmup", c.warmup},                 {"beta_limit", c.beta_limit},   {"tau_pred_limit", c.tau_pred_limit},
          {"tau_pred_init", c.tau_pred_init},   {"temp_atom", c.temp_atom},     {"log_every", c.log_every},
          {"val_every", c.val_every},           {"val_records", c.val_records}, {"shards", c.shards}};
}

Json to_json(const FlowConfig& c) {
  return {{"n_step", c.n_step}, {"omega", c.omega}, {"eps_mix", c.eps_mix}, {"tau_pos", c.tau_pos}, {"p_lat", c.p_lat}};
}

Json to_json(const BeamConfig& c) { return {{"width", c.width}, {"max_species", c.max_species}}; }

Json to_json(const ESConfig& c) {
  return {{"n_pert", c.n_pert},     {"sigma", c.sigma},           {"learning_rate", c.learning_rate},
          {"steps", c.steps},       {"decay", c.decay},           {"antithetic", c.antithetic},
          {"top_k_percent", c.top_k_percent}, {"literal_decay", c.literal_decay}};
}

Json to_json(const LengthPrior& p) { return {{"mean", p.mean}, {"stddev", p.stddev}}; }

Json to_json(const OracleSpec& s) {
  Json j = {{"kind", to_string(s.kind)},     {"weights", s.weights},     {"target_density", s.target_density},
            {"coupling", s.coupling},        {"lambda_reg", s.lambda_reg}, {"tau_reg", s.tau_reg}};
  if (s.primary) j["primary"] = to_json(*s.primary);
  if (s.constraint) j["constraint"] = to_json(*s.constraint);
  return j;
}

Json to_json(const ToyDataConfig& c) {
  return {{"max_atoms", c.max_atoms}, {"species", c.vocab.species}, {"skew", c.skew}, {"prior", to_json(c.prior)}};
}

Json to_json(const RunConfig& c) {
  const auto& e = c.experiment;
  return {{"seed", c.seed},
          {"profile", to_string(c.profile)},
          {"paths", {{"dataset", c.paths.dataset}, {"checkpoint", c.paths.checkpoint}, {"output", c.paths.output}}},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"flow", to_json(c.flow)},
          {"beam", to_json(c.beam)},
          {"es", to_json(c.es)},
          {"oracle", to_json(c.oracle)},
          {"data", to_json(c.data)},
          {"experiment",
           {{"n_records", e.n_records},
            {"n_starts", e.n_starts},
            {"omegas", e.omegas},
            {"decay_sweep", e.decay_sweep},
            {"timing_sizes", e.timing_sizes},
            {"interpolation_steps", e.interpolation_steps},
            {"time_budget_seconds", e.time_budget_seconds}}}};
}

ModelConfig model_config_from_json(const Json& j, ModelConfig c) {
  Reader r(j, "model");
  r.get("species", c.vocab.species);
  r.get("max_atoms", c.max_atoms);
  if (const Json* t = r.sub("transformer")) c.transformer = transformer_from_json(*t, c.transformer, "model.transformer");
  r.get("n_cliques", c.shape.n_cliques);
  r.get("d_clique", c.shape.d_clique);
  r.get("d_knot", c.shape.d_knot);
  r.get("predictor_hidden", c.predictor.hidden);
  r.get("predictor_layers", c.predictor.n_hidden);
  r.get("clique_embed_dim", c.predictor.embed_dim);
  r.finish();
  return c;
}

TrainConfig train_config_from_json(const Json& j, TrainConfig c) {
  Reader r(j, "train");
  r.get("gradient_steps", c.gradient_steps);
  r.get("batch_size", c.batch_size);
  r.get("learning_rate", c.learning_rate);
  r.get("warmup", c.warmup);
  r.get("beta_limit", c.beta_limit);
  r.get("tau_pred_limit", c.tau_pred_limit);
  r.get("tau_pred_init", c.tau_pred_init);
  r.get("temp_atom", c.temp_atom);
  r.get("log_every", c.log_every);
  r.get("val_every", c.val_every);
  r.get("val_records", c.val_records);
  r.get("shards", c.shards);
  r.finish();
  return c;
}

FlowConfig flow_config_from_json(const Json& j, FlowConfig c) {
  Reader r(j, "flow");
  r.get("n_step", c.n_step);
  r.get("omega", c.omega);
  r.get("eps_mix", c.eps_mix);
  r.get("tau_pos", c.tau_pos);
  r.get("p_lat", c.p_lat);
  r.finish();
  return c;
}

BeamConfig beam_config_from_json(const Json& j, BeamConfig c) {
  Reader r(j, "beam");
  r.get("width", c.width);
  r.get("max_species", c.max_species);
  r.finish();
  return c;
}

ESConfig es_config_from_json(const Json& j, ESConfig c) {
  Reader r(j, "es");
  r.get("n_pert", c.n_pert);
  r.get("sigma", c.sigma);
  r.get("learning_rate", c.learning_rate);
  r.get("steps", c.steps);
  r.get("decay", c.decay);
  r.get("antithetic", c.antithetic);
  r.get("top_k_percent", c.top_k_percent);
  r.get("literal_decay", c.literal_decay);
  r.finish();
  return c;
}

LengthPrior length_prior_from_json(const Json& j) { return prior_from_json(j, "prior"); }

OracleSpec oracle_from_json(const Json& j, OracleSpec base) { return oracle_at(j, std::move(base), "oracle"); }

ToyDataConfig data_config_from_json(const Json& j, ToyDataConfig c) {
  Reader r(j, "data");
  r.get("max_atoms", c.max_atoms);
  r.get("species", c.vocab.species);
  r.get("skew", c.skew);
  if (const Json* p = r.sub("prior")) c.prior = prior_from_json(*p, "data.prior");
  r.finish();
  return c;
}

RunConfig RunConfig::for_profile(Profile p) {
  RunConfig c;
  c.profile = p;
  if (p == Profile::kPaper) {
    c.model = ModelConfig::paper();
    c.train = TrainConfig::paper();
    c.es = ESConfig::paper();
  } else {
    c.train = TrainConfig::desk();
    c.es = ESConfig::desk();
  }
  return c;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  flow.validate();
  beam.validate();
  es.validate();
  if (!oracle.weights.empty() || oracle.kind == OracleKind::kRegularized) oracle.validate(model.vocab.species);
  if (data.vocab.species != model.vocab.species || data.max_atoms != model.max_atoms)
    throw ConfigError("data and model must agree on species count and max_atoms");
  if (beam.max_species > model.max_atoms) throw ConfigError("beam.max_species must not exceed model.max_atoms");
  if (experiment.interpolation_steps == 0) throw ConfigError("experiment.interpolation_steps must be positive");
}

RunConfig run_config_from_json(const Json& j) {
  Reader r(j, "");
  std::string profile = "desk";
  r.get("profile", profile);
  RunConfig c = RunConfig::for_profile(profile_from_string(profile));
  r.get("seed", c.seed);
  if (const Json* p = r.sub("paths")) {
    Reader pr(*p, "paths");
    pr.get("dataset", c.paths.dataset);
    pr.get("checkpoint", c.paths.checkpoint);
    pr.get("output", c.paths.output);
    pr.finish();
  }
  if (const Json* s = r.sub("model")) c.model = model_config_from_json(*s, c.model);
  if (const Json* s = r.sub("train")) c.train = train_config_from_json(*s, c.train);
  if (const Json* s = r.sub("flow")) c.flow = flow_config_from_json(*s, c.flow);
  if (const Json* s = r.sub("beam")) c.beam = beam_config_from_json(*s, c.beam);
  if (const Json* s = r.sub("es")) c.es = es_config_from_json(*s, c.es);
  if (const Json* s = r.sub("oracle")) c.oracle = oracle_from_json(*s, c.oracle);
  if (const Json* s = r.sub("data")) c.data = data_config_from_json(*s, c.data);
  if (const Json* s = r.sub("experiment")) {
    Reader er(*s, "experiment");
    auto& e = c.experiment;
    er.get("n_records", e.n_records);
    er.get("n_starts", e.n_starts);
    er.get("omegas", e.omegas);
    er.get("decay_sweep", e.decay_sweep);
    er.get("timing_sizes", e.timing_sizes);
    er.get("interpolation_steps", e.interpolation_steps);
    er.get("time_budget_seconds", e.time_budget_seconds);
    er.finish();
  }
  r.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

std::string canonical(const Json& j) { return j.dump(); }

std::uint64_t config_hash(const Json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical(j)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

}  // namespace cliqueflow
