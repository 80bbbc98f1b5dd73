#include "cliqueflow/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>
#include <numeric>

#include "cliqueflow/error.hpp"

namespace cliqueflow {

void TrainConfig::validate() const {
  if (gradient_steps == 0 || batch_size == 0 || warmup == 0) throw ConfigError("train sizes must be positive");
  if (!(learning_rate > 0.0 && beta_limit > 0.0 && tau_pred_limit > 0.0 && tau_pred_init > 0.0 && temp_atom > 0.0))
    throw ConfigError("train weights must be positive");
  if (warmup > gradient_steps) throw ConfigError("warmup must not exceed gradient_steps");
  if (shards == 0 || log_every == 0 || val_every == 0) throw ConfigError("shards and intervals must be positive");
}

Schedules warmup_schedules(std::size_t step, const TrainConfig& cfg) {
  const double s = static_cast<double>(step), w = static_cast<double>(cfg.warmup);
  Schedules out;
  out.beta = cfg.beta_limit * std::min(1.0, s / w);
  const double ramp = std::clamp((s - w) / w, 0.0, 1.0);
  out.tau_pred = cfg.tau_pred_init + (cfg.tau_pred_limit - cfg.tau_pred_init) * ramp;
  return out;
}

nn::Var total_loss(nn::Context& ctx, const CliqueFlowModel& model, const MaterialBatch& batch,
                   std::span<const double> properties, std::span<const std::uint64_t> streams, const Rng& rng,
                   const Schedules& sched, const TrainConfig& tcfg, const FlowConfig& fcfg, LossParts* parts,
                   double weight) {
  nn::Graph& g = ctx.graph;
  const std::size_t B = batch.batch;
  const CliqueShape& shape = model.config().shape;
  const std::size_t dz = shape.d_z();
  if (properties.size() != B || streams.size() != B) throw DimensionError("total_loss: one label and stream per record");

  std::vector<Rng> rngs;
  nn::Tensor eps = nn::Tensor::matrix(B, dz), eps_z = nn::Tensor::matrix(B, dz);
  std::vector<double> keep(B);
  std::vector<std::size_t> clique(B);
  for (std::size_t b = 0; b < B; ++b) {
    Rng r = rng.split(streams[b]);
    r.fill_normal({eps.data() + b * dz, dz});
    clique[b] = r.index(shape.n_cliques);
    keep[b] = r.bernoulli(fcfg.p_lat) ? 0.0 : 1.0;
    r.fill_normal({eps_z.data() + b * dz, dz});
    rngs.push_back(r);
  }
  for (std::size_t b = 0; b < B; ++b)
    if (keep[b] != 0.0)
      for (std::size_t k = 0; k < dz; ++k) eps_z(b, k) = 0.0;

  EncodedBatch enc = model.encoder(ctx, batch);
  nn::Var z = sample_latent(g, enc, eps);
  const double mean = weight / static_cast<double>(B);

  AtomNll atom = model.atoms.nll(ctx, model.atoms.modulate(ctx, z), batch, tcfg.temp_atom * mean);

  FlowDraw draw = draw_flow_inputs(batch, model.prior, fcfg, rngs);
  FlowState g1 = flow_state(batch);
  FlowState gt = interpolate(draw.g0, g1, draw.t, batch.width);
  FlowState target = g1;
  for (std::size_t i = 0; i < target.lengths.size(); ++i) target.lengths[i] -= draw.g0.lengths[i];
  for (std::size_t i = 0; i < target.angles.size(); ++i) target.angles[i] -= draw.g0.angles[i];
  for (std::size_t i = 0; i < target.positions.size(); ++i) target.positions[i] -= draw.g0.positions[i];
  nn::Var z_flow = nn::add(g, nn::scale_rows(g, z, keep), g.constant(eps_z));
  nn::Var memory = model.flow.latent_memory(ctx, chain(g, z_flow, shape));
  Velocity v = model.flow.velocity(ctx, gt, draw.t, batch, memory);
  nn::Var flow_rec = flow_loss_terms(g, v, target, batch, fcfg.tau_pos);

  nn::Var pred = model.predictor.from_latent(ctx, z);
  nn::Var resid = nn::sub(g, pred, g.constant(nn::Tensor({B, 1}, std::vector<double>(properties.begin(), properties.end()))));
  nn::Var pred_rec = nn::square(g, resid);

  std::vector<std::size_t> idx;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < shape.d_clique; ++j) idx.push_back(b * dz + shape.latent_index(clique[b], j));
  nn::Shape ks{B, shape.d_clique};
  nn::Var mu_c = nn::gather(g, enc.mu, idx, ks);
  nn::Var ls_c = nn::gather(g, enc.log_sigma, std::move(idx), ks);
  nn::Var kl_terms = nn::sub(g, nn::scale(g, nn::add(g, nn::exp(g, nn::scale(g, ls_c, 2.0)), nn::square(g, mu_c)), 0.5),
                             nn::add_scalar(g, ls_c, 0.5));
  nn::Var kl_rec = nn::row_sum(g, kl_terms);

  nn::Var loss = atom.total;
  loss = nn::add(g, loss, nn::scale(g, nn::sum(g, flow_rec), mean));
  loss = nn::add(g, loss, nn::scale(g, nn::sum(g, pred_rec), sched.tau_pred * mean));
  loss = nn::add(g, loss, nn::scale(g, nn::sum(g, kl_rec), sched.beta * mean));

  if (parts) {
    auto total_of = [&](nn::Var x) {
      double s = 0.0;
      for (double v : g.value(x).values()) s += v;
      return s;
    };
    double atom_sum = 0.0;
    for (double a : atom.per_record) atom_sum += a;
    parts->atom += atom_sum;
    parts->flow += total_of(flow_rec);
    parts->pred += total_of(pred_rec);
    parts->kl += total_of(kl_rec);
    parts->total += tcfg.temp_atom * atom_sum + total_of(flow_rec) + sched.tau_pred * total_of(pred_rec) +
                    sched.beta * total_of(kl_rec);
    parts->records += B;
  }
  return loss;
}

namespace {

LossParts averaged(LossParts p) {
  if (p.records == 0) return p;
  const double n = static_cast<double>(p.records);
  p.atom /= n;
  p.flow /= n;
  p.pred /= n;
  p.kl /= n;
  p.total /= n;
  return p;
}

void add_parts(LossParts& into, const LossParts& p) {
  into.atom += p.atom;
  into.flow += p.flow;
  into.pred += p.pred;
  into.kl += p.kl;
  into.total += p.total;
  into.records += p.records;
}

}  // namespace

Trainer::Trainer(CliqueFlowModel& model, const TrainConfig& tcfg, const FlowConfig& fcfg, std::uint64_t seed)
    : model_(model), tcfg_(tcfg), fcfg_(fcfg), seed_(seed), adam_(nn::AdamHyper{tcfg.learning_rate}) {
  tcfg.validate();
  fcfg.validate();
}

void Trainer::set_data(std::vector<MaterialRecord> train, std::vector<MaterialRecord> val) {
  if (train.empty()) throw InvariantError("training set is empty");
  train_ = std::move(train);
  val_ = std::move(val);
  buckets_.assign(model_.config().max_atoms + 1, {});
  for (std::size_t i = 0; i < train_.size(); ++i) {
    cliqueflow::validate(train_[i], model_.config().limits());
    buckets_[train_[i].material.atom_count()].push_back(i);
  }
}

std::vector<std::size_t> Trainer::batch_indices(std::size_t step) const {
  Rng r = Rng(seed_, 0xba7c).split(step);
  const std::size_t anchor = r.index(train_.size());
  std::vector<std::size_t> pool = buckets_[train_[anchor].material.atom_count()];
  const std::size_t n = std::min(tcfg_.batch_size, pool.size());
  for (std::size_t i = 0; i < n; ++i) std::swap(pool[i], pool[i + r.index(pool.size() - i)]);
  pool.resize(n);
  return pool;
}

LossParts Trainer::step() {
  if (train_.empty()) throw InvariantError("trainer has no data");
  const auto idx = batch_indices(step_);
  const Schedules sched = warmup_schedules(step_, tcfg_);
  const Rng step_rng = Rng(seed_, 0x5eed).split(step_);
  const std::size_t shards = std::min(tcfg_.shards, idx.size());
  std::vector<std::unique_ptr<nn::Graph>> graphs(shards);
  std::vector<LossParts> parts(shards);

#pragma omp parallel for schedule(static)
  for (std::size_t s = 0; s < shards; ++s) {
    const std::size_t lo = idx.size() * s / shards, hi = idx.size() * (s + 1) / shards;
    std::vector<const Material*> ms;
    std::vector<double> ys;
    std::vector<std::uint64_t> streams;
    for (std::size_t k = lo; k < hi; ++k) {
      ms.push_back(&train_[idx[k]].material);
      ys.push_back(train_[idx[k]].property);
      streams.push_back(k);
    }
    auto batch = MaterialBatch::build(ms, model_.config().vocab);
    graphs[s] = std::make_unique<nn::Graph>();
    Rng dropout_rng = step_rng.split(1000000 + s);
    nn::Context ctx{*graphs[s], model_.params, true, &dropout_rng};
    nn::Var loss = total_loss(ctx, model_, batch, ys, streams, step_rng, sched, tcfg_, fcfg_, &parts[s],
                              static_cast<double>(hi - lo) / static_cast<double>(idx.size()));
    graphs[s]->backward(loss);
  }

  model_.params.zero_grad();
  LossParts total;
  for (std::size_t s = 0; s < shards; ++s) {
    graphs[s]->accumulate_param_grads(model_.params);
    add_parts(total, parts[s]);
  }
  double sq = 0.0;
  model_.params.for_each([&](const nn::Parameter& p) {
    for (double v : p.grad.values()) sq += v * v;
  });
  if (!std::isfinite(sq)) throw NonFiniteError("non-finite gradient at step " + std::to_string(step_));
  adam_.step(model_.params);
  ++step_;
  return averaged(total);
}

LossParts Trainer::evaluate(std::span<const MaterialRecord> records, std::size_t chunk) const {
  // Fixed noise streams so repeated evaluations agree exactly.
  const Rng eval_rng(seed_, 0xe7a1);
  const Schedules sched = warmup_schedules(step_, tcfg_);
  std::vector<std::vector<std::size_t>> by_count(model_.config().max_atoms + 1);
  for (std::size_t i = 0; i < records.size(); ++i) by_count[records[i].material.atom_count()].push_back(i);
  LossParts total;
  for (const auto& members : by_count)
    for (std::size_t begin = 0; begin < members.size(); begin += chunk) {
      const std::size_t end = std::min(members.size(), begin + chunk);
      std::vector<const Material*> ms;
      std::vector<double> ys;
      std::vector<std::uint64_t> streams;
      for (std::size_t k = begin; k < end; ++k) {
        ms.push_back(&records[members[k]].material);
        ys.push_back(records[members[k]].property);
        streams.push_back(members[k]);
      }
      auto batch = MaterialBatch::build(ms, model_.config().vocab);
      nn::Graph g(false);
      nn::Context ctx{g, model_.params};
      total_loss(ctx, model_, batch, ys, streams, eval_rng, sched, tcfg_, fcfg_, &total);
    }
  return averaged(total);
}

LossParts Trainer::validate() const {
  const std::size_t n = std::min(tcfg_.val_records, val_.size());
  return evaluate(std::span<const MaterialRecord>(val_.data(), n));
}

void Trainer::run(std::size_t until, const std::function<void(const TrainLogRow&)>& log, double budget_seconds) {
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  LossParts window;
  while (step_ < until) {
    add_parts(window, [&] {
      LossParts p = step();
      p.atom *= p.records;
      p.flow *= p.records;
      p.pred *= p.records;
      p.kl *= p.records;
      p.total *= p.records;
      return p;
    }());
    const bool out_of_time = budget_seconds > 0.0 && elapsed() >= budget_seconds;
    const bool log_now = step_ % tcfg_.log_every == 0 || step_ == until || out_of_time;
    const bool val_now = !val_.empty() && (step_ % tcfg_.val_every == 0 || step_ == until || out_of_time);
    if (log && (log_now || val_now)) {
      TrainLogRow row;
      row.step = step_;
      row.train = averaged(window);
      row.sched = warmup_schedules(step_ - 1, tcfg_);
      if (val_now) {
        row.val_total = validate().total;
        row.has_val = true;
      }
      row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      log(row);
      window = {};
    }
    if (out_of_time) break;
  }
}

DataSplit split_dataset(std::vector<MaterialRecord> records, std::uint64_t seed) {
  Rng r(seed, 0x5b11);
  for (std::size_t i = records.size(); i > 1; --i) std::swap(records[i - 1], records[r.index(i)]);
  const std::size_t n = records.size();
  const std::size_t n_train = n * 60 / 100, n_val = n * 20 / 100;
  DataSplit s;
  s.train.assign(std::make_move_iterator(records.begin()), std::make_move_iterator(records.begin() + n_train));
  s.val.assign(std::make_move_iterator(records.begin() + n_train),
               std::make_move_iterator(records.begin() + n_train + n_val));
  s.test.assign(std::make_move_iterator(records.begin() + n_train + n_val), std::make_move_iterator(records.end()));
  return s;
}

}  // namespace cliqueflow
