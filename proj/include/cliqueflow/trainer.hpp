#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "cliqueflow/model.hpp"
#include "cliqueflow/nn/adam.hpp"

namespace cliqueflow {

struct TrainConfig {
  std::size_t gradient_steps = 20000;
  std::size_t batch_size = 64;
  double learning_rate = 1.4e-4;
  std::size_t warmup = 2000;
  double beta_limit = 1e-4;
  double tau_pred_limit = 1.0;
  double tau_pred_init = 1e-4;
  double temp_atom = 1.0;
  std::size_t log_every = 100;
  std::size_t val_every = 500;
  std::size_t val_records = 256;
  // Batches are split into this many shards whose gradients are summed in shard order.
  std::size_t shards = 1;

  void validate() const;
  // Fits 20 minutes on one core; the larger rate compensates for the short schedule.
  static TrainConfig desk() {
    TrainConfig c;
    c.gradient_steps = 5000;
    c.learning_rate = 1e-3;
    c.warmup = 300;
    return c;
  }
  static TrainConfig paper() {
    TrainConfig c;
    c.gradient_steps = 700000;
    c.batch_size = 1024;
    c.warmup = 100000;
    return c;
  }
};

struct Schedules {
  double beta = 0.0;
  double tau_pred = 0.0;
};

// beta: 0 -> beta_limit over [0, warmup]; tau_pred: init -> limit over [warmup, 2 warmup].
Schedules warmup_schedules(std::size_t step, const TrainConfig& cfg);

struct LossParts {
  double atom = 0.0;
  double flow = 0.0;
  double pred = 0.0;
  double kl = 0.0;
  double total = 0.0;
  std::size_t records = 0;
};

// Batch-mean loss temp_atom*L_atom + L_flow + tau_pred*(f(z)-y)^2 + beta*KL_c.
// Record b draws its latent noise, clique, time, prior sample and latent mask
// from rng.split(streams[b]); `weight` rescales the returned scalar.
nn::Var total_loss(nn::Context& ctx, const CliqueFlowModel& model, const MaterialBatch& batch,
                   std::span<const double> properties, std::span<const std::uint64_t> streams, const Rng& rng,
                   const Schedules& sched, const TrainConfig& tcfg, const FlowConfig& fcfg, LossParts* parts = nullptr,
                   double weight = 1.0);

struct TrainLogRow {
  std::size_t step = 0;
  LossParts train;
  Schedules sched;
  double val_total = 0.0;
  bool has_val = false;
  double wall_ms = 0.0;
};

class Trainer {
 public:
  Trainer(CliqueFlowModel& model, const TrainConfig& tcfg, const FlowConfig& fcfg, std::uint64_t seed);

  void set_data(std::vector<MaterialRecord> train, std::vector<MaterialRecord> val);
  // One Adam update on the batch drawn for the current step.
  LossParts step();
  // Steps until `until` (exclusive upper bound on the step counter), logging every log_every steps.
  // A positive budget stops early once that much wall time has passed.
  void run(std::size_t until, const std::function<void(const TrainLogRow&)>& log = {}, double budget_seconds = 0.0);
  // Deterministic evaluation without dropout, mean over records.
  LossParts evaluate(std::span<const MaterialRecord> records, std::size_t chunk = 64) const;
  LossParts validate() const;

  std::size_t current_step() const { return step_; }
  void set_step(std::size_t s) { step_ = s; }
  std::uint64_t seed() const { return seed_; }
  nn::Adam& adam() { return adam_; }
  const nn::Adam& adam() const { return adam_; }
  const CliqueFlowModel& model() const { return model_; }
  const TrainConfig& train_config() const { return tcfg_; }
  const FlowConfig& flow_config() const { return fcfg_; }
  // Record indices used at a given step; a pure function of (seed, step).
  std::vector<std::size_t> batch_indices(std::size_t step) const;

 private:
  CliqueFlowModel& model_;
  TrainConfig tcfg_;
  FlowConfig fcfg_;
  std::uint64_t seed_;
  std::size_t step_ = 0;
  nn::Adam adam_;
  std::vector<MaterialRecord> train_, val_;
  std::vector<std::vector<std::size_t>> buckets_;
};

struct DataSplit {
  std::vector<MaterialRecord> train, val, test;
};
// Seeded shuffle, then 60/20/20.
DataSplit split_dataset(std::vector<MaterialRecord> records, std::uint64_t seed);

}  // namespace cliqueflow
