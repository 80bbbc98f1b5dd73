#include <cstdio>
#include <filesystem>
#include <fstream>

#include <doctest.h>

#include "cliqueflow/checkpoint.hpp"
#include "cliqueflow/config.hpp"
#include "cliqueflow/error.hpp"
#include "cliqueflow/toy.hpp"

using namespace cliqueflow;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("cliqueflow_test_" + name)).string();
}

ModelConfig small_model() {
  ModelConfig mc;
  mc.transformer.d_model = 16;
  mc.transformer.n_heads = 2;
  mc.transformer.mlp_dim = 16;
  mc.transformer.n_blocks = 1;
  mc.max_atoms = 6;
  mc.vocab.species = 5;
  return mc;
}

std::vector<MaterialRecord> small_data(std::size_t n, std::uint64_t seed) {
  OracleSpec spec;
  Rng rng(seed);
  spec.weights = random_weights(5, rng);
  ToyDataConfig dc;
  dc.max_atoms = 6;
  dc.vocab.species = 5;
  return generate_dataset(n, spec, dc, rng.split(1));
}

}  // namespace

TEST_CASE("run config: round trip, profiles, unknown keys") {
  RunConfig c = RunConfig::for_profile(Profile::kDesk);
  c.seed = 77;
  c.es.decay = 0.2;
  c.model.transformer.d_model = 32;
  const Json j = to_json(c);
  const RunConfig back = run_config_from_json(j);
  CHECK(to_json(back) == j);
  CHECK(config_hash(j) == config_hash(to_json(back)));

  Json paper = {{"profile", "paper"}};
  CHECK(run_config_from_json(paper).model.transformer.d_model == 256);
  CHECK(run_config_from_json(paper).train.batch_size == 1024);

  Json bad = j;
  bad["es"]["sigmaa"] = 0.1;
  try {
    run_config_from_json(bad);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("es.sigmaa") != std::string::npos);
  }
  Json wrong_type = {{"train", {{"batch_size", -3}}}};
  CHECK_THROWS_AS(run_config_from_json(wrong_type), ConfigError);
  Json bad_range = {{"es", {{"decay", 1.0}}}};
  CHECK_THROWS_AS(run_config_from_json(bad_range), ConfigError);
  CHECK_THROWS_AS(profile_from_string("laptop"), ConfigError);
}

TEST_CASE("config hash is FNV-1a of the canonical text") {
  const Json j = {{"b", 1}, {"a", "x"}};
  CHECK(canonical(j) == R"({"a":"x","b":1})");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : std::string(R"({"a":"x","b":1})")) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  CHECK(config_hash(j) == h);
  CHECK(hex64(0xabcULL) == "0000000000000abc");
}

TEST_CASE("checkpoint: save, load, evaluate identically, resume bit-exactly") {
  const auto data = small_data(40, 3);
  const std::vector<MaterialRecord> train(data.begin(), data.begin() + 30), val(data.begin() + 30, data.end());
  TrainConfig tc;
  tc.batch_size = 8;
  tc.warmup = 4;
  tc.gradient_steps = 20;
  FlowConfig fc;

  CliqueFlowModel straight(small_model(), 1);
  straight.prior = fit_length_prior(train);
  Trainer a(straight, tc, fc, 9);
  a.set_data(train, val);
  for (int i = 0; i < 6; ++i) a.step();

  const std::string path = temp_path("resume.ckpt");
  save_checkpoint(path, a);
  LoadedCheckpoint ck = load_checkpoint(path);
  CHECK(ck.meta.step == 6);
  CHECK(ck.model->prior == straight.prior);
  CHECK(ck.model->config().shape.d_z() == straight.config().shape.d_z());

  Trainer b(*ck.model, ck.meta.train, ck.meta.flow, ck.meta.seed);
  b.set_data(train, val);
  ck.restore(b);
  CHECK(b.evaluate(val).total == a.evaluate(val).total);

  for (int i = 0; i < 4; ++i) {
    const LossParts pa = a.step(), pb = b.step();
    INFO("resume step " << i);
    CHECK(pa.total == pb.total);
  }
  bool same = true;
  straight.params.for_each([&](const nn::Parameter& p) { same = same && ck.model->params.get(p.name).value == p.value; });
  CHECK(same);
  std::remove(path.c_str());
}

TEST_CASE("checkpoint: version mismatch and corruption") {
  CliqueFlowModel m(small_model(), 2);
  const std::string path = temp_path("corrupt.ckpt");
  save_checkpoint(path, m, CheckpointMeta{});

  std::vector<char> bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  auto write = [&](const std::vector<char>& b) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
  };

  auto v = bytes;
  v[8] = 7;
  write(v);
  CHECK_THROWS_AS(load_checkpoint(path), VersionMismatchError);

  v = bytes;
  v[0] = 'X';
  write(v);
  CHECK_THROWS_AS(load_checkpoint(path), CorruptFileError);

  v = bytes;
  v[bytes.size() / 2] ^= 0x10;
  write(v);
  try {
    load_checkpoint(path);
    FAIL("expected CorruptFileError");
  } catch (const CorruptFileError& e) {
    CHECK(e.offset() == bytes.size() - 8);
  }

  v.assign(bytes.begin(), bytes.begin() + 100);
  write(v);
  CHECK_THROWS_AS(load_checkpoint(path), CorruptFileError);

  write(bytes);
  CHECK_NOTHROW(load_checkpoint(path));
  std::remove(path.c_str());
}

TEST_CASE("training is deterministic for a fixed seed") {
  const auto data = small_data(40, 3);
  const std::vector<MaterialRecord> train(data.begin(), data.begin() + 30), val(data.begin() + 30, data.end());
  TrainConfig tc;
  tc.batch_size = 8;
  tc.warmup = 4;
  tc.gradient_steps = 20;
  CliqueFlowModel m1(small_model(), 1), m2(small_model(), 1);
  m1.prior = m2.prior = fit_length_prior(train);
  Trainer a(m1, tc, {}, 9), b(m2, tc, {}, 9);
  a.set_data(train, val);
  b.set_data(train, val);
  for (int i = 0; i < 10; ++i) {
    INFO("step " << i);
    CHECK(a.step().total == b.step().total);
  }
}
