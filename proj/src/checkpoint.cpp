#include "cliqueflow/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

#include "cliqueflow/config.hpp"
#include "cliqueflow/error.hpp"

namespace cliqueflow {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'C', 'L', 'Q', 'F', 'L', 'O', 'W', '\0'};

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Writer {
 public:
  template <typename T>
  void pod(T v) {
    const char* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void bytes(const void* p, std::size_t n) {
    const char* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  std::vector<char>& buffer() { return buf_; }

 private:
  std::vector<char> buf_;
};

class Cursor {
 public:
  Cursor(const std::vector<char>& buf, std::size_t end) : buf_(buf), end_(end) {}
  template <typename T>
  T pod(const char* what) {
    T v;
    need(sizeof(T), what);
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void read_doubles(double* out, std::size_t n, const char* what) {
    if (n > (end_ - pos_) / sizeof(double)) throw CorruptFileError(pos_, std::string("truncated ") + what);
    std::memcpy(out, buf_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (n > end_ - pos_) throw CorruptFileError(pos_, std::string("truncated ") + what);
  }
  const std::vector<char>& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

struct Entry {
  std::string name;
  nn::Shape shape;
  const nn::Tensor* data = nullptr;
};

}  // namespace

void save_checkpoint(const std::string& path, const CliqueFlowModel& model, const CheckpointMeta& meta,
                     const nn::Adam* adam) {
  std::vector<Entry> entries;
  model.params.for_each([&](const nn::Parameter& p) { entries.push_back({"param/" + p.name, p.value.shape(), &p.value}); });
  if (adam) {
    for (const auto& [name, t] : adam->first()) entries.push_back({"adam.m/" + name, t.shape(), &t});
    for (const auto& [name, t] : adam->second()) entries.push_back({"adam.v/" + name, t.shape(), &t});
  }
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.pod<std::uint32_t>(kCheckpointVersion);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
  for (const Entry& e : entries) {
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t d : e.shape) w.pod<std::uint64_t>(d);
  }
  for (const Entry& e : entries) w.bytes(e.data->data(), e.data->size() * sizeof(double));
  Json j = {{"model", to_json(model.config())},
            {"prior", to_json(model.prior)},
            {"train", to_json(meta.train)},
            {"flow", to_json(meta.flow)},
            {"seed", meta.seed},
            {"step", meta.step},
            {"adam_steps", adam ? adam->steps() : 0},
            {"has_optimizer", adam != nullptr},
            {"version", kCheckpointVersion}};
  const std::string text = canonical(j);
  w.pod<std::uint64_t>(text.size());
  w.bytes(text.data(), text.size());
  auto& buf = w.buffer();
  w.pod<std::uint64_t>(fnv1a(buf.data(), buf.size()));

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint '" + path + "'");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw Error("failed writing checkpoint '" + path + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error("cannot move checkpoint into place at '" + path + "'");
}

void save_checkpoint(const std::string& path, const Trainer& trainer) {
  CheckpointMeta meta{trainer.train_config(), trainer.flow_config(), trainer.seed(), trainer.current_step()};
  save_checkpoint(path, trainer.model(), meta, &trainer.adam());
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path + "'");
  const std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  Cursor head(buf, buf.size());
  if (head.str(sizeof(kMagic), "magic") != std::string(kMagic, sizeof(kMagic)))
    throw CorruptFileError(0, "not a checkpoint (bad magic)");
  const auto version = head.pod<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw VersionMismatchError("checkpoint format version " + std::to_string(version) + ", expected " +
                               std::to_string(kCheckpointVersion));
  if (buf.size() < sizeof(kMagic) + 4 + 8) throw CorruptFileError(buf.size(), "truncated checksum");
  const std::size_t body = buf.size() - sizeof(std::uint64_t);
  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + body, sizeof(stored));
  if (stored != fnv1a(buf.data(), body)) throw CorruptFileError(body, "checksum mismatch");

  Cursor c(buf, body);
  c.str(sizeof(kMagic), "magic");
  c.pod<std::uint32_t>("version");
  const auto count = c.pod<std::uint32_t>("entry count");
  struct Dir {
    std::string name;
    nn::Shape shape;
    std::size_t offset;
  };
  std::vector<Dir> dir;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = c.pos();
    const auto len = c.pod<std::uint32_t>("entry name length");
    std::string name = c.str(len, "entry name");
    const auto rank = c.pod<std::uint32_t>("entry rank");
    if (rank > 8) throw CorruptFileError(at, "implausible rank for '" + name + "'");
    nn::Shape shape(rank);
    for (auto& d : shape) d = c.pod<std::uint64_t>("entry dims");
    dir.push_back({std::move(name), std::move(shape), at});
  }
  std::vector<nn::Tensor> arrays;
  for (const Dir& d : dir) {
    std::size_t n = 1;
    for (std::size_t x : d.shape) n *= x;
    const std::size_t at = c.pos();
    if (n > (body - at) / sizeof(double)) throw CorruptFileError(at, "truncated array '" + d.name + "'");
    nn::Tensor t(d.shape);
    c.read_doubles(t.data(), n, "array");
    arrays.push_back(std::move(t));
  }
  const std::size_t json_at = c.pos();
  const auto jlen = c.pod<std::uint64_t>("config length");
  Json j;
  try {
    j = Json::parse(c.str(jlen, "config"));
  } catch (const Json::parse_error&) {
    throw CorruptFileError(json_at, "config block is not valid JSON");
  }
  if (c.pos() != body) throw CorruptFileError(c.pos(), "trailing bytes before checksum");

  LoadedCheckpoint out;
  try {
    const ModelConfig mc = model_config_from_json(j.at("model"));
    out.meta.train = train_config_from_json(j.at("train"));
    out.meta.flow = flow_config_from_json(j.at("flow"));
    out.meta.seed = j.at("seed").get<std::uint64_t>();
    out.meta.step = j.at("step").get<std::size_t>();
    out.adam_steps = j.at("adam_steps").get<std::size_t>();
    out.has_optimizer = j.at("has_optimizer").get<bool>();
    out.model = std::make_unique<CliqueFlowModel>(mc, 0);
    out.model->prior = length_prior_from_json(j.at("prior"));
  } catch (const Json::exception& e) {
    throw CorruptFileError(json_at, std::string("config block: ") + e.what());
  } catch (const ConfigError& e) {
    throw CorruptFileError(json_at, std::string("config block: ") + e.what());
  }

  std::size_t loaded = 0;
  for (std::size_t i = 0; i < dir.size(); ++i) {
    const std::string& name = dir[i].name;
    auto assign = [&](nn::Tensor& dst) {
      if (dst.shape() != dir[i].shape)
        throw CorruptFileError(dir[i].offset, "shape of '" + name + "' does not match the configured model");
      dst = std::move(arrays[i]);
    };
    if (name.rfind("param/", 0) == 0) {
      const std::string p = name.substr(6);
      if (!out.model->params.contains(p)) throw CorruptFileError(dir[i].offset, "unknown parameter '" + p + "'");
      assign(out.model->params.get(p).value);
      ++loaded;
    } else if (name.rfind("adam.m/", 0) == 0) {
      out.adam_m[name.substr(7)] = std::move(arrays[i]);
    } else if (name.rfind("adam.v/", 0) == 0) {
      out.adam_v[name.substr(7)] = std::move(arrays[i]);
    } else {
      throw CorruptFileError(dir[i].offset, "unknown entry '" + name + "'");
    }
  }
  if (loaded != out.model->params.count()) throw CorruptFileError(sizeof(kMagic) + 4, "checkpoint is missing parameters");
  return out;
}

void LoadedCheckpoint::restore(Trainer& trainer) const {
  trainer.set_step(meta.step);
  if (!has_optimizer) return;
  trainer.adam().first() = adam_m;
  trainer.adam().second() = adam_v;
  trainer.adam().set_steps(adam_steps);
}

}  // namespace cliqueflow
