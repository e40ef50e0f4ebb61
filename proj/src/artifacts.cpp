#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "multipath/errors.hpp"
#include "multipath/experiment.hpp"

#ifndef MULTIPATH_VERSION
#define MULTIPATH_VERSION "unknown"
#endif

namespace multipath {
inline namespace MULTIPATH_NUMERIC_NS {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

namespace {

constexpr char kCheckpointMagic[4] = {'M', 'P', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint32_t kByteOrderMark = 0x01020304;

class Writer {
 public:
  explicit Writer(const fs::path& path) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw FormatError("cannot write " + path.string());
  }
  template <typename T>
  void pod(const T& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void text(const std::string& s) {
    pod(static_cast<std::uint64_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  template <typename T>
  void array(const std::vector<T>& v) {
    pod(static_cast<std::uint64_t>(v.size()));
    out_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
  }
  void raw(const char* data, std::size_t n) { out_.write(data, static_cast<std::streamsize>(n)); }
  void finish(const fs::path& path) {
    out_.flush();
    if (!out_) throw FormatError("write failed for " + path.string());
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const fs::path& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    bytes_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  void need(std::size_t n) {
    if (offset_ + n > bytes_.size()) throw FormatError(path_.string() + ": truncated checkpoint");
  }
  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + offset_, sizeof v);
    offset_ += sizeof v;
    return v;
  }
  std::string text() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s(bytes_.data() + offset_, n);
    offset_ += n;
    return s;
  }
  template <typename T>
  std::vector<T> array() {
    const auto n = pod<std::uint64_t>();
    if (n > (bytes_.size() - offset_) / sizeof(T)) throw FormatError(path_.string() + ": truncated checkpoint");
    std::vector<T> v(n);
    std::memcpy(v.data(), bytes_.data() + offset_, n * sizeof(T));
    offset_ += n * sizeof(T);
    return v;
  }
  bool done() const { return offset_ == bytes_.size(); }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  fs::path path_;
  std::vector<char> bytes_;
  std::size_t offset_ = 0;
};

}  // namespace

void save_checkpoint(const Checkpoint& c, const fs::path& path) {
  Writer w(path);
  w.raw(kCheckpointMagic, 4);
  w.pod(kCheckpointVersion);
  w.pod(kByteOrderMark);
  w.pod(static_cast<std::uint32_t>(sizeof(real)));
  w.text(to_toml(c.config));
  w.text(config_digest(c.config));
  w.pod(c.iteration);
  w.text(c.rng_state);
  w.pod(c.window_loss);
  w.pod(c.window_steps);
  w.pod(static_cast<std::uint64_t>(c.parameters.size()));
  for (const auto& p : c.parameters) w.array(p);
  w.pod(static_cast<std::uint64_t>(c.moments.size()));
  for (const BatchNormState& s : c.moments) {
    w.pod(static_cast<std::uint8_t>(s.initialized));
    w.array(s.mean);
    w.array(s.var);
  }
  w.pod(static_cast<std::uint64_t>(c.momentum.size()));
  for (const auto& b : c.momentum) w.array(b);
  w.finish(path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  Reader r(path);
  r.need(4);
  if (std::memcmp(r.bytes().data(), kCheckpointMagic, 4) != 0)
    throw FormatError(path.string() + ": not a checkpoint (bad magic)");
  r.pod<std::uint32_t>();
  if (const auto v = r.pod<std::uint32_t>(); v != kCheckpointVersion)
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(v));
  if (r.pod<std::uint32_t>() != kByteOrderMark) throw FormatError(path.string() + ": byte-order mismatch");
  if (const auto bytes = r.pod<std::uint32_t>(); bytes != sizeof(real))
    throw FormatError(path.string() + ": checkpoint stores " + std::to_string(bytes * 8) +
                      "-bit values, this build uses " + std::to_string(sizeof(real) * 8));
  Checkpoint c;
  c.config = parse_config(r.text(), path.string() + "#config");
  const std::string digest = r.text();
  if (digest != config_digest(c.config))
    throw FormatError(path.string() + ": config digest mismatch");
  c.iteration = r.pod<std::uint64_t>();
  c.rng_state = r.text();
  c.window_loss = r.pod<double>();
  c.window_steps = r.pod<std::uint64_t>();
  const auto params = r.pod<std::uint64_t>();
  for (std::uint64_t p = 0; p < params; ++p) c.parameters.push_back(r.array<real>());
  const auto moments = r.pod<std::uint64_t>();
  for (std::uint64_t m = 0; m < moments; ++m) {
    BatchNormState s;
    s.initialized = r.pod<std::uint8_t>() != 0;
    s.mean = r.array<double>();
    s.var = r.array<double>();
    c.moments.push_back(std::move(s));
  }
  const auto buffers = r.pod<std::uint64_t>();
  for (std::uint64_t b = 0; b < buffers; ++b) c.momentum.push_back(r.array<real>());
  if (!r.done()) throw FormatError(path.string() + ": trailing bytes after checkpoint");
  return c;
}

MultipathNetwork restore_network(const Checkpoint& c) {
  MultipathNetwork net = build_network(c.config.architecture);
  const auto params = net.parameters();
  if (params.size() != c.parameters.size())
    throw FormatError("checkpoint: " + std::to_string(c.parameters.size()) +
                      " parameter tensors, architecture has " + std::to_string(params.size()));
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor t = params[p].tensor;
    if (t.numel() != c.parameters[p].size())
      throw FormatError("checkpoint: size mismatch for " + params[p].id);
    std::copy(c.parameters[p].begin(), c.parameters[p].end(), t.data().begin());
  }
  auto states = net.batchnorm_states();
  if (states.size() != c.moments.size()) throw FormatError("checkpoint: batch-norm state count mismatch");
  for (std::size_t s = 0; s < states.size(); ++s) *states[s] = c.moments[s];
  return net;
}

namespace {

std::string dataset_file(const DataConfig& data, const std::string& split) {
  return data.kind + "-" + split + ".mpds";
}

ordered_json data_signature(const DataConfig& data) {
  ordered_json j;
  j["kind"] = data.kind;
  j["seed"] = data.seed;
  j["validation_fraction"] = format_number(data.validation_fraction);
  j["train_size"] = data.train_size;
  j["validation_size"] = data.validation_size;
  j["test_size"] = data.test_size;
  return j;
}

}  // namespace

PreparedData prepare_data(const DataConfig& data) {
  const DatasetKind kind = parse_dataset_kind(data.kind);
  const SourceFiles files = SourceFiles::under(resolve_source_dir(data));
  const auto missing = files.missing(kind == DatasetKind::hybrid);
  if (!missing.empty()) {
    std::string list;
    for (const auto& p : missing) list += "\n  " + p.string();
    throw FormatError("missing dataset source files:" + list);
  }
  const RawImages cifar_train = load_cifar(files.cifar_train);
  const RawImages cifar_test = load_cifar(std::span(&files.cifar_test, 1));
  Dataset train, test;
  if (kind == DatasetKind::hybrid) {
    train = build_hybrid(load_mnist(files.mnist_train_images, files.mnist_train_labels), cifar_train,
                         data.seed);
    test = build_hybrid(load_mnist(files.mnist_test_images, files.mnist_test_labels), cifar_test,
                        splitmix64(data.seed));
  } else {
    train = relabel_cifar(cifar_train, kind, data.seed);
    test = relabel_cifar(cifar_test, kind, splitmix64(data.seed));
  }
  DatasetSplits splits = split_dataset(std::move(train), std::move(test), data.validation_fraction,
                                       data.train_size, data.validation_size, data.test_size,
                                       data.seed);
  return {std::move(splits.train), std::move(splits.validation), std::move(splits.test)};
}

void write_prepared(const PreparedData& prepared, const DataConfig& data, const fs::path& directory) {
  fs::create_directories(directory);
  save_dataset(prepared.train, directory / dataset_file(data, "train"));
  save_dataset(prepared.validation, directory / dataset_file(data, "validation"));
  save_dataset(prepared.test, directory / dataset_file(data, "test"));
  ordered_json sidecar;
  sidecar["format"] = "MPDS v1: label byte, origin byte (0 mnist, 1 cifar), 3072 samples round(255*v)";
  sidecar["settings"] = data_signature(data);
  sidecar["class_names"] = prepared.train.class_names;
  sidecar["counts"] = {{"train", prepared.train.size()},
                       {"validation", prepared.validation.size()},
                       {"test", prepared.test.size()}};
  sidecar["sources"] = resolve_source_dir(data).string();
  std::ofstream out(directory / (data.kind + ".json"));
  out << sidecar.dump(2) << "\n";
  if (!out) throw FormatError("cannot write dataset sidecar in " + directory.string());
}

PreparedData load_prepared(const DataConfig& data, const fs::path& directory) {
  const fs::path sidecar_path = directory / (data.kind + ".json");
  std::ifstream in(sidecar_path);
  if (!in)
    throw FormatError("dataset cache not found at " + sidecar_path.string() +
                      " (run prepare-data first)");
  ordered_json sidecar;
  try {
    sidecar = ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(sidecar_path.string() + ": " + e.what());
  }
  if (sidecar.value("settings", ordered_json{}) != data_signature(data))
    throw ConfigError("data", "cache in " + directory.string() +
                                  " was prepared with different data settings");
  PreparedData out;
  out.train = load_dataset(directory / dataset_file(data, "train"));
  out.validation = load_dataset(directory / dataset_file(data, "validation"));
  out.test = load_dataset(directory / dataset_file(data, "test"));
  out.train.kind = out.validation.kind = out.test.kind = data.kind;
  return out;
}

std::string provenance_json(const ExperimentConfig& config, const std::vector<std::string>& overrides,
                            const std::string& command) {
  ordered_json j;
  j["command"] = command;
  j["version"] = MULTIPATH_VERSION;
  j["precision_bits"] = sizeof(real) * 8;
  j["profile"] = config.profile;
  j["config_digest"] = config_digest(config);
  j["seeds"] = {{"train", std::to_string(config.train.seed)}, {"data", std::to_string(config.data.seed)}};
  j["overrides"] = overrides;
  ordered_json h;
  h["strategy"] = std::string(to_string(config.strategy));
  h["n_ex"] = std::to_string(config.optim.batch_size);
  h["base_learning_rate"] = format_number(config.optim.base_learning_rate);
  h["initial_learning_rate"] = format_number(config.optim.initial_learning_rate());
  h["momentum"] = format_number(config.optim.momentum);
  h["lr_half_life"] = format_number(config.optim.lr_half_life);
  h["temperature_half_life"] = format_number(config.optim.temperature_half_life);
  h["actor_temperature"] = format_number(config.optim.actor_temperature);
  h["critic_temperature"] = format_number(config.optim.critic_temperature);
  h["k_dec"] = format_number(config.regularizer.k_dec);
  h["k_ure"] = format_number(config.regularizer.k_ure);
  h["k_L2"] = format_number(config.regularizer.k_L2);
  h["batchnorm_epsilon"] = format_number(config.architecture.batchnorm_epsilon);
  h["batchnorm_decay"] = format_number(config.architecture.batchnorm_decay);
  h["k_cpt"] = format_number(config.cost.k_cpt);
  h["iterations"] = std::to_string(config.train.iterations);
  h["talr"] = config.optim.talr ? "true" : "false";
  j["hyperparameters"] = h;
  ordered_json fields;
  for (const auto& [path, value] : config_fields(config)) fields[path] = value;
  j["config"] = fields;
  return j.dump(2) + "\n";
}

std::string report_json(const EvalReport& report) {
  ordered_json j;
  j["examples"] = report.examples;
  j["k_cpt"] = report.k_cpt;
  j["accuracy"] = report.accuracy;
  j["mean_ops"] = report.mean_ops;
  j["expected_cinf"] = report.expected_cinf;
  j["class_names"] = report.class_names;
  j["terminals"] = ordered_json::array();
  for (const TerminalStats& t : report.terminals) {
    j["terminals"].push_back({{"node", t.node},
                              {"fraction", t.fraction},
                              {"count", t.count},
                              {"accuracy", t.accuracy},
                              {"mnist_fraction", t.mnist_fraction},
                              {"cifar_fraction", t.cifar_fraction},
                              {"class_fraction", t.class_fraction}});
  }
  j["junctions"] = ordered_json::array();
  for (const JunctionStats& s : report.junctions)
    j["junctions"].push_back(
        {{"node", s.node}, {"visits", s.visits}, {"decision_frequency", s.decision_frequency}});
  return j.dump(2) + "\n";
}

std::string curve_csv(const std::vector<CurvePoint>& points) {
  std::string out = "k_cpt,mean_ops,accuracy,strategy\n";
  for (const CurvePoint& p : points)
    out += format_number(p.k_cpt) + "," + format_number(p.mean_ops) + "," +
           format_number(p.accuracy) + "," + p.strategy + "\n";
  return out;
}

std::string curve_json(const std::vector<CurvePoint>& points) {
  ordered_json j = ordered_json::array();
  for (const CurvePoint& p : points)
    j.push_back({{"k_cpt", p.k_cpt},
                 {"mean_ops", p.mean_ops},
                 {"accuracy", p.accuracy},
                 {"strategy", p.strategy},
                 {"columns", p.columns}});
  return j.dump(2) + "\n";
}

}  // namespace MULTIPATH_NUMERIC_NS
}  // namespace multipath
