#include "multipath/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#include "multipath/data.hpp"
#include "multipath/errors.hpp"

namespace multipath {
inline namespace MULTIPATH_NUMERIC_NS {

std::vector<double> default_kcpt_sweep() {
  std::vector<double> out{0.0};
  for (int k = 0; k <= 6; ++k) out.push_back(1e-9 * static_cast<double>(1 << k));
  return out;
}

std::string format_number(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

std::size_t class_count(std::string_view dataset_kind) {
  switch (parse_dataset_kind(dataset_kind)) {
    case DatasetKind::hybrid:
    case DatasetKind::cifar10: return 10;
    case DatasetKind::cifar2: return 2;
    case DatasetKind::cifar5: return 5;
  }
  return 0;
}

namespace {

std::string_view to_string(CriticMode mode) {
  return mode == CriticMode::sampled ? "sampled" : "marginal";
}

std::string quote(const std::string& s) {
  std::ostringstream out;
  out << toml::value<std::string>(s);
  return out.str();
}

double read_double(const toml::node& node, const std::string& path) {
  if (auto v = node.value_exact<double>()) return *v;
  if (auto v = node.value_exact<std::int64_t>()) return static_cast<double>(*v);
  throw ConfigError(path, "expected a number");
}

std::int64_t read_integer(const toml::node& node, const std::string& path) {
  if (auto v = node.value_exact<std::int64_t>()) return *v;
  throw ConfigError(path, "expected an integer");
}

std::uint64_t read_count(const toml::node& node, const std::string& path) {
  const std::int64_t v = read_integer(node, path);
  if (v < 0) throw ConfigError(path, "must be non-negative");
  return static_cast<std::uint64_t>(v);
}

bool read_bool(const toml::node& node, const std::string& path) {
  if (auto v = node.value_exact<bool>()) return *v;
  throw ConfigError(path, "expected true or false");
}

std::string read_string(const toml::node& node, const std::string& path) {
  if (auto v = node.value_exact<std::string>()) return *v;
  throw ConfigError(path, "expected a string");
}

std::vector<double> read_doubles(const toml::node& node, const std::string& path) {
  const toml::array* arr = node.as_array();
  if (!arr) throw ConfigError(path, "expected an array of numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < arr->size(); ++i)
    out.push_back(read_double(*arr->get(i), path + "[" + std::to_string(i) + "]"));
  return out;
}

std::string render_doubles(const std::vector<double>& values) {
  std::string out = "[";
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ", ";
    out += format_number(values[i]);
  }
  return out + "]";
}

struct Field {
  std::string path;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const toml::node&, const std::string&)> set;
};

template <typename Member>
Field number_field(std::string path, Member member) {
  return {std::move(path),
          [member](const ExperimentConfig& c) { return format_number(member(c)); },
          [member](ExperimentConfig& c, const toml::node& n, const std::string& p) {
            member(c) = read_double(n, p);
          }};
}

template <typename Member>
Field count_field(std::string path, Member member) {
  return {std::move(path),
          [member](const ExperimentConfig& c) {
            return std::to_string(member(c));
          },
          [member](ExperimentConfig& c, const toml::node& n, const std::string& p) {
            using T = std::remove_reference_t<decltype(member(c))>;
            const std::uint64_t v = read_count(n, p);
            member(c) = static_cast<T>(v);
          }};
}

template <typename Member>
Field bool_field(std::string path, Member member) {
  return {std::move(path),
          [member](const ExperimentConfig& c) {
            return std::string(member(c) ? "true" : "false");
          },
          [member](ExperimentConfig& c, const toml::node& n, const std::string& p) {
            member(c) = read_bool(n, p);
          }};
}

template <typename Member>
Field string_field(std::string path, Member member) {
  return {std::move(path),
          [member](const ExperimentConfig& c) { return quote(member(c)); },
          [member](ExperimentConfig& c, const toml::node& n, const std::string& p) {
            member(c) = read_string(n, p);
          }};
}

template <typename Member>
Field list_field(std::string path, Member member) {
  return {std::move(path),
          [member](const ExperimentConfig& c) {
            return render_doubles(member(c));
          },
          [member](ExperimentConfig& c, const toml::node& n, const std::string& p) {
            member(c) = read_doubles(n, p);
          }};
}

#define MP_MEMBER(expr) [](auto& c) -> auto& { return c.expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> all = [] {
    std::vector<Field> f;
    f.push_back({"strategy", [](const ExperimentConfig& c) { return quote(std::string(to_string(c.strategy))); },
                 [](ExperimentConfig& c, const toml::node& n, const std::string& p) {
                   try {
                     c.strategy = parse_strategy(read_string(n, p));
                   } catch (const ArgumentError& e) {
                     throw ConfigError(p, e.what());
                   }
                 }});
    f.push_back(count_field("architecture.columns", MP_MEMBER(architecture.columns)));
    f.push_back(count_field("architecture.base_width", MP_MEMBER(architecture.base_width)));
    f.push_back(count_field("architecture.growth", MP_MEMBER(architecture.growth)));
    f.push_back(count_field("architecture.image_size", MP_MEMBER(architecture.image_size)));
    f.push_back(count_field("architecture.routing_hidden", MP_MEMBER(architecture.routing_hidden)));
    f.push_back(bool_field("architecture.accepts_kcpt", MP_MEMBER(architecture.accepts_kcpt)));
    f.push_back(bool_field("architecture.allow_any_column_count",
                           MP_MEMBER(architecture.allow_any_column_count)));
    f.push_back(string_field("architecture.tree", MP_MEMBER(architecture.tree)));
    f.push_back(number_field("architecture.batchnorm_epsilon", MP_MEMBER(architecture.batchnorm_epsilon)));
    f.push_back(number_field("architecture.batchnorm_decay", MP_MEMBER(architecture.batchnorm_decay)));

    f.push_back(string_field("data.kind", MP_MEMBER(data.kind)));
    f.push_back(string_field("data.source_dir", MP_MEMBER(data.source_dir)));
    f.push_back(string_field("data.cache_dir", MP_MEMBER(data.cache_dir)));
    f.push_back(count_field("data.train_size", MP_MEMBER(data.train_size)));
    f.push_back(count_field("data.validation_size", MP_MEMBER(data.validation_size)));
    f.push_back(count_field("data.test_size", MP_MEMBER(data.test_size)));
    f.push_back(number_field("data.validation_fraction", MP_MEMBER(data.validation_fraction)));
    f.push_back(count_field("data.seed", MP_MEMBER(data.seed)));
    f.push_back(bool_field("data.augment", MP_MEMBER(data.augment)));

    f.push_back(count_field("optim.batch_size", MP_MEMBER(optim.batch_size)));
    f.push_back(number_field("optim.base_learning_rate", MP_MEMBER(optim.base_learning_rate)));
    f.push_back(number_field("optim.momentum", MP_MEMBER(optim.momentum)));
    f.push_back(number_field("optim.lr_half_life", MP_MEMBER(optim.lr_half_life)));
    f.push_back(number_field("optim.actor_temperature", MP_MEMBER(optim.actor_temperature)));
    f.push_back(number_field("optim.critic_temperature", MP_MEMBER(optim.critic_temperature)));
    f.push_back(number_field("optim.temperature_half_life", MP_MEMBER(optim.temperature_half_life)));
    f.push_back(bool_field("optim.talr", MP_MEMBER(optim.talr)));

    f.push_back(number_field("regularizer.k_L2", MP_MEMBER(regularizer.k_L2)));
    f.push_back(number_field("regularizer.k_dec", MP_MEMBER(regularizer.k_dec)));
    f.push_back(number_field("regularizer.k_ure", MP_MEMBER(regularizer.k_ure)));

    f.push_back(number_field("cost.k_cpt", MP_MEMBER(cost.k_cpt)));
    f.push_back(bool_field("cost.sample_per_example", MP_MEMBER(cost.sample_per_example)));
    f.push_back(list_field("cost.k_cpt_set", MP_MEMBER(cost.k_cpt_set)));

    f.push_back(count_field("train.iterations", MP_MEMBER(train.iterations)));
    f.push_back(count_field("train.metrics_interval", MP_MEMBER(train.metrics_interval)));
    f.push_back(count_field("train.checkpoint_interval", MP_MEMBER(train.checkpoint_interval)));
    f.push_back(count_field("train.seed", MP_MEMBER(train.seed)));
    f.push_back({"train.critic_mode",
                 [](const ExperimentConfig& c) { return quote(std::string(to_string(c.train.critic_mode))); },
                 [](ExperimentConfig& c, const toml::node& n, const std::string& p) {
                   const std::string v = read_string(n, p);
                   if (v == "marginal") c.train.critic_mode = CriticMode::marginal;
                   else if (v == "sampled") c.train.critic_mode = CriticMode::sampled;
                   else throw ConfigError(p, "expected \"marginal\" or \"sampled\", got \"" + v + "\"");
                 }});
    f.push_back(count_field("train.eval_batch", MP_MEMBER(train.eval_batch)));

    f.push_back(list_field("sweep.k_cpt", MP_MEMBER(sweep.k_cpt)));
    f.push_back(count_field("sweep.static_max_columns", MP_MEMBER(sweep.static_max_columns)));
    f.push_back(bool_field("sweep.include_static", MP_MEMBER(sweep.include_static)));
    return f;
  }();
  return all;
}

#undef MP_MEMBER

const Field& find_field(const std::string& path) {
  for (const Field& f : fields())
    if (f.path == path) return f;
  throw ConfigError(path, "unknown key");
}

void sync_derived(ExperimentConfig& c) {
  c.architecture.statically_routed = c.strategy == Strategy::static_baseline;
  try {
    c.architecture.classes = static_cast<int>(class_count(c.data.kind));
  } catch (const ArgumentError& e) {
    throw ConfigError("data.kind", e.what());
  }
}

void apply_table(ExperimentConfig& config, const toml::table& table, const std::string& prefix) {
  for (const auto& [key, node] : table) {
    const std::string path = prefix.empty() ? std::string(key.str()) : prefix + "." + std::string(key.str());
    if (path == "profile") continue;
    if (const toml::table* sub = node.as_table()) {
      apply_table(config, *sub, path);
      continue;
    }
    find_field(path).set(config, node, path);
  }
}

toml::table parse_toml(std::string_view text, std::string_view source) {
  try {
    return toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    std::ostringstream where;
    where << source << ":" << e.source().begin.line << ":" << e.source().begin.column;
    throw ConfigError(where.str(), std::string(e.description()));
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  if (profile != "desk" && profile != "paper")
    throw ConfigError("profile", "expected \"desk\" or \"paper\"");
  const ArchitectureSchedule& a = architecture;
  if (a.columns < 1) throw ConfigError("architecture.columns", "must be at least 1");
  if ((a.columns > 8) && !a.allow_any_column_count)
    throw ConfigError("architecture.columns",
                      "must lie in 1..8 unless architecture.allow_any_column_count is set");
  if (a.base_width < 1) throw ConfigError("architecture.base_width", "must be at least 1");
  if (a.growth < 1) throw ConfigError("architecture.growth", "must be at least 1");
  if (a.image_size != 32) throw ConfigError("architecture.image_size", "images are 32x32");
  if (a.routing_hidden < 1) throw ConfigError("architecture.routing_hidden", "must be at least 1");
  if (!(a.batchnorm_epsilon > 0)) throw ConfigError("architecture.batchnorm_epsilon", "must be positive");
  if (!(a.batchnorm_decay >= 0 && a.batchnorm_decay < 1))
    throw ConfigError("architecture.batchnorm_decay", "must lie in [0,1)");
  if (a.statically_routed && !a.tree.empty())
    throw ConfigError("architecture.tree", "a statically-routed network is a plain chain");
  if (!a.tree.empty()) {
    try {
      TreeSchedule::parse(a.tree);
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError("architecture.tree", e.what());
    }
  }

  class_count(data.kind);
  if (!(data.validation_fraction > 0 && data.validation_fraction < 1))
    throw ConfigError("data.validation_fraction", "must lie strictly between 0 and 1");

  optim.validate();

  if (regularizer.k_L2 < 0) throw ConfigError("regularizer.k_L2", "must be non-negative");
  if (regularizer.k_dec < 0) throw ConfigError("regularizer.k_dec", "must be non-negative");
  if (regularizer.k_ure < 0) throw ConfigError("regularizer.k_ure", "must be non-negative");

  if (!(cost.k_cpt >= 0)) throw ConfigError("cost.k_cpt", "must be non-negative");
  for (double k : cost.k_cpt_set)
    if (!(k >= 0)) throw ConfigError("cost.k_cpt_set", "values must be non-negative");
  if (cost.sample_per_example) {
    if (cost.k_cpt_set.empty()) throw ConfigError("cost.k_cpt_set", "required when sampling k_cpt per example");
    if (!a.accepts_kcpt)
      throw ConfigError("architecture.accepts_kcpt",
                        "per-example k_cpt needs routing subnetworks conditioned on k_cpt");
  }

  if (train.iterations < 1) throw ConfigError("train.iterations", "must be at least 1");
  if (train.metrics_interval < 1) throw ConfigError("train.metrics_interval", "must be at least 1");
  if (train.eval_batch < 1) throw ConfigError("train.eval_batch", "must be at least 1");
  if (train.critic_mode == CriticMode::sampled && strategy == Strategy::optimistic_critic)
    throw ConfigError("train.critic_mode",
                      "the optimistic critic needs every terminal's error; use marginal mode");

  for (double k : sweep.k_cpt)
    if (!(k >= 0)) throw ConfigError("sweep.k_cpt", "values must be non-negative");
  if (sweep.static_max_columns < 1) throw ConfigError("sweep.static_max_columns", "must be at least 1");
}

ExperimentConfig profile_config(std::string_view name) {
  ExperimentConfig c;
  c.sweep.k_cpt = default_kcpt_sweep();
  c.cost.k_cpt_set = default_kcpt_sweep();
  if (name == "desk") {
    c.profile = "desk";
    // Same decay over 2,000 iterations as the published schedule over 80,000.
    c.optim.lr_half_life = 250;
    c.optim.temperature_half_life = 250;
  } else if (name == "paper") {
    c.profile = "paper";
    c.architecture.columns = 8;
    c.train.iterations = 80000;
    c.train.checkpoint_interval = 5000;
    c.data.train_size = 0;
    c.data.validation_size = 0;
  } else {
    throw ConfigError("profile", "unknown profile '" + std::string(name) + "' (expected desk or paper)");
  }
  sync_derived(c);
  return c;
}

ExperimentConfig parse_config(std::string_view text, std::string_view source) {
  const toml::table table = parse_toml(text, source);
  std::string profile = "desk";
  if (const toml::node* p = table.get("profile")) profile = read_string(*p, "profile");
  ExperimentConfig config = profile_config(profile);
  apply_table(config, table, "");
  sync_derived(config);
  config.validate();
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.string());
}

void apply_override(ExperimentConfig& config, std::string_view path, std::string_view value) {
  const std::string key(path);
  if (key == "profile") throw ConfigError("profile", "select the profile in the config file");
  const Field& field = find_field(key);
  toml::table parsed;
  try {
    parsed = toml::parse("v = " + std::string(value));
  } catch (const toml::parse_error&) {
    parsed = toml::table{};
    parsed.insert("v", std::string(value));
  }
  field.set(config, *parsed.get("v"), key);
  sync_derived(config);
}

void apply_override(ExperimentConfig& config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0)
    throw ConfigError(std::string(assignment), "override must have the form path=value");
  apply_override(config, assignment.substr(0, eq), assignment.substr(eq + 1));
}

std::vector<std::pair<std::string, std::string>> config_fields(const ExperimentConfig& config) {
  std::vector<std::pair<std::string, std::string>> out;
  out.emplace_back("profile", quote(config.profile));
  for (const Field& f : fields()) out.emplace_back(f.path, f.get(config));
  return out;
}

std::string to_toml(const ExperimentConfig& config) {
  std::string out;
  std::string section;
  for (const auto& [path, value] : config_fields(config)) {
    const auto dot = path.find('.');
    const std::string s = dot == std::string::npos ? "" : path.substr(0, dot);
    const std::string key = dot == std::string::npos ? path : path.substr(dot + 1);
    if (s != section) {
      out += "\n[" + s + "]\n";
      section = s;
    }
    out += key + " = " + value + "\n";
  }
  return out;
}

std::string config_digest(const ExperimentConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_toml(config)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::filesystem::path resolve_source_dir(const DataConfig& data) {
  if (!data.source_dir.empty()) return data.source_dir;
  if (const char* env = std::getenv("MULTIPATH_DATA_DIR")) return env;
  throw ConfigError("data.source_dir", "not set and MULTIPATH_DATA_DIR is undefined");
}

std::filesystem::path resolve_cache_dir(const DataConfig& data) {
  if (!data.cache_dir.empty()) return data.cache_dir;
  if (const char* env = std::getenv("MULTIPATH_DATA_DIR")) return std::filesystem::path(env) / "cache";
  throw ConfigError("data.cache_dir", "not set and MULTIPATH_DATA_DIR is undefined");
}

}  // namespace MULTIPATH_NUMERIC_NS
}  // namespace multipath
