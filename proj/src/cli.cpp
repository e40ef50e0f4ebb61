#include "multipath/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include "multipath/config.hpp"
#include "multipath/errors.hpp"
#include "multipath/experiment.hpp"
#include "multipath/figures.hpp"

namespace multipath::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

struct Options {
  std::string config;
  std::string profile;
  std::vector<std::string> sets;
  std::string out;
  std::string resume;
  std::string checkpoint;
  std::string split = "validation";
  std::optional<double> k_cpt;
  std::string run_dir;
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw FormatError("cannot write " + path.string());
}

std::string join(const std::vector<std::string>& args) {
  std::string s = "multipath";
  for (const auto& a : args) s += " " + a;
  return s;
}

ExperimentConfig build_config(const Options& o) {
  ExperimentConfig c = o.config.empty() ? profile_config(o.profile.empty() ? "desk" : o.profile)
                                        : load_config(o.config);
  for (const std::string& s : o.sets) apply_override(c, s);
  c.validate();
  return c;
}

/// Cached splits when present, otherwise built in memory from the sources.
PreparedData obtain_data(const DataConfig& data, std::ostream& err) {
  std::optional<fs::path> cache;
  try {
    cache = resolve_cache_dir(data);
  } catch (const ConfigError&) {
  }
  if (cache && fs::exists(*cache / (data.kind + ".json"))) return load_prepared(data, *cache);
  err << "no prepared cache found; building the " << data.kind << " dataset from sources\n";
  return prepare_data(data);
}

const Dataset& pick_split(const PreparedData& data, const std::string& split) {
  if (split == "train") return data.train;
  if (split == "validation") return data.validation;
  if (split == "test") return data.test;
  throw ConfigError("split", "expected train, validation or test, got '" + split + "'");
}

std::string terminal_csv(const EvalReport& r) {
  std::string out = "node,fraction,accuracy,count,mnist_fraction,cifar_fraction";
  for (const std::string& name : r.class_names) out += ",class_" + name;
  out += "\n";
  for (const TerminalStats& t : r.terminals) {
    out += std::to_string(t.node) + "," + format_number(t.fraction) + "," +
           format_number(t.accuracy) + "," + std::to_string(t.count) + "," +
           format_number(t.mnist_fraction) + "," + format_number(t.cifar_fraction);
    for (double f : t.class_fraction) out += "," + format_number(f);
    out += "\n";
  }
  return out;
}

std::string junction_csv(const EvalReport& r) {
  std::string out = "node,visits,decision,frequency\n";
  for (const JunctionStats& j : r.junctions)
    for (std::size_t d = 0; d < j.decision_frequency.size(); ++d)
      out += std::to_string(j.node) + "," + std::to_string(j.visits) + "," + std::to_string(d) +
             "," + format_number(j.decision_frequency[d]) + "\n";
  return out;
}

std::string summary_csv(const EvalReport& r) {
  return "examples,accuracy,mean_ops,expected_cinf,k_cpt\n" + std::to_string(r.examples) + "," +
         format_number(r.accuracy) + "," + format_number(r.mean_ops) + "," +
         format_number(r.expected_cinf) + "," + format_number(r.k_cpt) + "\n";
}

void write_report(const fs::path& dir, const std::string& stem, const EvalReport& r) {
  write_file(dir / (stem + ".json"), report_json(r));
  write_file(dir / (stem + ".csv"), summary_csv(r));
  write_file(dir / (stem + "_terminals.csv"), terminal_csv(r));
  write_file(dir / (stem + "_junctions.csv"), junction_csv(r));
}

void start_run(const fs::path& dir, const ExperimentConfig& c, const Options& o,
               const std::string& command) {
  fs::create_directories(dir);
  write_file(dir / "config.toml", to_toml(c));
  write_file(dir / "provenance.json", provenance_json(c, o.sets, command));
}

int prepare_cmd(const Options& o, const std::string& command, std::ostream& out, std::ostream& err) {
  const ExperimentConfig c = build_config(o);
  const fs::path dir = o.out.empty() ? resolve_cache_dir(c.data) : fs::path(o.out);
  err << "building the " << c.data.kind << " dataset\n";
  const PreparedData data = prepare_data(c.data);
  write_prepared(data, c.data, dir);
  write_file(dir / "provenance.json", provenance_json(c, o.sets, command));
  out << "wrote " << data.train.size() << " train, " << data.validation.size() << " validation, "
      << data.test.size() << " test images to " << dir.string() << "\n";
  return 0;
}

/// Keeps the header and every row logged at or before `iteration`.
std::string truncate_metrics(const std::string& text, std::uint64_t iteration) {
  std::istringstream in(text);
  std::string line, kept;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (!header && std::stoull(line.substr(0, line.find(','))) > iteration) break;
    kept += line + "\n";
    header = false;
  }
  return kept;
}

int train_cmd(const Options& o, const std::string& command, std::ostream& out, std::ostream& err) {
  const fs::path dir = o.out;
  std::optional<Checkpoint> resume;
  ExperimentConfig c;
  if (!o.resume.empty()) {
    if (!o.config.empty() || !o.profile.empty())
      throw ConfigError("resume", "the configuration comes from the checkpoint");
    resume = load_checkpoint(o.resume);
    c = resume->config;
    const ExperimentConfig before = c;
    for (const std::string& s : o.sets) {
      const std::string key = s.substr(0, s.find('='));
      if (key.rfind("train.", 0) != 0 && key != "data.source_dir" && key != "data.cache_dir")
        throw ConfigError(key, "cannot change when resuming");
      apply_override(c, s);
    }
    if (c.train.seed != before.train.seed || c.train.critic_mode != before.train.critic_mode)
      throw ConfigError("train", "seed and critic mode are fixed by the checkpoint");
    c.validate();
    resume->config = c;
  } else {
    c = build_config(o);
  }
  const PreparedData data = obtain_data(c.data, err);
  const bool adaptive = c.cost.sample_per_example;
  if (adaptive && !c.architecture.accepts_kcpt)
    throw ConfigError("architecture.accepts_kcpt",
                      "sampling k_cpt per example needs conditioned routing subnetworks");

  Trainer trainer = resume ? Trainer(*resume, data.train) : Trainer(c, data.train);

  start_run(dir, c, o, command);
  fs::create_directories(dir / "checkpoints");
  const fs::path metrics_path = dir / "metrics.csv";
  std::string prior;
  if (resume && fs::exists(metrics_path))
    prior = truncate_metrics(read_file(metrics_path), resume->iteration);
  std::ofstream metrics(metrics_path, std::ios::binary | std::ios::trunc);
  if (prior.empty())
    metrics << metrics_header(trainer.network()) << "\n";
  else
    metrics << prior;
  metrics.flush();

  RunCallbacks callbacks;
  callbacks.metrics = [&](const MetricsRow& row) {
    metrics << metrics_line(row) << "\n";
    metrics.flush();
    err << "iteration " << row.iteration << " loss " << format_number(row.loss) << " val_accuracy "
        << format_number(row.val_accuracy) << " val_mean_ops " << format_number(row.val_mean_ops)
        << "\n";
  };
  callbacks.checkpoint = [&](const Checkpoint& cp) {
    save_checkpoint(cp, dir / "checkpoints" / ("iter-" + std::to_string(cp.iteration) + ".mpck"));
    save_checkpoint(cp, dir / "checkpoint.mpck");
  };
  run_training(trainer, data.validation, callbacks);
  if (!metrics) throw FormatError("cannot write " + metrics_path.string());

  const EvalReport report =
      evaluate(trainer.network(), data.validation, c.cost.k_cpt, c.train.eval_batch);
  write_report(dir, "report", report);
  out << "iteration " << trainer.iteration() << " validation accuracy "
      << format_number(report.accuracy) << " mean_ops " << format_number(report.mean_ops) << "\n";
  return 0;
}

/// Loads the checkpoint and the matching split for evaluate/dataflow.
struct Evaluation {
  Checkpoint checkpoint;
  EvalReport report;
};

Evaluation evaluate_checkpoint(const Options& o, std::ostream& err) {
  Evaluation e{load_checkpoint(o.checkpoint), {}};
  ExperimentConfig& c = e.checkpoint.config;
  for (const std::string& s : o.sets) {
    const std::string key = s.substr(0, s.find('='));
    if (key != "data.source_dir" && key != "data.cache_dir" && key != "train.eval_batch")
      throw ConfigError(key, "only data locations and train.eval_batch can change at evaluation");
    apply_override(c, s);
  }
  if (o.k_cpt && !c.architecture.accepts_kcpt)
    throw ConfigError("k_cpt", "override needs a network conditioned on k_cpt");
  if (o.k_cpt && !(*o.k_cpt >= 0)) throw ConfigError("k_cpt", "must be non-negative");
  const PreparedData data = obtain_data(c.data, err);
  const Dataset& split = pick_split(data, o.split);
  if (split.class_names.size() != static_cast<std::size_t>(c.architecture.classes))
    throw ConfigError("data.kind", "dataset has " + std::to_string(split.class_names.size()) +
                                       " classes, network has " +
                                       std::to_string(c.architecture.classes));
  MultipathNetwork net = restore_network(e.checkpoint);
  e.report = evaluate(net, split, o.k_cpt.value_or(c.cost.k_cpt), c.train.eval_batch);
  return e;
}

int evaluate_cmd(const Options& o, const std::string& command, std::ostream& out, std::ostream& err) {
  const Evaluation e = evaluate_checkpoint(o, err);
  fs::create_directories(o.out);
  write_file(fs::path(o.out) / "provenance.json",
             provenance_json(e.checkpoint.config, o.sets, command));
  write_report(o.out, "report", e.report);
  out << o.split << " accuracy " << format_number(e.report.accuracy) << " mean_ops "
      << format_number(e.report.mean_ops) << "\n";
  return 0;
}

int dataflow_cmd(const Options& o, const std::string& command, std::ostream& out, std::ostream& err) {
  const Evaluation e = evaluate_checkpoint(o, err);
  fs::create_directories(o.out);
  write_file(fs::path(o.out) / "provenance.json",
             provenance_json(e.checkpoint.config, o.sets, command));
  write_report(o.out, "dataflow", e.report);
  for (const TerminalStats& t : e.report.terminals)
    out << "terminal " << t.node << " fraction " << format_number(t.fraction) << " accuracy "
        << format_number(t.accuracy) << "\n";
  return 0;
}

int sweep_cmd(const Options& o, const std::string& command, std::ostream& out, std::ostream& err) {
  const ExperimentConfig c = build_config(o);
  const PreparedData data = obtain_data(c.data, err);
  start_run(o.out, c, o, command);
  const std::vector<CurvePoint> points =
      sweep(c, data.train, data.validation, [&](const std::string& m) { err << m << "\n"; });
  write_file(fs::path(o.out) / "curve.csv", curve_csv(points));
  write_file(fs::path(o.out) / "curve.json", curve_json(points));
  out << "wrote " << points.size() << " curve points\n";
  return 0;
}

double number(const std::string& cell, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(cell, &used);
    if (used == cell.size()) return v;
  } catch (const std::exception&) {
  }
  throw FormatError(where + ": not a number: '" + cell + "'");
}

void export_curve(const fs::path& in, const fs::path& dir) {
  const CsvTable t = parse_csv(read_file(in));
  const int k = t.column("k_cpt"), ops = t.column("mean_ops"), acc = t.column("accuracy"),
            strat = t.column("strategy");
  if (k < 0 || ops < 0 || acc < 0 || strat < 0)
    throw FormatError(in.string() + ": expected columns k_cpt,mean_ops,accuracy,strategy");
  CsvTable clean{{"k_cpt", "mean_ops", "accuracy", "strategy"}, {}};
  std::vector<Series> series;
  for (const auto& row : t.rows) {
    clean.rows.push_back({row[k], row[ops], row[acc], row[strat]});
    auto it = std::find_if(series.begin(), series.end(),
                           [&](const Series& s) { return s.name == row[strat]; });
    if (it == series.end()) it = series.insert(series.end(), Series{row[strat], {}, {}});
    it->x.push_back(number(row[ops], in.string()));
    it->y.push_back(number(row[acc], in.string()));
  }
  write_file(dir / "curve.csv", to_csv(clean));
  write_file(dir / "curve.svg",
             svg_line_chart("accuracy vs. mean operations", "mean multiply-accumulates per example",
                            "accuracy", series));
}

void export_dataflow(const fs::path& in, const fs::path& dir) {
  ordered_json j;
  try {
    j = ordered_json::parse(read_file(in));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(in.string() + ": " + e.what());
  }
  CsvTable t{{"node", "fraction", "accuracy", "mnist_fraction", "cifar_fraction"}, {}};
  const auto names = j.at("class_names").get<std::vector<std::string>>();
  for (const std::string& n : names) t.header.push_back("class_" + n);
  std::vector<std::string> labels;
  std::vector<double> fractions;
  std::vector<std::vector<double>> composition;
  for (const auto& term : j.at("terminals")) {
    const double fraction = term.at("fraction").get<double>();
    std::vector<std::string> row{std::to_string(term.at("node").get<int>()),
                                 format_number(fraction),
                                 format_number(term.at("accuracy").get<double>()),
                                 format_number(term.at("mnist_fraction").get<double>()),
                                 format_number(term.at("cifar_fraction").get<double>())};
    std::vector<double> mix;
    for (double f : term.at("class_fraction").get<std::vector<double>>()) {
      row.push_back(format_number(f));
      mix.push_back(fraction > 0 ? f / fraction : 0.0);
    }
    t.rows.push_back(std::move(row));
    labels.push_back("terminal " + t.rows.back()[0]);
    fractions.push_back(fraction);
    composition.push_back(std::move(mix));
  }
  write_file(dir / "dataflow.csv", to_csv(t));
  write_file(dir / "dataflow.svg", svg_bar_chart("fraction of examples classified per terminal",
                                                 labels, fractions));
  write_file(dir / "composition.svg",
             svg_heatmap("class composition per terminal", labels, names, composition));
}

void export_heatmap(const fs::path& in, const fs::path& dir) {
  const CsvTable t = parse_csv(read_file(in));
  const int it = t.column("iteration");
  if (it < 0) throw FormatError(in.string() + ": missing iteration column");
  std::vector<int> columns;
  CsvTable heat{{"iteration"}, {}};
  for (std::size_t c = 0; c < t.header.size(); ++c)
    if (t.header[c].rfind("terminal_", 0) == 0) {
      columns.push_back(static_cast<int>(c));
      heat.header.push_back(t.header[c]);
    }
  if (columns.empty()) throw FormatError(in.string() + ": no terminal_<id> columns");
  std::vector<std::string> rows;
  std::vector<std::vector<double>> values;
  for (const auto& r : t.rows) {
    std::vector<std::string> cells{r[it]};
    std::vector<double> v;
    for (int c : columns) {
      cells.push_back(r[c]);
      v.push_back(number(r[c], in.string()));
    }
    heat.rows.push_back(std::move(cells));
    rows.push_back(r[it]);
    values.push_back(std::move(v));
  }
  write_file(dir / "heatmap.csv", to_csv(heat));
  write_file(dir / "heatmap.svg",
             svg_heatmap("validation fraction per terminal over training", rows,
                         std::vector<std::string>(heat.header.begin() + 1, heat.header.end()),
                         values));
}

int export_cmd(const Options& o, std::ostream& out, std::ostream& err) {
  const fs::path run = o.run_dir;
  const fs::path dir = o.out.empty() ? run / "figures" : fs::path(o.out);
  const fs::path curve = run / "curve.csv", metrics = run / "metrics.csv";
  fs::path flow = run / "dataflow.json";
  if (!fs::exists(flow)) flow = run / "report.json";
  std::vector<std::string> absent;
  for (const fs::path& p : {curve, metrics, flow})
    if (!fs::exists(p)) absent.push_back(p.string());
  if (absent.size() == 3) {
    ordered_json j{{"error", "missing inputs"}, {"absent", absent}};
    err << j.dump(2) << "\n";
    return 1;
  }
  fs::create_directories(dir);
  int written = 0;
  if (fs::exists(curve)) export_curve(curve, dir), ++written;
  if (fs::exists(flow)) export_dataflow(flow, dir), ++written;
  if (fs::exists(metrics)) export_heatmap(metrics, dir), ++written;
  if (!absent.empty()) {
    ordered_json j{{"warning", "some figure inputs are absent"}, {"absent", absent}};
    err << j.dump(2) << "\n";
  }
  out << "wrote " << written << " figure sets to " << dir.string() << "\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Trains and evaluates dynamically routed multi-path classifiers.", "multipath"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every verb");
  Options o;

  const auto common = [&](CLI::App* sub, bool needs_out) {
    auto* config = sub->add_option("--config", o.config, "TOML configuration file")->check(CLI::ExistingFile);
    sub->add_option("--profile", o.profile, "Base profile when no config file is given (desk, paper)")
        ->excludes(config);
    sub->add_option("--set", o.sets, "Override one field: dotted.path=value (repeatable)")
        ->allow_extra_args(false);
    auto* opt = sub->add_option("--out", o.out, "Output directory");
    if (needs_out) opt->required();
  };

  auto* prepare = app.add_subcommand("prepare-data", "Build dataset caches from the canonical files");
  common(prepare, false);
  auto* train = app.add_subcommand("train", "Train one network");
  common(train, true);
  train->add_option("--resume", o.resume, "Continue from a checkpoint file")->check(CLI::ExistingFile);
  auto* sweep_app = app.add_subcommand("sweep", "Train or evaluate one curve point per k_cpt value");
  common(sweep_app, true);

  const auto eval_options = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
    sub->add_option("--split", o.split, "train, validation or test")
        ->check(CLI::IsMember({"train", "validation", "test"}));
    sub->add_option("--set", o.sets, "Override data locations: dotted.path=value (repeatable)")
        ->allow_extra_args(false);
    sub->add_option("--out", o.out, "Output directory")->required();
  };
  auto* evaluate_app = app.add_subcommand("evaluate", "Evaluate a checkpoint under inference routing");
  eval_options(evaluate_app);
  evaluate_app->add_option("--k-cpt", o.k_cpt, "k_cpt fed to networks conditioned on it");
  auto* dataflow = app.add_subcommand("dataflow", "Per-terminal and per-junction dataflow statistics");
  eval_options(dataflow);
  auto* figures = app.add_subcommand("export-figures", "Render figure data from a run directory");
  figures->add_option("--run", o.run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
  figures->add_option("--out", o.out, "Output directory (default <run>/figures)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  const std::string command = join(args);
  try {
    if (prepare->parsed()) return prepare_cmd(o, command, out, err);
    if (train->parsed()) return train_cmd(o, command, out, err);
    if (sweep_app->parsed()) return sweep_cmd(o, command, out, err);
    if (evaluate_app->parsed()) return evaluate_cmd(o, command, out, err);
    if (dataflow->parsed()) return dataflow_cmd(o, command, out, err);
    if (figures->parsed()) return export_cmd(o, out, err);
  } catch (const ConfigError& e) {
    err << ordered_json{{"error", "config"}, {"field", e.path()}, {"message", e.what()}}.dump() << "\n";
    return 1;
  } catch (const Error& e) {
    err << ordered_json{{"error", "failure"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << ordered_json{{"error", "internal"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }
  err << app.help();
  return 2;
}

}  // namespace multipath::cli
