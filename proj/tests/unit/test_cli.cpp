#include <doctest.h>

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "../support/fixtures.hpp"
#include "multipath/cli.hpp"
#include "multipath/config.hpp"
#include "multipath/experiment.hpp"
#include "multipath/figures.hpp"

using namespace multipath;
using namespace multipath::testing;
namespace fs = std::filesystem;

namespace {

struct Result {
  int rc;
  std::string out;
  std::string err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int rc = cli::run(args, out, err);
  return {rc, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Last JSON object written to stderr.
nlohmann::json error_json(const std::string& err) {
  const auto at = err.find('{');
  REQUIRE(at != std::string::npos);
  return nlohmann::json::parse(err.substr(at));
}

/// A synthetic cache plus the overrides that shrink the desk network.
struct Workspace {
  TempDir dir;
  std::vector<std::string> sets;

  Workspace() {
    ExperimentConfig c = profile_config("desk");
    c.data.source_dir = (dir.path / "sources").string();
    c.data.cache_dir = (dir.path / "cache").string();
    PreparedData p{synthetic_dataset(40, 1), synthetic_dataset(20, 2), synthetic_dataset(10, 3)};
    write_prepared(p, c.data, c.data.cache_dir);
    sets = {"data.source_dir=" + c.data.source_dir,
            "data.cache_dir=" + c.data.cache_dir,
            "architecture.columns=2",
            "architecture.base_width=2",
            "architecture.growth=1",
            "architecture.routing_hidden=4",
            "optim.batch_size=8",
            "train.iterations=4",
            "train.metrics_interval=2",
            "train.checkpoint_interval=2",
            "train.eval_batch=16"};
  }

  std::vector<std::string> with_sets(std::vector<std::string> args) const {
    for (const std::string& s : sets) {
      args.push_back("--set");
      args.push_back(s);
    }
    return args;
  }

  fs::path path(const std::string& name) const { return dir.path / name; }
};

std::string last_iteration(const fs::path& metrics) {
  const CsvTable t = parse_csv(slurp(metrics));
  REQUIRE_FALSE(t.rows.empty());
  return t.rows.back()[static_cast<std::size_t>(t.column("iteration"))];
}

/// Tag balance check; enough to catch truncated or interleaved output.
bool balanced_xml(const std::string& s) {
  std::vector<std::string> open;
  std::size_t i = 0;
  while ((i = s.find('<', i)) != std::string::npos) {
    const std::size_t j = s.find('>', i);
    if (j == std::string::npos) return false;
    const std::string tag = s.substr(i + 1, j - i - 1);
    i = j + 1;
    if (tag.empty() || tag[0] == '?' || tag[0] == '!' || tag.back() == '/') continue;
    const std::string name = tag.substr(tag[0] == '/', tag.find_first_of(" \t\n") - (tag[0] == '/'));
    if (tag[0] != '/') {
      open.push_back(name);
    } else {
      if (open.empty() || open.back() != name) return false;
      open.pop_back();
    }
  }
  return open.empty();
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage errors exit 2 and write nothing") {
    TempDir dir;
    const std::string out = (dir.path / "run").string();
    CHECK(run({}).rc == 2);
    CHECK(run({"fly"}).rc == 2);
    CHECK(run({"train"}).rc == 2);
    CHECK(run({"train", "--out", out, "--bogus"}).rc == 2);
    CHECK(run({"train", "--out", out, "--config", (dir.path / "absent.toml").string()}).rc == 2);
    CHECK(run({"evaluate", "--out", out}).rc == 2);
    CHECK_FALSE(fs::exists(out));
    CHECK(run({"--help"}).rc == 0);
  }

  TEST_CASE("configuration errors name the field") {
    TempDir dir;
    const std::string out = (dir.path / "run").string();
    Result r = run({"train", "--out", out, "--set", "optim.learning=1"});
    CHECK(r.rc == 1);
    CHECK(error_json(r.err)["error"] == "config");
    CHECK(error_json(r.err)["field"] == "optim.learning");

    r = run({"train", "--out", out, "--profile", "huge"});
    CHECK(r.rc == 1);
    CHECK(error_json(r.err)["field"] == "profile");

    std::ofstream(dir.path / "c.toml") << "[train]\niterations = -3\n";
    r = run({"train", "--out", out, "--config", (dir.path / "c.toml").string()});
    CHECK(r.rc == 1);
    CHECK(error_json(r.err)["field"] == "train.iterations");
    CHECK_FALSE(fs::exists(out));
  }

  TEST_CASE("train, evaluate, resume and export") {
    Workspace w;
    const fs::path run_dir = w.path("run");
    Result r = run(w.with_sets({"train", "--out", run_dir.string()}));
    INFO(r.err);
    REQUIRE(r.rc == 0);
    CHECK(r.out.find("iteration 4") != std::string::npos);
    for (const char* f : {"config.toml", "provenance.json", "metrics.csv", "checkpoint.mpck",
                          "checkpoints/iter-2.mpck", "checkpoints/iter-4.mpck", "report.json",
                          "report_terminals.csv", "report_junctions.csv"})
      CHECK_MESSAGE(fs::exists(run_dir / f), f);
    CHECK(last_iteration(run_dir / "metrics.csv") == "4");
    const ExperimentConfig saved = load_config(run_dir / "config.toml");
    CHECK(saved.train.iterations == 4);
    CHECK(saved.architecture.columns == 2);

    const auto prov = nlohmann::json::parse(slurp(run_dir / "provenance.json"));
    CHECK(prov["config_digest"] == config_digest(saved));
    CHECK(prov["overrides"].size() == w.sets.size());

    SUBCASE("evaluate") {
      const fs::path eval_dir = w.path("eval");
      r = run({"evaluate", "--checkpoint", (run_dir / "checkpoint.mpck").string(), "--split",
               "test", "--out", eval_dir.string()});
      INFO(r.err);
      REQUIRE(r.rc == 0);
      const auto report = nlohmann::json::parse(slurp(eval_dir / "report.json"));
      CHECK(report["examples"] == 10);
      CHECK(r.out.rfind("test accuracy", 0) == 0);

      r = run({"evaluate", "--checkpoint", (run_dir / "checkpoint.mpck").string(), "--k-cpt",
               "1e-9", "--out", eval_dir.string()});
      CHECK(r.rc == 1);
      CHECK(error_json(r.err)["field"] == "k_cpt");

      r = run({"evaluate", "--checkpoint", (run_dir / "checkpoint.mpck").string(), "--split",
               "holdout", "--out", eval_dir.string()});
      CHECK(r.rc == 2);

      r = run({"evaluate", "--checkpoint", (run_dir / "checkpoint.mpck").string(), "--set",
               "optim.momentum=0.5", "--out", eval_dir.string()});
      CHECK(r.rc == 1);
      CHECK(error_json(r.err)["field"] == "optim.momentum");
    }

    SUBCASE("resume") {
      const std::string cp = (run_dir / "checkpoints" / "iter-2.mpck").string();
      r = run({"train", "--out", run_dir.string(), "--resume", cp, "--set", "train.iterations=6"});
      INFO(r.err);
      REQUIRE(r.rc == 0);
      const CsvTable t = parse_csv(slurp(run_dir / "metrics.csv"));
      std::vector<std::string> iterations;
      for (const auto& row : t.rows) iterations.push_back(row[0]);
      CHECK(iterations == std::vector<std::string>{"2", "4", "6"});

      r = run({"train", "--out", run_dir.string(), "--resume", cp, "--set", "architecture.columns=3"});
      CHECK(r.rc == 1);
      CHECK(error_json(r.err)["field"] == "architecture.columns");
      r = run({"train", "--out", run_dir.string(), "--resume", cp, "--set", "train.seed=9"});
      CHECK(r.rc == 1);
      CHECK(error_json(r.err)["field"] == "train");
      r = run({"train", "--out", run_dir.string(), "--resume", cp, "--profile", "desk"});
      CHECK(r.rc == 1);
      CHECK(error_json(r.err)["field"] == "resume");
    }

    SUBCASE("dataflow and figures") {
      r = run({"dataflow", "--checkpoint", (run_dir / "checkpoint.mpck").string(), "--out",
               run_dir.string()});
      INFO(r.err);
      REQUIRE(r.rc == 0);
      CHECK(fs::exists(run_dir / "dataflow.json"));
      CHECK(r.out.rfind("terminal ", 0) == 0);

      const fs::path fig = w.path("figures");
      r = run({"export-figures", "--run", run_dir.string(), "--out", fig.string()});
      INFO(r.err);
      REQUIRE(r.rc == 0);

      const CsvTable heat = parse_csv(slurp(fig / "heatmap.csv"));
      CHECK(heat.header.size() == 3);
      CHECK(heat.rows.size() == 2);
      for (const auto& row : heat.rows) {
        double total = 0;
        for (std::size_t c = 1; c < row.size(); ++c) total += std::stod(row[c]);
        CHECK(total == doctest::Approx(1).epsilon(1e-9));
      }
      const CsvTable flow = parse_csv(slurp(fig / "dataflow.csv"));
      double fractions = 0;
      for (const auto& row : flow.rows) fractions += std::stod(row[1]);
      CHECK(fractions == doctest::Approx(1).epsilon(1e-9));

      for (const char* f : {"heatmap.svg", "dataflow.svg", "composition.svg"}) {
        CAPTURE(std::string(f));
        const std::string svg = slurp(fig / f);
        CHECK(svg.find("<svg") != std::string::npos);
        CHECK(balanced_xml(svg));
      }
      CHECK_FALSE(fs::exists(fig / "curve.svg"));
    }
  }

  TEST_CASE("sweep writes a curve that exports") {
    Workspace w;
    const fs::path dir = w.path("sweep");
    std::vector<std::string> args = w.with_sets({"sweep", "--out", dir.string()});
    for (const char* s : {"train.iterations=2", "sweep.k_cpt=[0, 1e-8]", "sweep.static_max_columns=2"}) {
      args.push_back("--set");
      args.push_back(s);
    }
    Result r = run(args);
    INFO(r.err);
    REQUIRE(r.rc == 0);
    const CsvTable curve = parse_csv(slurp(dir / "curve.csv"));
    CHECK(curve.rows.size() == 4);
    r = run({"export-figures", "--run", dir.string()});
    INFO(r.err);
    REQUIRE(r.rc == 0);
    const std::string svg = slurp(dir / "figures" / "curve.svg");
    CHECK(balanced_xml(svg));
    CHECK(parse_csv(slurp(dir / "figures" / "curve.csv")).rows.size() == 4);
  }

  TEST_CASE("missing inputs") {
    TempDir dir;
    Result r = run({"export-figures", "--run", dir.path.string()});
    CHECK(r.rc == 1);
    const auto j = error_json(r.err);
    CHECK(j["error"] == "missing inputs");
    CHECK(j["absent"].size() == 3);

    r = run({"train", "--out", (dir.path / "run").string(), "--set",
             "data.source_dir=" + (dir.path / "none").string(), "--set",
             "data.cache_dir=" + (dir.path / "none").string()});
    CHECK(r.rc == 1);
    CHECK(error_json(r.err)["error"] == "failure");
    CHECK_FALSE(fs::exists(dir.path / "run"));
  }
}
