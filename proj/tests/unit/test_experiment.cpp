#include <doctest.h>

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "../support/fixtures.hpp"
#include "multipath/config.hpp"
#include "multipath/errors.hpp"
#include "multipath/experiment.hpp"

using namespace multipath;
using namespace multipath::testing;

namespace {

ExperimentConfig small_config() {
  ExperimentConfig c = profile_config("desk");
  c.architecture.columns = 2;
  c.architecture.base_width = 2;
  c.architecture.growth = 1;
  c.architecture.routing_hidden = 4;
  c.optim.batch_size = 8;
  c.train.iterations = 6;
  c.train.metrics_interval = 2;
  c.train.checkpoint_interval = 0;
  c.train.eval_batch = 16;
  return c;
}

const Dataset& train_set() {
  static const Dataset d = synthetic_dataset(40, 11);
  return d;
}

const Dataset& validation_set() {
  static const Dataset d = synthetic_dataset(20, 12);
  return d;
}

std::vector<std::string> run_metrics(Trainer& trainer, std::vector<Checkpoint>* checkpoints = nullptr) {
  std::vector<std::string> lines;
  RunCallbacks cb;
  cb.metrics = [&](const MetricsRow& row) { lines.push_back(metrics_line(row)); };
  if (checkpoints) cb.checkpoint = [&](const Checkpoint& c) { checkpoints->push_back(c); };
  run_training(trainer, validation_set(), cb);
  return lines;
}

Tensor probe_logits(MultipathNetwork& net) {
  const Batch b = make_batch(validation_set(), 0, 10);
  Tape tape(Tape::Mode::inference);
  ForwardContext ctx{tape, BatchNormMode::infer, false};
  return sampled_forward(net, b.images, RoutingPolicy::argmax(), {}, std::nullopt, ctx).logits;
}

std::vector<real> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::uint64_t chain_ops(const MultipathNetwork& net) {
  std::uint64_t total = 0;
  for (const LayerNode& n : net.nodes()) total += instrumented_node_macs(n);
  return total;
}

}  // namespace

TEST_SUITE("experiment") {
  TEST_CASE("batches") {
    const Dataset& d = train_set();
    const Batch tail = make_batch(d, 35, 10);
    CHECK(tail.labels.size() == 5);
    CHECK(tail.images.shape() == Shape{5, 3, 32, 32});
    CHECK(tail.indices.front() == 35);
    CHECK(tail.images.data()[0] == d.images[35].pixels[0]);

    const BatchSampler s(d, 8, 3, false);
    for (int epoch = 0; epoch < 2; ++epoch) {
      std::multiset<std::size_t> seen;
      for (int t = 0; t < 5; ++t)
        for (std::size_t i : s.at(static_cast<std::uint64_t>(epoch * 5 + t)).indices) seen.insert(i);
      CHECK(seen.size() == 40);
      CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == 40);
    }
    CHECK(s.at(7).indices == BatchSampler(d, 8, 3, false).at(7).indices);
    CHECK(s.at(7).indices != BatchSampler(d, 8, 4, false).at(7).indices);
    const Batch plain = s.at(2), aug = BatchSampler(d, 8, 3, true).at(2);
    CHECK(plain.indices == aug.indices);
    CHECK(plain.labels == aug.labels);
    CHECK(values(aug.images) == values(BatchSampler(d, 8, 3, true).at(2).images));
    CHECK_THROWS_AS(BatchSampler(Dataset{}, 8, 1, false), ArgumentError);
  }

  TEST_CASE("k_cpt draws") {
    CostConfig fixed;
    fixed.k_cpt = 3e-9;
    Rng rng(1);
    CHECK(draw_kcpt(fixed, 4, rng) == std::vector<double>(4, 3e-9));

    CostConfig sampled;
    sampled.sample_per_example = true;
    sampled.k_cpt_set = default_kcpt_sweep();
    const auto draws = draw_kcpt(sampled, 10000, rng);
    for (double k : sampled.k_cpt_set) {
      const double f = static_cast<double>(std::count(draws.begin(), draws.end(), k)) / 10000.0;
      CHECK(f == doctest::Approx(0.125).epsilon(0.02 / 0.125));
    }
    sampled.k_cpt_set.clear();
    CHECK_THROWS_AS(draw_kcpt(sampled, 1, rng), ConfigError);
    CHECK(kcpt_feature(6.4e-8) == doctest::Approx(0.64).epsilon(1e-12));
  }

  TEST_CASE("training is deterministic") {
    Trainer a(small_config(), train_set()), b(small_config(), train_set());
    CHECK(run_metrics(a) == run_metrics(b));
    CHECK(a.checkpoint().parameters == b.checkpoint().parameters);

    ExperimentConfig other = small_config();
    other.train.seed = 2;
    Trainer c(other, train_set());
    run_metrics(c);
    CHECK(c.checkpoint().parameters != a.checkpoint().parameters);
  }

  TEST_CASE("metrics stream layout") {
    Trainer t(small_config(), train_set());
    std::vector<MetricsRow> rows;
    RunCallbacks cb;
    cb.metrics = [&](const MetricsRow& r) { rows.push_back(r); };
    run_training(t, validation_set(), cb);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].iteration == 2);
    CHECK(rows[2].iteration == 6);
    CHECK(metrics_header(t.network()) == "iteration,loss,val_accuracy,val_mean_ops,terminal_1,terminal_2");
    for (const MetricsRow& r : rows) {
      CHECK(std::isfinite(r.loss));
      CHECK(r.terminal_fractions.size() == 2);
      CHECK(std::accumulate(r.terminal_fractions.begin(), r.terminal_fractions.end(), 0.0) ==
            doctest::Approx(1).epsilon(1e-12));
    }
    const std::string line = metrics_line({4, 0.5, 0.25, 1000, {0.75, 0.25}});
    CHECK(line == "4,0.5,0.25,1000,0.75,0.25");

    ExperimentConfig odd = small_config();
    odd.train.iterations = 5;
    Trainer u(odd, train_set());
    const auto lines = run_metrics(u);
    REQUIRE(lines.size() == 3);
    CHECK(lines.back().rfind("5,", 0) == 0);
  }

  TEST_CASE("checkpoint round trip") {
    TempDir dir;
    ExperimentConfig cfg = small_config();
    cfg.architecture.tree = "[H,[T,T]]";
    Trainer t(cfg, train_set());
    run_metrics(t);
    const Checkpoint before = t.checkpoint();
    save_checkpoint(before, dir.path / "a.mpck");
    const Checkpoint after = load_checkpoint(dir.path / "a.mpck");
    CHECK(after.iteration == 6);
    CHECK(after.rng_state == before.rng_state);
    CHECK(after.parameters == before.parameters);
    CHECK(after.momentum == before.momentum);
    CHECK(after.window_loss == before.window_loss);
    CHECK(to_toml(after.config) == to_toml(before.config));
    REQUIRE(after.moments.size() == before.moments.size());
    for (std::size_t k = 0; k < after.moments.size(); ++k) {
      CHECK(after.moments[k].mean == before.moments[k].mean);
      CHECK(after.moments[k].var == before.moments[k].var);
    }

    MultipathNetwork restored = restore_network(after);
    CHECK(values(probe_logits(restored)) == values(probe_logits(t.network())));
    const EvalReport r1 = evaluate(t.network(), validation_set(), cfg.cost.k_cpt);
    const EvalReport r2 = evaluate(restored, validation_set(), cfg.cost.k_cpt);
    CHECK(report_json(r1) == report_json(r2));

    std::string bytes;
    {
      std::ifstream in(dir.path / "a.mpck", std::ios::binary);
      bytes.assign(std::istreambuf_iterator<char>(in), {});
    }
    CHECK(bytes.substr(0, 4) == "MPCK");
    const auto write = [&](const std::string& name, const std::string& content) {
      std::ofstream(dir.path / name, std::ios::binary) << content;
      return dir.path / name;
    };
    CHECK_THROWS_AS(load_checkpoint(write("magic", "XPCK" + bytes.substr(4))), FormatError);
    CHECK_THROWS_AS(load_checkpoint(write("short", bytes.substr(0, bytes.size() - 3))), FormatError);
    CHECK_THROWS_AS(load_checkpoint(write("long", bytes + "x")), FormatError);
    std::string wide = bytes;
    wide[12] = static_cast<char>(sizeof(real) == 4 ? 8 : 4);
    CHECK_THROWS_AS(load_checkpoint(write("wide", wide)), FormatError);
    CHECK_THROWS_AS(load_checkpoint(dir.path / "absent"), FormatError);

    Checkpoint other = after;
    other.config.architecture.columns = 3;
    other.config.architecture.tree.clear();
    CHECK_THROWS_AS(restore_network(other), FormatError);
  }

  TEST_CASE("resuming reproduces an uninterrupted run") {
    TempDir dir;
    ExperimentConfig cfg = small_config();
    cfg.train.checkpoint_interval = 3;
    Trainer full(cfg, train_set());
    std::vector<Checkpoint> saved;
    const auto lines = run_metrics(full, &saved);
    REQUIRE(saved.size() == 2);
    REQUIRE(saved[0].iteration == 3);
    CHECK(saved[0].window_steps == 1);

    save_checkpoint(saved[0], dir.path / "mid.mpck");
    Trainer resumed(load_checkpoint(dir.path / "mid.mpck"), train_set());
    CHECK(resumed.iteration() == 3);
    const auto tail = run_metrics(resumed);
    REQUIRE(tail.size() == 2);
    CHECK(tail[0] == lines[1]);
    CHECK(tail[1] == lines[2]);
    CHECK(resumed.checkpoint().parameters == full.checkpoint().parameters);
    CHECK(resumed.checkpoint().momentum == full.checkpoint().momentum);

    // N iterations, save, then N more.
    ExperimentConfig half = small_config();
    half.train.iterations = 4;
    Trainer first(half, train_set());
    const auto head = run_metrics(first);
    save_checkpoint(first.checkpoint(), dir.path / "half.mpck");
    Checkpoint cp = load_checkpoint(dir.path / "half.mpck");
    cp.config.train.iterations = 8;
    Trainer second(cp, train_set());
    const auto rest = run_metrics(second);
    ExperimentConfig whole = small_config();
    whole.train.iterations = 8;
    Trainer straight(whole, train_set());
    auto joined = head;
    joined.insert(joined.end(), rest.begin(), rest.end());
    CHECK(run_metrics(straight) == joined);
    CHECK(second.checkpoint().parameters == straight.checkpoint().parameters);
  }

  TEST_CASE("every strategy trains") {
    for (const char* s : {"actor", "pragmatic-critic", "pragmatic-critic-classification-error",
                          "optimistic-critic", "static-baseline"}) {
      for (const char* mode : {"marginal", "sampled"}) {
        if (std::string(s) == "optimistic-critic" && std::string(mode) == "sampled") continue;
        const std::string strategy = s, critic_mode = mode;
        CAPTURE(strategy);
        CAPTURE(critic_mode);
        ExperimentConfig c = small_config();
        apply_override(c, "strategy", s);
        apply_override(c, "train.critic_mode", mode);
        c.train.iterations = 3;
        Trainer t(c, train_set());
        const auto lines = run_metrics(t);
        CHECK(lines.size() == 2);
        const Checkpoint cp = t.checkpoint();
        for (const auto& p : cp.parameters)
          CHECK(std::all_of(p.begin(), p.end(), [](real v) { return std::isfinite(v); }));
      }
    }
  }

  TEST_CASE("static baseline loss is error plus a constant compute term") {
    ExperimentConfig c = small_config();
    c.strategy = Strategy::static_baseline;
    c.architecture.columns = 1;
    c.cost.k_cpt = 0;
    Trainer free(c, train_set());
    CHECK(free.network().junctions().empty());
    c.cost.k_cpt = 1e-6;
    Trainer paid(c, train_set());
    const double ops = static_cast<double>(chain_ops(paid.network()));
    CHECK(paid.step() - free.step() == doctest::Approx(1e-6 * ops).epsilon(1e-3));
  }

  TEST_CASE("singleton k_cpt set matches fixed k_cpt") {
    ExperimentConfig fixed = small_config();
    fixed.architecture.accepts_kcpt = true;
    fixed.cost.k_cpt = 8e-9;
    ExperimentConfig sampled = fixed;
    sampled.cost.sample_per_example = true;
    sampled.cost.k_cpt_set = {8e-9};
    Trainer a(fixed, train_set()), b(sampled, train_set());
    for (int k = 0; k < 3; ++k) CHECK(a.step() == b.step());
    CHECK(a.checkpoint().parameters == b.checkpoint().parameters);

    ExperimentConfig plain = small_config();
    CHECK_THROWS_AS(train_adaptive(plain, train_set(), validation_set()), ConfigError);
  }

  TEST_CASE("non-finite values abort with a diagnostic") {
    const auto message = [](Trainer& t, int steps) -> std::string {
      try {
        for (int k = 0; k < steps; ++k) t.step();
      } catch (const NumericError& e) {
        return e.what();
      }
      return "";
    };
    ExperimentConfig c = small_config();
    c.optim.base_learning_rate = 1e35;
    Trainer diverging(c, train_set());
    const std::string loss = message(diverging, 5);
    CAPTURE(loss);
    CHECK(loss.find("non-finite loss") != std::string::npos);
    CHECK(loss.find("first non-finite tensor: ") != std::string::npos);

    Dataset bad = train_set();
    for (LabeledImage& img : bad.images) img.pixels[100] = std::numeric_limits<float>::quiet_NaN();
    c = small_config();
    c.data.augment = false;
    Trainer poisoned(c, bad);
    const std::string grad = message(poisoned, 1);
    CAPTURE(grad);
    CHECK(grad.find("in parameter n0.") != std::string::npos);
  }

  TEST_CASE("evaluation invariants") {
    ExperimentConfig c = small_config();
    c.architecture.tree = "[H,[T,T,H],T]";
    Trainer t(c, train_set());
    run_metrics(t);
    const EvalReport r = evaluate(t.network(), validation_set(), c.cost.k_cpt);
    CHECK(r.examples == 20);
    CHECK(r.accuracy >= 0);
    CHECK(r.accuracy <= 1);
    CHECK(r.terminals.size() == 5);
    double total = 0, correct = 0;
    std::size_t count = 0;
    for (const TerminalStats& s : r.terminals) {
      total += s.fraction;
      count += s.count;
      correct += s.accuracy * static_cast<double>(s.count);
      CHECK(std::accumulate(s.class_fraction.begin(), s.class_fraction.end(), 0.0) ==
            doctest::Approx(s.fraction).epsilon(1e-12));
      if (s.count) CHECK(s.mnist_fraction + s.cifar_fraction == doctest::Approx(1));
    }
    CHECK(total == doctest::Approx(1).epsilon(1e-6));
    CHECK(count == 20);
    CHECK(correct / 20 == doctest::Approx(r.accuracy));
    CHECK(r.junctions.size() == 2);
    CHECK(r.junctions[0].visits == 20);
    CHECK(r.mean_ops > 0);
    CHECK(r.expected_cinf > 0);

    Dataset five = synthetic_dataset(10, 3, 5);
    CHECK_THROWS_AS(evaluate(t.network(), five, 0), ConfigError);
  }

  TEST_CASE("single column and statically routed evaluation") {
    for (bool statically : {false, true}) {
      for (int columns : {1, 2, 3}) {
        ExperimentConfig c = small_config();
        if (statically) c.strategy = Strategy::static_baseline;
        c.architecture.statically_routed = statically;
        c.architecture.columns = columns;
        c.train.iterations = 2;
        Trainer t(c, train_set());
        run_metrics(t);
        const EvalReport r = evaluate(t.network(), validation_set(), 0);
        if (columns == 1 || statically) {
          REQUIRE(r.terminals.size() == 1);
          CHECK(r.terminals[0].fraction == 1.0);
          CHECK(r.mean_ops == static_cast<double>(chain_ops(t.network())));
        }
        if (statically)
          CHECK(r.mean_ops == static_cast<double>(count_ops(t.network(), t.network().path_to(
                                                                               t.network().terminals()[0]))));
      }
    }
  }

  TEST_CASE("two images are memorized") {
    const Dataset pair = synthetic_dataset(2, 4);
    ExperimentConfig c = small_config();
    c.strategy = Strategy::static_baseline;
    c.architecture.columns = 1;
    c.optim.batch_size = 2;
    c.data.augment = false;
    c.train.iterations = 150;
    c.train.metrics_interval = 150;
    Trainer t(c, pair);
    RunCallbacks none;
    run_training(t, pair, none);
    CHECK(evaluate(t.network(), pair, 0).accuracy == 1.0);
  }

  TEST_CASE("sweeps") {
    ExperimentConfig c = small_config();
    c.optim.batch_size = 4;
    c.train.iterations = 2;
    c.sweep.k_cpt = {0, 1e-8};
    c.sweep.static_max_columns = 2;
    const auto points = sweep(c, train_set(), validation_set());
    REQUIRE(points.size() == 4);
    CHECK(points[0].strategy == "actor");
    CHECK(points[1].k_cpt == 1e-8);
    CHECK(points[2].strategy == "static-baseline");
    CHECK(points[2].columns == 1);
    CHECK(points[3].columns == 2);
    for (int k : {2, 3}) {
      ArchitectureSchedule s = c.architecture;
      s.statically_routed = true;
      s.columns = points[static_cast<std::size_t>(k)].columns;
      CHECK(points[static_cast<std::size_t>(k)].mean_ops ==
            static_cast<double>(chain_ops(build_network(s))));
    }
    CHECK(curve_csv(sweep(c, train_set(), validation_set())) == curve_csv(points));
    CHECK(curve_csv(points).rfind("k_cpt,mean_ops,accuracy,strategy\n", 0) == 0);
    const auto json = nlohmann::json::parse(curve_json(points));
    CHECK(json.size() == 4);
    CHECK(json[3]["columns"] == 2);

    c.architecture.accepts_kcpt = true;
    c.sweep.include_static = false;
    const auto adaptive = sweep(c, train_set(), validation_set());
    REQUIRE(adaptive.size() == 2);
    CHECK(adaptive[0].strategy == "actor-dynamic-kcpt");

    c.sweep.include_static = true;
    c.architecture.accepts_kcpt = false;
    c.sweep.static_max_columns = 8;
    c.sweep.k_cpt.clear();
    c.strategy = Strategy::static_baseline;
    c.train.iterations = 1;
    const auto statics = sweep(c, train_set(), validation_set());
    CHECK(statics.size() == 8);
  }

  TEST_CASE("prepared dataset caches") {
    TempDir dir;
    DataConfig d;
    d.source_dir = (dir.path / "sources").string();
    PreparedData p{synthetic_dataset(12, 1), synthetic_dataset(6, 2), synthetic_dataset(4, 3)};
    write_prepared(p, d, dir.path / "cache");
    CHECK(std::filesystem::exists(dir.path / "cache" / "hybrid.json"));
    CHECK(std::filesystem::exists(dir.path / "cache" / "hybrid-train.mpds"));
    const PreparedData back = load_prepared(d, dir.path / "cache");
    CHECK(back.train.size() == 12);
    CHECK(back.validation.size() == 6);
    CHECK(back.test.size() == 4);
    CHECK(back.train.kind == "hybrid");
    CHECK(back.train.class_names == p.train.class_names);
    CHECK(back.train.images[3].label == p.train.images[3].label);
    CHECK(back.train.images[3].origin == p.train.images[3].origin);
    CHECK(back.train.images[3].pixels[77] == doctest::Approx(p.train.images[3].pixels[77]).epsilon(0.5 / 255));

    DataConfig changed = d;
    changed.seed = 8;
    CHECK_THROWS_AS(load_prepared(changed, dir.path / "cache"), ConfigError);
    CHECK_THROWS_AS(load_prepared(d, dir.path / "nowhere"), FormatError);
    CHECK_THROWS_AS(prepare_data(d), FormatError);
  }

  TEST_CASE("provenance record") {
    const ExperimentConfig paper = profile_config("paper");
    const auto j = nlohmann::json::parse(provenance_json(paper, {"train.seed=1"}, "multipath train"));
    CHECK(j["profile"] == "paper");
    CHECK(j["config_digest"] == config_digest(paper));
    CHECK(j["overrides"][0] == "train.seed=1");
    CHECK(j["seeds"]["train"] == "1");
    const auto& h = j["hyperparameters"];
    CHECK(h["n_ex"] == "128");
    CHECK(h["initial_learning_rate"] == "0.00078125");
    CHECK(h["momentum"] == "0.9");
    CHECK(h["batchnorm_epsilon"] == "1e-06");
    CHECK(j["config"]["train.iterations"] == "80000");
    CHECK(j["config"].size() == config_fields(paper).size());
  }
}
