#include <doctest.h>

#include <cmath>
#include <functional>
#include <string>

#include "multipath/config.hpp"
#include "multipath/errors.hpp"

using namespace multipath;

namespace {

std::string error_path(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.path();
  }
  return "<no error>";
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("desk profile") {
    const ExperimentConfig c = profile_config("desk");
    CHECK(c.profile == "desk");
    CHECK(c.strategy == Strategy::actor);
    CHECK(c.architecture.columns == 3);
    CHECK(c.architecture.base_width == 4);
    CHECK(c.architecture.growth == 2);
    CHECK(c.architecture.classes == 10);
    CHECK(c.data.kind == "hybrid");
    CHECK(c.data.train_size == 4000);
    CHECK(c.data.validation_size == 1000);
    CHECK(c.optim.batch_size == 128);
    CHECK(c.optim.lr_half_life == 250);
    CHECK(c.optim.temperature_half_life == 250);
    CHECK(c.train.iterations == 2000);
    CHECK(c.train.metrics_interval == 50);
    CHECK(c.cost.k_cpt == 8e-9);
    CHECK_NOTHROW(c.validate());
  }

  TEST_CASE("paper profile") {
    const ExperimentConfig c = profile_config("paper");
    CHECK(c.optim.batch_size == 128);
    CHECK(c.optim.initial_learning_rate() == 0.1 / 128);
    CHECK(c.optim.momentum == 0.9);
    CHECK(c.optim.lr_half_life == 10000);
    CHECK(c.optim.temperature_half_life == 10000);
    CHECK(c.optim.actor_temperature == 1.0);
    CHECK(c.optim.critic_temperature == 0.1);
    CHECK(c.regularizer.k_dec == 0.01);
    CHECK(c.regularizer.k_ure == 0.001);
    CHECK(c.regularizer.k_L2 == 1e-4);
    CHECK(c.architecture.batchnorm_epsilon == 1e-6);
    CHECK(c.architecture.batchnorm_decay == 0.9);
    CHECK(c.train.iterations == 80000);
    CHECK(c.architecture.columns == 8);
    CHECK_NOTHROW(c.validate());
    CHECK_THROWS_AS(profile_config("laptop"), ConfigError);
  }

  TEST_CASE("default sweep") {
    const auto k = default_kcpt_sweep();
    REQUIRE(k.size() == 8);
    CHECK(k[0] == 0);
    for (int i = 0; i < 7; ++i) CHECK(k[static_cast<std::size_t>(i + 1)] == 1e-9 * std::exp2(i));
    CHECK(k.back() == doctest::Approx(6.4e-8).epsilon(1e-15));
    CHECK(profile_config("desk").sweep.k_cpt == k);
  }

  TEST_CASE("parsing applies keys over the selected profile") {
    const ExperimentConfig c = parse_config(R"(
profile = "paper"
strategy = "pragmatic-critic"
[optim]
talr = false
batch_size = 32
[cost]
k_cpt = 2e-9
k_cpt_set = [0, 1e-9]
[data]
kind = "cifar5"
)");
    CHECK(c.profile == "paper");
    CHECK(c.strategy == Strategy::pragmatic_critic);
    CHECK_FALSE(c.optim.talr);
    CHECK(c.optim.batch_size == 32);
    CHECK(c.cost.k_cpt == 2e-9);
    CHECK(c.cost.k_cpt_set == std::vector<double>{0, 1e-9});
    CHECK(c.architecture.classes == 5);
    CHECK(c.optim.lr_half_life == 10000);
    CHECK(parse_config("").architecture.columns == 3);
  }

  TEST_CASE("parse errors name the field") {
    CHECK(error_path([] { parse_config("[optim]\nlearning = 1\n"); }) == "optim.learning");
    CHECK(error_path([] { parse_config("colour = 1\n"); }) == "colour");
    CHECK(error_path([] { parse_config("[train]\niterations = \"many\"\n"); }) == "train.iterations");
    CHECK(error_path([] { parse_config("[train]\niterations = 0\n"); }) == "train.iterations");
    CHECK(error_path([] { parse_config("[train]\nseed = -1\n"); }) == "train.seed");
    CHECK(error_path([] { parse_config("[optim]\ntalr = 1\n"); }) == "optim.talr");
    CHECK(error_path([] { parse_config("[cost]\nk_cpt = -1e-9\n"); }) == "cost.k_cpt");
    CHECK(error_path([] { parse_config("[cost]\nk_cpt_set = [1e-9, -1]\n"); }) == "cost.k_cpt_set");
    CHECK(error_path([] { parse_config("[data]\nkind = \"svhn\"\n"); }) == "data.kind");
    CHECK(error_path([] { parse_config("strategy = \"greedy\"\n"); }) == "strategy");
    CHECK(error_path([] { parse_config("profile = \"huge\"\n"); }) == "profile");
    CHECK(error_path([] { parse_config("[architecture]\ncolumns = 9\n"); }) == "architecture.columns");
    CHECK(error_path([] { parse_config("[architecture]\ntree = \"[T]\"\n"); }) == "architecture.tree");
    CHECK(error_path([] { parse_config("[optim]\nbatch_size = 0\n"); }).rfind("optim", 0) == 0);
    CHECK(error_path([] { parse_config("[cost]\nsample_per_example = true\n"); }) ==
          "architecture.accepts_kcpt");
    CHECK(error_path([] {
            parse_config("strategy = \"optimistic-critic\"\n[train]\ncritic_mode = \"sampled\"\n");
          }) == "train.critic_mode");
    CHECK(error_path([] { parse_config("[train\n", "bad.toml"); }).rfind("bad.toml:1:", 0) == 0);
    CHECK_NOTHROW(parse_config("[architecture]\ncolumns = 9\nallow_any_column_count = true\n"));
  }

  TEST_CASE("overrides") {
    ExperimentConfig c = profile_config("desk");
    apply_override(c, "train.iterations=100");
    CHECK(c.train.iterations == 100);
    apply_override(c, "data.kind=cifar2");
    CHECK(c.data.kind == "cifar2");
    CHECK(c.architecture.classes == 2);
    apply_override(c, "strategy", "static-baseline");
    CHECK(c.architecture.statically_routed);
    apply_override(c, "cost.k_cpt_set=[1e-9, 2e-9]");
    CHECK(c.cost.k_cpt_set == std::vector<double>{1e-9, 2e-9});
    apply_override(c, "cost.k_cpt=0");
    CHECK(c.cost.k_cpt == 0);
    apply_override(c, "data.source_dir=/tmp/some where");
    CHECK(c.data.source_dir == "/tmp/some where");

    CHECK(error_path([&] { apply_override(c, "train.iterations"); }) == "train.iterations");
    CHECK(error_path([&] { apply_override(c, "=3"); }) == "=3");
    CHECK(error_path([&] { apply_override(c, "train.iters=3"); }) == "train.iters");
    CHECK(error_path([&] { apply_override(c, "train.iterations=ten"); }) == "train.iterations");
    CHECK(error_path([&] { apply_override(c, "profile=paper"); }) == "profile");
  }

  TEST_CASE("every field is addressable and round-trips") {
    ExperimentConfig c = profile_config("desk");
    apply_override(c, "strategy=pragmatic-critic-classification-error");
    apply_override(c, "architecture.tree=[H,[T,T]]");
    apply_override(c, "architecture.accepts_kcpt=true");
    apply_override(c, "cost.sample_per_example=true");
    apply_override(c, "regularizer.k_L2=3.3e-5");
    apply_override(c, "train.critic_mode=sampled");
    apply_override(c, "optim.momentum=0.85");
    c.validate();

    const auto fields = config_fields(c);
    CHECK(fields.size() > 40);
    CHECK(fields.front().first == "profile");
    for (const auto& [path, value] : fields) {
      if (path == "profile") continue;
      ExperimentConfig copy = c;
      CAPTURE(path);
      CHECK_NOTHROW(apply_override(copy, path, value));
      CHECK(config_fields(copy) == fields);
    }

    const ExperimentConfig back = parse_config(to_toml(c));
    CHECK(config_fields(back) == fields);
    CHECK(to_toml(back) == to_toml(c));
    CHECK(config_digest(back) == config_digest(c));
    CHECK(config_digest(c).size() == 16);

    ExperimentConfig other = c;
    apply_override(other, "train.seed=2");
    CHECK(config_digest(other) != config_digest(c));

    const ExperimentConfig paper = profile_config("paper");
    CHECK(config_fields(parse_config(to_toml(paper))) == config_fields(paper));
  }

  TEST_CASE("number formatting is shortest round-trip") {
    CHECK(format_number(0.1 / 128) == "0.00078125");
    CHECK(format_number(1e-6) == "1e-06");
    CHECK(format_number(10000) == "10000");
    CHECK(format_number(0.1) == "0.1");
    CHECK(format_number(1) == "1");
    for (double v : {1.0 / 3, 6.4e-8, 123456.789, -2.5e-300})
      CHECK(std::stod(format_number(v)) == v);
  }

  TEST_CASE("class counts and directories") {
    CHECK(class_count("hybrid") == 10);
    CHECK(class_count("cifar10") == 10);
    CHECK(class_count("cifar5") == 5);
    CHECK(class_count("cifar2") == 2);
    CHECK_THROWS(class_count("mnist"));
    DataConfig d;
    d.source_dir = "/a";
    d.cache_dir = "/b";
    CHECK(resolve_source_dir(d) == "/a");
    CHECK(resolve_cache_dir(d) == "/b");
  }
}
