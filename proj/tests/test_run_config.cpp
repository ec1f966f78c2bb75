#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <optional>
#include <string>
#include <stdexcept>

#include "ecomrtl/errors.hpp"
#include "ecomrtl/run_config.hpp"

using namespace ecomrtl;

namespace {

std::string lookup(const RunConfig& cfg, const std::string& key) {
  for (const auto& [k, v] : flatten(cfg)) {
    if (k == key) return v;
  }
  return "<missing>";
}

// Restores ECO_MRTL_SEED when a test case ends.
struct SeedEnv {
  std::optional<std::string> saved;
  SeedEnv() {
    if (const char* v = std::getenv("ECO_MRTL_SEED")) saved = v;
  }
  ~SeedEnv() {
    if (saved) {
      setenv("ECO_MRTL_SEED", saved->c_str(), 1);
    } else {
      unsetenv("ECO_MRTL_SEED");
    }
  }
};

}  // namespace

TEST_CASE("schema covers every tunable section") {
  const auto schema = config_schema();
  CHECK(std::is_sorted(schema.begin(), schema.end()));
  const auto has = [&](const std::string& key) {
    return std::any_of(schema.begin(), schema.end(), [&](const auto& kv) { return kv.first == key; });
  };
  for (const char* key : {"space.red_s.hi", "space.penetration_levels", "sim.horizon", "sim.emission.beta0",
                          "sim.idm.max_accel", "nominal.k_p", "reward.w1", "train.iterations", "eval.seeds",
                          "eval.bootstrap_resamples", "paths.corpus", "threads", "verbosity", "seed"}) {
    CHECK_MESSAGE(has(key), key);
  }
  CHECK_FALSE(has("train.seed"));
  CHECK_FALSE(has("train.threads"));
}

TEST_CASE("defaults round-trip through config text") {
  const RunConfig defaults;
  RunConfig cfg;
  cfg.env.nominal.k_p = 0.1;
  cfg.train.iterations = 3;
  apply_config_text(cfg, format_run_config(defaults), "defaults");
  CHECK(flatten(cfg) == flatten(defaults));
}

TEST_CASE("set_config_value parses by the default's type") {
  RunConfig cfg;
  set_config_value(cfg, "reward.w1", "-3.5");
  CHECK(cfg.env.reward.w1 == -3.5);
  set_config_value(cfg, "train.iterations", " 7 ");
  CHECK(cfg.train.iterations == 7);
  set_config_value(cfg, "space.red_s.hi", "33");
  CHECK(cfg.space.red_s.hi == 33.0);
  set_config_value(cfg, "space.penetration_levels", "0.5,1");
  CHECK(cfg.space.penetration_levels == std::vector<double>{0.5, 1.0});
  set_config_value(cfg, "eval.seeds", "9, 10");
  CHECK(cfg.eval.seeds == std::vector<std::uint64_t>{9, 10});
  set_config_value(cfg, "paths.out", "runs/x");
  CHECK(cfg.paths.out == "runs/x");
  set_config_value(cfg, "threads", "2");
  CHECK(cfg.threads == 2);
  CHECK(cfg.train.threads == 2);
  set_config_value(cfg, "seed", "42");
  CHECK(cfg.seed == 42u);
  CHECK(lookup(cfg, "seed") == "42");
}

TEST_CASE("bad keys and values are rejected and leave the config unchanged") {
  RunConfig cfg;
  const auto before = flatten(cfg);
  CHECK_THROWS_AS(set_config_value(cfg, "sim.nope", "1"), std::invalid_argument);
  CHECK_THROWS_AS(set_config_value(cfg, "sim", "1"), std::invalid_argument);
  CHECK_THROWS_AS(set_config_value(cfg, "", "1"), std::invalid_argument);
  CHECK_THROWS_AS(set_config_value(cfg, "sim..dt", "1"), std::invalid_argument);
  CHECK_THROWS_AS(set_config_value(cfg, "train.iterations", "2.5"), std::invalid_argument);
  CHECK_THROWS_AS(set_config_value(cfg, "sim.dt", "fast"), std::invalid_argument);
  CHECK_THROWS_AS(set_config_value(cfg, "sim.dt", "nan"), std::invalid_argument);
  CHECK_THROWS_AS(set_config_value(cfg, "eval.seeds", "1,-2"), std::invalid_argument);
  CHECK_THROWS_AS(set_config_value(cfg, "seed", "-1"), std::invalid_argument);
  CHECK(flatten(cfg) == before);
}

TEST_CASE("config text: comments, blank lines and line-numbered errors") {
  RunConfig cfg;
  apply_config_text(cfg, "# header\n\n  sim.horizon = 60  \ntrain.lr=0.001\n", "t.cfg");
  CHECK(cfg.env.sim.horizon == 60.0);
  CHECK(cfg.train.lr == 0.001);

  RunConfig other;
  try {
    apply_config_text(other, "sim.horizon = 60\nnot a pair\n", "bad.cfg");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("bad.cfg") != std::string::npos);
    CHECK(std::string(e.what()).find('2') != std::string::npos);
  }
  // Nothing applied on error, not even the good first line.
  CHECK(other.env.sim.horizon == RunConfig{}.env.sim.horizon);
  CHECK_THROWS_AS(apply_config_text(other, "sim.bogus = 1\n", "bad.cfg"), ParseError);
}

TEST_CASE("validate rejects out-of-range values") {
  RunConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.eval.seeds.clear();
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = RunConfig{};
  cfg.env.sim.dt = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = RunConfig{};
  cfg.threads = -1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("seed precedence: flag, config, environment, zero") {
  SeedEnv guard;
  RunConfig cfg;
  unsetenv("ECO_MRTL_SEED");
  CHECK(resolve_seed(std::nullopt, cfg) == 0u);
  setenv("ECO_MRTL_SEED", "17", 1);
  CHECK(resolve_seed(std::nullopt, cfg) == 17u);
  cfg.seed = 5;
  CHECK(resolve_seed(std::nullopt, cfg) == 5u);
  CHECK(resolve_seed(9, cfg) == 9u);
  cfg.seed.reset();
  setenv("ECO_MRTL_SEED", "seventeen", 1);
  CHECK_THROWS_AS(resolve_seed(std::nullopt, cfg), std::invalid_argument);
  CHECK(resolve_seed(3, cfg) == 3u);
}
