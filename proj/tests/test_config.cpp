#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "rp2/config.hpp"

using namespace rp2;

namespace {

std::string with_meta(const std::string& body) { return "[meta]\nformat = rp2-config/1\n" + body; }

std::string error_field(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "";
}

}  // namespace

TEST_CASE("defaults parse from a bare header") {
  const ExperimentConfig c = parse_config(with_meta(""));
  CHECK(c.attack_mode == "white");
  CHECK(c.spsa.s == SpsaConfig{}.s);
  CHECK(c.eval.num_transforms == EvalConfig{}.num_transforms);
}

TEST_CASE("values are applied to the matching fields") {
  const ExperimentConfig c = parse_config(with_meta(R"(
[attack]
mode = hard-spsa
iterations = 25
learning_rate = 0.1
[spsa]
s = 100
alpha = 0.2
[hard]
h = 50
beta_max = 1
[transforms]
rotation_deg = -10 10
[steal]
arch = larger
seed_source = ood
global_iterations = 6
warm_start = false
[eval]
seed = 18446744073709551615
)"));
  CHECK(c.attack_mode == "hard-spsa");
  CHECK(c.attack.iterations == 25);
  CHECK(c.attack.learning_rate == 0.1);
  CHECK(c.spsa.s == 100);
  CHECK(c.hard.sub.h == 50);
  CHECK(c.hard.beta_max == 1.0);
  CHECK(c.attack.transform_ranges.rotation_deg.min == -10.0);
  CHECK(c.steal.surrogate_arch == ArchVariant::Larger);
  CHECK(c.steal.seed_source == SeedSource::OOD);
  CHECK(c.steal.global_iterations == 6);
  CHECK_FALSE(c.steal.warm_start);
  CHECK(c.eval.rng_seed == 18446744073709551615ull);
}

TEST_CASE("evaluation ranges follow the attack ranges unless overridden") {
  const auto a = parse_config(with_meta("[transforms]\nscale = 0.6 0.9\n"));
  CHECK(a.eval.transform_ranges.scale.min == 0.6);
  const auto b = parse_config(with_meta("[transforms]\nscale = 0.6 0.9\n[eval_transforms]\nscale = 0.7 0.8\n"));
  CHECK(b.attack.transform_ranges.scale.max == 0.9);
  CHECK(b.eval.transform_ranges.scale.max == 0.8);
}

TEST_CASE("schema violations name the offending field") {
  CHECK(error_field(with_meta("[attack]\niterations = ten\n")) == "attack.iterations");
  CHECK(error_field(with_meta("[attack]\niterationz = 10\n")) == "attack.iterationz");
  CHECK(error_field(with_meta("[atack]\niterations = 10\n")) == "atack");
  CHECK(error_field(with_meta("[attack]\nmode = gray\n")) == "attack.mode");
  CHECK(error_field(with_meta("[spsa]\nalpha = 0.1 0.2\n")) == "spsa.alpha");
  CHECK(error_field(with_meta("[transforms]\nscale = 0.5\n")) == "transforms.scale");
  CHECK(error_field(with_meta("[steal]\nwarm_start = yes\n")) == "steal.warm_start");
  CHECK(error_field(with_meta("[steal]\narch = huge\n")) == "steal.arch");
  CHECK(error_field(with_meta("[eval]\nseed = -1\n")) == "eval.seed");
  CHECK(error_field(with_meta("[dataset]\nper_class = 0\n")) == "dataset.per_class");
  CHECK(error_field(with_meta("[spsa]\ns = 0\n")) == "spsa");
  CHECK(error_field("[attack]\niterations = 1\n") == "meta.format");
  CHECK(error_field("[meta]\nformat = rp2-config/9\n") == "meta.format");
  CHECK(error_field("[meta\n") == "line 1");
  CHECK_THROWS_AS(parse_config(with_meta("[attack]\nmode = gray\n")), ParameterError);
}

TEST_CASE("snapshot round trips") {
  ExperimentConfig c = parse_config(with_meta(""));
  c.attack_mode = "transfer";
  c.attack.learning_rate = 0.1 + 0.2;  // not exactly representable in short decimal
  c.attack.transform_ranges.brightness = {-0.125, 0.3};
  c.eval.transform_ranges.rotation_deg = {-5, 5};
  c.paths.oracle = "stdio:rp2 serve --stdio --mode hard";
  c.steal.extra_class = false;
  c.train.rng_seed = 1234567890123ull;
  const std::string text = to_ini(c);
  const ExperimentConfig back = parse_config(text);
  CHECK(to_ini(back) == text);
  CHECK(back.attack.learning_rate == c.attack.learning_rate);
  CHECK(back.paths.oracle == c.paths.oracle);
  CHECK(back.eval.transform_ranges.rotation_deg.max == 5.0);
}

TEST_CASE("load_config reports the file and the field") {
  const auto path = std::filesystem::temp_directory_path() / "rp2_config_test.ini";
  {
    std::ofstream(path) << with_meta("[attack]\niterations = x\n");
  }
  try {
    load_config(path);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find(path.string()) != std::string::npos);
    CHECK(std::string(e.what()).find("attack.iterations") != std::string::npos);
  }
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_config("/nonexistent/x.ini"), IoError);
}

TEST_CASE("single fields can be overridden by path") {
  ExperimentConfig c;
  set_field(c, "spsa.s", "100");
  set_field(c, "transforms.scale", "0.5 0.7");
  CHECK(c.spsa.s == 100);
  CHECK(c.attack.transform_ranges.scale.max == 0.7);
  CHECK_THROWS_AS(set_field(c, "spsa.t", "1"), ConfigError);
  CHECK_THROWS_AS(set_field(c, "nothing.s", "1"), ConfigError);
  CHECK_THROWS_AS(set_field(c, "spsa", "1"), ConfigError);
  CHECK_THROWS_AS(set_field(c, "spsa.s", "many"), ConfigError);
}
