#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "rp2/evaluation.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

// Runs the CLI inside `dir`, capturing stderr.
Outcome run_cli(const fs::path& dir, const std::string& args) {
  const fs::path err = dir / "stderr.txt";
  const std::string cmd = "cd '" + dir.string() + "' && '" RP2_CLI "' " + args + " 2> '" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// Small dataset and a briefly trained model shared by the cases below.
const fs::path& workspace() {
  static const fs::path d = [] {
    const fs::path w = fresh_dir("rp2_cli_ws");
    REQUIRE(run_cli(w, "gen-data -o data --set dataset.per_class=20").code == 0);
    REQUIRE(run_cli(w, "train --data data -o tr --set train.epochs=2").code == 0);
    return w;
  }();
  return d;
}

}  // namespace

TEST_CASE("train writes a checkpoint, metrics and a snapshot") {
  const fs::path& w = workspace();
  CHECK(fs::exists(w / "tr/model.ckpt"));
  CHECK(fs::exists(w / "tr/config.ini"));
  CHECK(slurp(w / "tr/metrics.csv").rfind("#format=rp2-train-metrics/1\n", 0) == 0);
  CHECK(slurp(w / "data/config.ini").find("per_class = 20") != std::string::npos);
}

TEST_CASE("attack, evaluate and report form a pipeline") {
  const fs::path& w = workspace();
  REQUIRE(run_cli(w, "attack --mode white --model tr/model.ckpt -o white --set attack.iterations=5").code == 0);
  for (const char* f : {"config.ini", "trace.csv", "perturbation.png", "composite.png", "mask.png", "result.json"})
    CHECK(fs::exists(w / "white" / f));
  REQUIRE(run_cli(w, "evaluate --run white --set eval.num_transforms=50 --reference white/composite.png").code == 0);
  REQUIRE(run_cli(w, "report white -o table.csv").code == 0);
  const auto rows = rp2::read_report(w / "table.csv");
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].attack_type == "white");
  CHECK(rows[0].rate_true + rows[0].rate_target + rows[0].rate_other == doctest::Approx(1.0));
  REQUIRE(rows[0].ssim_vs_reference.has_value());
  CHECK(*rows[0].ssim_vs_reference == doctest::Approx(1.0));
}

TEST_CASE("identical configs give identical artifacts, also when replayed from the snapshot") {
  const fs::path& w = workspace();
  const std::string args = "attack --mode white --model tr/model.ckpt --set attack.iterations=5 -o ";
  REQUIRE(run_cli(w, args + "d1").code == 0);
  REQUIRE(run_cli(w, args + "d2").code == 0);
  REQUIRE(run_cli(w, "attack -c d1/config.ini -o d3").code == 0);
  for (const char* f : {"config.ini", "trace.csv", "perturbation.png", "composite.png", "mask.png", "result.json"}) {
    CHECK(slurp(w / "d1" / f) == slurp(w / "d2" / f));
    CHECK(slurp(w / "d1" / f) == slurp(w / "d3" / f));
  }
}

TEST_CASE("hard attack runs against a stdio oracle with exact query counts") {
  const fs::path& w = workspace();
  const std::string oracle = "--oracle 'stdio:" RP2_CLI " serve --stdio --model tr/model.ckpt --mode hard'";
  REQUIRE(run_cli(w, "attack --mode hard-spsa " + oracle +
                     " -o hard --set attack.iterations=2 --set spsa.s=10 --set hard.h=3")
              .code == 0);
  CHECK(slurp(w / "hard/result.json").find("\"queries\": 120") != std::string::npos);

  // A hard server cannot serve the soft attack.
  const Outcome soft = run_cli(w, "attack --mode soft-spsa " + oracle + " -o soft --set attack.iterations=1");
  CHECK(soft.code != 0);
  CHECK(soft.err.find("soft") != std::string::npos);
}

TEST_CASE("failures exit nonzero with a diagnostic") {
  const fs::path& w = workspace();
  Outcome o = run_cli(w, "attack --mode white --model tr/model.ckpt -o bad --set attack.iterations=ten");
  CHECK(o.code != 0);
  CHECK(o.err.find("attack.iterations") != std::string::npos);

  o = run_cli(w, "attack --mode purple -o bad");
  CHECK(o.code != 0);
  CHECK(o.err.find("attack.mode") != std::string::npos);

  o = run_cli(w, "train --data missing_dir -o bad");
  CHECK(o.code != 0);
  CHECK(o.err.find("paths.dataset") != std::string::npos);

  std::ofstream(w / "broken.ini") << "[meta]\nformat = rp2-config/1\n[spsa]\nsteps = 3\n";
  o = run_cli(w, "attack -c broken.ini -o bad");
  CHECK(o.code != 0);
  CHECK(o.err.find("spsa.steps") != std::string::npos);

  o = run_cli(w, "evaluate --run nowhere");
  CHECK(o.code != 0);
  CHECK_FALSE(o.err.empty());
}
