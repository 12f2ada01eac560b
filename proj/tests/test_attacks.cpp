#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>

#include "rp2/attacks.hpp"
#include "rp2/dataset.hpp"
#include "rp2/errors.hpp"

using namespace rp2;

namespace {

Eigen::VectorXf linear_weights() {
  Eigen::VectorXf w(16);
  for (int i = 0; i < 16; ++i) w[i] = 0.25f * static_cast<float>(i) - 1.7f;
  return w;
}

// Replays the slot seeds of spsa_gradient_batched to build the estimator's
// closed form for a linear loss: mean over probes of (w . xi) xi.
Eigen::VectorXd linear_closed_form(const Eigen::VectorXf& w, int s, std::uint64_t seed) {
  Rng rng(seed);
  const std::uint64_t base = rng();
  Eigen::VectorXd g = Eigen::VectorXd::Zero(w.size());
  for (int i = 0; i < s; ++i) {
    const Eigen::VectorXd xi = rademacher(w.size(), mix_seed(base, static_cast<std::uint64_t>(i))).cast<double>();
    g += w.cast<double>().dot(xi) * xi;
  }
  return g / s;
}

Image stop() { return render_sign(default_signs()[kStopClass]); }

const Model<float>& tiny_model() {
  static const Model<float> m = init_model<float>(make_architecture(ArchVariant::Smaller, 12), 17);
  return m;
}

AttackConfig quick_config(int iterations, std::uint64_t seed = 1) {
  AttackConfig c;
  c.iterations = iterations;
  c.rng_seed = seed;
  return c;
}

SpsaConfig spsa(int s) {
  SpsaConfig c;
  c.s = s;
  c.probe_chunk = 7;
  return c;
}

class FailingOracle : public ProbabilityOracle {
 public:
  Eigen::MatrixXf probabilities(const ImageBatch&) override { throw OracleError("gone"); }
  int num_classes() const override { return 12; }
};

class ConstantLabel : public LabelOracle {
 public:
  explicit ConstantLabel(int label) : label_(label) {}
  std::vector<int> labels(const ImageBatch& b) override {
    return std::vector<int>(static_cast<std::size_t>(b.cols()), label_);
  }
  int num_classes() const override { return 12; }

 private:
  int label_;
};

}  // namespace

TEST_CASE("spsa on a linear function equals its closed form for any step") {
  const Eigen::VectorXf w = linear_weights();
  const Eigen::VectorXf x0 = Eigen::VectorXf::LinSpaced(16, -0.3f, 0.4f);
  const auto f = [&](const Eigen::VectorXf& x) { return static_cast<double>(w.dot(x)); };
  for (int s : {1, 10, 100}) {
    for (double alpha : {0.01, 0.1}) {
      SpsaConfig c = spsa(s);
      c.alpha = alpha;
      Rng rng(99);
      const Eigen::VectorXf g = spsa_gradient(f, x0, c, rng);
      const Eigen::VectorXd expected = linear_closed_form(w, s, 99);
      CHECK_MESSAGE((g.cast<double>() - expected).cwiseAbs().maxCoeff() <= 1e-3, "s=" << s << " alpha=" << alpha);
    }
  }
}

TEST_CASE("spsa on a linear function is unbiased") {
  const Eigen::VectorXf w = linear_weights();
  const auto f = [&](const Eigen::VectorXf& x) { return static_cast<double>(w.dot(x)); };
  Rng rng(5);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(16);
  constexpr int kRuns = 4000;
  for (int r = 0; r < kRuns; ++r) mean += spsa_gradient(f, Eigen::VectorXf::Zero(16), spsa(1), rng).cast<double>();
  mean /= kRuns;
  // Per-coordinate standard error is |w| / sqrt(runs), about 0.08 here.
  CHECK((mean - w.cast<double>()).cwiseAbs().maxCoeff() < 0.35);
}

TEST_CASE("spsa of a constant loss is zero and batching does not matter") {
  Rng rng(1);
  const auto flat = [](const Eigen::VectorXf&) { return 3.0; };
  CHECK(spsa_gradient(flat, Eigen::VectorXf::Ones(10), spsa(20), rng).isZero(0.0f));
  const auto quad = [](const Eigen::VectorXf& x) { return static_cast<double>(x.squaredNorm()); };
  SpsaConfig a = spsa(50), b = spsa(50);
  a.probe_chunk = 1;
  b.probe_chunk = 64;
  Rng r1(8), r2(8);
  const Eigen::VectorXf x = Eigen::VectorXf::LinSpaced(10, 0, 1);
  CHECK(spsa_gradient(quad, x, a, r1) == spsa_gradient(quad, x, b, r2));
}

TEST_CASE("spsa uses exactly 2s evaluations") {
  int calls = 0;
  const auto f = [&](const Eigen::VectorXf& x) { ++calls; return static_cast<double>(x.sum()); };
  Rng rng(2);
  spsa_gradient(f, Eigen::VectorXf::Zero(5), spsa(13), rng);
  CHECK(calls == 26);
  SpsaConfig bad = spsa(0);
  CHECK_THROWS_AS(spsa_gradient(f, Eigen::VectorXf::Zero(5), bad, rng), ParameterError);
}

TEST_CASE("soft attack issues 2s queries per iteration") {
  ModelOracle inner(tiny_model());
  CountingProbabilityOracle oracle(inner);
  const auto r = soft_spsa_attack(oracle, stop(), quick_config(3), spsa(10), default_palette());
  CHECK(r.completed);
  CHECK(oracle.queries() == 3 * 2 * 10);
  CHECK(r.queries == oracle.queries());
  REQUIRE(r.trace.size() == 3);
  CHECK(r.trace[0].queries == 20);
  CHECK(r.trace[2].queries == 60);
}

TEST_CASE("hard attack issues 2sh queries per iteration") {
  HardModelOracle inner(tiny_model());
  CountingLabelOracle oracle(inner);
  HardLossConfig hard;
  hard.sub.h = 4;
  const auto r = hard_spsa_attack(oracle, stop(), quick_config(2), spsa(5), hard, default_palette());
  CHECK(r.completed);
  CHECK(oracle.queries() == 2 * 2 * 5 * 4);
  CHECK(r.queries == oracle.queries());
}

TEST_CASE("hard attack grows beta while the target never appears") {
  ConstantLabel oracle(0);
  HardLossConfig hard;
  hard.sub.h = 2;
  hard.sub.beta = 0.3;
  hard.beta_max = 1.0;
  const auto r = hard_spsa_attack(oracle, stop(), quick_config(4), spsa(2), hard, default_palette());
  REQUIRE(r.trace.size() == 4);
  CHECK(r.trace[0].beta == doctest::Approx(0.3));
  CHECK(r.trace[1].beta == doctest::Approx(0.6));
  CHECK(r.trace[2].beta == doctest::Approx(1.0));
  CHECK(r.trace[3].beta == doctest::Approx(1.0));
  CHECK(r.trace[0].adversarial == 1.0);
}

TEST_CASE("hard attack shrinks beta once the target dominates") {
  ConstantLabel oracle(4);
  HardLossConfig hard;
  hard.sub.h = 2;
  const auto r = hard_spsa_attack(oracle, stop(), quick_config(4), spsa(2), hard, default_palette());
  REQUIRE(r.trace.size() == 4);
  CHECK(r.trace[1].beta == doctest::Approx(0.15));
  CHECK(r.trace[3].beta == doctest::Approx(0.05));
}

TEST_CASE("perturbations respect bounds and the mask") {
  const Image x = stop();
  Eigen::VectorXf mask = sign_mask(x);
  for (int i = 0; i < x.pixels() / 2; ++i) mask[i] = 0.0f;  // top half off
  AttackConfig cfg = quick_config(15);
  cfg.learning_rate = 0.5;  // large steps push against the box
  AttackHooks hooks;
  hooks.mask = mask;
  const auto w = whitebox_attack(tiny_model(), x, cfg, default_palette(), hooks);
  ModelOracle oracle(tiny_model());
  const auto s = soft_spsa_attack(oracle, x, cfg, spsa(4), default_palette(), hooks);
  for (const auto* r : {&w, &s}) {
    CHECK_NOTHROW(r->perturbation.validate());
    CHECK(r->perturbation.mask == mask);
    CHECK(r->perturbation.delta.cwiseAbs().maxCoeff() <= 1.0f);
    CHECK(r->perturbation.delta.topRows(x.pixels() / 2).isZero(0.0f));
    CHECK_FALSE(r->perturbation.delta.isZero(0.0f));
  }
}

TEST_CASE("white-box attack lowers the target loss") {
  AttackConfig cfg = quick_config(40);
  cfg.transform_ranges = TransformRanges::fixed(TransformParams::identity());
  const auto r = whitebox_attack(tiny_model(), stop(), cfg, default_palette());
  REQUIRE(r.trace.size() == 40);
  CHECK(r.trace.back().adversarial < r.trace.front().adversarial);
  CHECK(r.queries == 0);
}

TEST_CASE("attacks are deterministic for a fixed seed") {
  ModelOracle oracle(tiny_model());
  const auto a = soft_spsa_attack(oracle, stop(), quick_config(3, 4), spsa(6), default_palette());
  const auto b = soft_spsa_attack(oracle, stop(), quick_config(3, 4), spsa(6), default_palette());
  const auto c = soft_spsa_attack(oracle, stop(), quick_config(3, 5), spsa(6), default_palette());
  CHECK(a.perturbation.delta == b.perturbation.delta);
  CHECK(a.perturbation.delta != c.perturbation.delta);
  const auto w1 = whitebox_attack(tiny_model(), stop(), quick_config(5, 4), default_palette());
  const auto w2 = whitebox_attack(tiny_model(), stop(), quick_config(5, 4), default_palette());
  CHECK(w1.perturbation.delta == w2.perturbation.delta);
}

TEST_CASE("zero iterations return the zero perturbation; s = 1 is valid") {
  ModelOracle oracle(tiny_model());
  const auto r = soft_spsa_attack(oracle, stop(), quick_config(0), spsa(1), default_palette());
  CHECK(r.perturbation.delta.isZero(0.0f));
  CHECK(r.trace.empty());
  CHECK(r.queries == 0);
  const auto one = soft_spsa_attack(oracle, stop(), quick_config(2), spsa(1), default_palette());
  CHECK(one.completed);
  CHECK(one.queries == 4);
  CHECK_NOTHROW(one.perturbation.validate());
}

TEST_CASE("oracle failure stops the attack and keeps the partial result") {
  FailingOracle oracle;
  const auto r = soft_spsa_attack(oracle, stop(), quick_config(5), spsa(2), default_palette());
  CHECK_FALSE(r.completed);
  CHECK(r.error.find("gone") != std::string::npos);
  CHECK(r.perturbation.delta.isZero(0.0f));
}

TEST_CASE("invalid attack settings are rejected") {
  AttackConfig cfg = quick_config(1);
  cfg.target_class = cfg.true_class;
  CHECK_THROWS_AS(cfg.validate(), ParameterError);
  cfg = quick_config(1);
  cfg.target_class = 12;
  CHECK_THROWS_AS(whitebox_attack(tiny_model(), stop(), cfg, default_palette()), ParameterError);
  HardLossConfig hard;
  hard.beta_max = 0.01;
  CHECK_THROWS_AS(hard.validate(), ParameterError);
  CHECK(parse_access_level(to_string(AccessLevel::Hard)) == AccessLevel::Hard);
  CHECK_THROWS_AS(parse_access_level("grey"), ParameterError);
}

TEST_CASE("derive_mask thresholds") {
  Image x(6, 6);
  x.rgb.setConstant(0.5f);
  Perturbation p = Perturbation::zeros(x, Eigen::VectorXf::Ones(36));
  p.delta(0, 0) = 1.0f;    // isolated peak at (0,0)
  p.delta(14, 1) = -0.6f;  // (2,2)
  p.delta(15, 2) = 0.5f;   // (2,3), 8-connected to (2,2)
  p.delta(35, 0) = 0.1f;   // (5,5)

  const auto at_peak = derive_mask(p, 1.0);
  CHECK(at_peak.sum() == 1.0f);
  CHECK(at_peak[0] == 1.0f);
  CHECK(derive_mask(p, 0.5).sum() == 3.0f);
  CHECK(derive_mask(p, 0.05).sum() == 4.0f);
  // Only the two-pixel component survives a minimum area of two.
  const auto big = derive_mask(p, 0.05, 2);
  CHECK(big.sum() == 2.0f);
  CHECK(big[14] == 1.0f);
  CHECK(big[15] == 1.0f);
  CHECK_THROWS_AS(derive_mask(p, 0.0), InputError);
  CHECK_THROWS_AS(derive_mask(p, 1.5), InputError);
  CHECK(derive_mask(Perturbation::zeros(x, Eigen::VectorXf::Ones(36)), 0.5).sum() == 0.0f);

  const Perturbation masked = apply_mask(p, big);
  CHECK(masked.delta(0, 0) == 0.0f);
  CHECK(masked.delta(14, 1) == -0.6f);
  CHECK_NOTHROW(masked.validate());
}

TEST_CASE("attack artifacts round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "rp2_attack_artifacts";
  std::filesystem::remove_all(dir);
  const Image x = stop();
  const auto r = whitebox_attack(tiny_model(), x, quick_config(5), default_palette());
  write_attack_artifacts(dir, x, r);
  for (const char* f : {"trace.csv", "perturbation.png", "composite.png", "mask.png"})
    CHECK(std::filesystem::exists(dir / f));
  const Perturbation back = load_perturbation(dir);
  CHECK(back.mask == r.perturbation.mask);
  CHECK((back.delta - r.perturbation.delta).cwiseAbs().maxCoeff() <= 1.0f / 255.0f + 1e-6f);
  std::filesystem::remove_all(dir);
}
