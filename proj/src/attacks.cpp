#include "rp2/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <queue>

#include "rp2/adam.hpp"
#include "rp2/errors.hpp"

namespace rp2 {

Perturbation Perturbation::zeros(const Image& x, const Eigen::VectorXf& mask, std::string id) {
  if (mask.size() != x.pixels()) throw DimensionError("perturbation mask does not match image");
  Perturbation p;
  p.height = x.height;
  p.width = x.width;
  p.delta = Eigen::MatrixXf::Zero(x.pixels(), 3);
  p.mask = mask;
  p.base_image_id = std::move(id);
  return p;
}

void Perturbation::enforce() {
  delta = delta.cwiseMax(-1.0f).cwiseMin(1.0f);
  delta = delta.array().colwise() * mask.array();
}

void Perturbation::validate() const {
  const Eigen::Index n = Eigen::Index(height) * width;
  if (delta.rows() != n || delta.cols() != 3 || mask.size() != n)
    throw DimensionError("perturbation: inconsistent shapes");
  if ((mask.array() != 0.0f && mask.array() != 1.0f).any())
    throw InputError("perturbation: mask is not binary");
  if ((delta.array().abs() > 1.0f).any()) throw InputError("perturbation: delta outside [-1,1]");
  for (Eigen::Index i = 0; i < n; ++i)
    if (mask[i] == 0.0f && !delta.row(i).isZero(0.0f))
      throw InputError("perturbation: nonzero delta outside the mask");
}

Eigen::VectorXf sign_mask(const Image& x) {
  return (x.coverage().array() >= 0.5f).cast<float>();
}

void AttackConfig::validate() const {
  if (target_class == true_class) throw ParameterError("attack: target class equals true class");
  if (target_class < 0 || true_class < 0) throw ParameterError("attack: negative class index");
  if (iterations < 0) throw ParameterError("attack: iterations must be >= 0");
  if (!(learning_rate > 0.0)) throw ParameterError("attack: learning_rate must be > 0");
  if (eot_batch < 1) throw ParameterError("attack: eot_batch must be >= 1");
  weights.validate();
  transform_ranges.validate();
}

void SpsaConfig::validate() const {
  if (s < 1) throw ParameterError("spsa: s must be >= 1");
  if (!(alpha > 0.0)) throw ParameterError("spsa: alpha must be > 0");
  if (probe_chunk < 1) throw ParameterError("spsa: probe_chunk must be >= 1");
}

void HardLossConfig::validate() const {
  sub.validate();
  if (!(beta_floor >= 0.0) || !(beta_max >= beta_floor))
    throw ParameterError("hard loss: need 0 <= beta_floor <= beta_max");
}

Eigen::VectorXf rademacher(Eigen::Index dim, std::uint64_t slot_seed) {
  Rng rng(slot_seed);
  Eigen::VectorXf xi(dim);
  std::uint64_t bits = 0;
  for (Eigen::Index i = 0; i < dim; ++i) {
    if (i % 64 == 0) bits = rng();
    xi[i] = (bits & 1u) ? 1.0f : -1.0f;
    bits >>= 1;
  }
  return xi;
}

SpsaEstimate spsa_gradient_batched(const BatchLossFn& loss, const Eigen::VectorXf& x,
                                   const SpsaConfig& config, Rng& rng) {
  config.validate();
  const Eigen::Index dim = x.size();
  const std::uint64_t base = rng();
  const auto a = static_cast<float>(config.alpha);
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(dim);
  double loss_sum = 0.0;
  Eigen::MatrixXf candidates;
  std::vector<Eigen::VectorXf> xis;
  for (int start = 0; start < config.s; start += config.probe_chunk) {
    const int count = std::min(config.probe_chunk, config.s - start);
    candidates.resize(dim, 2 * count);
    xis.clear();
    for (int i = 0; i < count; ++i) {
      xis.push_back(rademacher(dim, mix_seed(base, static_cast<std::uint64_t>(start + i))));
      candidates.col(2 * i) = x + a * xis.back();
      candidates.col(2 * i + 1) = x - a * xis.back();
    }
    const Eigen::VectorXd values = loss(candidates);
    if (values.size() != 2 * count) throw InputError("spsa: loss returned a wrong number of values");
    for (int i = 0; i < count; ++i) {
      acc += (values[2 * i] - values[2 * i + 1]) * xis[static_cast<std::size_t>(i)].cast<double>();
      loss_sum += values[2 * i] + values[2 * i + 1];
    }
  }
  SpsaEstimate out;
  out.gradient = (acc / (2.0 * config.s * config.alpha)).cast<float>();
  out.evaluations = 2LL * config.s;
  out.mean_loss = loss_sum / static_cast<double>(out.evaluations);
  return out;
}

Eigen::VectorXf spsa_gradient(const std::function<double(const Eigen::VectorXf&)>& loss,
                              const Eigen::VectorXf& x, const SpsaConfig& config, Rng& rng) {
  const BatchLossFn batched = [&](const Eigen::MatrixXf& c) {
    Eigen::VectorXd out(c.cols());
    for (Eigen::Index j = 0; j < c.cols(); ++j) out[j] = loss(c.col(j));
    return out;
  };
  return spsa_gradient_batched(batched, x, config, rng).gradient;
}

namespace {

Eigen::VectorXf resolve_mask(const Image& x, const AttackHooks& hooks) {
  if (hooks.mask.size() == 0) return sign_mask(x);
  if (hooks.mask.size() != x.pixels()) throw DimensionError("attack mask does not match image");
  return (hooks.mask.array() != 0.0f).cast<float>();
}

// Optimisation state shared by the three attack loops.
struct Loop {
  const Image& x;
  const AttackConfig& config;
  const Palette& palette;
  const AttackHooks& hooks;
  AttackResult result;
  AdamState<float> adam;
  TransformSampler sampler;

  Loop(const Image& image, const AttackConfig& cfg, const Palette& pal, const AttackHooks& h)
      : x(image), config(cfg), palette(pal), hooks(h), sampler(seeded(cfg)) {
    config.validate();
    palette.validate();
    result.perturbation = Perturbation::zeros(x, resolve_mask(x, hooks));
  }

  static TransformRanges seeded(const AttackConfig& cfg) {
    TransformRanges r = cfg.transform_ranges;
    r.rng_seed = cfg.rng_seed;
    return r;
  }

  Perturbation& p() { return result.perturbation; }

  // Adds the analytic regulariser gradient, takes one Adam step and records
  // the trace row. Returns false (and marks the result) on divergence.
  bool step(int iteration, const Eigen::MatrixXf& adversarial_grad, double adversarial_loss,
            double beta = 0.0) {
    ObjectiveTerms terms;
    Eigen::MatrixXf grad = regularizer_gradient(x, p().delta, p().mask, config.weights, palette, &terms);
    grad += adversarial_grad;
    TraceRow row{iteration, adversarial_loss, terms.tv, terms.nps, result.queries, beta};
    result.trace.push_back(row);
    if (hooks.on_iteration) hooks.on_iteration(row);
    if (!std::isfinite(adversarial_loss) || !std::isfinite(terms.nps) ||
        !((grad.array() * 0.0f).sum() == 0.0f)) {
      result.completed = false;
      result.error = "non-finite loss or gradient at iteration " + std::to_string(iteration);
      return false;
    }
    AdamHyper hyper;
    hyper.learning_rate = config.learning_rate;
    adam_step(p().delta, grad, adam, hyper);
    p().enforce();
    return true;
  }

  std::vector<Eigen::Index> masked_rows() const {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < result.perturbation.mask.size(); ++i)
      if (result.perturbation.mask[i] != 0.0f) rows.push_back(i);
    return rows;
  }
};

// Packs masked delta entries into the SPSA variable and back.
struct Packing {
  std::vector<Eigen::Index> rows;
  Eigen::Index dim() const { return 3 * static_cast<Eigen::Index>(rows.size()); }

  Eigen::VectorXf pack(const Eigen::MatrixXf& delta) const {
    Eigen::VectorXf v(dim());
    for (std::size_t k = 0; k < rows.size(); ++k)
      for (int c = 0; c < 3; ++c) v[3 * Eigen::Index(k) + c] = delta(rows[k], c);
    return v;
  }

  Eigen::MatrixXf unpack(const Eigen::Ref<const Eigen::VectorXf>& v, Eigen::Index pixels) const {
    Eigen::MatrixXf delta = Eigen::MatrixXf::Zero(pixels, 3);
    for (std::size_t k = 0; k < rows.size(); ++k)
      for (int c = 0; c < 3; ++c) delta(rows[k], c) = v[3 * Eigen::Index(k) + c];
    return delta;
  }
};

// Transformed composites for every candidate delta, one column each.
ImageBatch render_candidates(const Image& x, const Packing& packing, const WarpOperator& warp,
                             const Eigen::MatrixXf& candidates) {
  ImageBatch out(x.rgb.size(), candidates.cols());
  Eigen::MatrixXf composite;
  for (Eigen::Index j = 0; j < candidates.cols(); ++j) {
    composite = x.rgb;
    for (std::size_t k = 0; k < packing.rows.size(); ++k)
      for (int c = 0; c < 3; ++c)
        composite(packing.rows[k], c) =
            std::clamp(x.rgb(packing.rows[k], c) + candidates(3 * Eigen::Index(k) + c, j), 0.0f, 1.0f);
    out.col(j) = warp.apply(composite).flat();
  }
  return out;
}

}  // namespace

AttackResult whitebox_attack(const Model<float>& model, const Image& x, const AttackConfig& config,
                             const Palette& palette, const AttackHooks& hooks) {
  if (config.target_class >= model.num_classes() || config.true_class >= model.num_classes())
    throw ParameterError("attack: class index out of range for the model");
  Loop loop(x, config, palette, hooks);
  const Eigen::VectorXf alpha = x.coverage();
  const LossSpec loss{{config.target_class}, 1.0 / config.eot_batch};
  for (int it = 0; it < config.iterations; ++it) {
    const Image composite = loop.p().composite(x);
    const Eigen::MatrixXf raw = x.rgb + (loop.p().delta.array().colwise() * loop.p().mask.array()).matrix();
    const Eigen::MatrixXf inside = (raw.array() >= 0.0f && raw.array() <= 1.0f).cast<float>();
    Eigen::MatrixXf grad = Eigen::MatrixXf::Zero(x.pixels(), 3);
    double adv = 0.0;
    for (int e = 0; e < config.eot_batch; ++e) {
      WarpOperator warp(alpha, x.height, x.width, loop.sampler.next());
      const Image shown = warp.apply_recording(composite.rgb);
      const Vec<float> column = shown.flat();
      const auto back = backward(model, Mat<float>(column), loss, true, false);
      adv += back.loss;
      const Eigen::Map<const Eigen::MatrixXf> g_out(back.input_grad.data(), x.pixels(), 3);
      grad += warp.backward(g_out);
    }
    grad = grad.cwiseProduct(inside).array().colwise() * loop.p().mask.array();
    if (!loop.step(it, grad, adv)) break;
  }
  return std::move(loop.result);
}

AttackResult soft_spsa_attack(ProbabilityOracle& oracle, const Image& x, const AttackConfig& config,
                              const SpsaConfig& spsa, const Palette& palette,
                              const AttackHooks& hooks) {
  spsa.validate();
  if (config.target_class >= oracle.num_classes() || config.true_class >= oracle.num_classes())
    throw ParameterError("attack: class index out of range for the oracle");
  Loop loop(x, config, palette, hooks);
  const Packing packing{loop.masked_rows()};
  const Eigen::VectorXf alpha = x.coverage();
  Rng rng = make_rng(config.rng_seed, streams::kSpsa);
  for (int it = 0; it < config.iterations; ++it) {
    Eigen::VectorXf v = packing.pack(loop.p().delta);
    Eigen::VectorXf g = Eigen::VectorXf::Zero(v.size());
    double adv = 0.0;
    try {
      for (int e = 0; e < config.eot_batch; ++e) {
        const WarpOperator warp(alpha, x.height, x.width, loop.sampler.next());
        const BatchLossFn fn = [&](const Eigen::MatrixXf& candidates) {
          const Eigen::MatrixXf probs = oracle.probabilities(render_candidates(x, packing, warp, candidates));
          loop.result.queries += candidates.cols();
          Eigen::VectorXd out(candidates.cols());
          for (Eigen::Index j = 0; j < candidates.cols(); ++j) out[j] = nll(probs.col(j), config.target_class);
          return out;
        };
        const SpsaEstimate est = spsa_gradient_batched(fn, v, spsa, rng);
        g += est.gradient / static_cast<float>(config.eot_batch);
        adv += est.mean_loss / config.eot_batch;
      }
    } catch (const OracleError& e) {
      loop.result.completed = false;
      loop.result.error = std::string("oracle failure: ") + e.what();
      break;
    }
    if (!loop.step(it, packing.unpack(g, x.pixels()), adv)) break;
  }
  return std::move(loop.result);
}

AttackResult hard_spsa_attack(LabelOracle& oracle, const Image& x, const AttackConfig& config,
                              const SpsaConfig& spsa, const HardLossConfig& hard,
                              const Palette& palette, const AttackHooks& hooks) {
  spsa.validate();
  hard.validate();
  if (config.target_class >= oracle.num_classes() || config.true_class >= oracle.num_classes())
    throw ParameterError("attack: class index out of range for the oracle");
  Loop loop(x, config, palette, hooks);
  const Packing packing{loop.masked_rows()};
  const Eigen::VectorXf alpha = x.coverage();
  Rng rng = make_rng(config.rng_seed, streams::kSpsa);
  Rng noise_rng = make_rng(hard.sub.rng_seed ^ config.rng_seed, streams::kSubstitute);
  double beta = hard.sub.beta;
  for (int it = 0; it < config.iterations; ++it) {
    Eigen::VectorXf v = packing.pack(loop.p().delta);
    Eigen::VectorXf g = Eigen::VectorXf::Zero(v.size());
    double adv = 0.0;
    try {
      for (int e = 0; e < config.eot_batch; ++e) {
        const WarpOperator warp(alpha, x.height, x.width, loop.sampler.next());
        // One zeta draw per iteration, shared by all probes.
        const Eigen::MatrixXf zeta = draw_substitute_noise(x.rgb.size(), hard.sub.h, noise_rng);
        const BatchLossFn fn = [&](const Eigen::MatrixXf& candidates) {
          const ImageBatch shown = render_candidates(x, packing, warp, candidates);
          loop.result.queries += candidates.cols() * hard.sub.h;
          return substitute_loss_batch(shown, config.target_class, oracle, zeta, beta);
        };
        const SpsaEstimate est = spsa_gradient_batched(fn, v, spsa, rng);
        g += est.gradient / static_cast<float>(config.eot_batch);
        adv += est.mean_loss / config.eot_batch;
      }
    } catch (const OracleError& e) {
      loop.result.completed = false;
      loop.result.error = std::string("oracle failure: ") + e.what();
      break;
    }
    if (!loop.step(it, packing.unpack(g, x.pixels()), adv, beta)) break;
    if (adv >= 1.0) beta = std::min(2.0 * beta, std::max(hard.beta_max, beta));
    else if (adv < hard.halve_below) beta = std::max(0.5 * beta, std::min(hard.beta_floor, beta));
  }
  return std::move(loop.result);
}

Eigen::VectorXf derive_mask(const Perturbation& perturbation, double threshold, int min_area) {
  if (!(threshold > 0.0 && threshold <= 1.0))
    throw InputError("derive_mask: threshold must be in (0,1]");
  if (min_area < 1) throw InputError("derive_mask: min_area must be >= 1");
  const int h = perturbation.height, w = perturbation.width;
  const Eigen::VectorXf magnitude = perturbation.delta.cwiseAbs().rowwise().maxCoeff();
  const float peak = magnitude.size() ? magnitude.maxCoeff() : 0.0f;
  Eigen::VectorXf keep = Eigen::VectorXf::Zero(magnitude.size());
  if (peak <= 0.0f) return keep;
  const auto cut = static_cast<float>(threshold * peak);
  const Eigen::Array<bool, Eigen::Dynamic, 1> high =
      magnitude.array() >= cut && magnitude.array() > 0.0f;
  std::vector<int> label(static_cast<std::size_t>(h * w), -1);
  int next = 0;
  for (int start = 0; start < h * w; ++start) {
    if (!high[start] || label[static_cast<std::size_t>(start)] >= 0) continue;
    std::vector<int> component{start};
    label[static_cast<std::size_t>(start)] = next;
    for (std::size_t q = 0; q < component.size(); ++q) {
      const int y = component[q] / w, x = component[q] % w;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int ny = y + dy, nx = x + dx;
          if (ny < 0 || nx < 0 || ny >= h || nx >= w) continue;
          const int n = ny * w + nx;
          if (high[n] && label[static_cast<std::size_t>(n)] < 0) {
            label[static_cast<std::size_t>(n)] = next;
            component.push_back(n);
          }
        }
    }
    if (static_cast<int>(component.size()) >= min_area)
      for (int i : component) keep[i] = 1.0f;
    ++next;
  }
  return keep;
}

Perturbation apply_mask(const Perturbation& perturbation, const Eigen::VectorXf& mask) {
  if (mask.size() != perturbation.mask.size()) throw DimensionError("apply_mask: size mismatch");
  Perturbation out = perturbation;
  out.mask = (mask.array() != 0.0f && perturbation.mask.array() != 0.0f).cast<float>();
  out.enforce();
  return out;
}

void write_attack_artifacts(const std::filesystem::path& dir, const Image& x,
                            const AttackResult& result) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "trace.csv", std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / "trace.csv").string());
    out << kTraceFormat << "\niteration,adversarial,tv,nps,queries\n" << std::setprecision(9);
    for (const auto& r : result.trace)
      out << r.iteration << ',' << r.adversarial << ',' << r.tv << ',' << r.nps << ',' << r.queries << '\n';
    if (!out) throw IoError("write failed: " + (dir / "trace.csv").string());
  }
  const Perturbation& p = result.perturbation;
  Image delta(p.height, p.width);
  delta.rgb = (p.delta.array() + 1.0f) * 0.5f;
  save_png(delta, dir / "perturbation.png");
  save_png(p.composite(x), dir / "composite.png");
  Image mask(p.height, p.width);
  mask.rgb = p.mask.replicate(1, 3);
  save_png(mask, dir / "mask.png");
}

Perturbation load_perturbation(const std::filesystem::path& dir) {
  const Image delta = load_png(dir / "perturbation.png");
  const Image mask = load_png(dir / "mask.png");
  if (!same_shape(delta, mask)) throw IoError("perturbation and mask sizes differ in " + dir.string());
  Perturbation p;
  p.height = delta.height;
  p.width = delta.width;
  p.delta = delta.rgb.array() * 2.0f - 1.0f;
  p.mask = (mask.rgb.col(0).array() >= 0.5f).cast<float>();
  p.enforce();
  return p;
}

}  // namespace rp2
