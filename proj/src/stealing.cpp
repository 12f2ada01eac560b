#include "rp2/stealing.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>

#include "rp2/errors.hpp"
#include "rp2/rng.hpp"

namespace rp2 {

std::string to_string(SeedSource source) { return source == SeedSource::ID ? "id" : "ood"; }

SeedSource parse_seed_source(const std::string& name) {
  if (name == "id") return SeedSource::ID;
  if (name == "ood") return SeedSource::OOD;
  throw ParameterError("unknown seed source '" + name + "' (expected id or ood)");
}

void StealConfig::validate(int num_classes) const {
  if (seed_size < 1) throw ParameterError("steal: seed_size must be >= 1");
  if (seed_source == SeedSource::ID && seed_size < num_classes)
    throw ParameterError("steal: ID seed_size must be >= the number of classes");
  if (global_iterations < 1) throw ParameterError("steal: global_iterations must be >= 1");
  if (global_iterations > 20) throw ParameterError("steal: global_iterations above 20 overflows the dataset");
  if (!(pgdm_epsilon > 0.0)) throw ParameterError("steal: pgdm_epsilon must be > 0");
  if (pgdm_steps < 1) throw ParameterError("steal: pgdm_steps must be >= 1");
  if (probe_size < 1) throw ParameterError("steal: probe_size must be >= 1");
  train_config.validate();
}

std::vector<Image> make_seed_images(const StealConfig& config) {
  if (config.seed_source == SeedSource::OOD)
    return generate_textures(config.seed_size, mix_seed(config.rng_seed, streams::kDataset));
  const auto specs = default_signs();
  const int classes = static_cast<int>(specs.size());
  GenerateConfig gen;
  gen.per_class = (config.seed_size + classes - 1) / classes;
  gen.test_fraction = 0.0;
  gen.seed = mix_seed(config.rng_seed, streams::kDataset);
  auto data = generate(specs, gen);
  // Round-robin over classes so a truncated seed stays balanced.
  std::vector<Image> out;
  for (int n = 0; n < gen.per_class && static_cast<int>(out.size()) < config.seed_size; ++n)
    for (int c = 0; c < classes && static_cast<int>(out.size()) < config.seed_size; ++c)
      out.push_back(std::move(data.images[static_cast<std::size_t>(c * gen.per_class + n)]));
  return out;
}

ProbeSet make_probe_set(int size, std::uint64_t seed) {
  if (size < 1) throw InputError("probe set size must be >= 1");
  const auto specs = default_signs();
  const int classes = static_cast<int>(specs.size());
  ProbeSet probe;

  GenerateConfig gen;
  gen.per_class = (size + classes - 1) / classes;
  gen.test_fraction = 0.0;
  gen.seed = mix_seed(seed, streams::kProbe);
  const auto fresh = generate(specs, gen);
  std::vector<Image> clean;
  for (int i = 0; i < size; ++i) {
    // Interleave classes: image i is class i % classes.
    const int c = i % classes, n = i / classes;
    clean.push_back(fresh.images[static_cast<std::size_t>(c * gen.per_class + n)]);
    probe.clean_labels.push_back(fresh.labels[static_cast<std::size_t>(c * gen.per_class + n)]);
  }
  probe.clean = to_batch(clean);

  std::vector<Image> canonical;
  for (const auto& s : specs) canonical.push_back(render_sign(s));
  TransformRanges ranges = TransformRanges::defaults();
  ranges.rng_seed = mix_seed(seed, streams::kProbe + 100);
  TransformSampler sampler(ranges);
  std::vector<Image> moved;
  for (int i = 0; i < size; ++i) {
    moved.push_back(apply(canonical[static_cast<std::size_t>(i % classes)], sampler.next()));
    probe.transformed_labels.push_back(specs[static_cast<std::size_t>(i % classes)].class_id);
  }
  probe.transformed = to_batch(moved);
  return probe;
}

Image pgdm_step(const Model<float>& surrogate, const Image& x, int y_star, double epsilon, int steps) {
  if (steps < 1) throw ParameterError("pgdm: steps must be >= 1");
  if (epsilon < 0.0) throw ParameterError("pgdm: epsilon must be >= 0");
  if (y_star < 0 || y_star >= surrogate.num_classes()) throw InputError("pgdm: target class out of range");
  Image out = x;
  if (epsilon == 0.0) return out;
  const auto step = static_cast<float>(epsilon / steps);
  const LossSpec loss{{y_star}, 1.0};
  for (int k = 0; k < steps; ++k) {
    const Vec<float> g = input_gradient(surrogate, Vec<float>(out.flat()), loss);
    out.flat() = (out.flat() - step * g.array().sign().matrix()).cwiseMax(0.0f).cwiseMin(1.0f);
  }
  return out;
}

namespace {

double agreement(const std::vector<int>& a, const std::vector<int>& b) {
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i];
  return a.empty() ? 0.0 : static_cast<double>(same) / static_cast<double>(a.size());
}

void write_agreement_row(std::ofstream& csv, const StealIteration& it) {
  csv << it.iteration << ',' << it.dataset_size << ',' << std::fixed << std::setprecision(4)
      << it.agreement_clean << ',' << it.agreement_transformed << ',' << it.accuracy_clean << ','
      << it.accuracy_transformed << ',' << it.queries << '\n';
  csv.unsetf(std::ios::floatfield);
  csv.flush();
}

}  // namespace

StolenSurrogate steal(LabelOracle& blackbox, const std::vector<Image>& seed_images,
                      const StealConfig& config, const StealHooks& hooks) {
  const int classes = blackbox.num_classes();
  config.validate(classes);
  if (seed_images.empty()) throw InputError("steal: no seed images");

  CountingLabelOracle oracle(blackbox);
  StolenSurrogate result;
  result.config = config;
  const Architecture arch = make_architecture(config.surrogate_arch, classes + (config.extra_class ? 1 : 0));
  const std::uint64_t init_seed = mix_seed(config.rng_seed, streams::kInit);
  result.model = init_model<float>(arch, init_seed);

  // Probe labels from the black-box are fixed up front and kept out of the
  // stealing query budget.
  const ProbeSet probe = make_probe_set(config.probe_size, config.rng_seed);
  std::vector<int> probe_clean, probe_moved;
  try {
    CountingLabelOracle probe_oracle(blackbox);
    probe_clean = probe_oracle.labels(probe.clean);
    probe_moved = probe_oracle.labels(probe.transformed);
    result.probe_queries = probe_oracle.queries();
  } catch (const OracleError& e) {
    result.completed = false;
    result.error = std::string("oracle failure while labelling the probe set: ") + e.what();
    return result;
  }

  std::ofstream csv;
  if (!hooks.run_dir.empty()) {
    std::filesystem::create_directories(hooks.run_dir);
    csv.open(hooks.run_dir / "agreement.csv", std::ios::binary);
    if (!csv) throw IoError("cannot write " + (hooks.run_dir / "agreement.csv").string());
    csv << kAgreementFormat << "\niteration,dataset_size,agreement_clean,agreement_transformed,"
                               "accuracy_clean,accuracy_transformed,query_count\n";
  }

  std::vector<Image> images = seed_images;
  Rng targets = make_rng(config.rng_seed, streams::kStealTargets);
  constexpr Eigen::Index kLabelChunk = 1000;
  for (int g = 1; g <= config.global_iterations; ++g) {
    // (1) label every current image.
    std::vector<int> labels;
    labels.reserve(images.size());
    const ImageBatch batch = to_batch(images);
    try {
      for (Eigen::Index start = 0; start < batch.cols(); start += kLabelChunk) {
        const Eigen::Index n = std::min(kLabelChunk, batch.cols() - start);
        const auto part = oracle.labels(batch.middleCols(start, n));
        if (static_cast<Eigen::Index>(part.size()) != n) throw OracleError("wrong number of labels");
        labels.insert(labels.end(), part.begin(), part.end());
      }
    } catch (const OracleError& e) {
      result.completed = false;
      result.error = "oracle failure in iteration " + std::to_string(g) + ": " + e.what();
      break;
    }
    for (int l : labels)
      if (l < 0 || l >= classes) {
        result.completed = false;
        result.error = "black-box returned label " + std::to_string(l) + " outside its class range";
        break;
      }
    if (!result.completed) break;
    result.queries = oracle.queries();

    // (2) train the surrogate.
    if (!config.warm_start) result.model = init_model<float>(arch, init_seed);
    TrainConfig tc = config.train_config;
    tc.rng_seed = mix_seed(config.train_config.rng_seed, static_cast<std::uint64_t>(g));
    result.model = train(std::move(result.model), batch, labels, tc);

    StealIteration row;
    row.iteration = g;
    row.dataset_size = static_cast<std::int64_t>(images.size());
    const auto pred_clean = predict(result.model, probe.clean);
    const auto pred_moved = predict(result.model, probe.transformed);
    row.agreement_clean = agreement(pred_clean, probe_clean);
    row.agreement_transformed = agreement(pred_moved, probe_moved);
    row.accuracy_clean = agreement(pred_clean, probe.clean_labels);
    row.accuracy_transformed = agreement(pred_moved, probe.transformed_labels);
    row.queries = result.queries;
    result.history.push_back(row);
    if (hooks.on_iteration) hooks.on_iteration(row);

    if (!hooks.run_dir.empty()) {
      const auto dir = hooks.run_dir / ("iter_" + std::to_string(g));
      LabeledDataset labelled;
      labelled.images = images;
      labelled.labels = labels;
      labelled.splits.assign(images.size(), Split::Train);
      labelled.num_classes = arch.num_classes();
      save_dataset(labelled, dir / "dataset");
      save_checkpoint(result.model, dir / "surrogate.ckpt");
      write_agreement_row(csv, row);
    }

    // (3) double the set, except after the final training.
    if (g == config.global_iterations) break;
    const std::size_t n = images.size();
    images.reserve(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
      int target;
      do target = std::uniform_int_distribution<int>(0, classes - 1)(targets);
      while (target == labels[i]);
      images.push_back(pgdm_step(result.model, images[i], target, config.pgdm_epsilon, config.pgdm_steps));
    }
  }
  if (!result.history.empty()) {
    const auto& last = result.history.back();
    result.agreement = 0.5 * (last.agreement_clean + last.agreement_transformed);
  }
  return result;
}

AttackResult transfer_attack(const StolenSurrogate& surrogate, const Image& x, const AttackConfig& config,
                             const Palette& palette, const AttackHooks& hooks) {
  return whitebox_attack(surrogate.model, x, config, palette, hooks);
}

}  // namespace rp2
