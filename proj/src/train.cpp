#include "rp2/train.hpp"

#include "rp2/errors.hpp"
#include "rp2/rng.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <numeric>

namespace rp2 {

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ParameterError("train.learning_rate must be > 0");
  if (batch_size < 1) throw ParameterError("train.batch_size must be >= 1");
  if (epochs < 0) throw ParameterError("train.epochs must be >= 0");
  if (!(adam_beta1 > 0 && adam_beta1 < 1) || !(adam_beta2 > 0 && adam_beta2 < 1))
    throw ParameterError("train.adam_beta1/adam_beta2 must lie in (0, 1)");
  if (!(adam_epsilon > 0)) throw ParameterError("train.adam_epsilon must be > 0");
}

Model<float> train(Model<float> model, const ImageBatch& images, std::span<const int> labels,
                   const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (images.cols() == 0) throw InputError("train: empty dataset");
  if (static_cast<Eigen::Index>(labels.size()) != images.cols())
    throw InputError("train: label count does not match image count");
  for (int l : labels)
    if (l < 0 || l >= model.num_classes())
      throw InputError("train: label " + std::to_string(l) + " outside [0, " +
                       std::to_string(model.num_classes()) + ")");

  const std::size_t n_tensors = model.params.weights.size();
  std::vector<AdamState<float>> w_state(n_tensors), b_state(n_tensors);
  const AdamHyper hyper = config.adam();
  Rng rng = make_rng(config.rng_seed, streams::kShuffle);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(images.cols()));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t n = std::min(order.size() - start, static_cast<std::size_t>(config.batch_size));
      Mat<float> batch(images.rows(), static_cast<Eigen::Index>(n));
      LossSpec loss{{}, 1.0 / static_cast<double>(n)};
      for (std::size_t i = 0; i < n; ++i) {
        batch.col(static_cast<Eigen::Index>(i)) = images.col(order[start + i]);
        loss.targets.push_back(labels[static_cast<std::size_t>(order[start + i])]);
      }
      auto result = backward(model, batch, loss, false, true);
      epoch_loss += result.loss * static_cast<double>(n);
      for (std::size_t t = 0; t < n_tensors; ++t) {
        if (model.params.weights[t].size() == 0) continue;
        adam_step(model.params.weights[t], result.param_grad.weights[t], w_state[t], hyper);
        adam_step(model.params.biases[t], result.param_grad.biases[t], b_state[t], hyper);
      }
    }
    if (on_epoch) on_epoch(epoch, epoch_loss / static_cast<double>(order.size()));
  }
  return model;
}

Model<float> train(Model<float> model, const LabeledDataset& dataset, const TrainConfig& config,
                   const EpochCallback& on_epoch) {
  if (dataset.empty()) throw InputError("train: empty dataset");
  dataset.validate();
  return train(std::move(model), dataset.batch(), dataset.labels, config, on_epoch);
}

double accuracy(const Model<float>& model, const ImageBatch& images, std::span<const int> labels) {
  if (images.cols() == 0) return 0.0;
  const auto predicted = predict(model, images);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

namespace {

constexpr char kMagic[8] = {'R', 'P', '2', 'M', 'O', 'D', 'E', 'L'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw IoError("truncated checkpoint " + path.string());
  return v;
}

}  // namespace

void save_checkpoint(const Model<float>& model, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put(os, kVersion);
  put(os, model.seed);
  put(os, static_cast<std::int32_t>(model.arch.input.channels));
  put(os, static_cast<std::int32_t>(model.arch.input.height));
  put(os, static_cast<std::int32_t>(model.arch.input.width));
  put(os, static_cast<std::uint32_t>(model.arch.layers.size()));
  for (const auto& l : model.arch.layers) {
    put(os, static_cast<std::uint32_t>(l.kind));
    put(os, static_cast<std::int32_t>(l.units));
  }
  for (std::size_t i = 0; i < model.arch.layers.size(); ++i) {
    const auto& w = model.params.weights[i];
    const auto& b = model.params.biases[i];
    put(os, static_cast<std::uint32_t>(w.rows()));
    put(os, static_cast<std::uint32_t>(w.cols()));
    os.write(reinterpret_cast<const char*>(w.data()), static_cast<std::streamsize>(w.size() * sizeof(float)));
    put(os, static_cast<std::uint32_t>(b.size()));
    os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size() * sizeof(float)));
  }
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

Model<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError(path.string() + " is not an rp2 model checkpoint");
  if (const auto version = get<std::uint32_t>(is, path); version != kVersion)
    throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  Model<float> model;
  model.seed = get<std::uint64_t>(is, path);
  model.arch.input.channels = get<std::int32_t>(is, path);
  model.arch.input.height = get<std::int32_t>(is, path);
  model.arch.input.width = get<std::int32_t>(is, path);
  const auto n_layers = get<std::uint32_t>(is, path);
  if (n_layers > 1024) throw IoError(path.string() + ": implausible layer count");
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    const auto kind = get<std::uint32_t>(is, path);
    if (kind > static_cast<std::uint32_t>(LayerKind::Dense)) throw IoError(path.string() + ": bad layer kind");
    model.arch.layers.push_back({static_cast<LayerKind>(kind), get<std::int32_t>(is, path)});
  }
  try {
    model.arch.shapes();
  } catch (const DimensionError& e) {
    throw IoError(path.string() + ": invalid architecture: " + e.what());
  }
  const Model<float> reference = init_model<float>(model.arch, 0);
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    const auto rows = get<std::uint32_t>(is, path);
    const auto cols = get<std::uint32_t>(is, path);
    if (rows != reference.params.weights[i].rows() || cols != reference.params.weights[i].cols())
      throw IoError(path.string() + ": weight shape mismatch in layer " + std::to_string(i));
    Mat<float> w(rows, cols);
    if (!is.read(reinterpret_cast<char*>(w.data()), static_cast<std::streamsize>(w.size() * sizeof(float))))
      throw IoError("truncated checkpoint " + path.string());
    const auto bsize = get<std::uint32_t>(is, path);
    if (bsize != reference.params.biases[i].size())
      throw IoError(path.string() + ": bias shape mismatch in layer " + std::to_string(i));
    Vec<float> b(bsize);
    if (!is.read(reinterpret_cast<char*>(b.data()), static_cast<std::streamsize>(b.size() * sizeof(float))))
      throw IoError("truncated checkpoint " + path.string());
    model.params.weights.push_back(std::move(w));
    model.params.biases.push_back(std::move(b));
  }
  return model;
}

}  // namespace rp2
