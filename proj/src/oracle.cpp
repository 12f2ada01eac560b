#include "rp2/oracle.hpp"

#include "rp2/errors.hpp"

namespace rp2 {

std::vector<int> argmax_columns(const Eigen::MatrixXf& scores) {
  std::vector<int> out(static_cast<std::size_t>(scores.cols()));
  for (Eigen::Index b = 0; b < scores.cols(); ++b) {
    Eigen::Index k;
    scores.col(b).maxCoeff(&k);
    out[static_cast<std::size_t>(b)] = static_cast<int>(k);
  }
  return out;
}

std::vector<int> ProbabilityOracle::labels(const ImageBatch& batch) {
  return argmax_columns(probabilities(batch));
}

Eigen::MatrixXf ModelOracle::probabilities(const ImageBatch& batch) { return forward(model_, batch); }

std::vector<int> ModelOracle::labels(const ImageBatch& batch) { return predict(model_, batch); }

std::vector<int> HardModelOracle::labels(const ImageBatch& batch) { return predict(model_, batch); }

std::vector<int> CountingLabelOracle::labels(const ImageBatch& batch) {
  auto out = inner_.labels(batch);
  queries_ += batch.cols();
  return out;
}

Eigen::MatrixXf CountingProbabilityOracle::probabilities(const ImageBatch& batch) {
  auto out = inner_.probabilities(batch);
  queries_ += batch.cols();
  return out;
}

std::vector<int> CountingProbabilityOracle::labels(const ImageBatch& batch) {
  auto out = inner_.labels(batch);
  queries_ += batch.cols();
  return out;
}

std::string to_string(AccessLevel level) {
  switch (level) {
    case AccessLevel::White: return "white";
    case AccessLevel::Soft: return "soft";
    case AccessLevel::Hard: return "hard";
  }
  return "?";
}

AccessLevel parse_access_level(const std::string& name) {
  if (name == "white") return AccessLevel::White;
  if (name == "soft") return AccessLevel::Soft;
  if (name == "hard") return AccessLevel::Hard;
  throw ParameterError("unknown access level '" + name + "'");
}

}  // namespace rp2
