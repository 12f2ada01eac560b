#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "rp2/attacks.hpp"
#include "rp2/dataset.hpp"
#include "rp2/errors.hpp"
#include "rp2/evaluation.hpp"
#include "rp2/stealing.hpp"
#include "rp2/train.hpp"

namespace rp2 {

// Schema violation; the message starts with the field path, e.g.
// "attack.iterations: expected an integer, got 'ten'".
class ConfigError : public ParameterError {
 public:
  ConfigError(const std::string& field, const std::string& message)
      : ParameterError(field + ": " + message), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

inline constexpr const char* kConfigFormat = "rp2-config/1";

struct PathsConfig {
  std::string dataset = "runs/data";
  std::string checkpoint = "runs/model.ckpt";
  std::string surrogate;         // transfer attacks
  std::string palette;           // empty: built-in palette
  std::string image = "sign:0";  // "sign:<class>" or a PNG path
  std::string oracle;            // "unix:<path>" / "stdio:<cmd>"; empty: in-process
  std::string mask_from;         // attack run dir to derive the mask from
  std::string reference;         // composite PNG for SSIM (white-box reference)
};

// One experiment. Sections: [meta] [paths] [dataset] [train] [transforms]
// [eval_transforms] [attack] [spsa] [hard] [steal] [eval].
struct ExperimentConfig {
  PathsConfig paths;
  GenerateConfig dataset;
  ArchVariant arch = ArchVariant::Same;
  TrainConfig train;
  std::string attack_mode = "white";  // white | soft-spsa | hard-spsa | transfer
  AttackConfig attack;
  SpsaConfig spsa;
  HardLossConfig hard;
  double mask_threshold = 0.5;
  int mask_min_area = 1;
  StealConfig steal;
  EvalConfig eval;

  // Cross-field checks; throws ConfigError.
  void validate() const;
};

ExperimentConfig parse_config(std::string_view ini_text);
ExperimentConfig load_config(const std::filesystem::path& path);

// Complete snapshot; parse_config(to_ini(c)) reproduces c.
std::string to_ini(const ExperimentConfig& config);

// Assigns one "section.key" from its text form without validating the whole
// config; unknown fields and type errors raise ConfigError.
void set_field(ExperimentConfig& config, const std::string& path, const std::string& value);

bool is_attack_mode(const std::string& mode);

}  // namespace rp2
