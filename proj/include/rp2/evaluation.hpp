#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rp2/image.hpp"
#include "rp2/oracle.hpp"
#include "rp2/transforms.hpp"

namespace rp2 {

struct EvalConfig {
  int num_transforms = 1000;
  TransformRanges transform_ranges = TransformRanges::defaults();
  std::uint64_t rng_seed = 0;

  void validate() const;
};

struct AttackReport {
  std::string attack_type;
  std::string params;
  int count_true = 0;
  int count_target = 0;
  int count_other = 0;
  double rate_true = 0.0;
  double rate_target = 0.0;
  double rate_other = 0.0;
  std::optional<double> ssim_vs_reference;
  std::int64_t query_count = 0;
  std::uint64_t seed = 0;
  bool valid = true;  // false when the oracle failed part-way
  std::string config_snapshot;

  int evaluated() const { return count_true + count_target + count_other; }
};

// The N evaluation transforms for a seed. Shared by every row of a suite.
std::vector<TransformParams> evaluation_transforms(const EvalConfig& config);

// Classification rates of `perturbed` under config.num_transforms seeded
// transformations, one oracle query each.
AttackReport evaluate(const Image& perturbed, LabelOracle& oracle, int true_class,
                      int target_class, const EvalConfig& config);

// Mean local SSIM of the luminance images over 8x8 windows at stride 1,
// C1 = 0.01^2, C2 = 0.03^2, negative values clamped to 0.
double ssim(const Image& a, const Image& b);

// Luminance plane (Rec. 601 weights).
Eigen::VectorXd luminance(const Image& image);

inline constexpr const char* kReportFormat = "#format=rp2-report/1";

// Header line, then the fixed columns:
// attack_type,params,rate_true_pct,rate_target_pct,rate_other_pct,ssim_whitebox,oracle_queries,seed
std::string report_csv(const std::vector<AttackReport>& reports);
void emit_report(const std::vector<AttackReport>& reports, const std::filesystem::path& path);
std::vector<AttackReport> read_report(const std::filesystem::path& path);

}  // namespace rp2
