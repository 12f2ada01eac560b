#include "rp2/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "rp2/errors.hpp"

namespace rp2 {

void EvalConfig::validate() const {
  if (num_transforms < 1) throw ParameterError("evaluation: num_transforms must be >= 1");
  transform_ranges.validate();
}

std::vector<TransformParams> evaluation_transforms(const EvalConfig& config) {
  config.validate();
  TransformRanges ranges = config.transform_ranges;
  ranges.rng_seed = config.rng_seed;
  TransformSampler sampler(ranges, streams::kEvaluation);
  std::vector<TransformParams> out;
  out.reserve(static_cast<std::size_t>(config.num_transforms));
  for (int i = 0; i < config.num_transforms; ++i) out.push_back(sampler.next());
  return out;
}

AttackReport evaluate(const Image& perturbed, LabelOracle& oracle, int true_class,
                      int target_class, const EvalConfig& config) {
  const int k = oracle.num_classes();
  if (true_class < 0 || true_class >= k || target_class < 0 || target_class >= k)
    throw InputError("evaluate: class index out of range");
  const auto transforms = evaluation_transforms(config);
  AttackReport report;
  report.seed = config.rng_seed;
  constexpr std::size_t kChunk = 250;
  ImageBatch batch;
  try {
    for (std::size_t start = 0; start < transforms.size(); start += kChunk) {
      const std::size_t count = std::min(kChunk, transforms.size() - start);
      batch.resize(perturbed.rgb.size(), static_cast<Eigen::Index>(count));
      for (std::size_t i = 0; i < count; ++i)
        batch.col(static_cast<Eigen::Index>(i)) = apply(perturbed, transforms[start + i]).flat();
      const auto labels = oracle.labels(batch);
      if (labels.size() != count) throw OracleError("oracle returned a wrong number of labels");
      for (int label : labels) {
        if (label == true_class) ++report.count_true;
        else if (label == target_class) ++report.count_target;
        else ++report.count_other;
      }
    }
  } catch (const OracleError&) {
    report.valid = false;
  }
  const double n = std::max(report.evaluated(), 1);
  report.rate_true = report.count_true / n;
  report.rate_target = report.count_target / n;
  report.rate_other = report.count_other / n;
  return report;
}

Eigen::VectorXd luminance(const Image& image) {
  return 0.299 * image.rgb.col(0).cast<double>() + 0.587 * image.rgb.col(1).cast<double>() +
         0.114 * image.rgb.col(2).cast<double>();
}

double ssim(const Image& a, const Image& b) {
  if (!same_shape(a, b)) throw InputError("ssim: images differ in size");
  constexpr int kWin = 8;
  if (a.height < kWin || a.width < kWin) throw InputError("ssim: image smaller than the window");
  constexpr double C1 = 0.01 * 0.01;
  constexpr double C2 = 0.03 * 0.03;
  const Eigen::VectorXd la = luminance(a);
  const Eigen::VectorXd lb = luminance(b);
  const int w = a.width;
  double total = 0.0;
  int windows = 0;
  for (int y0 = 0; y0 + kWin <= a.height; ++y0) {
    for (int x0 = 0; x0 + kWin <= w; ++x0) {
      double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
      for (int y = y0; y < y0 + kWin; ++y) {
        for (int x = x0; x < x0 + kWin; ++x) {
          const double u = la[y * w + x];
          const double v = lb[y * w + x];
          sa += u;
          sb += v;
          saa += u * u;
          sbb += v * v;
          sab += u * v;
        }
      }
      constexpr double n = kWin * kWin;
      const double ma = sa / n, mb = sb / n;
      const double va = saa / n - ma * ma;
      const double vb = sbb / n - mb * mb;
      const double cov = sab / n - ma * mb;
      const double s = ((2 * ma * mb + C1) * (2 * cov + C2)) /
                       ((ma * ma + mb * mb + C1) * (va + vb + C2));
      total += std::max(s, 0.0);
      ++windows;
    }
  }
  return std::clamp(total / windows, 0.0, 1.0);
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::string report_csv(const std::vector<AttackReport>& reports) {
  if (reports.empty()) throw InputError("emit_report: no reports");
  std::ostringstream out;
  out << kReportFormat << '\n'
      << "attack_type,params,rate_true_pct,rate_target_pct,rate_other_pct,ssim_whitebox,"
         "oracle_queries,seed\n";
  for (const auto& r : reports) {
    out << csv_field(r.attack_type) << ',' << csv_field(r.params) << ','
        << fixed(100.0 * r.rate_true, 2) << ',' << fixed(100.0 * r.rate_target, 2) << ','
        << fixed(100.0 * r.rate_other, 2) << ','
        << (r.ssim_vs_reference ? fixed(*r.ssim_vs_reference, 4) : std::string()) << ','
        << r.query_count << ',' << r.seed << '\n';
  }
  return out.str();
}

void emit_report(const std::vector<AttackReport>& reports, const std::filesystem::path& path) {
  const std::string text = report_csv(reports);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write report " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<AttackReport> read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open report " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kReportFormat)
    throw IoError(path.string() + ": missing format tag");
  if (!std::getline(in, line)) throw IoError(path.string() + ": missing header");
  std::vector<AttackReport> out;
  int line_no = 2;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 8) throw IoError(path.string() + ":" + std::to_string(line_no) + ": expected 8 fields");
    AttackReport r;
    try {
      r.attack_type = f[0];
      r.params = f[1];
      r.rate_true = std::stod(f[2]) / 100.0;
      r.rate_target = std::stod(f[3]) / 100.0;
      r.rate_other = std::stod(f[4]) / 100.0;
      if (!f[5].empty()) r.ssim_vs_reference = std::stod(f[5]);
      r.query_count = std::stoll(f[6]);
      r.seed = std::stoull(f[7]);
    } catch (const std::exception&) {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": malformed number");
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace rp2
