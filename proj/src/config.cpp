#include "rp2/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace rp2 {

namespace {

namespace pt = boost::property_tree;

using Setter = std::function<void(ExperimentConfig&, const std::string& value, const std::string& path)>;
using Getter = std::function<std::string(const ExperimentConfig&)>;

struct Field {
  std::string key;
  Setter set;
  Getter get;
};

struct Section {
  std::string name;
  std::vector<Field> fields;
};

template <typename T>
T parse_number(const std::string& value, const std::string& path, const char* what) {
  T out{};
  const char* first = value.data();
  const char* last = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc{} || ptr != last) throw ConfigError(path, std::string("expected ") + what + ", got '" + value + "'");
  return out;
}

template <typename T>
std::string format_number(T v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

// Accessors return a reference into a mutable config; getters cast away
// const only to reuse them.
template <typename T>
using Ref = std::function<T&(ExperimentConfig&)>;

template <typename T>
Getter getter(Ref<T> ref, std::function<std::string(const T&)> fmt) {
  return [ref, fmt](const ExperimentConfig& c) { return fmt(ref(const_cast<ExperimentConfig&>(c))); };
}

Field int_field(std::string key, Ref<int> ref) {
  return {key, [ref](ExperimentConfig& c, const std::string& v, const std::string& p) { ref(c) = parse_number<int>(v, p, "an integer"); },
          getter<int>(ref, [](const int& v) { return std::to_string(v); })};
}

Field seed_field(std::string key, Ref<std::uint64_t> ref) {
  return {key,
          [ref](ExperimentConfig& c, const std::string& v, const std::string& p) {
            ref(c) = parse_number<std::uint64_t>(v, p, "a non-negative integer seed");
          },
          getter<std::uint64_t>(ref, [](const std::uint64_t& v) { return std::to_string(v); })};
}

Field real_field(std::string key, Ref<double> ref) {
  return {key, [ref](ExperimentConfig& c, const std::string& v, const std::string& p) { ref(c) = parse_number<double>(v, p, "a number"); },
          getter<double>(ref, [](const double& v) { return format_number(v); })};
}

Field bool_field(std::string key, Ref<bool> ref) {
  return {key,
          [ref](ExperimentConfig& c, const std::string& v, const std::string& p) {
            if (v == "true") ref(c) = true;
            else if (v == "false") ref(c) = false;
            else throw ConfigError(p, "expected true or false, got '" + v + "'");
          },
          getter<bool>(ref, [](const bool& v) { return std::string(v ? "true" : "false"); })};
}

Field string_field(std::string key, Ref<std::string> ref) {
  return {key, [ref](ExperimentConfig& c, const std::string& v, const std::string&) { ref(c) = v; },
          getter<std::string>(ref, [](const std::string& v) { return v; })};
}

// "min max"
Field interval_field(std::string key, Ref<Interval> ref) {
  return {key,
          [ref](ExperimentConfig& c, const std::string& v, const std::string& p) {
            std::istringstream in(v);
            std::string a, b, extra;
            if (!(in >> a >> b) || (in >> extra)) throw ConfigError(p, "expected 'min max', got '" + v + "'");
            ref(c) = {parse_number<double>(a, p, "a number"), parse_number<double>(b, p, "a number")};
          },
          getter<Interval>(ref, [](const Interval& i) { return format_number(i.min) + " " + format_number(i.max); })};
}

template <typename E>
Field enum_field(std::string key, Ref<E> ref, std::function<E(const std::string&)> parse,
                 std::function<std::string(E)> show) {
  return {key,
          [ref, parse](ExperimentConfig& c, const std::string& v, const std::string& p) {
            try {
              ref(c) = parse(v);
            } catch (const std::invalid_argument& e) {
              throw ConfigError(p, e.what());
            }
          },
          getter<E>(ref, [show](const E& v) { return show(v); })};
}

std::vector<Field> transform_fields(std::function<TransformRanges&(ExperimentConfig&)> r) {
  return {interval_field("rotation_deg", [r](ExperimentConfig& c) -> Interval& { return r(c).rotation_deg; }),
          interval_field("perspective", [r](ExperimentConfig& c) -> Interval& { return r(c).perspective; }),
          interval_field("brightness", [r](ExperimentConfig& c) -> Interval& { return r(c).brightness; }),
          interval_field("contrast", [r](ExperimentConfig& c) -> Interval& { return r(c).contrast; }),
          interval_field("saturation", [r](ExperimentConfig& c) -> Interval& { return r(c).saturation; }),
          interval_field("scale", [r](ExperimentConfig& c) -> Interval& { return r(c).scale; })};
}

#define RP2_REF(type, expr) [](ExperimentConfig& c) -> type& { return c.expr; }

const std::vector<Section>& schema() {
  static const std::vector<Section> sections = [] {
    const auto arch_parse = [](const std::string& s) { return parse_arch_variant(s); };
    const auto arch_show = [](ArchVariant v) { return to_string(v); };
    std::vector<Section> s;
    s.push_back({"paths",
                 {string_field("dataset", RP2_REF(std::string, paths.dataset)),
                  string_field("checkpoint", RP2_REF(std::string, paths.checkpoint)),
                  string_field("surrogate", RP2_REF(std::string, paths.surrogate)),
                  string_field("palette", RP2_REF(std::string, paths.palette)),
                  string_field("image", RP2_REF(std::string, paths.image)),
                  string_field("oracle", RP2_REF(std::string, paths.oracle)),
                  string_field("mask_from", RP2_REF(std::string, paths.mask_from)),
                  string_field("reference", RP2_REF(std::string, paths.reference))}});
    s.push_back({"dataset",
                 {int_field("per_class", RP2_REF(int, dataset.per_class)),
                  real_field("test_fraction", RP2_REF(double, dataset.test_fraction)),
                  seed_field("seed", RP2_REF(std::uint64_t, dataset.seed))}});
    s.push_back({"train",
                 {enum_field<ArchVariant>("arch", RP2_REF(ArchVariant, arch), arch_parse, arch_show),
                  real_field("learning_rate", RP2_REF(double, train.learning_rate)),
                  int_field("batch_size", RP2_REF(int, train.batch_size)),
                  int_field("epochs", RP2_REF(int, train.epochs)),
                  real_field("adam_beta1", RP2_REF(double, train.adam_beta1)),
                  real_field("adam_beta2", RP2_REF(double, train.adam_beta2)),
                  real_field("adam_epsilon", RP2_REF(double, train.adam_epsilon)),
                  seed_field("seed", RP2_REF(std::uint64_t, train.rng_seed))}});
    s.push_back({"transforms", transform_fields(RP2_REF(TransformRanges, attack.transform_ranges))});
    s.push_back({"eval_transforms", transform_fields(RP2_REF(TransformRanges, eval.transform_ranges))});
    s.push_back({"attack",
                 {string_field("mode", RP2_REF(std::string, attack_mode)),
                  int_field("target_class", RP2_REF(int, attack.target_class)),
                  int_field("true_class", RP2_REF(int, attack.true_class)),
                  int_field("iterations", RP2_REF(int, attack.iterations)),
                  real_field("learning_rate", RP2_REF(double, attack.learning_rate)),
                  real_field("lambda_tv", RP2_REF(double, attack.weights.lambda_tv)),
                  real_field("lambda_nps", RP2_REF(double, attack.weights.lambda_nps)),
                  int_field("eot_batch", RP2_REF(int, attack.eot_batch)),
                  real_field("mask_threshold", RP2_REF(double, mask_threshold)),
                  int_field("mask_min_area", RP2_REF(int, mask_min_area)),
                  seed_field("seed", RP2_REF(std::uint64_t, attack.rng_seed))}});
    s.push_back({"spsa",
                 {int_field("s", RP2_REF(int, spsa.s)), real_field("alpha", RP2_REF(double, spsa.alpha)),
                  int_field("probe_chunk", RP2_REF(int, spsa.probe_chunk))}});
    s.push_back({"hard",
                 {int_field("h", RP2_REF(int, hard.sub.h)), real_field("beta", RP2_REF(double, hard.sub.beta)),
                  real_field("beta_floor", RP2_REF(double, hard.beta_floor)),
                  real_field("beta_max", RP2_REF(double, hard.beta_max)),
                  real_field("halve_below", RP2_REF(double, hard.halve_below)),
                  seed_field("seed", RP2_REF(std::uint64_t, hard.sub.rng_seed))}});
    s.push_back({"steal",
                 {enum_field<ArchVariant>("arch", RP2_REF(ArchVariant, steal.surrogate_arch), arch_parse, arch_show),
                  enum_field<SeedSource>("seed_source", RP2_REF(SeedSource, steal.seed_source),
                                         [](const std::string& v) { return parse_seed_source(v); },
                                         [](SeedSource v) { return to_string(v); }),
                  int_field("seed_size", RP2_REF(int, steal.seed_size)),
                  int_field("global_iterations", RP2_REF(int, steal.global_iterations)),
                  real_field("pgdm_epsilon", RP2_REF(double, steal.pgdm_epsilon)),
                  int_field("pgdm_steps", RP2_REF(int, steal.pgdm_steps)),
                  bool_field("extra_class", RP2_REF(bool, steal.extra_class)),
                  bool_field("warm_start", RP2_REF(bool, steal.warm_start)),
                  int_field("probe_size", RP2_REF(int, steal.probe_size)),
                  int_field("epochs", RP2_REF(int, steal.train_config.epochs)),
                  real_field("learning_rate", RP2_REF(double, steal.train_config.learning_rate)),
                  int_field("batch_size", RP2_REF(int, steal.train_config.batch_size)),
                  seed_field("train_seed", RP2_REF(std::uint64_t, steal.train_config.rng_seed)),
                  seed_field("seed", RP2_REF(std::uint64_t, steal.rng_seed))}});
    s.push_back({"eval",
                 {int_field("num_transforms", RP2_REF(int, eval.num_transforms)),
                  seed_field("seed", RP2_REF(std::uint64_t, eval.rng_seed))}});
    return s;
  }();
  return sections;
}

#undef RP2_REF

template <typename F>
void checked(const std::string& path, F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path, e.what());
  }
}

}  // namespace

bool is_attack_mode(const std::string& mode) {
  return mode == "white" || mode == "soft-spsa" || mode == "hard-spsa" || mode == "transfer";
}

void ExperimentConfig::validate() const {
  if (dataset.per_class < 1) throw ConfigError("dataset.per_class", "must be >= 1");
  if (!(dataset.test_fraction >= 0.0 && dataset.test_fraction < 1.0))
    throw ConfigError("dataset.test_fraction", "must be in [0, 1)");
  checked("train", [&] { train.validate(); });
  checked("transforms", [&] { attack.transform_ranges.validate(); });
  checked("eval_transforms", [&] { eval.transform_ranges.validate(); });
  if (!is_attack_mode(attack_mode))
    throw ConfigError("attack.mode", "expected white, soft-spsa, hard-spsa or transfer, got '" + attack_mode + "'");
  checked("attack", [&] { attack.validate(); });
  if (!(mask_threshold > 0.0 && mask_threshold <= 1.0)) throw ConfigError("attack.mask_threshold", "must be in (0, 1]");
  if (mask_min_area < 1) throw ConfigError("attack.mask_min_area", "must be >= 1");
  checked("spsa", [&] { spsa.validate(); });
  checked("hard", [&] { hard.validate(); });
  checked("steal", [&] { steal.validate(static_cast<int>(default_signs().size())); });
  checked("eval", [&] { eval.validate(); });
}

ExperimentConfig parse_config(std::string_view ini_text) {
  pt::ptree tree;
  try {
    std::istringstream in{std::string(ini_text)};
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("line " + std::to_string(e.line()), e.message());
  }

  std::set<std::string> known{"meta"};
  for (const auto& s : schema()) known.insert(s.name);
  for (const auto& [name, node] : tree) {
    if (node.empty()) throw ConfigError(name, "key outside of any section");
    if (!known.count(name)) throw ConfigError(name, "unknown section");
  }
  const auto format = tree.get_optional<std::string>("meta.format");
  if (!format) throw ConfigError("meta.format", "missing (expected " + std::string(kConfigFormat) + ")");
  if (*format != kConfigFormat) throw ConfigError("meta.format", "unsupported format '" + *format + "'");
  for (const auto& [key, value] : tree.get_child("meta"))
    if (key != "format") throw ConfigError("meta." + key, "unknown key");

  ExperimentConfig config;
  for (const auto& section : schema()) {
    // Evaluation uses the optimisation distribution unless overridden.
    if (section.name == "eval_transforms") config.eval.transform_ranges = config.attack.transform_ranges;
    const auto node = tree.get_child_optional(section.name);
    if (!node) continue;
    for (const auto& [key, value] : *node) {
      const std::string path = section.name + "." + key;
      const auto it = std::find_if(section.fields.begin(), section.fields.end(),
                                   [&](const Field& f) { return f.key == key; });
      if (it == section.fields.end()) throw ConfigError(path, "unknown key");
      it->set(config, value.data(), path);
    }
  }
  config.validate();
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  try {
    return parse_config(text.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.field(), std::string(e.what()).substr(e.field().size() + 2));
  }
}

void set_field(ExperimentConfig& config, const std::string& path, const std::string& value) {
  const auto dot = path.find('.');
  if (dot == std::string::npos) throw ConfigError(path, "expected section.key");
  const std::string name = path.substr(0, dot);
  const std::string key = path.substr(dot + 1);
  for (const auto& section : schema()) {
    if (section.name != name) continue;
    for (const auto& f : section.fields)
      if (f.key == key) return f.set(config, value, path);
    throw ConfigError(path, "unknown key");
  }
  throw ConfigError(name, "unknown section");
}

std::string to_ini(const ExperimentConfig& config) {
  std::ostringstream out;
  out << "[meta]\nformat = " << kConfigFormat << "\n";
  for (const auto& section : schema()) {
    out << "\n[" << section.name << "]\n";
    for (const auto& f : section.fields) out << f.key << " = " << f.get(config) << "\n";
  }
  return out.str();
}

}  // namespace rp2
