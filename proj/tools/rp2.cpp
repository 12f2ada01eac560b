// rp2: dataset generation, training, attacks, stealing, evaluation and the
// oracle server. Every command except serve and report writes a run
// directory holding config.ini, from which the run can be repeated.

#include <charconv>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "rp2/config.hpp"
#include "rp2/wire.hpp"

namespace fs = std::filesystem;
using namespace rp2;
using nlohmann::json;

namespace {

constexpr const char* kResultFormat = "rp2-attack-result/1";

struct CommonOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
};

// Flag values land in the config through the same path as --set, so the
// snapshot records them.
struct FlagOverride {
  std::string field;
  std::string value;
};

ExperimentConfig build_config(const std::string& file, const std::vector<std::string>& overrides,
                              const std::vector<FlagOverride>& flags) {
  ExperimentConfig cfg = file.empty() ? ExperimentConfig{} : load_config(file);
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError(o, "expected --set section.key=value");
    set_field(cfg, o.substr(0, eq), o.substr(eq + 1));
  }
  for (const auto& f : flags)
    if (!f.value.empty()) set_field(cfg, f.field, f.value);
  cfg.validate();
  return cfg;
}

void require_file(const std::string& field, const std::string& path) {
  if (path.empty()) throw ConfigError(field, "required");
  if (!fs::exists(path)) throw ConfigError(field, "no such file or directory: " + path);
}

fs::path prepare_run_dir(const std::string& out, const ExperimentConfig& cfg) {
  if (out.empty()) throw ParameterError("--out is required");
  const fs::path dir(out);
  fs::create_directories(dir);
  std::ofstream(dir / "config.ini", std::ios::binary) << to_ini(cfg);
  return dir;
}

Image load_input_image(const std::string& spec) {
  if (spec.rfind("sign:", 0) == 0) {
    const auto signs = default_signs();
    int cls = -1;
    const std::string tail = spec.substr(5);
    const auto [ptr, ec] = std::from_chars(tail.data(), tail.data() + tail.size(), cls);
    if (ec != std::errc{} || ptr != tail.data() + tail.size() || cls < 0 || cls >= static_cast<int>(signs.size()))
      throw ConfigError("paths.image", "bad sign reference '" + spec + "'");
    return render_sign(signs[static_cast<std::size_t>(cls)]);
  }
  require_file("paths.image", spec);
  return load_png(spec);
}

Palette load_palette_for(const ExperimentConfig& cfg) {
  if (cfg.paths.palette.empty()) return default_palette();
  require_file("paths.palette", cfg.paths.palette);
  return load_palette(cfg.paths.palette);
}

// The black box: a remote endpoint when paths.oracle is set, otherwise the
// checkpoint behind an in-process oracle of the requested access level.
struct BlackBox {
  std::unique_ptr<Model<float>> model;
  std::unique_ptr<LabelOracle> labels;
  ProbabilityOracle* probs = nullptr;
};

BlackBox open_black_box(const ExperimentConfig& cfg, AccessLevel level) {
  BlackBox b;
  if (!cfg.paths.oracle.empty()) {
    auto conn = wire::Connection::open(cfg.paths.oracle);
    if (level == AccessLevel::Soft) {
      auto p = std::make_unique<wire::RemoteProbabilityOracle>(std::move(conn));
      b.probs = p.get();
      b.labels = std::move(p);
    } else {
      b.labels = std::make_unique<wire::RemoteLabelOracle>(std::move(conn));
    }
    return b;
  }
  require_file("paths.checkpoint", cfg.paths.checkpoint);
  b.model = std::make_unique<Model<float>>(load_checkpoint(cfg.paths.checkpoint));
  if (level == AccessLevel::Soft) {
    auto p = std::make_unique<ModelOracle>(*b.model);
    b.probs = p.get();
    b.labels = std::move(p);
  } else {
    b.labels = std::make_unique<HardModelOracle>(*b.model);
  }
  return b;
}

std::string attack_params(const ExperimentConfig& cfg) {
  std::vector<std::string> parts;
  if (cfg.attack_mode == "soft-spsa" || cfg.attack_mode == "hard-spsa") parts.push_back("s=" + std::to_string(cfg.spsa.s));
  if (cfg.attack_mode == "hard-spsa") parts.push_back("h=" + std::to_string(cfg.hard.sub.h));
  const bool limited = cfg.attack.weights.lambda_tv > 0 || cfg.attack.weights.lambda_nps > 0;
  parts.push_back(limited ? "limited" : "unlimited");
  if (!cfg.paths.mask_from.empty()) parts.push_back("masked");
  std::string out;
  for (const auto& p : parts) out += (out.empty() ? "" : ",") + p;
  return out;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const ExperimentConfig& cfg, const std::string& out) {
  const fs::path dir = prepare_run_dir(out, cfg);
  const LabeledDataset data = generate(default_signs(), cfg.dataset);
  save_dataset(data, dir);
  std::cerr << "wrote " << data.size() << " images to " << dir.string() << "\n";
  return 0;
}

int cmd_train(const ExperimentConfig& cfg, const std::string& out) {
  require_file("paths.dataset", cfg.paths.dataset);
  const fs::path dir = prepare_run_dir(out, cfg);
  const LabeledDataset data = load_dataset(cfg.paths.dataset);
  const LabeledDataset train_set = data.subset(Split::Train);
  const LabeledDataset test_set = data.subset(Split::Test);

  std::ofstream log(dir / "train_log.csv", std::ios::binary);
  log << "#format=rp2-train-log/1\nepoch,loss\n";
  Model<float> model = init_model<float>(make_architecture(cfg.arch, data.num_classes), cfg.train.rng_seed);
  model = train(std::move(model), train_set, cfg.train, [&](int epoch, double loss) {
    log << epoch << ',' << loss << '\n';
    std::cerr << "epoch " << epoch << " loss " << loss << "\n";
  });
  save_checkpoint(model, dir / "model.ckpt");

  // Held-out accuracy, and the clean canonical signs under the evaluation
  // transforms (mean over classes).
  const double acc_clean = test_set.empty() ? 0.0 : accuracy(model, test_set.batch(), test_set.labels);
  HardModelOracle oracle(model);
  const auto signs = default_signs();
  double acc_transformed = 0.0;
  for (const auto& spec : signs)
    acc_transformed += evaluate(render_sign(spec), oracle, spec.class_id, (spec.class_id + 1) % data.num_classes, cfg.eval).rate_true /
                       static_cast<double>(signs.size());
  std::ofstream metrics(dir / "metrics.csv", std::ios::binary);
  metrics << "#format=rp2-train-metrics/1\ntest_size,accuracy_clean,accuracy_transformed\n"
          << test_set.size() << ',' << acc_clean << ',' << acc_transformed << '\n';
  std::cerr << "test accuracy " << acc_clean << " (transformed " << acc_transformed << ")\n";
  return 0;
}

int cmd_attack(ExperimentConfig cfg, const std::string& out) {
  const Image x = load_input_image(cfg.paths.image);
  const Palette palette = load_palette_for(cfg);
  AttackHooks hooks;
  if (!cfg.paths.mask_from.empty()) {
    require_file("paths.mask_from", cfg.paths.mask_from);
    hooks.mask = derive_mask(load_perturbation(cfg.paths.mask_from), cfg.mask_threshold, cfg.mask_min_area);
  }
  hooks.on_iteration = [](const TraceRow& r) {
    if (r.iteration % 25 == 0)
      std::cerr << "iter " << r.iteration << " adv " << r.adversarial << " queries " << r.queries << "\n";
  };
  const fs::path dir = prepare_run_dir(out, cfg);

  AttackResult result;
  const std::string& mode = cfg.attack_mode;
  if (mode == "white") {
    cfg.attack.access_level = AccessLevel::White;
    require_file("paths.checkpoint", cfg.paths.checkpoint);
    const Model<float> model = load_checkpoint(cfg.paths.checkpoint);
    result = whitebox_attack(model, x, cfg.attack, palette, hooks);
  } else if (mode == "transfer") {
    cfg.attack.access_level = AccessLevel::White;
    require_file("paths.surrogate", cfg.paths.surrogate);
    const Model<float> surrogate = load_checkpoint(cfg.paths.surrogate);
    result = whitebox_attack(surrogate, x, cfg.attack, palette, hooks);
  } else if (mode == "soft-spsa") {
    cfg.attack.access_level = AccessLevel::Soft;
    BlackBox box = open_black_box(cfg, AccessLevel::Soft);
    result = soft_spsa_attack(*box.probs, x, cfg.attack, cfg.spsa, palette, hooks);
  } else {
    cfg.attack.access_level = AccessLevel::Hard;
    BlackBox box = open_black_box(cfg, AccessLevel::Hard);
    result = hard_spsa_attack(*box.labels, x, cfg.attack, cfg.spsa, cfg.hard, palette, hooks);
  }
  result.perturbation.base_image_id = cfg.paths.image;
  write_attack_artifacts(dir, x, result);

  json summary;
  summary["format"] = kResultFormat;
  summary["mode"] = mode;
  summary["params"] = attack_params(cfg);
  summary["queries"] = result.queries;
  summary["iterations"] = result.trace.size();
  summary["completed"] = result.completed;
  summary["error"] = result.error;
  std::ofstream(dir / "result.json", std::ios::binary) << summary.dump(2) << "\n";

  if (!result.completed) {
    std::cerr << "rp2: attack stopped early: " << result.error << "\n";
    return 1;
  }
  std::cerr << "attack finished after " << result.trace.size() << " iterations, " << result.queries << " queries\n";
  return 0;
}

int cmd_steal(const ExperimentConfig& cfg, const std::string& out) {
  BlackBox box = open_black_box(cfg, AccessLevel::Hard);
  cfg.steal.validate(box.labels->num_classes());
  const fs::path dir = prepare_run_dir(out, cfg);
  StealHooks hooks;
  hooks.run_dir = dir;
  hooks.on_iteration = [](const StealIteration& it) {
    std::cerr << "iteration " << it.iteration << ": " << it.dataset_size << " images, agreement "
              << it.agreement_clean << " / " << it.agreement_transformed << ", " << it.queries << " queries\n";
  };
  const StolenSurrogate s = steal(*box.labels, make_seed_images(cfg.steal), cfg.steal, hooks);
  if (!s.history.empty()) save_checkpoint(s.model, dir / "surrogate.ckpt");
  if (!s.completed) {
    std::cerr << "rp2: stealing stopped early: " << s.error << "\n";
    return 1;
  }
  std::cerr << "surrogate agreement " << s.agreement << " after " << s.queries << " labelling queries\n";
  return 0;
}

// Evaluates an attack run against the black box; writes report.csv into --out.
int cmd_evaluate(const ExperimentConfig& cfg, const fs::path& run, const std::string& out) {
  std::ifstream rin(run / "result.json");
  if (!rin) throw IoError("not an attack run directory: " + run.string());
  const json summary = json::parse(rin, nullptr, false);
  if (summary.is_discarded() || summary.value("format", "") != kResultFormat)
    throw IoError("unreadable attack result in " + run.string());

  const Image x = load_input_image(cfg.paths.image);
  const Perturbation p = load_perturbation(run);
  const Image composite = p.composite(x);
  BlackBox box = open_black_box(cfg, AccessLevel::Hard);
  const fs::path dir = prepare_run_dir(out.empty() ? (run / "eval").string() : out, cfg);

  AttackReport r = evaluate(composite, *box.labels, cfg.attack.true_class, cfg.attack.target_class, cfg.eval);
  r.attack_type = summary.value("mode", "");
  r.params = summary.value("params", "");
  r.query_count = summary.value("queries", std::int64_t{0});
  r.config_snapshot = to_ini(cfg);
  if (!cfg.paths.reference.empty()) {
    require_file("paths.reference", cfg.paths.reference);
    r.ssim_vs_reference = ssim(composite, load_png(cfg.paths.reference));
  }
  emit_report({r}, dir / "report.csv");
  std::cout << report_csv({r});
  if (!r.valid) {
    std::cerr << "rp2: oracle failed after " << r.evaluated() << " evaluations\n";
    return 1;
  }
  return 0;
}

// Concatenates the report rows of evaluated runs (a run directory, its eval/
// subdirectory, or a report CSV).
int cmd_report(const std::vector<std::string>& inputs, const std::string& out) {
  std::vector<AttackReport> rows;
  for (const auto& in : inputs) {
    fs::path p(in);
    if (fs::is_directory(p)) p = fs::exists(p / "report.csv") ? p / "report.csv" : p / "eval" / "report.csv";
    if (!fs::exists(p)) throw IoError("no report found for " + in);
    for (auto& r : read_report(p)) rows.push_back(std::move(r));
  }
  if (out.empty()) {
    std::cout << report_csv(rows);
  } else {
    fs::create_directories(fs::path(out).parent_path().empty() ? fs::path(".") : fs::path(out).parent_path());
    emit_report(rows, out);
  }
  return 0;
}

int cmd_serve(const std::string& checkpoint, const std::string& mode, const std::string& socket, bool use_stdio) {
  require_file("--model", checkpoint);
  const AccessLevel level = parse_access_level(mode);
  const Model<float> model = load_checkpoint(checkpoint);
  const wire::OracleService service(model, level);
  if (use_stdio) {
    serve_stdio(service);
    return 0;
  }
  // Signals are handled on a dedicated thread so the server can shut down
  // cleanly and remove its socket file.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  wire::UnixServer server(service, socket);
  std::thread([&server, set] {
    int sig = 0;
    sigwait(&set, &sig);
    server.stop();
  }).detach();
  std::cerr << "serving " << mode << " oracle on " << socket << "\n";
  server.run();
  return 0;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const std::invalid_argument*>(&e)) return 2;
  if (dynamic_cast<const IoError*>(&e)) return 3;
  if (dynamic_cast<const OracleError*>(&e)) return 4;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Physical adversarial attacks on a synthetic sign classifier"};
  app.require_subcommand(1);

  CommonOptions common;
  const auto add_common = [&](CLI::App* sub, bool needs_out) {
    sub->add_option("-c,--config", common.config, "experiment config (INI)");
    sub->add_option("--set", common.overrides, "override one field, section.key=value");
    auto* o = sub->add_option("-o,--out", common.out, "run directory");
    if (needs_out) o->required();
  };

  std::string data, model, oracle, surrogate, mask_from, image, reference, mode, run, socket;
  std::vector<std::string> inputs;
  bool use_stdio = false;

  auto* gen = app.add_subcommand("gen-data", "render the synthetic sign dataset");
  add_common(gen, true);

  auto* tr = app.add_subcommand("train", "train the classifier");
  add_common(tr, true);
  tr->add_option("--data", data, "dataset directory");

  auto* at = app.add_subcommand("attack", "optimise a physical perturbation");
  add_common(at, true);
  at->add_option("--mode", mode, "white | soft-spsa | hard-spsa | transfer");
  at->add_option("--model", model, "classifier checkpoint");
  at->add_option("--oracle", oracle, "black-box endpoint, unix:<path> or stdio:<command>");
  at->add_option("--surrogate", surrogate, "surrogate checkpoint for transfer attacks");
  at->add_option("--mask-from", mask_from, "attack run whose perturbation defines the mask");
  at->add_option("--image", image, "sign:<class> or a PNG");

  auto* st = app.add_subcommand("steal", "train a surrogate from black-box labels");
  add_common(st, true);
  st->add_option("--model", model, "classifier checkpoint");
  st->add_option("--oracle", oracle, "black-box endpoint");

  auto* ev = app.add_subcommand("evaluate", "classification rates of an attack run");
  add_common(ev, false);
  ev->add_option("--run", run, "attack run directory")->required();
  ev->add_option("--model", model, "classifier checkpoint");
  ev->add_option("--oracle", oracle, "black-box endpoint");
  ev->add_option("--reference", reference, "composite PNG for SSIM");

  std::string report_out;
  auto* rp = app.add_subcommand("report", "collect evaluated runs into one CSV");
  rp->add_option("inputs", inputs, "run directories or report files")->required();
  rp->add_option("-o,--out", report_out, "output CSV (default: stdout)");

  auto* cf = app.add_subcommand("config", "print the resolved config");
  cf->add_option("-c,--config", common.config, "experiment config (INI)");
  cf->add_option("--set", common.overrides, "override one field, section.key=value");

  auto* sv = app.add_subcommand("serve", "expose a checkpoint as a black-box oracle");
  sv->add_option("--model", model, "classifier checkpoint")->required();
  sv->add_option("--mode", mode, "soft | hard")->required();
  auto* sock = sv->add_option("--socket", socket, "unix socket path");
  auto* io = sv->add_flag("--stdio", use_stdio, "serve stdin/stdout");
  sock->excludes(io);
  io->excludes(sock);

  CLI11_PARSE(app, argc, argv);

  try {
    if (sv->parsed()) {
      if (!use_stdio && socket.empty()) throw ParameterError("serve needs --socket or --stdio");
      return cmd_serve(model, mode, socket, use_stdio);
    }
    if (rp->parsed()) return cmd_report(inputs, report_out);

    std::string config_file = common.config;
    if (ev->parsed() && config_file.empty()) config_file = (fs::path(run) / "config.ini").string();
    if (!config_file.empty()) require_file("--config", config_file);
    ExperimentConfig cfg = build_config(config_file, common.overrides,
                                              {{"paths.dataset", data},
                                               {"paths.checkpoint", model},
                                               {"paths.oracle", oracle},
                                               {"paths.surrogate", surrogate},
                                               {"paths.mask_from", mask_from},
                                               {"paths.image", image},
                                               {"paths.reference", reference},
                                               {"attack.mode", at->parsed() ? mode : std::string()}});
    // An explicit checkpoint replaces an endpoint inherited from a snapshot.
    if (!model.empty() && oracle.empty()) cfg.paths.oracle.clear();
    if (cf->parsed()) {
      std::cout << to_ini(cfg);
      return 0;
    }
    if (gen->parsed()) return cmd_gen_data(cfg, common.out);
    if (tr->parsed()) return cmd_train(cfg, common.out);
    if (at->parsed()) return cmd_attack(cfg, common.out);
    if (st->parsed()) return cmd_steal(cfg, common.out);
    return cmd_evaluate(cfg, run, common.out);
  } catch (const std::exception& e) {
    std::cerr << "rp2: error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}
