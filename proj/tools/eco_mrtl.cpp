// eco-mrtl: scenario generation, training, paired evaluation and noise sweeps.
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ecomrtl/errors.hpp"
#include "ecomrtl/evalbench.hpp"
#include "ecomrtl/json_io.hpp"
#include "ecomrtl/learner.hpp"
#include "ecomrtl/run_config.hpp"
#include "ecomrtl/scenario.hpp"
#include "ecomrtl/text_format.hpp"

namespace fs = std::filesystem;
using namespace ecomrtl;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GlobalFlags {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  int verbose = 0;
};

struct GenFlags {
  std::size_t n = 0;
  std::string out;
};

struct TrainFlags {
  std::string corpus;
  std::string out;
  bool desk_scale = false;
  std::string mode;
  std::optional<int> iterations;
  bool log_wall_time = false;
};

struct EvalFlags {
  std::string corpus;
  std::string checkpoint;
  std::string multitask_checkpoint;
  std::string controllers = "idm,nominal";
  std::string seeds;
  std::string out;
};

struct NoiseFlags {
  std::string corpus;
  std::string checkpoint;
  std::string multitask_checkpoint;
  std::string kind;
  std::string levels;
  std::string controllers = "nominal";
  std::string seeds;
  std::string out;
};

RunConfig build_config(const GlobalFlags& g, bool desk_scale) {
  RunConfig cfg;
  if (desk_scale) cfg.train = TrainConfig::desk();
  try {
    if (!g.config.empty()) apply_config_file(cfg, g.config);
    for (const std::string& kv : g.overrides) {
      const std::size_t eq = kv.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects KEY=VALUE, got '" + kv + "'");
      set_config_value(cfg, std::string(text::trim(kv.substr(0, eq))), kv.substr(eq + 1));
    }
    if (g.seed) cfg.seed = g.seed;
    if (g.threads) cfg.threads = *g.threads;
    cfg.verbosity += g.verbose;
    cfg.seed = resolve_seed(std::nullopt, cfg);
    cfg.train.seed = *cfg.seed;
    cfg.train.threads = cfg.threads;
  } catch (const ParseError& e) {
    throw UsageError(e.what());
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  } catch (const std::runtime_error& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

void validate_config(const RunConfig& cfg) {
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

std::string pick(const std::string& flag, const std::string& fallback, const char* what) {
  const std::string v = flag.empty() ? fallback : flag;
  if (v.empty()) throw UsageError(std::string("missing ") + what);
  return v;
}

Corpus read_corpus(const std::string& path, const RunConfig& cfg) {
  if (!fs::exists(path)) throw UsageError("corpus file '" + path + "' does not exist");
  // Stored contexts are checked against the configured space, except that
  // any penetration fraction is allowed.
  return load_corpus(path, cfg.space);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  for (const std::string_view item : text::split(s, ',')) {
    const std::string_view t = text::trim(item);
    if (!t.empty()) out.emplace_back(t);
  }
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s, const RunConfig& cfg) {
  if (s.empty()) return cfg.eval.seeds;
  std::vector<std::uint64_t> out;
  for (const std::string& item : split_list(s)) {
    std::uint64_t v = 0;
    if (!text::parse_u64(item, v)) throw UsageError("--seeds: '" + item + "' is not a non-negative integer");
    out.push_back(v);
  }
  if (out.empty()) throw UsageError("--seeds is empty");
  return out;
}

std::vector<double> parse_levels(const std::string& s) {
  std::vector<double> out;
  for (const std::string& item : split_list(s)) {
    double v = 0.0;
    if (!text::parse_double(item, v)) throw UsageError("--levels: '" + item + "' is not a number");
    out.push_back(v);
  }
  if (out.empty()) throw UsageError("--levels is empty");
  return out;
}

std::vector<ControllerKind> parse_controllers(const std::string& s) {
  std::vector<ControllerKind> out;
  for (const std::string& item : split_list(s)) {
    try {
      const ControllerKind k = parse_controller_kind(item);
      if (std::find(out.begin(), out.end(), k) == out.end()) out.push_back(k);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  if (out.empty()) throw UsageError("--controllers is empty");
  return out;
}

std::shared_ptr<const PolicyParams> load_policy(const std::string& path, const char* flag, const RunConfig& cfg) {
  if (path.empty()) return nullptr;
  if (!fs::exists(path)) throw UsageError(std::string(flag) + ": '" + path + "' does not exist");
  Checkpoint ckpt = load_checkpoint(path);
  if (cfg.verbosity > 0 && nlohmann::json(ckpt.env) != nlohmann::json(cfg.env)) {
    std::cerr << "note: " << path << " was trained with a different environment configuration\n";
  }
  return std::make_shared<const PolicyParams>(std::move(ckpt.params));
}

/// Parameters for each learned controller in `kinds`; usage error when one
/// is requested without its checkpoint.
std::pair<std::shared_ptr<const PolicyParams>, std::shared_ptr<const PolicyParams>> policies_for(
    const std::vector<ControllerKind>& kinds, const std::string& mrtl_path, const std::string& multitask_path,
    const RunConfig& cfg) {
  std::shared_ptr<const PolicyParams> mrtl, multitask;
  for (const ControllerKind k : kinds) {
    if (k == ControllerKind::kMrtl) {
      if (mrtl_path.empty()) throw UsageError("controller mrtl needs --checkpoint");
      mrtl = load_policy(mrtl_path, "--checkpoint", cfg);
      if (mrtl->mode != PolicyMode::kResidual) throw UsageError("--checkpoint is not a residual (mrtl) policy");
    }
    if (k == ControllerKind::kMultitask) {
      if (multitask_path.empty()) throw UsageError("controller multitask needs --multitask-checkpoint");
      multitask = load_policy(multitask_path, "--multitask-checkpoint", cfg);
      if (multitask->mode != PolicyMode::kStandalone) {
        throw UsageError("--multitask-checkpoint is not a multitask policy");
      }
    }
  }
  return {mrtl, multitask};
}

void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << content;
  if (!out) throw std::runtime_error("error writing '" + path.string() + "'");
}

std::string header_lines(const std::string& command, const RunConfig& cfg) {
  return "# eco-mrtl " + command + "\n" + format_run_config(cfg, "# ");
}

int cmd_gen_scenarios(const GlobalFlags& g, const GenFlags& f) {
  RunConfig cfg = build_config(g, false);
  validate_config(cfg);
  if (f.n == 0) throw UsageError("--n must be >= 1");
  const std::string out = pick(f.out, cfg.paths.out, "--out");
  const Corpus corpus = generate_corpus(cfg.space, f.n, *cfg.seed);
  std::string text = format_corpus(corpus);
  // Comment lines after the version header; the hash covers records only.
  const std::size_t first = text.find('\n') + 1;
  std::string preamble = "# gen-scenarios n=" + std::to_string(f.n) + " seed=" + std::to_string(*cfg.seed) + "\n";
  for (const auto& [k, v] : flatten(cfg)) {
    if (k.rfind("space.", 0) == 0) preamble += "# " + k + "=" + v + "\n";
  }
  text.insert(first, preamble);
  write_file(out, text);
  std::cout << "corpus_hash=" << text::hex64(corpus_hash(corpus)) << " contexts=" << corpus.size() << " path=" << out
            << "\n";
  return 0;
}

int cmd_train(const GlobalFlags& g, const TrainFlags& f) {
  RunConfig cfg = build_config(g, f.desk_scale);
  try {
    if (!f.mode.empty()) cfg.train.mode = parse_policy_mode(f.mode);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (f.iterations) cfg.train.iterations = *f.iterations;
  validate_config(cfg);
  const std::string corpus_path = pick(f.corpus, cfg.paths.corpus, "--corpus");
  const std::string out = pick(f.out, cfg.paths.checkpoint, "--out");
  const Corpus corpus = read_corpus(corpus_path, cfg);
  const std::string hash = text::hex64(corpus_hash(corpus));
  std::cout << "corpus_hash=" << hash << " contexts=" << corpus.size() << "\n";

  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  TrainOptions options;
  options.checkpoint_path = out;
  options.corpus_hash = hash;
  options.record_wall_time = f.log_wall_time;
  if (cfg.verbosity > 0) {
    options.on_iteration = [](const TrainLogRow& r) {
      std::cerr << r.phase << ' ' << r.iteration << " return=" << text::format_double(r.mean_return)
                << " value_loss=" << text::format_double(r.value_loss) << " kl=" << text::format_double(r.kl) << "\n";
    };
  }
  TrainResult result;
  try {
    result = train(corpus, cfg.env, cfg.train, options);
  } catch (const TrainingError& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    if (fs::exists(out)) std::cerr << "last checkpoint kept at " << out << "\n";
    return 1;
  }
  save_checkpoint({result.params, cfg.train, cfg.env, hash, cfg.train.iterations}, out);

  std::ostringstream log;
  log << header_lines("train", cfg);
  write_train_log_csv(log, result.log);
  write_file(out + ".log.csv", log.str());
  std::ostringstream ctx;
  ctx << header_lines("train", cfg);
  write_context_log_csv(ctx, result.context_log);
  write_file(out + ".contexts.csv", ctx.str());
  std::cout << "checkpoint=" << out << " iterations=" << cfg.train.iterations << " mode=" << to_string(cfg.train.mode)
            << "\n";
  return 0;
}

std::string or_default(const std::string& flag, const std::string& fallback) { return flag.empty() ? fallback : flag; }

EvalOptions eval_options(const RunConfig& cfg, const std::vector<std::uint64_t>& seeds) {
  EvalOptions o;
  o.seeds = seeds;
  o.threads = cfg.threads;
  o.noise.bias_std = cfg.eval.bias_std;
  return o;
}

std::shared_ptr<const PolicyParams> params_for(ControllerKind k, const std::shared_ptr<const PolicyParams>& mrtl,
                                               const std::shared_ptr<const PolicyParams>& multitask) {
  if (k == ControllerKind::kMrtl) return mrtl;
  if (k == ControllerKind::kMultitask) return multitask;
  return nullptr;
}

int cmd_eval(const GlobalFlags& g, const EvalFlags& f) {
  RunConfig cfg = build_config(g, false);
  validate_config(cfg);
  const std::vector<ControllerKind> kinds = parse_controllers(f.controllers);
  const std::vector<std::uint64_t> seeds = parse_seeds(f.seeds, cfg);
  const std::string corpus_path = pick(f.corpus, cfg.paths.corpus, "--corpus");
  const fs::path out = pick(f.out, cfg.paths.out, "--out");
  const auto [mrtl, multitask] = policies_for(kinds, or_default(f.checkpoint, cfg.paths.checkpoint),
                                              or_default(f.multitask_checkpoint, cfg.paths.multitask_checkpoint), cfg);
  const Corpus corpus = read_corpus(corpus_path, cfg);
  std::cout << "corpus_hash=" << text::hex64(corpus_hash(corpus)) << " contexts=" << corpus.size() << "\n";

  const EvalOptions options = eval_options(cfg, seeds);
  // The IDM baseline is always evaluated; deltas are relative to it.
  const ControllerRun baseline = evaluate_controller(ControllerKind::kIdm, corpus, cfg.env, options);
  std::vector<ControllerRun> treatments;
  for (const ControllerKind k : kinds) {
    if (k == ControllerKind::kIdm) continue;
    if (cfg.verbosity > 0) std::cerr << "evaluating " << to_string(k) << "\n";
    treatments.push_back(evaluate_controller(k, corpus, cfg.env, options, params_for(k, mrtl, multitask)));
  }
  BenchmarkReport report = compare(corpus, baseline, treatments, {cfg.eval.bootstrap_resamples, *cfg.seed});
  nlohmann::json echo = to_json_value(cfg);
  echo["eval"]["seeds"] = seeds;
  echo["observation_scales"] = observation_scales_json();
  for (auto& [k, v] : echo.items()) report.config[k] = v;
  report.config["controllers"] = f.controllers;

  fs::create_directories(out);
  write_file(out / "report.json", report_json(report).dump(2) + "\n");
  std::ostringstream summary;
  summary << header_lines("eval", cfg) << "# eval.seeds(effective)=";
  for (std::size_t i = 0; i < seeds.size(); ++i) summary << (i ? "," : "") << seeds[i];
  summary << "\n\n";
  write_summary_table(summary, report);
  write_file(out / "summary.txt", summary.str());
  export_benefit_map(report, out / "benefit_map.csv");
  write_summary_table(std::cout, report);
  return 0;
}

int cmd_noise_sweep(const GlobalFlags& g, const NoiseFlags& f) {
  RunConfig cfg = build_config(g, false);
  validate_config(cfg);
  NoiseKind kind = NoiseKind::kNone;
  try {
    kind = parse_noise_kind(f.kind);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (kind == NoiseKind::kNone) throw UsageError("--kind must be control or bias");
  const std::vector<double> levels = parse_levels(f.levels);
  for (const double level : levels) {
    try {
      NoiseSpec{kind, level, cfg.eval.bias_std}.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(std::string("--levels: ") + e.what());
    }
  }
  const std::vector<ControllerKind> kinds = parse_controllers(f.controllers);
  const std::vector<std::uint64_t> seeds = parse_seeds(f.seeds, cfg);
  const std::string corpus_path = pick(f.corpus, cfg.paths.corpus, "--corpus");
  const fs::path out = pick(f.out, cfg.paths.out, "--out");
  const auto [mrtl, multitask] = policies_for(kinds, or_default(f.checkpoint, cfg.paths.checkpoint),
                                              or_default(f.multitask_checkpoint, cfg.paths.multitask_checkpoint), cfg);
  const Corpus corpus = read_corpus(corpus_path, cfg);
  std::cout << "corpus_hash=" << text::hex64(corpus_hash(corpus)) << " contexts=" << corpus.size() << "\n";

  const EvalOptions options = eval_options(cfg, seeds);
  std::ostringstream csv;
  csv << header_lines("noise-sweep", cfg) << "# noise.kind=" << to_string(kind) << "\n# noise.levels=" << f.levels
      << "\n";
  std::vector<NoisePoint> all;
  for (const ControllerKind k : kinds) {
    if (cfg.verbosity > 0) std::cerr << "sweeping " << to_string(k) << "\n";
    const auto points = noise_sweep(k, corpus, cfg.env, kind, levels, options, params_for(k, mrtl, multitask));
    all.insert(all.end(), points.begin(), points.end());
  }
  write_noise_csv(csv, kind, all);
  fs::create_directories(out);
  const fs::path path = out / ("noise_" + std::string(to_string(kind)) + ".csv");
  write_file(path, csv.str());
  write_noise_csv(std::cout, kind, all);
  return 0;
}

void add_corpus_option(CLI::App* cmd, std::string& target) {
  cmd->add_option("--corpus", target, "Corpus file (eco-mrtl-corpus v1); falls back to paths.corpus");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"eco-mrtl: eco-driving scenario corpora, residual policy training and paired evaluation.\n"
               "Configuration: --config FILE with flat 'key = value' lines, then --set KEY=VALUE overrides.\n"
               "Run 'eco-mrtl keys' to list every key and its default. Global seed fallback: ECO_MRTL_SEED."};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.fallthrough();

  GlobalFlags g;
  app.add_option("--config", g.config, "Flat key=value configuration file")->check(CLI::ExistingFile);
  app.add_option("--set", g.overrides, "Override one configuration key (KEY=VALUE, repeatable)");
  app.add_option("--seed", g.seed, "Global seed (default: config 'seed', then ECO_MRTL_SEED, then 0)");
  app.add_option("--threads,--workers", g.threads,
                 "Upper bound on worker threads (0 = all cores); results do not depend on it");
  app.add_flag("-v,--verbose", g.verbose, "Progress on stderr (repeatable)");

  GenFlags gen;
  CLI::App* gen_cmd = app.add_subcommand("gen-scenarios", "Sample a context corpus and print its hash");
  gen_cmd->add_option("--n", gen.n, "Number of contexts")->required();
  gen_cmd->add_option("--out", gen.out, "Output corpus file (falls back to paths.out)");

  TrainFlags tr;
  CLI::App* train_cmd = app.add_subcommand("train", "Train a residual (mrtl) or standalone (multitask) policy");
  add_corpus_option(train_cmd, tr.corpus);
  train_cmd->add_option("--out", tr.out,
                        "Checkpoint path (falls back to paths.checkpoint); logs go to <out>.log.csv and <out>.contexts.csv");
  train_cmd->add_flag("--desk-scale", tr.desk_scale, "Start from the reduced workstation defaults (50 iterations)");
  train_cmd->add_option("--mode", tr.mode, "mrtl (residual on the nominal policy) or multitask (policy alone)")
      ->check(CLI::IsMember({"mrtl", "multitask"}));
  train_cmd->add_option("--iterations", tr.iterations, "Override train.iterations")->check(CLI::NonNegativeNumber);
  train_cmd->add_flag("--log-wall-time", tr.log_wall_time, "Record wall time in the training log (not reproducible)");

  EvalFlags ev;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Paired evaluation against the IDM baseline");
  add_corpus_option(eval_cmd, ev.corpus);
  eval_cmd->add_option("--controllers", ev.controllers, "Comma list of idm, nominal, multitask, mrtl");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "mrtl checkpoint (falls back to paths.checkpoint)");
  eval_cmd->add_option("--multitask-checkpoint", ev.multitask_checkpoint,
                       "multitask checkpoint (falls back to paths.multitask_checkpoint)");
  eval_cmd->add_option("--seeds", ev.seeds, "Comma list of episode seeds (default: eval.seeds)");
  eval_cmd->add_option("--out", ev.out, "Report directory: report.json, summary.txt, benefit_map.csv");

  NoiseFlags nz;
  CLI::App* noise_cmd = app.add_subcommand("noise-sweep", "Emissions under control or bias noise");
  add_corpus_option(noise_cmd, nz.corpus);
  noise_cmd->add_option("--kind", nz.kind, "control: N(0, level^2); bias: N(level, eval.bias_std^2)")->required();
  noise_cmd->add_option("--levels", nz.levels, "Comma list of sigma (control) or mu (bias) values")->required();
  noise_cmd->add_option("--controllers", nz.controllers, "Comma list of idm, nominal, multitask, mrtl");
  noise_cmd->add_option("--checkpoint", nz.checkpoint, "mrtl checkpoint (falls back to paths.checkpoint)");
  noise_cmd->add_option("--multitask-checkpoint", nz.multitask_checkpoint,
                        "multitask checkpoint (falls back to paths.multitask_checkpoint)");
  noise_cmd->add_option("--seeds", nz.seeds, "Comma list of episode seeds (default: eval.seeds)");
  noise_cmd->add_option("--out", nz.out, "Output directory for noise_<kind>.csv");

  CLI::App* keys_cmd = app.add_subcommand("keys", "List every configuration key with its default");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen_cmd) return cmd_gen_scenarios(g, gen);
    if (*train_cmd) return cmd_train(g, tr);
    if (*eval_cmd) return cmd_eval(g, ev);
    if (*noise_cmd) return cmd_noise_sweep(g, nz);
    if (*keys_cmd) {
      for (const auto& [k, v] : config_schema()) std::cout << k << " = " << v << "\n";
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
