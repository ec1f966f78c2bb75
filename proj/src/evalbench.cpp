#include "ecomrtl/evalbench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "ecomrtl/control.hpp"
#include "ecomrtl/errors.hpp"
#include "ecomrtl/parallel.hpp"
#include "ecomrtl/text_format.hpp"

namespace ecomrtl {
namespace {

constexpr std::uint64_t kNoiseStream = 0x6e6f697365ULL;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

const char* const kBenefitHeader =
    "context_id,lane_length_m,inflow_vph,speed_limit_mps,lane_count,green_s,red_s,phase_offset_s,penetration,seed,"
    "controller,emission_delta_pct";

std::uint64_t noise_seed(const Context& c, std::uint64_t episode_seed) {
  return derive_seed(derive_seed(c.seed, episode_seed), kNoiseStream);
}

std::string group_name(double penetration) { return "penetration=" + text::format_double(penetration); }

nlohmann::json metrics_json(const Metrics& m) {
  return nlohmann::json{{"total_emission", m.total_emission},
                        {"emission_per_vehicle", m.emission_per_vehicle},
                        {"mean_speed", m.mean_speed},
                        {"throughput", m.throughput},
                        {"mean_travel_time", m.mean_travel_time},
                        {"idling_time_per_vehicle", m.idling_time_per_vehicle},
                        {"vehicles_completed", m.vehicles_completed},
                        {"vehicles_spawned", m.vehicles_spawned}};
}

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

nlohmann::json context_json(const Context& c) {
  return nlohmann::json{{"lane_length_m", c.lane_length_m}, {"inflow_vph", c.inflow_vph},
                        {"speed_limit_mps", c.speed_limit_mps}, {"lane_count", c.lane_count},
                        {"green_s", c.green_s},           {"red_s", c.red_s},
                        {"phase_offset_s", c.phase_offset_s}, {"penetration", c.penetration},
                        {"seed", c.seed}};
}

std::string fixed(double v, int precision) {
  if (!std::isfinite(v)) return "n/a";
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

}  // namespace

const char* to_string(ControllerKind k) {
  switch (k) {
    case ControllerKind::kIdm: return "idm";
    case ControllerKind::kNominal: return "nominal";
    case ControllerKind::kMultitask: return "multitask";
    case ControllerKind::kMrtl: return "mrtl";
  }
  return "?";
}

ControllerKind parse_controller_kind(const std::string& s) {
  if (s == "idm") return ControllerKind::kIdm;
  if (s == "nominal") return ControllerKind::kNominal;
  if (s == "multitask") return ControllerKind::kMultitask;
  if (s == "mrtl") return ControllerKind::kMrtl;
  throw std::invalid_argument("unknown controller '" + s + "' (expected idm, nominal, multitask or mrtl)");
}

const char* to_string(NoiseKind k) {
  switch (k) {
    case NoiseKind::kNone: return "none";
    case NoiseKind::kControl: return "control";
    case NoiseKind::kBias: return "bias";
  }
  return "?";
}

NoiseKind parse_noise_kind(const std::string& s) {
  if (s == "none") return NoiseKind::kNone;
  if (s == "control") return NoiseKind::kControl;
  if (s == "bias") return NoiseKind::kBias;
  throw std::invalid_argument("unknown noise kind '" + s + "' (expected control or bias)");
}

bool NoiseSpec::degenerate() const {
  switch (kind) {
    case NoiseKind::kNone: return true;
    case NoiseKind::kControl: return level == 0.0;
    case NoiseKind::kBias: return level == 0.0 && bias_std == 0.0;
  }
  return true;
}

void NoiseSpec::validate() const {
  if (!std::isfinite(level)) throw std::invalid_argument("noise: level must be finite");
  if (kind == NoiseKind::kControl && level < 0.0) throw std::invalid_argument("noise: sigma must be >= 0");
  if (!(bias_std >= 0.0 && std::isfinite(bias_std))) throw std::invalid_argument("noise: bias_std must be >= 0");
}

Controller make_controller(ControllerKind kind, const std::shared_ptr<const PolicyParams>& params,
                           const NominalParams& nominal) {
  switch (kind) {
    case ControllerKind::kIdm: return make_idm_controller();
    case ControllerKind::kNominal: return make_nominal_controller(nominal);
    case ControllerKind::kMultitask:
    case ControllerKind::kMrtl: {
      if (!params) throw std::invalid_argument(std::string(to_string(kind)) + " controller needs a checkpoint");
      const PolicyMode want = kind == ControllerKind::kMrtl ? PolicyMode::kResidual : PolicyMode::kStandalone;
      if (params->mode != want) {
        throw std::invalid_argument(std::string(to_string(kind)) + " controller got a '" + to_string(params->mode) +
                                    "' checkpoint");
      }
      return make_policy_controller(params, nominal);
    }
  }
  throw std::invalid_argument("unknown controller kind");
}

Controller with_noise(Controller base, const NoiseSpec& noise, std::uint64_t seed) {
  noise.validate();
  if (noise.degenerate()) return base;
  auto rng = std::make_shared<Rng>(seed);
  return [base = std::move(base), noise, rng](const Simulation& sim) {
    ActionMap actions = base(sim);
    for (const VehicleId id : sim.active_avs()) {
      const auto it = actions.find(id);
      if (it == actions.end()) continue;
      it->second += noise.kind == NoiseKind::kControl ? rng->normal(0.0, noise.level)
                                                      : rng->normal(noise.level, noise.bias_std);
    }
    return actions;
  };
}

Metrics mean_metrics(const std::vector<Metrics>& runs) {
  Metrics m;
  if (runs.empty()) return m;
  for (const Metrics& r : runs) {
    m.total_emission += r.total_emission;
    m.emission_per_vehicle += r.emission_per_vehicle;
    m.mean_speed += r.mean_speed;
    m.throughput += r.throughput;
    m.mean_travel_time += r.mean_travel_time;
    m.idling_time_per_vehicle += r.idling_time_per_vehicle;
    m.vehicles_completed += r.vehicles_completed;
    m.vehicles_spawned += r.vehicles_spawned;
  }
  const double n = static_cast<double>(runs.size());
  m.total_emission /= n;
  m.emission_per_vehicle /= n;
  m.mean_speed /= n;
  m.throughput /= n;
  m.mean_travel_time /= n;
  m.idling_time_per_vehicle /= n;
  m.vehicles_completed /= n;
  m.vehicles_spawned /= n;
  return m;
}

namespace {

Metrics run_one(ControllerKind kind, const Context& context, std::uint64_t seed, const EnvConfig& env,
                const std::shared_ptr<const PolicyParams>& params, const NoiseSpec& noise) {
  Controller c = with_noise(make_controller(kind, params, env.nominal), noise, noise_seed(context, seed));
  return run_episode(context, env.sim, c, seed).metrics;
}

}  // namespace

Metrics run_baseline(ControllerKind kind, const Context& context, const std::vector<std::uint64_t>& seeds,
                     const EnvConfig& env, const std::shared_ptr<const PolicyParams>& params, const NoiseSpec& noise) {
  if (seeds.empty()) throw std::invalid_argument("run_baseline: no seeds");
  std::vector<Metrics> runs;
  for (const std::uint64_t s : seeds) runs.push_back(run_one(kind, context, s, env, params, noise));
  return mean_metrics(runs);
}

ControllerRun evaluate_controller(ControllerKind kind, const Corpus& corpus, const EnvConfig& env,
                                  const EvalOptions& options, const std::shared_ptr<const PolicyParams>& params) {
  if (corpus.empty()) throw std::invalid_argument("evaluate: empty corpus");
  if (options.seeds.empty()) throw std::invalid_argument("evaluate: no seeds");
  options.noise.validate();
  make_controller(kind, params, env.nominal);  // fail fast on missing parameters

  const std::size_t ns = options.seeds.size();
  const std::size_t total = corpus.size() * ns;
  std::vector<Metrics> all(total);
  parallel_for(static_cast<int>(total), resolve_thread_count(options.threads), [&](int i) {
    const auto k = static_cast<std::size_t>(i);
    all[k] = run_one(kind, corpus[k / ns], options.seeds[k % ns], env, params, options.noise);
  });

  ControllerRun run;
  run.kind = kind;
  for (std::size_t c = 0; c < corpus.size(); ++c) {
    run.per_context.push_back(mean_metrics(std::vector<Metrics>(all.begin() + static_cast<std::ptrdiff_t>(c * ns),
                                                                all.begin() + static_cast<std::ptrdiff_t>((c + 1) * ns))));
    for (const std::uint64_t s : options.seeds) run.episodes.push_back({corpus[c].seed, s});
  }
  return run;
}

const std::vector<std::string>& delta_metric_names() {
  static const std::vector<std::string> names{"total_emission",   "emission_per_vehicle",   "mean_speed",
                                              "throughput",       "mean_travel_time",       "idling_time_per_vehicle"};
  return names;
}

double metric_value(const Metrics& m, const std::string& name) {
  if (name == "total_emission") return m.total_emission;
  if (name == "emission_per_vehicle") return m.emission_per_vehicle;
  if (name == "mean_speed") return m.mean_speed;
  if (name == "throughput") return m.throughput;
  if (name == "mean_travel_time") return m.mean_travel_time;
  if (name == "idling_time_per_vehicle") return m.idling_time_per_vehicle;
  if (name == "vehicles_completed") return m.vehicles_completed;
  if (name == "vehicles_spawned") return m.vehicles_spawned;
  throw std::invalid_argument("unknown metric '" + name + "'");
}

std::optional<double> percent_delta(double treatment, double baseline) {
  if (baseline == 0.0 || !std::isfinite(baseline) || !std::isfinite(treatment)) return std::nullopt;
  return (treatment - baseline) / baseline * 100.0;
}

DeltaSummary summarize_deltas(std::vector<double> values, std::size_t excluded, int resamples, std::uint64_t seed,
                              double confidence) {
  DeltaSummary s;
  s.n = values.size();
  s.excluded = excluded;
  if (values.empty()) {
    s.mean = s.ci_low = s.ci_high = kNaN;
    return s;
  }
  std::sort(values.begin(), values.end());
  double sum = 0.0;
  for (const double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  if (resamples < 1 || values.size() == 1) {
    s.ci_low = s.ci_high = s.mean;
    return s;
  }
  Rng rng(seed);
  std::vector<double> means(static_cast<std::size_t>(resamples));
  const auto n = static_cast<std::int64_t>(values.size());
  for (double& m : means) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) acc += values[static_cast<std::size_t>(rng.uniform_int(0, n - 1))];
    m = acc / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  const double tail = (1.0 - confidence) / 2.0;
  const auto at = [&](double q) {
    const auto idx = static_cast<std::size_t>(std::floor(q * static_cast<double>(means.size() - 1)));
    return means[std::min(idx, means.size() - 1)];
  };
  s.ci_low = at(tail);
  s.ci_high = at(1.0 - tail);
  return s;
}

BenchmarkReport compare(const Corpus& corpus, const ControllerRun& baseline, const std::vector<ControllerRun>& treatments,
                        const BootstrapOptions& bootstrap) {
  const auto check = [&](const ControllerRun& r) {
    if (r.per_context.size() != corpus.size() || r.episodes != baseline.episodes) {
      throw std::invalid_argument(std::string("compare: mismatched pairing between ") + to_string(baseline.kind) +
                                  " and " + to_string(r.kind));
    }
  };
  check(baseline);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (!baseline.episodes.empty() && baseline.episodes.size() % corpus.size() == 0) {
      const std::size_t per = baseline.episodes.size() / corpus.size();
      if (baseline.episodes[i * per].context_seed != corpus[i].seed) {
        throw std::invalid_argument("compare: runs were evaluated on a different corpus");
      }
    }
  }

  BenchmarkReport report;
  report.corpus = corpus;
  report.corpus_hash = text::hex64(corpus_hash(corpus));
  report.baseline = baseline.kind;
  report.runs.push_back(baseline);

  std::vector<std::string> groups{"all"};
  for (const Context& c : corpus) {
    const std::string g = group_name(c.penetration);
    if (std::find(groups.begin(), groups.end(), g) == groups.end()) groups.push_back(g);
  }
  std::sort(groups.begin() + 1, groups.end());

  for (const ControllerRun& t : treatments) {
    check(t);
    report.runs.push_back(t);
    Comparison cmp;
    cmp.kind = t.kind;
    for (const std::string& metric : delta_metric_names()) {
      auto& per = cmp.per_context[metric];
      for (std::size_t i = 0; i < corpus.size(); ++i) {
        per.push_back(percent_delta(metric_value(t.per_context[i], metric), metric_value(baseline.per_context[i], metric)));
      }
      for (const std::string& g : groups) {
        std::vector<double> values;
        std::size_t excluded = 0;
        for (std::size_t i = 0; i < corpus.size(); ++i) {
          if (g != "all" && group_name(corpus[i].penetration) != g) continue;
          if (per[i]) {
            values.push_back(*per[i]);
          } else {
            ++excluded;
          }
        }
        const std::uint64_t seed =
            derive_seed(bootstrap.seed, text::fnv1a64(std::string(to_string(t.kind)) + "/" + metric));
        cmp.aggregate[g][metric] = summarize_deltas(std::move(values), excluded, bootstrap.resamples, seed);
      }
    }
    report.comparisons.push_back(std::move(cmp));
  }
  report.config["bootstrap"] = {{"resamples", bootstrap.resamples}, {"seed", bootstrap.seed}, {"confidence", 0.95}};
  report.config["baseline"] = to_string(baseline.kind);
  report.config["delta_definition"] = "(treatment - baseline) / baseline * 100, per context, then averaged";
  return report;
}

nlohmann::json report_json(const BenchmarkReport& report) {
  nlohmann::json j;
  j["format"] = "eco-mrtl-report";
  j["version"] = 1;
  j["config"] = report.config;
  j["corpus_hash"] = report.corpus_hash;
  j["baseline"] = to_string(report.baseline);
  nlohmann::json contexts = nlohmann::json::array();
  for (std::size_t i = 0; i < report.corpus.size(); ++i) {
    nlohmann::json c;
    c["context_id"] = i;
    c["context"] = context_json(report.corpus[i]);
    for (const ControllerRun& r : report.runs) c["metrics"][to_string(r.kind)] = metrics_json(r.per_context[i]);
    for (const Comparison& cmp : report.comparisons) {
      for (const auto& [metric, deltas] : cmp.per_context) c["delta_pct"][to_string(cmp.kind)][metric] = optional_json(deltas[i]);
    }
    contexts.push_back(std::move(c));
  }
  j["contexts"] = std::move(contexts);
  for (const Comparison& cmp : report.comparisons) {
    for (const auto& [group, metrics] : cmp.aggregate) {
      for (const auto& [metric, s] : metrics) {
        j["aggregate"][to_string(cmp.kind)][group][metric] = {{"mean_pct", s.mean},
                                                              {"ci_low_pct", s.ci_low},
                                                              {"ci_high_pct", s.ci_high},
                                                              {"n", s.n},
                                                              {"excluded", s.excluded}};
      }
    }
  }
  for (const ControllerRun& r : report.runs) j["mean_metrics"][to_string(r.kind)] = metrics_json(mean_metrics(r.per_context));
  return j;
}

void write_summary_table(std::ostream& out, const BenchmarkReport& report) {
  out << "Percent change vs " << to_string(report.baseline) << " (mean over contexts, 95% bootstrap CI)\n";
  out << "corpus " << report.corpus_hash << ", " << report.corpus.size() << " contexts\n";
  if (report.comparisons.empty()) {
    out << "(no treatment controllers)\n";
  } else {
    for (const auto& [group, unused] : report.comparisons.front().aggregate) {
      out << '\n' << "[" << group << "]\n";
      out << std::left << std::setw(12) << "controller" << std::setw(28) << "emission" << std::setw(28) << "speed"
          << "throughput\n";
      for (const Comparison& cmp : report.comparisons) {
        out << std::setw(12) << to_string(cmp.kind);
        for (const char* metric : {"total_emission", "mean_speed", "throughput"}) {
          const DeltaSummary& s = cmp.aggregate.at(group).at(metric);
          std::string cell = fixed(s.mean, 2) + "% [" + fixed(s.ci_low, 2) + ", " + fixed(s.ci_high, 2) + "]";
          if (s.excluded > 0) cell += " (" + std::to_string(s.excluded) + " excl.)";
          out << std::setw(28) << cell;
        }
        out << '\n';
      }
    }
  }
  out << "\nMean metrics\n";
  out << std::left << std::setw(12) << "controller" << std::setw(16) << "emission_g" << std::setw(16) << "g_per_veh"
      << std::setw(12) << "speed" << std::setw(14) << "throughput" << "idle_s_per_veh\n";
  for (const ControllerRun& r : report.runs) {
    const Metrics m = mean_metrics(r.per_context);
    out << std::setw(12) << to_string(r.kind) << std::setw(16) << fixed(m.total_emission, 3) << std::setw(16)
        << fixed(m.emission_per_vehicle, 4) << std::setw(12) << fixed(m.mean_speed, 3) << std::setw(14)
        << fixed(m.throughput, 1) << fixed(m.idling_time_per_vehicle, 3) << '\n';
  }
}

std::vector<NoisePoint> noise_sweep(ControllerKind kind, const Corpus& corpus, const EnvConfig& env, NoiseKind noise_kind,
                                    const std::vector<double>& levels, const EvalOptions& options,
                                    const std::shared_ptr<const PolicyParams>& params) {
  if (levels.empty()) throw std::invalid_argument("noise_sweep: no levels");
  if (noise_kind == NoiseKind::kNone) throw std::invalid_argument("noise_sweep: noise kind must be control or bias");
  std::vector<NoisePoint> points;
  std::optional<Metrics> reference;
  for (const double level : levels) {
    EvalOptions o = options;
    o.noise.kind = noise_kind;
    o.noise.level = level;
    o.noise.validate();
    NoisePoint p;
    p.kind = kind;
    p.level = level;
    p.mean = mean_metrics(evaluate_controller(kind, corpus, env, o, params).per_context);
    if (o.noise.degenerate() && !reference) reference = p.mean;
    points.push_back(p);
  }
  if (!reference) {
    EvalOptions o = options;
    o.noise = NoiseSpec{};
    reference = mean_metrics(evaluate_controller(kind, corpus, env, o, params).per_context);
  }
  for (NoisePoint& p : points) {
    p.emission_change_pct = percent_delta(p.mean.total_emission, reference->total_emission).value_or(kNaN);
  }
  return points;
}

void write_noise_csv(std::ostream& out, NoiseKind kind, const std::vector<NoisePoint>& points) {
  out << "controller,noise,level,total_emission,emission_per_vehicle,mean_speed,throughput,idling_time_per_vehicle,"
         "emission_change_pct\n";
  for (const NoisePoint& p : points) {
    out << to_string(p.kind) << ',' << to_string(kind) << ',' << text::format_double(p.level) << ','
        << text::format_double(p.mean.total_emission) << ',' << text::format_double(p.mean.emission_per_vehicle) << ','
        << text::format_double(p.mean.mean_speed) << ',' << text::format_double(p.mean.throughput) << ','
        << text::format_double(p.mean.idling_time_per_vehicle) << ',' << text::format_double(p.emission_change_pct)
        << '\n';
  }
}

std::vector<BenefitRow> benefit_rows(const BenchmarkReport& report) {
  std::vector<BenefitRow> rows;
  for (const Comparison& cmp : report.comparisons) {
    const auto& deltas = cmp.per_context.at("total_emission");
    for (std::size_t i = 0; i < report.corpus.size(); ++i) {
      rows.push_back({i, report.corpus[i], to_string(cmp.kind), deltas[i].value_or(kNaN)});
    }
  }
  return rows;
}

void write_benefit_map(std::ostream& out, const std::vector<BenefitRow>& rows) {
  out << kBenefitHeader << '\n';
  for (const BenefitRow& r : rows) {
    const Context& c = r.context;
    out << r.context_id << ',' << text::format_double(c.lane_length_m) << ',' << text::format_double(c.inflow_vph)
        << ',' << text::format_double(c.speed_limit_mps) << ',' << c.lane_count << ','
        << text::format_double(c.green_s) << ',' << text::format_double(c.red_s) << ','
        << text::format_double(c.phase_offset_s) << ',' << text::format_double(c.penetration) << ',' << c.seed
        << ',' << r.controller << ',' << text::format_double(r.emission_delta_pct) << '\n';
  }
}

void export_benefit_map(const BenchmarkReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_benefit_map(out, benefit_rows(report));
  if (!out) throw std::runtime_error("error writing " + path.string());
}

std::vector<BenefitRow> read_benefit_map(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const std::string source = path.string();
  std::string line;
  int line_no = 0;
  if (!std::getline(in, line) || text::trim(line) != kBenefitHeader) {
    throw ParseError(source, 1, "missing benefit-map header");
  }
  ++line_no;
  std::vector<BenefitRow> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    const auto f = text::split(line, ',');
    if (f.size() != 12) throw ParseError(source, line_no, "expected 12 fields, got " + std::to_string(f.size()));
    const auto num = [&](std::string_view t) {
      double v = 0.0;
      if (!text::parse_double(text::trim(t), v)) throw ParseError(source, line_no, "bad number '" + std::string(t) + "'");
      return v;
    };
    const auto u64 = [&](std::string_view t) {
      std::uint64_t v = 0;
      if (!text::parse_u64(text::trim(t), v)) throw ParseError(source, line_no, "bad integer '" + std::string(t) + "'");
      return v;
    };
    BenefitRow r;
    r.context_id = static_cast<std::size_t>(u64(f[0]));
    r.context.lane_length_m = num(f[1]);
    r.context.inflow_vph = num(f[2]);
    r.context.speed_limit_mps = num(f[3]);
    r.context.lane_count = static_cast<int>(u64(f[4]));
    r.context.green_s = num(f[5]);
    r.context.red_s = num(f[6]);
    r.context.phase_offset_s = num(f[7]);
    r.context.penetration = num(f[8]);
    r.context.seed = u64(f[9]);
    r.controller = std::string(text::trim(f[10]));
    r.emission_delta_pct = num(f[11]);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace ecomrtl
