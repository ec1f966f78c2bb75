#pragma once

// Benchmark harness: paired evaluation of IDM, nominal, multi-task and
// residual controllers over a corpus, percentage deltas against the IDM
// baseline with bootstrap intervals, noise sweeps and the per-context
// benefit map.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecomrtl/learner.hpp"
#include "ecomrtl/microsim.hpp"
#include "ecomrtl/scenario.hpp"

namespace ecomrtl {

enum class ControllerKind { kIdm, kNominal, kMultitask, kMrtl };

/// "idm", "nominal", "multitask", "mrtl".
const char* to_string(ControllerKind k);
ControllerKind parse_controller_kind(const std::string& s);

enum class NoiseKind { kNone, kControl, kBias };
const char* to_string(NoiseKind k);
NoiseKind parse_noise_kind(const std::string& s);

/// One noise setting. CONTROL: N(0, level^2). BIAS: N(level, bias_std^2).
/// Sampled i.i.d. per AV per step and added to the commanded acceleration
/// before the simulator's safety clip.
struct NoiseSpec {
  NoiseKind kind = NoiseKind::kNone;
  double level = 0.0;
  double bias_std = 0.3;

  /// True when the setting adds nothing (no noise, sigma 0, or bias with
  /// mean 0 and std 0).
  bool degenerate() const;
  void validate() const;
};

struct EvalOptions {
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  int threads = 0;
  NoiseSpec noise;
};

/// Builds the controller for `kind`. MULTITASK and MRTL need parameters of
/// the matching mode; std::invalid_argument otherwise.
Controller make_controller(ControllerKind kind, const std::shared_ptr<const PolicyParams>& params,
                           const NominalParams& nominal);

/// Adds noise to every AV action. `seed` fixes the noise stream so that two
/// controllers evaluated with the same seed see the same draws.
Controller with_noise(Controller base, const NoiseSpec& noise, std::uint64_t seed);

/// Mean of the metrics, field by field, summed in order.
Metrics mean_metrics(const std::vector<Metrics>& runs);

/// Metrics of one controller on one context, averaged over seeds.
Metrics run_baseline(ControllerKind kind, const Context& context, const std::vector<std::uint64_t>& seeds,
                     const EnvConfig& env, const std::shared_ptr<const PolicyParams>& params = nullptr,
                     const NoiseSpec& noise = {});

struct EpisodeKey {
  std::uint64_t context_seed = 0;
  std::uint64_t episode_seed = 0;
  bool operator==(const EpisodeKey&) const = default;
};

struct ControllerRun {
  ControllerKind kind = ControllerKind::kIdm;
  std::vector<Metrics> per_context;  // mean over seeds, corpus order
  std::vector<EpisodeKey> episodes;  // every (context, seed) pair evaluated
};

ControllerRun evaluate_controller(ControllerKind kind, const Corpus& corpus, const EnvConfig& env,
                                  const EvalOptions& options,
                                  const std::shared_ptr<const PolicyParams>& params = nullptr);

/// Metrics that get percentage deltas, in report order.
const std::vector<std::string>& delta_metric_names();
double metric_value(const Metrics& m, const std::string& name);

/// (treatment - baseline) / baseline * 100; nullopt when the baseline is 0.
std::optional<double> percent_delta(double treatment, double baseline);

struct DeltaSummary {
  double mean = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::size_t n = 0;         // contexts with a defined delta
  std::size_t excluded = 0;  // undefined deltas (zero baseline)
};

/// Mean and percentile bootstrap interval. The values are sorted first so
/// the result does not depend on their order.
DeltaSummary summarize_deltas(std::vector<double> values, std::size_t excluded, int resamples, std::uint64_t seed,
                              double confidence = 0.95);

struct Comparison {
  ControllerKind kind = ControllerKind::kIdm;
  /// metric -> per-context delta (corpus order)
  std::map<std::string, std::vector<std::optional<double>>> per_context;
  /// group ("all" or "penetration=0.2") -> metric -> summary
  std::map<std::string, std::map<std::string, DeltaSummary>> aggregate;
};

struct BenchmarkReport {
  Corpus corpus;
  std::string corpus_hash;
  ControllerKind baseline = ControllerKind::kIdm;
  std::vector<ControllerRun> runs;  // baseline first
  std::vector<Comparison> comparisons;
  nlohmann::json config;  // echo of every constant that shaped the numbers
};

struct BootstrapOptions {
  int resamples = 2000;
  std::uint64_t seed = 0;
};

/// Deltas of every run against the baseline run. Throws
/// std::invalid_argument when the runs were not evaluated on identical
/// (context, seed) pairs.
BenchmarkReport compare(const Corpus& corpus, const ControllerRun& baseline, const std::vector<ControllerRun>& treatments,
                        const BootstrapOptions& bootstrap = {});

nlohmann::json report_json(const BenchmarkReport& report);
/// Human-readable summary laid out like the paper's comparison table.
void write_summary_table(std::ostream& out, const BenchmarkReport& report);

struct NoisePoint {
  ControllerKind kind = ControllerKind::kNominal;
  double level = 0.0;
  Metrics mean;                  // mean over contexts of per-context means
  double emission_change_pct = 0.0;  // vs the same controller without noise
};

std::vector<NoisePoint> noise_sweep(ControllerKind kind, const Corpus& corpus, const EnvConfig& env, NoiseKind noise_kind,
                                    const std::vector<double>& levels, const EvalOptions& options,
                                    const std::shared_ptr<const PolicyParams>& params = nullptr);

void write_noise_csv(std::ostream& out, NoiseKind kind, const std::vector<NoisePoint>& points);

struct BenefitRow {
  std::size_t context_id = 0;
  Context context;
  std::string controller;
  double emission_delta_pct = 0.0;  // NaN when undefined
};

std::vector<BenefitRow> benefit_rows(const BenchmarkReport& report);
void write_benefit_map(std::ostream& out, const std::vector<BenefitRow>& rows);
void export_benefit_map(const BenchmarkReport& report, const std::filesystem::path& path);
std::vector<BenefitRow> read_benefit_map(const std::filesystem::path& path);

}  // namespace ecomrtl
