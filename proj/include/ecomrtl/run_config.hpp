#pragma once

// Run configuration for the command-line tool. Every tunable constant is a
// flat dotted key ("sim.horizon", "train.lr", "space.red_s.hi", ...). The
// schema is the key set of the defaults; a value must parse as the type of
// its default.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ecomrtl/learner.hpp"
#include "ecomrtl/scenario.hpp"

namespace ecomrtl {

struct EvalSettings {
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  int bootstrap_resamples = 2000;
  double bias_std = 0.3;
};

struct PathSettings {
  std::string corpus;
  std::string checkpoint;
  std::string multitask_checkpoint;
  std::string out;
};

struct RunConfig {
  ContextSpace space;
  EnvConfig env;
  TrainConfig train;  // train.seed and train.threads come from `seed` and `threads`
  EvalSettings eval;
  PathSettings paths;
  int threads = 0;
  int verbosity = 0;
  std::optional<std::uint64_t> seed;  // unset: fall back to ECO_MRTL_SEED, then 0

  /// Throws std::invalid_argument naming the first bad section.
  void validate() const;
};

/// Flat key -> value view of `cfg`, keys sorted. `seed` appears only when set.
std::vector<std::pair<std::string, std::string>> flatten(const RunConfig& cfg);

/// "key=value" lines, sorted, for output headers. `prefix` starts each line.
std::string format_run_config(const RunConfig& cfg, std::string_view prefix = "");

/// Sets one key. Throws std::invalid_argument for an unknown key or a value
/// of the wrong type; the config is unchanged on error.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

/// Applies "key = value" lines. Blank lines and '#' comments are skipped.
/// Throws ParseError with the line number on any bad line.
void apply_config_text(RunConfig& cfg, std::string_view text, const std::string& source);
void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);

/// Every key in the schema with its default, sorted.
std::vector<std::pair<std::string, std::string>> config_schema();

/// Seed precedence: explicit flag, then the config `seed`, then the
/// ECO_MRTL_SEED environment variable, then 0. A malformed variable throws
/// std::invalid_argument.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, const RunConfig& cfg);

nlohmann::json to_json_value(const RunConfig& cfg);

}  // namespace ecomrtl
