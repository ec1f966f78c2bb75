#pragma once

// Context space of the eco-driving contextual MDP: one signalized
// intersection approach per context, sampled procedurally and stored as a
// versioned text corpus.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "ecomrtl/rng.hpp"

namespace ecomrtl {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;

  bool contains(double x) const { return lo <= x && x <= hi; }
  double midpoint() const { return 0.5 * (lo + hi); }
};

struct IntInterval {
  int lo = 0;
  int hi = 0;

  bool contains(int x) const { return lo <= x && x <= hi; }
};

/// One intersection approach. Field names follow the corpus file keys.
struct Context {
  double lane_length_m = 200.0;
  double inflow_vph = 800.0;
  double speed_limit_mps = 13.0;
  int lane_count = 1;
  double green_s = 27.0;
  double red_s = 27.0;
  double phase_offset_s = 0.0;  // in [0, green_s + red_s)
  double penetration = 1.0;     // AV fraction
  std::uint64_t seed = 0;       // per-context randomness (arrivals)

  double cycle_s() const { return green_s + red_s; }

  bool operator==(const Context&) const = default;
};

using Corpus = std::vector<Context>;

/// Feature ranges of the context space. Defaults are the ranges reported
/// for the ~600-approach synthetic dataset.
struct ContextSpace {
  Interval lane_length_m{75.0, 400.0};
  Interval inflow_vph{675.0, 900.0};
  Interval speed_limit_mps{10.0, 15.0};
  IntInterval lane_count{1, 3};
  Interval green_s{25.0, 30.0};
  Interval red_s{25.0, 30.0};
  std::vector<double> penetration_levels{0.2, 1.0};

  /// Throws std::invalid_argument when an interval is inverted, a level lies
  /// outside [0, 1], or a range is physically meaningless.
  void validate() const;

  /// Throws std::invalid_argument naming the first field outside the space.
  /// Penetration only needs to be a fraction; it is not restricted to the
  /// sampled levels so that hand-written corpora can use other rates.
  void check(const Context& c) const;
};

/// Independent uniform draw per feature; penetration picked uniformly from
/// the level list; phase offset uniform over one cycle. Consumes a fixed
/// number of draws so the result depends only on the generator state.
Context sample_context(const ContextSpace& space, Rng& rng);

/// n contexts; context i is sampled from its own generator seeded by
/// derive_seed(seed, i). Throws std::invalid_argument when n == 0.
Corpus generate_corpus(const ContextSpace& space, std::size_t n, std::uint64_t seed);

inline constexpr std::string_view kCorpusHeader = "eco-mrtl-corpus v1";

std::string format_corpus(const Corpus& corpus);
/// Parses and validates against `space`. Throws ParseError with line and
/// field diagnostics.
Corpus parse_corpus(std::string_view text, const ContextSpace& space = {},
                    const std::string& source = "<corpus>");

void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path, const ContextSpace& space = {});

/// FNV-1a over the serialized corpus text.
std::uint64_t corpus_hash(const Corpus& corpus);

}  // namespace ecomrtl
