#include "ecomrtl/scenario.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "ecomrtl/errors.hpp"
#include "ecomrtl/text_format.hpp"

namespace ecomrtl {
namespace {

void require_interval(const Interval& iv, const char* name, double floor) {
  if (!(std::isfinite(iv.lo) && std::isfinite(iv.hi)) || iv.lo > iv.hi) {
    throw std::invalid_argument(std::string("context space: ") + name + " interval is inverted or non-finite");
  }
  if (iv.lo < floor) {
    throw std::invalid_argument(std::string("context space: ") + name + " lower bound below " +
                                text::format_double(floor));
  }
}

std::string range_text(double lo, double hi) {
  return "[" + text::format_double(lo) + ", " + text::format_double(hi) + "]";
}

constexpr std::array<std::string_view, 9> kKeys = {
    "lane_length_m", "inflow_vph", "speed_limit_mps", "lane_count", "green_s",
    "red_s",         "phase_offset_s", "penetration", "seed"};

}  // namespace

void ContextSpace::validate() const {
  require_interval(lane_length_m, "lane_length_m", 1e-9);
  require_interval(inflow_vph, "inflow_vph", 0.0);
  require_interval(speed_limit_mps, "speed_limit_mps", 1e-9);
  require_interval(green_s, "green_s", 1e-9);
  require_interval(red_s, "red_s", 1e-9);
  if (lane_count.lo < 1 || lane_count.lo > lane_count.hi) {
    throw std::invalid_argument("context space: lane_count interval must satisfy 1 <= lo <= hi");
  }
  if (penetration_levels.empty()) {
    throw std::invalid_argument("context space: penetration_levels is empty");
  }
  for (const double p : penetration_levels) {
    if (!(p >= 0.0 && p <= 1.0)) {
      throw std::invalid_argument("context space: penetration level outside [0, 1]");
    }
  }
}

void ContextSpace::check(const Context& c) const {
  const auto fail = [](std::string_view field, double value, double lo, double hi) {
    throw std::invalid_argument("field '" + std::string(field) + "': value " + text::format_double(value) +
                                " outside " + range_text(lo, hi));
  };
  if (!lane_length_m.contains(c.lane_length_m)) fail("lane_length_m", c.lane_length_m, lane_length_m.lo, lane_length_m.hi);
  if (!inflow_vph.contains(c.inflow_vph)) fail("inflow_vph", c.inflow_vph, inflow_vph.lo, inflow_vph.hi);
  if (!speed_limit_mps.contains(c.speed_limit_mps)) fail("speed_limit_mps", c.speed_limit_mps, speed_limit_mps.lo, speed_limit_mps.hi);
  if (!lane_count.contains(c.lane_count)) fail("lane_count", c.lane_count, lane_count.lo, lane_count.hi);
  if (!green_s.contains(c.green_s)) fail("green_s", c.green_s, green_s.lo, green_s.hi);
  if (!red_s.contains(c.red_s)) fail("red_s", c.red_s, red_s.lo, red_s.hi);
  if (!(c.phase_offset_s >= 0.0 && c.phase_offset_s < c.cycle_s())) {
    throw std::invalid_argument("field 'phase_offset_s': value " + text::format_double(c.phase_offset_s) +
                                " outside [0, " + text::format_double(c.cycle_s()) + ")");
  }
  if (!(c.penetration >= 0.0 && c.penetration <= 1.0)) fail("penetration", c.penetration, 0.0, 1.0);
}

Context sample_context(const ContextSpace& space, Rng& rng) {
  Context c;
  c.lane_length_m = rng.uniform(space.lane_length_m.lo, space.lane_length_m.hi);
  c.inflow_vph = rng.uniform(space.inflow_vph.lo, space.inflow_vph.hi);
  c.speed_limit_mps = rng.uniform(space.speed_limit_mps.lo, space.speed_limit_mps.hi);
  c.lane_count = static_cast<int>(rng.uniform_int(space.lane_count.lo, space.lane_count.hi));
  c.green_s = rng.uniform(space.green_s.lo, space.green_s.hi);
  c.red_s = rng.uniform(space.red_s.lo, space.red_s.hi);
  c.phase_offset_s = rng.uniform(0.0, c.cycle_s());
  const auto level = rng.uniform_int(0, static_cast<std::int64_t>(space.penetration_levels.size()) - 1);
  c.penetration = space.penetration_levels[static_cast<std::size_t>(level)];
  c.seed = rng.next_u64();
  return c;
}

Corpus generate_corpus(const ContextSpace& space, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("generate_corpus: empty corpus requested (n = 0)");
  space.validate();
  Corpus corpus;
  corpus.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, i));
    corpus.push_back(sample_context(space, rng));
  }
  return corpus;
}

std::string format_corpus(const Corpus& corpus) {
  std::string out(kCorpusHeader);
  out += '\n';
  for (const Context& c : corpus) {
    out += "lane_length_m=" + text::format_double(c.lane_length_m);
    out += " inflow_vph=" + text::format_double(c.inflow_vph);
    out += " speed_limit_mps=" + text::format_double(c.speed_limit_mps);
    out += " lane_count=" + std::to_string(c.lane_count);
    out += " green_s=" + text::format_double(c.green_s);
    out += " red_s=" + text::format_double(c.red_s);
    out += " phase_offset_s=" + text::format_double(c.phase_offset_s);
    out += " penetration=" + text::format_double(c.penetration);
    out += " seed=" + std::to_string(c.seed);
    out += '\n';
  }
  return out;
}

Corpus parse_corpus(std::string_view text, const ContextSpace& space, const std::string& source) {
  Corpus corpus;
  std::size_t line_no = 0;
  bool saw_header = false;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text::trim(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (line.empty() || line.front() == '#') {
      if (end == text.size()) break;
      continue;
    }
    if (!saw_header) {
      if (line != kCorpusHeader) {
        throw ParseError(source, line_no, "expected header '" + std::string(kCorpusHeader) + "'");
      }
      saw_header = true;
      if (end == text.size()) break;
      continue;
    }

    Context c;
    std::array<bool, kKeys.size()> seen{};
    for (const std::string_view token : text::split_whitespace(line)) {
      const auto eq = token.find('=');
      if (eq == std::string_view::npos) {
        throw ParseError(source, line_no, "token '" + std::string(token) + "' is not key=value");
      }
      const std::string_view key = token.substr(0, eq);
      const std::string_view value = token.substr(eq + 1);
      std::size_t k = 0;
      while (k < kKeys.size() && kKeys[k] != key) ++k;
      if (k == kKeys.size()) throw ParseError(source, line_no, "unknown field '" + std::string(key) + "'");
      if (seen[k]) throw ParseError(source, line_no, "duplicate field '" + std::string(key) + "'");
      seen[k] = true;

      bool ok = true;
      long long as_int = 0;
      switch (k) {
        case 0: ok = text::parse_double(value, c.lane_length_m); break;
        case 1: ok = text::parse_double(value, c.inflow_vph); break;
        case 2: ok = text::parse_double(value, c.speed_limit_mps); break;
        case 3:
          ok = text::parse_int(value, as_int) && as_int >= INT32_MIN && as_int <= INT32_MAX;
          c.lane_count = static_cast<int>(as_int);
          break;
        case 4: ok = text::parse_double(value, c.green_s); break;
        case 5: ok = text::parse_double(value, c.red_s); break;
        case 6: ok = text::parse_double(value, c.phase_offset_s); break;
        case 7: ok = text::parse_double(value, c.penetration); break;
        case 8: ok = text::parse_u64(value, c.seed); break;
      }
      if (!ok) {
        throw ParseError(source, line_no, "field '" + std::string(key) + "': cannot parse '" + std::string(value) + "'");
      }
    }
    for (std::size_t k = 0; k < kKeys.size(); ++k) {
      if (!seen[k]) throw ParseError(source, line_no, "missing field '" + std::string(kKeys[k]) + "'");
    }
    try {
      space.check(c);
    } catch (const std::invalid_argument& e) {
      throw ParseError(source, line_no, e.what());
    }
    corpus.push_back(c);
    if (end == text.size()) break;
  }
  if (!saw_header) throw ParseError(source, line_no, "empty corpus file (missing header)");
  if (corpus.empty()) throw ParseError(source, line_no, "corpus has no records");
  return corpus;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out << format_corpus(corpus);
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

Corpus load_corpus(const std::filesystem::path& path, const ContextSpace& space) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_corpus(buf.str(), space, path.string());
}

std::uint64_t corpus_hash(const Corpus& corpus) { return text::fnv1a64(format_corpus(corpus)); }

}  // namespace ecomrtl
