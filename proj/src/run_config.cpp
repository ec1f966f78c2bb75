#include "ecomrtl/run_config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "ecomrtl/errors.hpp"
#include "ecomrtl/json_io.hpp"
#include "ecomrtl/text_format.hpp"

namespace ecomrtl {

using nlohmann::json;

namespace {

json interval_json(const Interval& i) { return json{{"lo", i.lo}, {"hi", i.hi}}; }
json interval_json(const IntInterval& i) { return json{{"lo", i.lo}, {"hi", i.hi}}; }

Interval interval_from(const json& j) { return {j.at("lo").get<double>(), j.at("hi").get<double>()}; }
IntInterval int_interval_from(const json& j) { return {j.at("lo").get<int>(), j.at("hi").get<int>()}; }

RunConfig from_json_value(const json& j) {
  RunConfig cfg;
  const json& s = j.at("space");
  cfg.space.lane_length_m = interval_from(s.at("lane_length_m"));
  cfg.space.inflow_vph = interval_from(s.at("inflow_vph"));
  cfg.space.speed_limit_mps = interval_from(s.at("speed_limit_mps"));
  cfg.space.lane_count = int_interval_from(s.at("lane_count"));
  cfg.space.green_s = interval_from(s.at("green_s"));
  cfg.space.red_s = interval_from(s.at("red_s"));
  s.at("penetration_levels").get_to(cfg.space.penetration_levels);

  j.at("sim").get_to(cfg.env.sim);
  j.at("nominal").get_to(cfg.env.nominal);
  j.at("reward").get_to(cfg.env.reward);

  json train = j.at("train");
  train["seed"] = 0;
  train.get_to(cfg.train);

  const json& e = j.at("eval");
  e.at("seeds").get_to(cfg.eval.seeds);
  e.at("bootstrap_resamples").get_to(cfg.eval.bootstrap_resamples);
  e.at("bias_std").get_to(cfg.eval.bias_std);

  const json& p = j.at("paths");
  p.at("corpus").get_to(cfg.paths.corpus);
  p.at("checkpoint").get_to(cfg.paths.checkpoint);
  p.at("multitask_checkpoint").get_to(cfg.paths.multitask_checkpoint);
  p.at("out").get_to(cfg.paths.out);

  j.at("threads").get_to(cfg.threads);
  j.at("verbosity").get_to(cfg.verbosity);
  if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.train.threads = cfg.threads;
  return cfg;
}

std::string leaf_text(const json& v) {
  switch (v.type()) {
    case json::value_t::number_float: return text::format_double(v.get<double>());
    case json::value_t::number_integer: return std::to_string(v.get<std::int64_t>());
    case json::value_t::number_unsigned: return std::to_string(v.get<std::uint64_t>());
    case json::value_t::string: return v.get<std::string>();
    case json::value_t::boolean: return v.get<bool>() ? "true" : "false";
    case json::value_t::array: {
      std::string out;
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (i > 0) out += ',';
        out += leaf_text(v[i]);
      }
      return out;
    }
    default: return v.dump();
  }
}

void flatten_into(const json& j, const std::string& prefix, std::vector<std::pair<std::string, std::string>>& out) {
  for (const auto& [k, v] : j.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) {
      flatten_into(v, key, out);
    } else {
      out.emplace_back(key, leaf_text(v));
    }
  }
}

json parse_scalar(const json& like, std::string_view raw, const std::string& key) {
  const std::string_view t = text::trim(raw);
  const auto bad = [&](const char* what) {
    return std::invalid_argument("config key '" + key + "': '" + std::string(raw) + "' is not " + what);
  };
  switch (like.type()) {
    case json::value_t::number_float: {
      double v = 0.0;
      if (!text::parse_double(t, v) || !std::isfinite(v)) throw bad("a finite number");
      return v;
    }
    case json::value_t::number_integer: {
      long long v = 0;
      if (!text::parse_int(t, v)) throw bad("an integer");
      return v;
    }
    case json::value_t::number_unsigned: {
      std::uint64_t v = 0;
      if (!text::parse_u64(t, v)) throw bad("a non-negative integer");
      return v;
    }
    case json::value_t::string: return std::string(t);
    default: throw bad("settable");
  }
}

}  // namespace

json to_json_value(const RunConfig& cfg) {
  json j;
  j["space"] = {{"lane_length_m", interval_json(cfg.space.lane_length_m)},
                {"inflow_vph", interval_json(cfg.space.inflow_vph)},
                {"speed_limit_mps", interval_json(cfg.space.speed_limit_mps)},
                {"lane_count", interval_json(cfg.space.lane_count)},
                {"green_s", interval_json(cfg.space.green_s)},
                {"red_s", interval_json(cfg.space.red_s)},
                {"penetration_levels", cfg.space.penetration_levels}};
  j["sim"] = cfg.env.sim;
  j["nominal"] = cfg.env.nominal;
  j["reward"] = cfg.env.reward;
  json train = cfg.train;
  train.erase("seed");
  j["train"] = std::move(train);
  j["eval"] = {{"seeds", cfg.eval.seeds},
               {"bootstrap_resamples", cfg.eval.bootstrap_resamples},
               {"bias_std", cfg.eval.bias_std}};
  j["paths"] = {{"corpus", cfg.paths.corpus},
                {"checkpoint", cfg.paths.checkpoint},
                {"multitask_checkpoint", cfg.paths.multitask_checkpoint},
                {"out", cfg.paths.out}};
  j["threads"] = cfg.threads;
  j["verbosity"] = cfg.verbosity;
  if (cfg.seed) j["seed"] = *cfg.seed;
  return j;
}

void RunConfig::validate() const {
  space.validate();
  env.validate();
  TrainConfig t = train;
  t.threads = threads;
  t.validate();
  if (eval.seeds.empty()) throw std::invalid_argument("eval.seeds must not be empty");
  if (eval.bootstrap_resamples < 1) throw std::invalid_argument("eval.bootstrap_resamples must be >= 1");
  if (!(eval.bias_std >= 0.0 && std::isfinite(eval.bias_std))) throw std::invalid_argument("eval.bias_std must be >= 0");
  if (threads < 0) throw std::invalid_argument("threads must be >= 0");
  if (verbosity < 0) throw std::invalid_argument("verbosity must be >= 0");
}

std::vector<std::pair<std::string, std::string>> flatten(const RunConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  flatten_into(to_json_value(cfg), "", out);
  std::sort(out.begin(), out.end());
  return out;
}

std::string format_run_config(const RunConfig& cfg, std::string_view prefix) {
  std::string out;
  for (const auto& [k, v] : flatten(cfg)) {
    out += prefix;
    out += k + "=" + v + "\n";
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> config_schema() {
  RunConfig defaults;
  auto out = flatten(defaults);
  out.emplace_back("seed", "(ECO_MRTL_SEED or 0)");
  std::sort(out.begin(), out.end());
  return out;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "seed") {
    std::uint64_t s = 0;
    if (!text::parse_u64(text::trim(value), s)) {
      throw std::invalid_argument("config key 'seed': '" + value + "' is not a non-negative integer");
    }
    cfg.seed = s;
    return;
  }
  json j = to_json_value(cfg);
  std::string pointer;
  for (const std::string_view part : text::split(key, '.')) {
    if (part.empty()) throw std::invalid_argument("malformed config key '" + key + "'");
    pointer += "/" + std::string(part);
  }
  const json::json_pointer ptr(pointer.empty() ? "/" : pointer);
  if (key.empty() || !j.contains(ptr) || j.at(ptr).is_object()) {
    throw std::invalid_argument("unknown config key '" + key + "'");
  }
  json& slot = j.at(ptr);
  if (slot.is_array()) {
    if (slot.empty()) throw std::invalid_argument("config key '" + key + "' has no element type");
    const json like = slot.front();
    json list = json::array();
    const std::string_view trimmed = text::trim(value);
    if (!trimmed.empty()) {
      for (const std::string_view item : text::split(trimmed, ',')) list.push_back(parse_scalar(like, item, key));
    }
    slot = std::move(list);
  } else {
    slot = parse_scalar(slot, value, key);
  }
  RunConfig updated = from_json_value(j);
  updated.seed = cfg.seed;
  cfg = std::move(updated);
}

void apply_config_text(RunConfig& cfg, std::string_view text, const std::string& source) {
  RunConfig work = cfg;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    const std::string_view line = text::trim(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.front() != '#') {
      const std::size_t eq = line.find('=');
      if (eq == std::string_view::npos) throw ParseError(source, line_no, "expected key = value");
      const std::string key(text::trim(line.substr(0, eq)));
      try {
        set_config_value(work, key, std::string(line.substr(eq + 1)));
      } catch (const std::invalid_argument& e) {
        throw ParseError(source, line_no, e.what());
      }
    }
    if (end == text.size()) break;
  }
  cfg = std::move(work);
}

void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open config '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  apply_config_text(cfg, buf.str(), path.string());
}

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, const RunConfig& cfg) {
  if (flag) return *flag;
  if (cfg.seed) return *cfg.seed;
  if (const char* env = std::getenv("ECO_MRTL_SEED"); env != nullptr) {
    std::uint64_t s = 0;
    if (!text::parse_u64(text::trim(env), s)) {
      throw std::invalid_argument(std::string("ECO_MRTL_SEED='") + env + "' is not a non-negative integer");
    }
    return s;
  }
  return 0;
}

}  // namespace ecomrtl
