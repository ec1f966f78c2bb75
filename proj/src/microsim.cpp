#include "ecomrtl/microsim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>

#include "ecomrtl/errors.hpp"
#include "ecomrtl/text_format.hpp"

namespace ecomrtl {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
// AVs held at a red light stop this far short of the line; position >= lane
// length already counts as crossing.
constexpr double kStopLineMargin = 0.05;

// Largest speed v1 with v1 dt + v1^2 / (2 b) <= budget.
double max_safe_speed(double budget, const SimConfig& cfg) {
  if (budget <= 0.0) return 0.0;
  const double b = cfg.max_decel;
  const double dt = cfg.dt;
  return b * (-dt + std::sqrt(dt * dt + 2.0 * budget / b));
}

}  // namespace

const char* to_string(VehicleClass c) { return c == VehicleClass::kAv ? "AV" : "HUMAN"; }
const char* to_string(Phase p) { return p == Phase::kGreen ? "GREEN" : "RED"; }

void IdmParams::validate() const {
  if (!(desired_speed > 0 && time_headway > 0 && max_accel > 0 && comfort_decel > 0 && exponent > 0 &&
        min_gap > 0 && vehicle_length > 0)) {
    throw std::invalid_argument("idm: all parameters must be positive");
  }
}

void SimConfig::validate() const {
  if (!(dt > 0.0)) throw std::invalid_argument("sim: dt must be > 0");
  if (!(horizon >= 0.0)) throw std::invalid_argument("sim: horizon must be >= 0");
  if (!(max_accel > 0.0 && max_decel > 0.0)) throw std::invalid_argument("sim: acceleration bounds must be > 0");
  if (!(exit_runout > 0.0)) throw std::invalid_argument("sim: exit_runout must be > 0");
  if (!(idle_speed >= 0.0)) throw std::invalid_argument("sim: idle_speed must be >= 0");
  idm.validate();
  emission.validate();
}

std::int64_t SimConfig::horizon_steps() const { return std::llround(horizon / dt); }

double SignalSchedule::cycle_time(double t) const {
  const double c = cycle();
  double u = std::fmod(t + offset_s, c);
  if (u < 0.0) u += c;
  if (u >= c) u = 0.0;
  return u;
}

Phase SignalSchedule::phase_at(double t) const { return cycle_time(t) < red_s ? Phase::kRed : Phase::kGreen; }

double SignalSchedule::time_in_phase(double t) const {
  const double u = cycle_time(t);
  return u < red_s ? u : u - red_s;
}

double SignalSchedule::time_remaining(double t) const {
  const double u = cycle_time(t);
  return u < red_s ? red_s - u : cycle() - u;
}

double SignalSchedule::time_to_green(double t) const {
  const double u = cycle_time(t);
  return u < red_s ? red_s - u : 0.0;
}

SignalState SignalState::at(const SignalSchedule& schedule, double t) {
  return {schedule.phase_at(t), schedule.time_in_phase(t), schedule.time_remaining(t), schedule};
}

double idm_accel(double ego_speed, double gap, double leader_speed, const IdmParams& p) {
  if (!(gap > 0.0)) throw ContractViolation("idm_accel: non-positive gap " + text::format_double(gap));
  const double free_term = std::pow(ego_speed / p.desired_speed, p.exponent);
  if (std::isinf(gap)) return p.max_accel * (1.0 - free_term);
  const double dv = ego_speed - leader_speed;
  const double s_star =
      p.min_gap + std::max(0.0, ego_speed * p.time_headway +
                                    ego_speed * dv / (2.0 * std::sqrt(p.max_accel * p.comfort_decel)));
  const double ratio = s_star / gap;
  return p.max_accel * (1.0 - free_term - ratio * ratio);
}

std::optional<LeaderInfo> red_light_virtual_leader(const VehicleState& ego, const SignalState& signal,
                                                   double lane_length) {
  if (signal.phase != Phase::kRed) return std::nullopt;
  return LeaderInfo{lane_length - ego.position, 0.0};
}

double discrete_braking_distance(double speed, double decel, double dt) {
  if (speed <= 0.0) return 0.0;
  const double step_loss = decel * dt;
  const double n = std::floor(speed / step_loss);
  return dt * (n * speed - step_loss * n * (n + 1.0) / 2.0);
}

double safe_accel_bound(double ego_speed, const LeaderInfo& obstacle, double margin, const SimConfig& cfg) {
  const double leader_next = std::max(0.0, obstacle.speed - cfg.max_decel * cfg.dt);
  const double budget = obstacle.gap - margin + leader_next * cfg.dt +
                        discrete_braking_distance(leader_next, cfg.max_decel, cfg.dt);
  return (max_safe_speed(budget, cfg) - ego_speed) / cfg.dt;
}

double clip_to_bounds(double proposed, double ego_speed, double upper_bound, const SimConfig& cfg) {
  double a = std::min(proposed, upper_bound);
  a = std::min(a, cfg.max_accel);
  const double floor = std::max(-cfg.max_decel, -ego_speed / cfg.dt);
  return std::max(a, floor);
}

double safety_clip(double proposed, const VehicleState& ego, const std::optional<LeaderInfo>& leader,
                   const SimConfig& cfg) {
  const double bound = leader ? safe_accel_bound(ego.speed, *leader, cfg.idm.min_gap, cfg) : kInf;
  return clip_to_bounds(proposed, ego.speed, bound, cfg);
}

double red_light_bound(double ego_speed, double distance, int red_steps, const SimConfig& cfg) {
  if (red_steps <= 0) return kInf;
  const double stop_speed = max_safe_speed(distance, cfg);
  // Braking at max_decel after this step, the vehicle must still be short of
  // the line on the last red tick. When red ends before it could stop, that
  // allows more than stopping at the line does.
  const double n = static_cast<double>(red_steps - 1);
  const double step_loss = cfg.max_decel * cfg.dt;
  const double wait_speed = distance / ((n + 1.0) * cfg.dt) + step_loss * n / 2.0;
  const double speed = wait_speed >= n * step_loss ? std::max(wait_speed, stop_speed) : stop_speed;
  return (speed - ego_speed) / cfg.dt;
}

bool can_wait_out_red(double speed, double distance, int red_steps, const SimConfig& cfg) {
  if (red_steps <= 0) return true;
  const double step_loss = cfg.max_decel * cfg.dt;
  const double k = std::min(static_cast<double>(red_steps), std::floor(speed / step_loss));
  return cfg.dt * (k * speed - step_loss * k * (k + 1.0) / 2.0) <= distance;
}

double arrival_probability(const Context& context, const SimConfig& cfg) {
  return context.inflow_vph / static_cast<double>(context.lane_count) * cfg.dt / 3600.0;
}

bool can_stop_before(double speed, double distance, const SimConfig& cfg) {
  const double v1 = std::max(0.0, speed - cfg.max_decel * cfg.dt);
  return v1 * cfg.dt + v1 * v1 / (2.0 * cfg.max_decel) <= distance;
}

// ---------------------------------------------------------------------------

Simulation::Simulation(const Context& context, const SimConfig& cfg, std::uint64_t episode_seed, bool spawning)
    : context_(context),
      cfg_(cfg),
      schedule_(SignalSchedule::from(context)),
      arrival_rng_(derive_seed(context.seed, episode_seed)),
      spawning_(spawning) {
  cfg_.validate();
  if (context_.lane_count < 1) throw std::invalid_argument("simulation: lane_count must be >= 1");
  if (!(context_.lane_length_m > 0.0 && context_.speed_limit_mps > 0.0 && context_.inflow_vph >= 0.0)) {
    throw std::invalid_argument("simulation: invalid context geometry or demand");
  }
  if (!(context_.green_s > 0.0 && context_.red_s > 0.0)) {
    throw std::invalid_argument("simulation: signal phases must be > 0");
  }
  cfg_.idm.desired_speed = context_.speed_limit_mps;
  horizon_steps_ = cfg_.horizon_steps();
  const auto lanes = static_cast<std::size_t>(context_.lane_count);
  lanes_.resize(lanes);
  pending_.resize(lanes);
  accel_scratch_.resize(lanes);
}

const VehicleState* Simulation::find(VehicleId id) const {
  for (const auto& lane : lanes_) {
    for (const auto& v : lane) {
      if (v.id == id) return &v;
    }
  }
  return nullptr;
}

std::vector<VehicleId> Simulation::active_avs() const {
  std::vector<VehicleId> ids;
  for (const auto& lane : lanes_) {
    for (const auto& v : lane) {
      if (v.cls == VehicleClass::kAv) ids.push_back(v.id);
    }
  }
  return ids;
}

std::int64_t Simulation::active_count() const {
  std::int64_t n = 0;
  for (const auto& lane : lanes_) n += static_cast<std::int64_t>(lane.size());
  return n;
}

std::optional<LeaderInfo> Simulation::leader_of(const VehicleState& v) const {
  const auto& lane = lanes_.at(static_cast<std::size_t>(v.lane));
  const VehicleState* leader = nullptr;
  for (const auto& other : lane) {
    if (other.id == v.id) break;
    leader = &other;
  }
  if (leader == nullptr) return std::nullopt;
  return LeaderInfo{leader->position - cfg_.idm.vehicle_length - v.position, leader->speed};
}

double Simulation::car_following_accel(const VehicleState& v) const {
  const auto leader = leader_of(v);
  double a = leader ? idm_accel(v.speed, leader->gap, leader->speed, cfg_.idm)
                    : idm_accel(v.speed, kInf, 0.0, cfg_.idm);
  if (!v.crossed()) {
    const auto stop_line = red_light_virtual_leader(v, signal(), context_.lane_length_m);
    if (stop_line && can_stop_before(v.speed, stop_line->gap, cfg_)) {
      a = std::min(a, idm_accel(v.speed, stop_line->gap, stop_line->speed, cfg_.idm));
    }
  }
  return a;
}

int Simulation::red_steps_ahead() const {
  // Future clock ticks (step_ + 1, step_ + 2, ...) that still show red.
  const auto red_at = [&](std::int64_t k) {
    return schedule_.phase_at(static_cast<double>(k) * cfg_.dt) == Phase::kRed;
  };
  const SignalState s = signal();
  if (s.phase != Phase::kRed) return 0;
  std::int64_t m = std::max<std::int64_t>(0, std::llround(s.time_remaining / cfg_.dt) - 1);
  while (m > 0 && !red_at(step_ + m)) --m;
  while (red_at(step_ + m + 1)) ++m;
  return static_cast<int>(m);
}

double Simulation::clip_action(const VehicleState& v, double proposed) const {
  const auto leader = leader_of(v);
  double bound = leader ? safe_accel_bound(v.speed, *leader, cfg_.idm.min_gap, cfg_) : kInf;
  if (!v.crossed()) {
    const auto stop_line = red_light_virtual_leader(v, signal(), context_.lane_length_m);
    if (stop_line) {
      const int red_steps = red_steps_ahead();
      if (can_wait_out_red(v.speed, stop_line->gap, red_steps, cfg_)) {
        bound = std::min(bound, red_light_bound(v.speed, stop_line->gap - kStopLineMargin, red_steps, cfg_));
      }
    }
  }
  return clip_to_bounds(proposed, v.speed, bound, cfg_);
}

void Simulation::step(const ActionMap& av_actions, std::vector<TraceRow>* trace) {
  if (done()) throw ContractViolation("step: horizon already reached");

  std::size_t av_count = 0;
  for (std::size_t l = 0; l < lanes_.size(); ++l) {
    auto& accels = accel_scratch_[l];
    accels.resize(lanes_[l].size());
    for (std::size_t i = 0; i < lanes_[l].size(); ++i) {
      const VehicleState& v = lanes_[l][i];
      double proposed = 0.0;
      if (v.cls == VehicleClass::kAv) {
        const auto it = av_actions.find(v.id);
        if (it == av_actions.end()) {
          throw ContractViolation("step: missing action for AV " + std::to_string(v.id));
        }
        if (!std::isfinite(it->second)) {
          throw ContractViolation("step: non-finite action for AV " + std::to_string(v.id));
        }
        proposed = it->second;
        ++av_count;
      } else {
        proposed = car_following_accel(v);
      }
      accels[i] = clip_action(v, proposed);
    }
  }
  if (av_count != av_actions.size()) {
    throw ContractViolation("step: action map has " + std::to_string(av_actions.size()) + " entries for " +
                            std::to_string(av_count) + " active AVs");
  }

  const double dt = cfg_.dt;
  const double t = clock();
  for (std::size_t l = 0; l < lanes_.size(); ++l) {
    for (std::size_t i = 0; i < lanes_[l].size(); ++i) {
      VehicleState& v = lanes_[l][i];
      const double a = accel_scratch_[l][i];
      const double e = instantaneous_emission(v.speed, a, cfg_.emission);
      v.accel = a;
      v.emission_rate = e;
      v.trip_emission += e * dt;
      cumulative_emission_ += e * dt;
      speed_sum_ += v.speed;
      ++speed_samples_;
      if (v.speed < cfg_.idle_speed) idle_time_ += dt;
      if (trace != nullptr) trace->push_back({t, v.id, v.cls, v.lane, v.position, v.speed, a, e});
      v.speed = std::max(0.0, v.speed + a * dt);
      v.position += v.speed * dt;
    }
  }

  ++step_;
  const double now = clock();
  const double exit_position = context_.lane_length_m + cfg_.exit_runout;
  for (auto& lane : lanes_) {
    for (auto& v : lane) {
      if (!v.crossed() && v.position >= context_.lane_length_m) {
        v.crossed_time = now;
        ++crossed_;
        travel_time_sum_ += now - v.spawn_time;
      }
    }
    std::size_t gone = 0;
    while (gone < lane.size() && lane[gone].position >= exit_position) ++gone;
    if (gone > 0) {
      lane.erase(lane.begin(), lane.begin() + static_cast<std::ptrdiff_t>(gone));
      exited_ += static_cast<std::int64_t>(gone);
    }
  }

  if (spawning_) arrivals();
}

void Simulation::arrivals() {
  const double p = arrival_probability(context_, cfg_);
  const double entry_gap = cfg_.idm.min_gap + cfg_.idm.vehicle_length;
  for (std::size_t l = 0; l < lanes_.size(); ++l) {
    // Two draws per lane per step regardless of state: the demand stream
    // must not depend on how vehicles behave.
    const double arrival_draw = arrival_rng_.uniform();
    const double class_draw = arrival_rng_.uniform();
    if (arrival_draw < p) {
      pending_[l].push_back(class_draw < context_.penetration ? VehicleClass::kAv : VehicleClass::kHuman);
    }
    if (pending_[l].empty()) continue;

    auto& lane = lanes_[l];
    double speed = context_.speed_limit_mps;
    if (!lane.empty()) {
      const VehicleState& last = lane.back();
      if (last.position < entry_gap) continue;  // blocked entry, arrival deferred
      const LeaderInfo leader{last.position - cfg_.idm.vehicle_length, last.speed};
      const double leader_next = std::max(0.0, leader.speed - cfg_.max_decel * cfg_.dt);
      const double budget = leader.gap - cfg_.idm.min_gap + leader_next * cfg_.dt +
                            discrete_braking_distance(leader_next, cfg_.max_decel, cfg_.dt);
      speed = std::min(speed, max_safe_speed(budget, cfg_));
    }
    VehicleState v;
    v.id = next_id_++;
    v.cls = pending_[l].front();
    v.lane = static_cast<int>(l);
    v.position = 0.0;
    v.speed = speed;
    v.spawn_time = clock();
    lane.push_back(v);
    pending_[l].erase(pending_[l].begin());
    ++spawned_;
  }
}

VehicleId Simulation::insert_vehicle(int lane_index, VehicleClass cls, double position, double speed) {
  if (lane_index < 0 || lane_index >= context_.lane_count) throw ContractViolation("insert_vehicle: bad lane");
  if (!(speed >= 0.0)) throw ContractViolation("insert_vehicle: negative speed");
  auto& lane = lanes_[static_cast<std::size_t>(lane_index)];
  const double len = cfg_.idm.vehicle_length;
  for (const auto& other : lane) {
    if (std::abs(other.position - position) < len) throw ContractViolation("insert_vehicle: overlaps vehicle");
  }
  VehicleState v;
  v.id = next_id_++;
  v.cls = cls;
  v.lane = lane_index;
  v.position = position;
  v.speed = speed;
  v.spawn_time = clock();
  if (position >= context_.lane_length_m) v.crossed_time = clock();
  const auto at = std::find_if(lane.begin(), lane.end(), [&](const VehicleState& o) { return o.position < position; });
  lane.insert(at, v);
  ++spawned_;
  return v.id;
}

Metrics Simulation::metrics() const {
  Metrics m;
  m.total_emission = cumulative_emission_;
  m.vehicles_spawned = static_cast<double>(spawned_);
  m.vehicles_completed = static_cast<double>(crossed_);
  if (spawned_ > 0) {
    m.emission_per_vehicle = cumulative_emission_ / static_cast<double>(spawned_);
    m.idling_time_per_vehicle = idle_time_ / static_cast<double>(spawned_);
  }
  if (speed_samples_ > 0) m.mean_speed = speed_sum_ / static_cast<double>(speed_samples_);
  const double elapsed = clock();
  if (elapsed > 0.0) m.throughput = static_cast<double>(crossed_) * 3600.0 / elapsed;
  if (crossed_ > 0) m.mean_travel_time = travel_time_sum_ / static_cast<double>(crossed_);
  return m;
}

EpisodeResult run_episode(const Context& context, const SimConfig& cfg, const Controller& controller,
                          std::uint64_t episode_seed, bool record_trace) {
  Simulation sim(context, cfg, episode_seed);
  EpisodeResult result;
  std::vector<TraceRow>* trace = record_trace ? &result.trace : nullptr;
  while (!sim.done()) sim.step(controller(sim), trace);
  result.metrics = sim.metrics();
  return result;
}

void write_trace_csv(std::ostream& out, std::span<const TraceRow> rows) {
  out << "t,vehicle_id,class,lane,position,speed,accel,emission_gps\n";
  for (const TraceRow& r : rows) {
    out << text::format_double(r.t) << ',' << r.vehicle_id << ',' << to_string(r.cls) << ',' << r.lane << ','
        << text::format_double(r.position) << ',' << text::format_double(r.speed) << ','
        << text::format_double(r.accel) << ',' << text::format_double(r.emission_gps) << '\n';
  }
}

}  // namespace ecomrtl
