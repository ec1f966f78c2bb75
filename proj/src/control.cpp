#include "ecomrtl/control.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace ecomrtl {
namespace {

double scaled(double value, double scale) { return std::clamp(value / scale, -1.0, 1.0); }

// Nearest vehicle ahead of and behind `position` in one lane.
void fill_lane_slots(const std::vector<VehicleState>& lane, const VehicleState& ego, double length,
                     NeighborSlot& leader, NeighborSlot& follower) {
  const VehicleState* ahead = nullptr;
  const VehicleState* behind = nullptr;
  for (const VehicleState& other : lane) {
    if (other.id == ego.id) continue;
    if (other.position > ego.position) {
      if (ahead == nullptr || other.position < ahead->position) ahead = &other;
    } else if (behind == nullptr || other.position > behind->position) {
      behind = &other;
    }
  }
  if (ahead != nullptr) leader = {ahead->position - length - ego.position, ahead->speed - ego.speed, true};
  if (behind != nullptr) follower = {ego.position - length - behind->position, behind->speed - ego.speed, true};
}

}  // namespace

std::array<double, kObservationSize> Observation::features() const {
  using S = ObservationScales;
  std::array<double, kObservationSize> f{};
  std::size_t i = 0;
  f[i++] = scaled(ego_speed, S::kSpeed);
  f[i++] = scaled(ego_distance_to_stop, S::kDistance);
  for (const NeighborSlot& slot : neighbors) {
    f[i++] = slot.present ? scaled(slot.gap, S::kGap) : 0.0;
    f[i++] = slot.present ? scaled(slot.rel_speed, S::kRelSpeed) : 0.0;
    f[i++] = slot.present ? 1.0 : 0.0;
  }
  f[i++] = phase == Phase::kGreen ? 1.0 : 0.0;
  f[i++] = phase == Phase::kRed ? 1.0 : 0.0;
  f[i++] = scaled(time_remaining, S::kTime);
  f[i++] = scaled(lane_length, S::kDistance);
  f[i++] = scaled(speed_limit, S::kSpeed);
  f[i++] = scaled(green_s, S::kTime);
  f[i++] = scaled(red_s, S::kTime);
  f[i++] = scaled(static_cast<double>(lane_count), S::kLaneCount);
  return f;
}

Observation build_observation(const Simulation& sim, VehicleId id) {
  const VehicleState* ego = sim.find(id);
  if (ego == nullptr) throw std::out_of_range("build_observation: unknown vehicle " + std::to_string(id));
  const Context& c = sim.context();
  const double length = sim.config().idm.vehicle_length;

  Observation obs;
  obs.ego_speed = ego->speed;
  obs.ego_distance_to_stop = c.lane_length_m - ego->position;
  const auto& lanes = sim.lanes();
  fill_lane_slots(lanes[static_cast<std::size_t>(ego->lane)], *ego, length, obs.neighbors[kSameLeader],
                  obs.neighbors[kSameFollower]);
  if (ego->lane > 0) {
    fill_lane_slots(lanes[static_cast<std::size_t>(ego->lane - 1)], *ego, length, obs.neighbors[kLowerLeader],
                    obs.neighbors[kLowerFollower]);
  }
  if (ego->lane + 1 < c.lane_count) {
    fill_lane_slots(lanes[static_cast<std::size_t>(ego->lane + 1)], *ego, length, obs.neighbors[kUpperLeader],
                    obs.neighbors[kUpperFollower]);
  }
  const SignalState signal = sim.signal();
  obs.phase = signal.phase;
  obs.time_remaining = signal.time_remaining;
  obs.lane_length = c.lane_length_m;
  obs.speed_limit = c.speed_limit_mps;
  obs.green_s = c.green_s;
  obs.red_s = c.red_s;
  obs.lane_count = c.lane_count;
  return obs;
}

TargetSpeed nominal_target_speed(double v, double d, double time_to_green, double green_window) {
  const double t_intersection = v > 0.0 ? d / v : std::numeric_limits<double>::infinity();
  const double t_green = time_to_green;
  const double t_end = t_green + green_window;
  if (t_green <= t_intersection && t_intersection <= t_end) return {NominalBranch::kKeepSpeed, v};
  if (t_green >= t_intersection || (v <= 0.0 && t_green > 0.0)) return {NominalBranch::kGlide, d / t_green};
  return {NominalBranch::kIdm, std::numeric_limits<double>::quiet_NaN()};
}

NominalTiming nominal_timing(const SignalSchedule& schedule, double t) {
  if (schedule.phase_at(t) == Phase::kGreen) return {0.0, schedule.time_remaining(t)};
  return {schedule.time_to_green(t), schedule.green_s};
}

void NominalParams::validate() const {
  if (!(k_p > 0.0)) throw std::invalid_argument("nominal: k_p must be > 0");
  if (!(glide_margin >= 0.0)) throw std::invalid_argument("nominal: glide_margin must be >= 0");
}

double nominal_accel(const Simulation& sim, const VehicleState& v, const NominalParams& p) {
  const double limit = sim.config().max_accel;
  if (v.crossed()) return std::clamp(sim.car_following_accel(v), -limit, limit);
  const double d = sim.context().lane_length_m - v.position;
  const NominalTiming timing = nominal_timing(sim.schedule(), sim.clock());
  TargetSpeed target = nominal_target_speed(v.speed, d, timing.time_to_green, timing.green_window);
  if (target.branch == NominalBranch::kIdm) return std::clamp(sim.car_following_accel(v), -limit, limit);
  if (target.branch == NominalBranch::kGlide && p.glide_margin > 0.0) {
    target.speed = d / (timing.time_to_green + p.glide_margin);
  }
  return std::clamp(p.k_p * (target.speed - v.speed), -limit, limit);
}

double compose_action(double nominal, double residual, double max_accel) {
  if (!std::isfinite(residual)) throw std::domain_error("compose_action: non-finite residual");
  return std::clamp(nominal + residual, -max_accel, max_accel);
}

double step_reward(double v_norm, double e_norm, double w1) { return v_norm + w1 * e_norm; }

double agent_step_reward(double speed, double emission_gps, double speed_limit, const EmissionParams& emission,
                         const RewardParams& reward) {
  const double e_scale = reward.emission_scale_factor * emission.beta0;
  return step_reward(speed / speed_limit, emission_gps / e_scale, reward.w1);
}

Controller make_idm_controller() {
  return [](const Simulation& sim) {
    ActionMap actions;
    for (const auto& lane : sim.lanes()) {
      for (const auto& v : lane) {
        if (v.cls == VehicleClass::kAv) actions.emplace(v.id, sim.car_following_accel(v));
      }
    }
    return actions;
  };
}

Controller make_nominal_controller(const NominalParams& params) {
  params.validate();
  return [params](const Simulation& sim) {
    ActionMap actions;
    for (const auto& lane : sim.lanes()) {
      for (const auto& v : lane) {
        if (v.cls == VehicleClass::kAv) actions.emplace(v.id, nominal_accel(sim, v, params));
      }
    }
    return actions;
  };
}

}  // namespace ecomrtl
