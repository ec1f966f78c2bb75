#pragma once

// Time-stepped simulation of one signalized approach: Bernoulli arrivals,
// IDM car following for human drivers, commanded accelerations for AVs, a
// fixed-time signal and a safety clip that every applied acceleration passes.
//
// Geometry: each lane runs from the entry (position 0) to the stop line at
// lane_length; vehicles are removed exit_runout metres past the stop line.
// Positions are front-bumper coordinates.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "ecomrtl/emissions.hpp"
#include "ecomrtl/rng.hpp"
#include "ecomrtl/scenario.hpp"

namespace ecomrtl {

using VehicleId = std::int64_t;

enum class VehicleClass : std::uint8_t { kHuman, kAv };
enum class Phase : std::uint8_t { kGreen, kRed };

const char* to_string(VehicleClass c);
const char* to_string(Phase p);

struct IdmParams {
  double desired_speed = 15.0;  // v0; the simulation overrides it with the context speed limit
  double time_headway = 1.6;    // T
  double max_accel = 0.73;      // a
  double comfort_decel = 1.67;  // b
  double exponent = 4.0;        // delta
  double min_gap = 2.0;         // s0
  double vehicle_length = 5.0;

  void validate() const;
};

struct SimConfig {
  double dt = 0.1;
  double horizon = 120.0;
  double max_accel = 3.0;  // A, bound on commanded accelerations
  double max_decel = 4.5;  // emergency braking used by the safety clip
  double exit_runout = 50.0;
  double idle_speed = 0.1;  // reporting threshold for idling
  IdmParams idm;
  EmissionParams emission;

  void validate() const;
  std::int64_t horizon_steps() const;
};

struct VehicleState {
  VehicleId id = 0;
  VehicleClass cls = VehicleClass::kHuman;
  int lane = 0;
  double position = 0.0;
  double speed = 0.0;
  double accel = 0.0;          // last applied
  double spawn_time = 0.0;
  std::optional<double> crossed_time;
  double emission_rate = 0.0;  // g/s during the last step
  double trip_emission = 0.0;  // g since spawn

  bool crossed() const { return crossed_time.has_value(); }
};

/// Obstacle ahead of a vehicle: bumper gap and its speed.
struct LeaderInfo {
  double gap = 0.0;
  double speed = 0.0;
};

/// Fixed-time plan: RED for red_s then GREEN for green_s, shifted by offset_s.
struct SignalSchedule {
  double green_s = 27.0;
  double red_s = 27.0;
  double offset_s = 0.0;

  static SignalSchedule from(const Context& c) { return {c.green_s, c.red_s, c.phase_offset_s}; }
  double cycle() const { return green_s + red_s; }
  /// Position within the cycle, in [0, cycle).
  double cycle_time(double t) const;
  Phase phase_at(double t) const;
  double time_in_phase(double t) const;
  double time_remaining(double t) const;
  /// 0 while green, otherwise the remaining red time.
  double time_to_green(double t) const;
};

struct SignalState {
  Phase phase = Phase::kRed;
  double time_in_phase = 0.0;
  double time_remaining = 0.0;
  SignalSchedule schedule;

  static SignalState at(const SignalSchedule& schedule, double t);
};

/// Intelligent driver model. `gap` may be +infinity (no leader).
/// Throws ContractViolation for gap <= 0.
double idm_accel(double ego_speed, double gap, double leader_speed, const IdmParams& p);

/// During RED the stop line acts as a stopped leader at lane_length.
std::optional<LeaderInfo> red_light_virtual_leader(const VehicleState& ego, const SignalState& signal,
                                                   double lane_length);

/// Distance covered while braking at `decel` from `speed` under the
/// simulator's integration (v <- max(0, v - b dt); x <- x + v dt).
double discrete_braking_distance(double speed, double decel, double dt);

/// Largest acceleration for this step such that, if the obstacle brakes at
/// max_decel from now and the ego brakes at max_decel from the next step,
/// the gap never drops below `margin`.
double safe_accel_bound(double ego_speed, const LeaderInfo& obstacle, double margin, const SimConfig& cfg);

/// Acceleration bound from a red stop line `distance` ahead when the next
/// `red_steps` clock ticks are still red: the ego, braking at max_decel from
/// the next step, must not reach the line before the light turns green. For a
/// long red this is the stop-at-the-line bound. No bound when red_steps <= 0.
double red_light_bound(double ego_speed, double distance, int red_steps, const SimConfig& cfg);

/// min(proposed, upper_bound) clipped to [-max_decel, A] and never below
/// the acceleration that stops the vehicle within this step.
double clip_to_bounds(double proposed, double ego_speed, double upper_bound, const SimConfig& cfg);

/// Safety clip against one real leader (margin s0).
double safety_clip(double proposed, const VehicleState& ego, const std::optional<LeaderInfo>& leader,
                   const SimConfig& cfg);

/// Per-lane, per-step Bernoulli arrival probability (inflow split evenly
/// over lanes).
double arrival_probability(const Context& context, const SimConfig& cfg);

/// True when braking at max_decel from now keeps the vehicle short of a red
/// stop line `distance` ahead on each of the next `red_steps` red ticks.
/// AVs that cannot are past the point of no return and may proceed.
bool can_wait_out_red(double speed, double distance, int red_steps, const SimConfig& cfg);

/// True when the vehicle can still stop before `distance` under max_decel.
bool can_stop_before(double speed, double distance, const SimConfig& cfg);

struct Metrics {
  double total_emission = 0.0;           // g, all vehicles over the horizon
  double emission_per_vehicle = 0.0;     // g per spawned vehicle
  double mean_speed = 0.0;               // m/s, time-mean over active vehicles
  double throughput = 0.0;               // veh/h crossing the stop line
  double mean_travel_time = 0.0;         // s, spawn to stop line
  double idling_time_per_vehicle = 0.0;  // s below idle_speed per spawned vehicle
  double vehicles_completed = 0.0;       // stop-line crossings
  double vehicles_spawned = 0.0;

  bool operator==(const Metrics&) const = default;
};

struct TraceRow {
  double t = 0.0;
  VehicleId vehicle_id = 0;
  VehicleClass cls = VehicleClass::kHuman;
  int lane = 0;
  double position = 0.0;
  double speed = 0.0;
  double accel = 0.0;
  double emission_gps = 0.0;

  bool operator==(const TraceRow&) const = default;
};

using ActionMap = std::unordered_map<VehicleId, double>;

class Simulation {
 public:
  /// `episode_seed` selects the arrival realization; the arrival stream is
  /// independent of vehicle behaviour so that different controllers see the
  /// same demand. With `spawning` false the road only holds vehicles added
  /// through insert_vehicle().
  Simulation(const Context& context, const SimConfig& cfg, std::uint64_t episode_seed, bool spawning = true);

  const Context& context() const { return context_; }
  const SimConfig& config() const { return cfg_; }
  double clock() const { return static_cast<double>(step_) * cfg_.dt; }
  std::int64_t step_index() const { return step_; }
  bool done() const { return step_ >= horizon_steps_; }

  SignalState signal() const { return SignalState::at(schedule_, clock()); }
  const SignalSchedule& schedule() const { return schedule_; }

  /// Per lane, ordered front (largest position) to back.
  const std::vector<std::vector<VehicleState>>& lanes() const { return lanes_; }
  const VehicleState* find(VehicleId id) const;
  std::vector<VehicleId> active_avs() const;

  std::optional<LeaderInfo> leader_of(const VehicleState& v) const;
  /// IDM against the tighter of the real leader and (on red, when the
  /// vehicle can still stop) the stop line.
  double car_following_accel(const VehicleState& v) const;
  /// Safety clip against the real leader and, on red, the stop line.
  double clip_action(const VehicleState& v, double proposed) const;
  int red_steps_ahead() const;

  /// Advances one dt. `av_actions` must hold exactly the active AVs.
  void step(const ActionMap& av_actions, std::vector<TraceRow>* trace = nullptr);

  /// Places a vehicle directly (tests and hand-built scenarios). Throws
  /// ContractViolation when it would overlap another vehicle.
  VehicleId insert_vehicle(int lane, VehicleClass cls, double position, double speed);

  std::int64_t spawned_count() const { return spawned_; }
  std::int64_t exited_count() const { return exited_; }
  std::int64_t active_count() const;
  std::int64_t crossed_count() const { return crossed_; }
  double cumulative_emission() const { return cumulative_emission_; }

  Metrics metrics() const;

 private:
  void arrivals();

  Context context_;
  SimConfig cfg_;
  SignalSchedule schedule_;
  Rng arrival_rng_;
  bool spawning_;
  std::int64_t horizon_steps_;
  std::int64_t step_ = 0;
  VehicleId next_id_ = 0;
  std::vector<std::vector<VehicleState>> lanes_;
  std::vector<std::vector<VehicleClass>> pending_;
  std::vector<std::vector<double>> accel_scratch_;

  std::int64_t spawned_ = 0;
  std::int64_t exited_ = 0;
  std::int64_t crossed_ = 0;
  double cumulative_emission_ = 0.0;
  double speed_sum_ = 0.0;
  std::int64_t speed_samples_ = 0;
  double idle_time_ = 0.0;
  double travel_time_sum_ = 0.0;
};

/// Maps the current simulation state to one acceleration per active AV.
using Controller = std::function<ActionMap(const Simulation&)>;

struct EpisodeResult {
  Metrics metrics;
  std::vector<TraceRow> trace;
};

/// Runs one episode from an empty road to the horizon.
EpisodeResult run_episode(const Context& context, const SimConfig& cfg, const Controller& controller,
                          std::uint64_t episode_seed, bool record_trace = false);

void write_trace_csv(std::ostream& out, std::span<const TraceRow> rows);

}  // namespace ecomrtl
