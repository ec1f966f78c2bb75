#pragma once

// Nominal glide-or-keep-speed policy, per-AV observations, the per-step
// reward, and residual action composition pi(s, c) = pi_n(s, c) + f(s, c).

#include <array>
#include <cstddef>

#include "ecomrtl/emissions.hpp"
#include "ecomrtl/microsim.hpp"

namespace ecomrtl {

// ---- observation ----------------------------------------------------------

/// Scale constants mapping raw observation features into [-1, 1]. Features
/// are divided by their scale and clamped.
struct ObservationScales {
  static constexpr double kSpeed = 15.0;       // m/s, ego speed and speed limit
  static constexpr double kDistance = 400.0;   // m, distance to stop line and lane length
  static constexpr double kGap = 100.0;        // m, neighbour bumper gaps
  static constexpr double kRelSpeed = 15.0;    // m/s, neighbour minus ego speed
  static constexpr double kTime = 30.0;        // s, phase remaining and phase durations
  static constexpr double kLaneCount = 3.0;
};

inline constexpr std::size_t kNeighborSlots = 6;
inline constexpr std::size_t kObservationSize = 2 + 3 * kNeighborSlots + 2 + 1 + 5;

/// Slot order: same-lane leader, same-lane follower, lower-index lane
/// leader/follower, higher-index lane leader/follower.
enum NeighborSlotIndex : std::size_t {
  kSameLeader = 0,
  kSameFollower,
  kLowerLeader,
  kLowerFollower,
  kUpperLeader,
  kUpperFollower
};

struct NeighborSlot {
  double gap = 0.0;        // m, bumper to bumper
  double rel_speed = 0.0;  // m/s, neighbour speed minus ego speed
  bool present = false;

  bool operator==(const NeighborSlot&) const = default;
};

struct Observation {
  double ego_speed = 0.0;
  double ego_distance_to_stop = 0.0;
  std::array<NeighborSlot, kNeighborSlots> neighbors{};
  Phase phase = Phase::kRed;
  double time_remaining = 0.0;
  double lane_length = 0.0;
  double speed_limit = 0.0;
  double green_s = 0.0;
  double red_s = 0.0;
  int lane_count = 1;

  /// Fixed-length policy input, every entry in [-1, 1].
  std::array<double, kObservationSize> features() const;

  bool operator==(const Observation&) const = default;
};

/// Throws std::out_of_range for an id that is not on the road.
Observation build_observation(const Simulation& sim, VehicleId id);

// ---- nominal policy -------------------------------------------------------

enum class NominalBranch { kKeepSpeed, kGlide, kIdm };

struct TargetSpeed {
  NominalBranch branch = NominalBranch::kIdm;
  double speed = 0.0;  // meaningful for kKeepSpeed and kGlide only
};

/// Glide-or-keep-speed decision. `time_to_green` is 0 while green;
/// `green_window` is the green time available from that onset (the
/// remaining green when currently green). A stopped vehicle (v = 0) has an
/// infinite time to the stop line and glides when a green onset is pending.
TargetSpeed nominal_target_speed(double v, double d, double time_to_green, double green_window);

struct NominalTiming {
  double time_to_green = 0.0;
  double green_window = 0.0;
};
NominalTiming nominal_timing(const SignalSchedule& schedule, double t);

struct NominalParams {
  double k_p = 0.8;           // 1/s, target speed tracking gain
  double glide_margin = 0.0;  // s added to the time to green when gliding

  void validate() const;
};

/// Nominal acceleration in [-A, A] before the simulator's safety clip.
/// Vehicles past the stop line fall back to car following.
double nominal_accel(const Simulation& sim, const VehicleState& v, const NominalParams& p);

// ---- residual composition and reward ---------------------------------------

/// clip(nominal + residual, -A, A). Throws std::domain_error for a
/// non-finite residual.
double compose_action(double nominal, double residual, double max_accel);

struct RewardParams {
  double w1 = -7.57;
  /// Emission normalizer as a multiple of the idle floor beta0.
  double emission_scale_factor = 10.0;
};

/// v + w1 e on already-normalized inputs.
double step_reward(double v_norm, double e_norm, double w1);

/// Normalizes speed by the speed limit and emission by
/// emission_scale_factor * beta0, then applies step_reward.
double agent_step_reward(double speed, double emission_gps, double speed_limit, const EmissionParams& emission,
                         const RewardParams& reward);

// ---- reference controllers -------------------------------------------------

/// AVs drive exactly like human vehicles.
Controller make_idm_controller();

/// Every AV runs the nominal policy.
Controller make_nominal_controller(const NominalParams& params);

}  // namespace ecomrtl
