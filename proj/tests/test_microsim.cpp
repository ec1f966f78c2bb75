#include <doctest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "ecomrtl/errors.hpp"
#include "ecomrtl/microsim.hpp"

using namespace ecomrtl;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Context make_context(double length, double inflow, double speed, int lanes, double green, double red, double offset,
                     double penetration, std::uint64_t seed = 1) {
  Context c;
  c.lane_length_m = length;
  c.inflow_vph = inflow;
  c.speed_limit_mps = speed;
  c.lane_count = lanes;
  c.green_s = green;
  c.red_s = red;
  c.phase_offset_s = offset;
  c.penetration = penetration;
  c.seed = seed;
  return c;
}

// Green from t = 0 for a very long time.
Context long_green(double length, double speed, int lanes = 1) {
  return make_context(length, 0.0, speed, lanes, 10000.0, 1.0, 1.0, 0.0);
}

Controller idm_like() {
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

void check_invariants(const Simulation& sim) {
  REQUIRE(sim.spawned_count() == sim.active_count() + sim.exited_count());
  const double len = sim.config().idm.vehicle_length;
  for (const auto& lane : sim.lanes()) {
    for (std::size_t i = 0; i < lane.size(); ++i) {
      REQUIRE(lane[i].speed >= 0.0);
      if (i > 0) REQUIRE(lane[i - 1].position - len - lane[i].position > 0.0);
    }
  }
}

}  // namespace

TEST_CASE("idm_accel examples") {
  const IdmParams p;
  CHECK(idm_accel(0.0, kInf, 0.0, p) == 0.73);
  CHECK(std::abs(idm_accel(15.0, kInf, 0.0, p)) < 1e-9);
  // s* = 2 + 10 * 1.6 = 18; bracket = 1 - (10/15)^4 - (18/12)^2.
  const double oracle = 0.73 * (1.0 - 16.0 / 81.0 - 2.25);
  const double a = idm_accel(10.0, 12.0, 10.0, p);
  CHECK(a == doctest::Approx(oracle).epsilon(1e-12));
  CHECK(a == doctest::Approx(-1.0566975308641976).epsilon(1e-12));
  CHECK(a < 0.0);
  CHECK_THROWS_AS(idm_accel(5.0, 0.0, 5.0, p), ContractViolation);
  CHECK_THROWS_AS(idm_accel(5.0, -1.0, 5.0, p), ContractViolation);
}

TEST_CASE("red light acts as a stopped leader") {
  VehicleState ego;
  ego.position = 90.0;
  const SignalSchedule schedule{25.0, 25.0, 0.0};
  const auto red = red_light_virtual_leader(ego, SignalState::at(schedule, 1.0), 100.0);
  REQUIRE(red.has_value());
  CHECK(red->gap == 10.0);
  CHECK(red->speed == 0.0);
  CHECK_FALSE(red_light_virtual_leader(ego, SignalState::at(schedule, 30.0), 100.0).has_value());
}

TEST_CASE("safety_clip examples") {
  const SimConfig cfg;
  VehicleState ego;
  ego.speed = 5.0;
  CHECK(safety_clip(2.0, ego, std::nullopt, cfg) == 2.0);
  CHECK(safety_clip(5.0, ego, std::nullopt, cfg) == 3.0);
  CHECK(safety_clip(-9.0, ego, std::nullopt, cfg) == -4.5);

  // Stopped leader exactly s0 ahead: no room at all, so the only safe next
  // speed is 0, i.e. a_safe = -v / dt, then floored at -max_decel.
  ego.speed = 10.0;
  CHECK(safety_clip(1.0, ego, LeaderInfo{2.0, 0.0}, cfg) == -4.5);
  ego.speed = 0.2;
  CHECK(safety_clip(1.0, ego, LeaderInfo{2.0, 0.0}, cfg) == doctest::Approx(-2.0).epsilon(1e-12));
  ego.speed = 0.0;
  CHECK(safety_clip(1.0, ego, LeaderInfo{2.0, 0.0}, cfg) <= 0.0);

  // Braking never drives the speed negative.
  ego.speed = 0.1;
  CHECK(safety_clip(-4.0, ego, std::nullopt, cfg) == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("safe bound keeps the gap under a worst-case leader brake") {
  // Oracle: roll both vehicles forward step by step under the simulator's
  // integration, leader braking at max_decel from now and ego braking from
  // the next step, and track the smallest gap.
  const SimConfig cfg;
  Rng rng(5);
  for (int trial = 0; trial < 2000; ++trial) {
    double v = rng.uniform(0.0, 16.0);
    double vl = rng.uniform(0.0, 16.0);
    const double gap0 = rng.uniform(2.0, 60.0);
    const double margin = rng.bernoulli(0.5) ? 2.0 : 0.0;
    const double a = clip_to_bounds(3.0, v, safe_accel_bound(v, {gap0, vl}, margin, cfg), cfg);
    double gap = gap0;
    double min_gap = gap;
    bool first = true;
    for (int k = 0; k < 400; ++k) {
      const double ego_a = first ? a : -cfg.max_decel;
      first = false;
      vl = std::max(0.0, vl - cfg.max_decel * cfg.dt);
      v = std::max(0.0, v + ego_a * cfg.dt);
      gap += (vl - v) * cfg.dt;
      min_gap = std::min(min_gap, gap);
    }
    // When even full braking cannot hold the margin the bound falls back to
    // maximal braking; otherwise the margin is respected.
    if (a > -cfg.max_decel) CHECK(min_gap >= margin - 1e-9);
  }
}

TEST_CASE("red light bound: short of the line on every red tick") {
  // Oracle: apply the bound for one step, then brake at max_decel and check
  // the position on each remaining red tick.
  const SimConfig cfg;
  Rng rng(12);
  for (int trial = 0; trial < 3000; ++trial) {
    double v = rng.uniform(0.0, 16.0);
    const double d = rng.uniform(0.5, 80.0);
    const int red_steps = static_cast<int>(rng.uniform_int(1, 300));
    if (!can_stop_before(v, d, cfg)) continue;
    const double a = clip_to_bounds(3.0, v, red_light_bound(v, d, red_steps, cfg), cfg);
    double x = 0.0;
    for (int k = 1; k <= red_steps; ++k) {
      v = std::max(0.0, v + (k == 1 ? a : -cfg.max_decel) * cfg.dt);
      x += v * cfg.dt;
      REQUIRE(x <= d + 1e-9);
    }
  }
}

TEST_CASE("red light bound: long red is the stop-line bound, no red is no bound") {
  const SimConfig cfg;
  for (const double v : {0.0, 3.0, 9.0, 14.0}) {
    for (const double d : {5.0, 20.0, 60.0}) {
      CHECK(red_light_bound(v, d, 10000, cfg) == safe_accel_bound(v, {d, 0.0}, 0.0, cfg));
      CHECK(red_light_bound(v, d, 0, cfg) == kInf);
    }
  }
  // One red tick left: only the next position matters.
  CHECK(red_light_bound(5.0, 2.0, 1, cfg) == doctest::Approx((2.0 / cfg.dt - 5.0) / cfg.dt));
}

TEST_CASE("AV arriving as the light turns green is not braked") {
  // 7 m/s, 70 m out, green in 10 s: arrival exactly at green onset.
  SimConfig cfg;
  cfg.horizon = 30.0;
  Simulation sim(make_context(70, 0, 15, 1, 30, 30, 20, 1.0), cfg, 0, false);
  const VehicleId id = sim.insert_vehicle(0, VehicleClass::kAv, 0.0, 7.0);
  while (!sim.done() && !sim.find(id)->crossed()) {
    sim.step({{id, 0.0}});
    CHECK(sim.find(id)->speed == 7.0);
  }
  REQUIRE(sim.find(id)->crossed());
  CHECK(*sim.find(id)->crossed_time >= 10.0 - 1e-9);
}

TEST_CASE("AV at full throttle never crosses on red") {
  SimConfig cfg;
  cfg.horizon = 60.0;
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const double red = rng.uniform(5.0, 40.0);
    Simulation sim(make_context(rng.uniform(80, 300), 0, 15, 1, 30, red, 0, 1.0), cfg, 0, false);
    const VehicleId id = sim.insert_vehicle(0, VehicleClass::kAv, 0.0, rng.uniform(0.0, 15.0));
    while (!sim.done() && sim.find(id) != nullptr) {
      sim.step({{id, cfg.max_accel}});
      const VehicleState* v = sim.find(id);
      if (v != nullptr && v->crossed() && *v->crossed_time == sim.clock()) {
        CHECK(sim.signal().phase == Phase::kGreen);
      }
    }
  }
}

TEST_CASE("discrete braking distance matches a step-by-step roll-out") {
  Rng rng(8);
  for (int i = 0; i < 200; ++i) {
    double v = rng.uniform(0.0, 20.0);
    const double expected = discrete_braking_distance(v, 4.5, 0.1);
    double x = 0.0;
    while (v > 0.0) {
      v = std::max(0.0, v - 0.45);
      x += v * 0.1;
    }
    CHECK(expected == doctest::Approx(x).epsilon(1e-9));
  }
}

TEST_CASE("arrival probability") {
  const SimConfig cfg;
  CHECK(arrival_probability(make_context(100, 900, 15, 1, 25, 25, 0, 0.2), cfg) ==
        doctest::Approx(0.025).epsilon(1e-15));
  CHECK(arrival_probability(make_context(100, 900, 15, 3, 25, 25, 0, 0.2), cfg) ==
        doctest::Approx(0.025 / 3).epsilon(1e-15));

  // Empirical rate on an unobstructed long lane.
  SimConfig long_cfg;
  long_cfg.horizon = 2000.0;
  Simulation sim(make_context(20000, 900, 15, 1, 10000, 1, 1, 0.0, 3), long_cfg, 0);
  while (!sim.done()) sim.step({});
  CHECK(std::abs(static_cast<double>(sim.spawned_count()) - 500.0) < 100.0);
}

TEST_CASE("penetration selects vehicle classes") {
  SimConfig cfg;
  cfg.horizon = 300.0;
  for (const double penetration : {0.0, 1.0}) {
    const EpisodeResult r =
        run_episode(make_context(200, 900, 12, 2, 27, 27, 3, penetration, 11), cfg, idm_like(), 4, true);
    REQUIRE(r.metrics.vehicles_spawned > 10);
    const VehicleClass expected = penetration == 1.0 ? VehicleClass::kAv : VehicleClass::kHuman;
    for (const auto& row : r.trace) CHECK(row.cls == expected);
  }
}

TEST_CASE("blocked entry defers the arrival") {
  SimConfig cfg;
  // p = 1: an arrival every step.
  Simulation sim(make_context(300, 36000, 15, 1, 10000, 1, 1, 0.0), cfg, 0);
  sim.insert_vehicle(0, VehicleClass::kHuman, 3.0, 0.0);
  sim.step({});
  CHECK(sim.spawned_count() == 1);
  while (sim.spawned_count() == 1) {
    CHECK(sim.lanes()[0].back().position < 7.0);
    sim.step({});
  }
  const auto& lane = sim.lanes()[0];
  REQUIRE(lane.size() == 2);
  CHECK(lane[0].position >= 7.0);
  CHECK(lane[1].position == 0.0);
  CHECK(lane[1].speed < 15.0);
  check_invariants(sim);
}

TEST_CASE("Euler step for an AV holding speed") {
  Simulation sim(long_green(300, 15), SimConfig{}, 0, false);
  const VehicleId id = sim.insert_vehicle(0, VehicleClass::kAv, 10.0, 5.0);
  sim.step({{id, 0.0}});
  const VehicleState* v = sim.find(id);
  REQUIRE(v != nullptr);
  CHECK(v->speed == 5.0);
  CHECK(v->position == doctest::Approx(10.5).epsilon(1e-14));
}

TEST_CASE("free-flow human step follows the IDM") {
  Simulation sim(long_green(300, 15), SimConfig{}, 0, false);
  const VehicleId id = sim.insert_vehicle(0, VehicleClass::kHuman, 10.0, 5.0);
  sim.step({});
  const double a = 0.73 * (1.0 - std::pow(5.0 / 15.0, 4.0));
  CHECK(sim.find(id)->accel == doctest::Approx(a).epsilon(1e-14));
  CHECK(sim.find(id)->speed == doctest::Approx(5.0 + 0.1 * a).epsilon(1e-14));
}

TEST_CASE("action map must cover exactly the active AVs") {
  Simulation sim(long_green(300, 15), SimConfig{}, 0, false);
  const VehicleId av = sim.insert_vehicle(0, VehicleClass::kAv, 50.0, 5.0);
  const VehicleId human = sim.insert_vehicle(0, VehicleClass::kHuman, 10.0, 5.0);
  CHECK_THROWS_AS(sim.step({}), ContractViolation);
  CHECK_THROWS_AS(sim.step({{av, 0.0}, {human, 0.0}}), ContractViolation);
  CHECK_THROWS_AS(sim.step({{av, 0.0}, {999, 0.0}}), ContractViolation);
  CHECK_THROWS_AS(sim.step({{av, std::nan("")}}), ContractViolation);
  CHECK_NOTHROW(sim.step({{av, 0.0}}));
}

TEST_CASE("signal periodicity") {
  Rng rng(21);
  for (int i = 0; i < 500; ++i) {
    const SignalSchedule s{rng.uniform(25, 30), rng.uniform(25, 30), 0.0};
    const double offset = rng.uniform(0.0, s.cycle());
    const SignalSchedule shifted{s.green_s, s.red_s, offset};
    const double t = 0.1 * static_cast<double>(rng.uniform_int(0, 5000));
    CHECK(shifted.phase_at(t) == shifted.phase_at(t + shifted.cycle()));
    CHECK(shifted.time_remaining(t) > 0.0);
    CHECK(shifted.time_remaining(t) <= std::max(s.green_s, s.red_s));
  }
  const SignalSchedule s{25.0, 30.0, 0.0};
  CHECK(s.phase_at(0.0) == Phase::kRed);
  CHECK(s.phase_at(29.9) == Phase::kRed);
  CHECK(s.phase_at(30.0) == Phase::kGreen);
  CHECK(s.time_to_green(10.0) == 20.0);
  CHECK(s.time_to_green(40.0) == 0.0);
}

TEST_CASE("red light: lead human stops before the line") {
  SimConfig cfg;
  cfg.horizon = 60.0;
  // Red for the whole run.
  Simulation sim(make_context(200, 0, 15, 1, 25, 1000, 0, 0.0), cfg, 0, false);
  const VehicleId lead = sim.insert_vehicle(0, VehicleClass::kHuman, 20.0, 15.0);
  sim.insert_vehicle(0, VehicleClass::kHuman, 0.0, 15.0);
  while (!sim.done()) {
    sim.step({});
    check_invariants(sim);
    CHECK(sim.find(lead)->position <= 200.0);
  }
  CHECK(sim.find(lead)->speed < 0.01);
  CHECK(sim.find(lead)->position > 190.0);
}

TEST_CASE("invariant fuzz with random AV actions") {
  Rng rng(99);
  const ContextSpace space;
  std::int64_t steps = 0;
  for (int episode = 0; episode < 20; ++episode) {
    Context c = sample_context(space, rng);
    c.penetration = rng.bernoulli(0.5) ? 1.0 : 0.2;
    SimConfig cfg;
    Simulation sim(c, cfg, rng.next_u64());
    std::vector<double> last_position;
    while (!sim.done()) {
      ActionMap actions;
      for (const VehicleId id : sim.active_avs()) actions.emplace(id, rng.uniform(-cfg.max_accel, cfg.max_accel));
      std::unordered_map<VehicleId, double> before;
      for (const auto& lane : sim.lanes()) {
        for (const auto& v : lane) before.emplace(v.id, v.position);
      }
      sim.step(actions);
      ++steps;
      check_invariants(sim);
      for (const auto& lane : sim.lanes()) {
        for (const auto& v : lane) {
          const auto it = before.find(v.id);
          if (it != before.end()) REQUIRE(v.position >= it->second);
        }
      }
    }
  }
  CHECK(steps == 20 * 1200);
}

TEST_CASE("IDM equilibrium platoon") {
  // Followers placed at the IDM equilibrium gap for v_e behind a leader
  // cruising at v_e stay in equilibrium.
  const double ve = 10.0;
  const double v0 = 15.0;
  const IdmParams p;
  const double s_eq = (p.min_gap + ve * p.time_headway) / std::sqrt(1.0 - std::pow(ve / v0, 4.0));
  Simulation sim(long_green(5000, v0), SimConfig{}, 0, false);
  const VehicleId head = sim.insert_vehicle(0, VehicleClass::kAv, 1000.0, ve);
  for (int k = 1; k <= 5; ++k) {
    sim.insert_vehicle(0, VehicleClass::kHuman, 1000.0 - k * (s_eq + p.vehicle_length), ve);
  }
  for (int i = 0; i < 600; ++i) {
    sim.step({{head, 0.0}});
    for (const auto& v : sim.lanes()[0]) CHECK(std::abs(v.accel) < 1e-6);
  }
}

TEST_CASE("episodes are deterministic") {
  const Context c = make_context(250, 800, 13, 2, 27, 28, 12, 0.2, 77);
  const EpisodeResult a = run_episode(c, SimConfig{}, idm_like(), 5, true);
  const EpisodeResult b = run_episode(c, SimConfig{}, idm_like(), 5, true);
  CHECK(a.metrics == b.metrics);
  CHECK(a.trace == b.trace);
  const EpisodeResult other = run_episode(c, SimConfig{}, idm_like(), 6, true);
  CHECK_FALSE(other.trace == a.trace);
}

TEST_CASE("zero horizon gives empty metrics") {
  SimConfig cfg;
  cfg.horizon = 0.0;
  const EpisodeResult r = run_episode(make_context(250, 800, 13, 2, 27, 28, 12, 0.2), cfg, idm_like(), 1, true);
  CHECK(r.metrics == Metrics{});
  CHECK(r.trace.empty());
}

TEST_CASE("IDM-driven AVs are indistinguishable from human vehicles") {
  Rng rng(4);
  for (int i = 0; i < 5; ++i) {
    Context c = sample_context(ContextSpace{}, rng);
    c.penetration = 1.0;
    Context human = c;
    human.penetration = 0.0;
    const EpisodeResult av = run_episode(c, SimConfig{}, idm_like(), 9, true);
    const EpisodeResult hv = run_episode(human, SimConfig{}, idm_like(), 9, true);
    CHECK(av.metrics == hv.metrics);
    REQUIRE(av.trace.size() == hv.trace.size());
    for (std::size_t k = 0; k < av.trace.size(); ++k) {
      TraceRow row = av.trace[k];
      row.cls = VehicleClass::kHuman;
      REQUIRE(row == hv.trace[k]);
    }
  }
}

TEST_CASE("trace export") {
  std::ostringstream out;
  const std::vector<TraceRow> rows{{0.5, 3, VehicleClass::kAv, 1, 12.25, 4.0, -0.5, 0.12}};
  write_trace_csv(out, rows);
  CHECK(out.str() == "t,vehicle_id,class,lane,position,speed,accel,emission_gps\n0.5,3,AV,1,12.25,4,-0.5,0.12\n");
}
