#include "ecomrtl/json_io.hpp"

#include <string>

namespace ecomrtl {

using nlohmann::json;

void to_json(json& j, const IdmParams& p) {
  j = json{{"desired_speed", p.desired_speed}, {"time_headway", p.time_headway}, {"max_accel", p.max_accel},
           {"comfort_decel", p.comfort_decel}, {"exponent", p.exponent},         {"min_gap", p.min_gap},
           {"vehicle_length", p.vehicle_length}};
}

void from_json(const json& j, IdmParams& p) {
  j.at("desired_speed").get_to(p.desired_speed);
  j.at("time_headway").get_to(p.time_headway);
  j.at("max_accel").get_to(p.max_accel);
  j.at("comfort_decel").get_to(p.comfort_decel);
  j.at("exponent").get_to(p.exponent);
  j.at("min_gap").get_to(p.min_gap);
  j.at("vehicle_length").get_to(p.vehicle_length);
}

void to_json(json& j, const EmissionParams& p) {
  j = json{{"beta0", p.beta0},
           {"beta1", p.beta1},
           {"mass", p.mass},
           {"roll_coeff", p.roll_coeff},
           {"drag_coeff", p.drag_coeff}};
}

void from_json(const json& j, EmissionParams& p) {
  j.at("beta0").get_to(p.beta0);
  j.at("beta1").get_to(p.beta1);
  j.at("mass").get_to(p.mass);
  j.at("roll_coeff").get_to(p.roll_coeff);
  j.at("drag_coeff").get_to(p.drag_coeff);
}

void to_json(json& j, const SimConfig& c) {
  j = json{{"dt", c.dt},
           {"horizon", c.horizon},
           {"max_accel", c.max_accel},
           {"max_decel", c.max_decel},
           {"exit_runout", c.exit_runout},
           {"idle_speed", c.idle_speed},
           {"idm", c.idm},
           {"emission", c.emission}};
}

void from_json(const json& j, SimConfig& c) {
  j.at("dt").get_to(c.dt);
  j.at("horizon").get_to(c.horizon);
  j.at("max_accel").get_to(c.max_accel);
  j.at("max_decel").get_to(c.max_decel);
  j.at("exit_runout").get_to(c.exit_runout);
  j.at("idle_speed").get_to(c.idle_speed);
  j.at("idm").get_to(c.idm);
  j.at("emission").get_to(c.emission);
}

void to_json(json& j, const NominalParams& p) { j = json{{"k_p", p.k_p}, {"glide_margin", p.glide_margin}}; }

void from_json(const json& j, NominalParams& p) {
  j.at("k_p").get_to(p.k_p);
  j.at("glide_margin").get_to(p.glide_margin);
}

void to_json(json& j, const RewardParams& p) {
  j = json{{"w1", p.w1}, {"emission_scale_factor", p.emission_scale_factor}};
}

void from_json(const json& j, RewardParams& p) {
  j.at("w1").get_to(p.w1);
  j.at("emission_scale_factor").get_to(p.emission_scale_factor);
}

void to_json(json& j, const EnvConfig& c) { j = json{{"sim", c.sim}, {"nominal", c.nominal}, {"reward", c.reward}}; }

void from_json(const json& j, EnvConfig& c) {
  j.at("sim").get_to(c.sim);
  j.at("nominal").get_to(c.nominal);
  j.at("reward").get_to(c.reward);
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"lr", c.lr},
           {"iterations", c.iterations},
           {"workers", c.workers},
           {"critic_pretrain_iters", c.critic_pretrain_iters},
           {"gamma", c.gamma},
           {"gae_lambda", c.gae_lambda},
           {"clip_eps", c.clip_eps},
           {"steps_per_worker_per_iter", c.steps_per_worker_per_iter},
           {"epochs_per_iter", c.epochs_per_iter},
           {"minibatch", c.minibatch},
           {"entropy_coef", c.entropy_coef},
           {"max_grad_norm", c.max_grad_norm},
           {"init_log_std", c.init_log_std},
           {"hidden", c.hidden},
           {"checkpoint_every", c.checkpoint_every},
           {"seed", c.seed},
           {"mode", to_string(c.mode)}};
}

void from_json(const json& j, TrainConfig& c) {
  j.at("lr").get_to(c.lr);
  j.at("iterations").get_to(c.iterations);
  j.at("workers").get_to(c.workers);
  j.at("critic_pretrain_iters").get_to(c.critic_pretrain_iters);
  j.at("gamma").get_to(c.gamma);
  j.at("gae_lambda").get_to(c.gae_lambda);
  j.at("clip_eps").get_to(c.clip_eps);
  j.at("steps_per_worker_per_iter").get_to(c.steps_per_worker_per_iter);
  j.at("epochs_per_iter").get_to(c.epochs_per_iter);
  j.at("minibatch").get_to(c.minibatch);
  j.at("entropy_coef").get_to(c.entropy_coef);
  j.at("max_grad_norm").get_to(c.max_grad_norm);
  j.at("init_log_std").get_to(c.init_log_std);
  j.at("hidden").get_to(c.hidden);
  j.at("checkpoint_every").get_to(c.checkpoint_every);
  j.at("seed").get_to(c.seed);
  c.mode = parse_policy_mode(j.at("mode").get<std::string>());
}

json observation_scales_json() {
  using S = ObservationScales;
  return json{{"speed", S::kSpeed},         {"distance", S::kDistance}, {"gap", S::kGap},
              {"rel_speed", S::kRelSpeed}, {"time", S::kTime},         {"lane_count", S::kLaneCount}};
}

}  // namespace ecomrtl
