#include "ecomrtl/learner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

#include "ecomrtl/errors.hpp"
#include "ecomrtl/json_io.hpp"
#include "ecomrtl/parallel.hpp"
#include "ecomrtl/text_format.hpp"

namespace ecomrtl {
namespace {

using Feature = std::array<double, kObservationSize>;

// Seed streams split off TrainConfig::seed.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kPretrainStream = 2;
constexpr std::uint64_t kTrainStream = 3;
constexpr std::uint64_t kUpdateStream = 4;
constexpr std::uint64_t kScheduleStream = 5;

constexpr int kCheckpointVersion = 1;
constexpr const char* kCheckpointFormat = "eco-mrtl-checkpoint";

void require_finite(double x, const std::string& what) {
  if (!std::isfinite(x)) throw TrainingError("non-finite " + what);
}

double explained_variance(const Eigen::VectorXd& targets, const Eigen::VectorXd& predictions) {
  if (targets.size() < 2) return 0.0;
  const double var = (targets.array() - targets.mean()).square().mean();
  if (var <= 0.0) return 0.0;
  const Eigen::ArrayXd resid = targets.array() - predictions.array();
  return 1.0 - (resid - resid.mean()).square().mean() / var;
}

double base_action(const PolicyParams& p, const Simulation& sim, const VehicleState& v, const NominalParams& nominal) {
  return p.mode == PolicyMode::kResidual ? nominal_accel(sim, v, nominal) : 0.0;
}

std::vector<Trajectory> run_worker(const PolicyParams& params, const Context& context, std::size_t context_id,
                                   const EnvConfig& env, int step_budget, std::uint64_t seed, bool apply_residual) {
  Rng rng(derive_seed(seed, 0));
  const double sigma = std::exp(params.log_std());
  const double limit = env.sim.max_accel;
  std::vector<Trajectory> done;
  std::map<VehicleId, Trajectory> open;
  std::vector<TraceRow> rows;
  int used = 0;
  std::uint64_t episode = 0;

  while (used < step_budget) {
    Simulation sim(context, env.sim, derive_seed(seed, ++episode));
    if (sim.done()) break;
    while (!sim.done() && used < step_budget) {
      const std::vector<VehicleId> ids = sim.active_avs();
      ActionMap actions;
      if (!ids.empty()) {
        std::vector<Feature> features;
        features.reserve(ids.size());
        for (const VehicleId id : ids) features.push_back(build_observation(sim, id).features());
        const Eigen::MatrixXd x = observation_matrix(features);
        const ActorOutput out = forward_actor(params, x);
        const Eigen::VectorXd values = forward_critic(params, x);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          const auto kk = static_cast<Eigen::Index>(k);
          const double base = base_action(params, sim, *sim.find(ids[k]), env.nominal);
          const double residual = out.mean[kk] + sigma * rng.normal();
          Trajectory& tr = open[ids[k]];
          tr.context_id = context_id;
          tr.observations.push_back(features[k]);
          tr.actions.push_back(residual);
          tr.log_probs.push_back(gaussian_log_prob(residual, out.mean[kk], out.log_std));
          tr.values.push_back(values[kk]);
          actions.emplace(ids[k], apply_residual ? compose_action(base, residual, limit) : base);
        }
      }
      rows.clear();
      sim.step(actions, &rows);
      ++used;
      for (const TraceRow& row : rows) {
        const auto it = open.find(row.vehicle_id);
        if (it == open.end()) continue;
        it->second.rewards.push_back(agent_step_reward(row.speed, row.emission_gps, context.speed_limit_mps,
                                                       env.sim.emission, env.reward));
      }
      for (auto it = open.begin(); it != open.end();) {
        if (sim.find(it->first) == nullptr) {
          it->second.terminal = true;
          done.push_back(std::move(it->second));
          it = open.erase(it);
        } else {
          ++it;
        }
      }
    }
    // Horizon or budget cut: bootstrap from the critic.
    if (!open.empty()) {
      std::vector<Feature> features;
      for (const auto& [id, tr] : open) features.push_back(build_observation(sim, id).features());
      const Eigen::VectorXd values = forward_critic(params, observation_matrix(features));
      Eigen::Index k = 0;
      for (auto& [id, tr] : open) {
        tr.terminal = false;
        tr.bootstrap_value = values[k++];
        done.push_back(std::move(tr));
      }
      open.clear();
    }
  }
  return done;
}

double mean_return(const std::vector<Trajectory>& trajs) {
  if (trajs.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& t : trajs) sum += t.undiscounted_return();
  return sum / static_cast<double>(trajs.size());
}

void dump_batch(const Batch& batch, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) return;
  out << "index,action,old_log_prob,advantage,return,old_value";
  for (Eigen::Index r = 0; r < batch.observations.rows(); ++r) out << ",f" << r;
  out << '\n';
  for (Eigen::Index i = 0; i < batch.size(); ++i) {
    out << i << ',' << text::format_double(batch.actions[i]) << ',' << text::format_double(batch.old_log_probs[i])
        << ',' << text::format_double(batch.advantages[i]) << ',' << text::format_double(batch.returns[i]) << ','
        << text::format_double(batch.old_values[i]);
    for (Eigen::Index r = 0; r < batch.observations.rows(); ++r) {
      out << ',' << text::format_double(batch.observations(r, i));
    }
    out << '\n';
  }
}

nlohmann::json mlp_json(const Mlp& net, const Eigen::VectorXd& params) {
  return nlohmann::json{{"inputs", net.inputs()},
                        {"hidden", net.hidden()},
                        {"outputs", net.outputs()},
                        {"params", std::vector<double>(params.data(), params.data() + params.size())}};
}

Eigen::VectorXd json_vector(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

const char* to_string(PolicyMode m) { return m == PolicyMode::kResidual ? "mrtl" : "multitask"; }

PolicyMode parse_policy_mode(const std::string& s) {
  if (s == "mrtl") return PolicyMode::kResidual;
  if (s == "multitask") return PolicyMode::kStandalone;
  throw std::invalid_argument("unknown policy mode '" + s + "' (expected mrtl or multitask)");
}

void EnvConfig::validate() const {
  sim.validate();
  nominal.validate();
  if (!(reward.emission_scale_factor > 0.0)) throw std::invalid_argument("reward: emission_scale_factor must be > 0");
  if (!std::isfinite(reward.w1)) throw std::invalid_argument("reward: w1 must be finite");
}

TrainConfig TrainConfig::paper() { return TrainConfig{}; }

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.iterations = 50;
  return c;
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("train: lr must be > 0");
  if (iterations < 0) throw std::invalid_argument("train: iterations must be >= 0");
  if (workers < 1) throw std::invalid_argument("train: workers must be >= 1");
  if (critic_pretrain_iters < 0) throw std::invalid_argument("train: critic_pretrain_iters must be >= 0");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("train: gamma must be in (0, 1]");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw std::invalid_argument("train: gae_lambda must be in [0, 1]");
  if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw std::invalid_argument("train: clip_eps must be in (0, 1)");
  if (steps_per_worker_per_iter < 1) throw std::invalid_argument("train: steps_per_worker_per_iter must be >= 1");
  if (epochs_per_iter < 1) throw std::invalid_argument("train: epochs_per_iter must be >= 1");
  if (minibatch < 1) throw std::invalid_argument("train: minibatch must be >= 1");
  if (!(entropy_coef >= 0.0)) throw std::invalid_argument("train: entropy_coef must be >= 0");
  if (!(max_grad_norm > 0.0)) throw std::invalid_argument("train: max_grad_norm must be > 0");
  if (!std::isfinite(init_log_std)) throw std::invalid_argument("train: init_log_std must be finite");
  if (hidden.empty()) throw std::invalid_argument("train: at least one hidden layer");
  for (const int h : hidden) {
    if (h < 1) throw std::invalid_argument("train: hidden sizes must be >= 1");
  }
  if (checkpoint_every < 0) throw std::invalid_argument("train: checkpoint_every must be >= 0");
  if (threads < 0) throw std::invalid_argument("train: threads must be >= 0");
}

PolicyParams PolicyParams::initialize(const std::vector<int>& hidden, double init_log_std, double max_accel,
                                      PolicyMode mode, Rng& rng) {
  PolicyParams p;
  p.actor_net = Mlp(static_cast<int>(kObservationSize), hidden, 1);
  p.critic_net = Mlp(static_cast<int>(kObservationSize), hidden, 1);
  const Eigen::VectorXd actor = p.actor_net.init(rng, true);
  p.actor.resize(actor.size() + 1);
  p.actor << actor, init_log_std;
  p.critic = p.critic_net.init(rng, false);
  p.mode = mode;
  p.max_accel = max_accel;
  return p;
}

Eigen::MatrixXd observation_matrix(const std::vector<Feature>& features) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(kObservationSize), static_cast<Eigen::Index>(features.size()));
  for (std::size_t c = 0; c < features.size(); ++c) {
    for (std::size_t r = 0; r < kObservationSize; ++r) {
      x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = features[c][r];
    }
  }
  return x;
}

ActorOutput forward_actor(const PolicyParams& params, const Eigen::MatrixXd& obs) {
  const Eigen::MatrixXd z = params.actor_net.forward(params.actor_weights(), obs);
  ActorOutput out;
  out.mean = params.max_accel * z.row(0).transpose().array().tanh();
  out.log_std = params.log_std();
  if (!out.mean.allFinite() || !std::isfinite(out.log_std)) {
    throw TrainingError("forward_actor: non-finite output (log_std " + text::format_double(out.log_std) + ")");
  }
  return out;
}

Eigen::VectorXd forward_critic(const PolicyParams& params, const Eigen::MatrixXd& obs) {
  Eigen::VectorXd v = params.critic_net.forward(params.critic, obs).row(0).transpose();
  if (!v.allFinite()) throw TrainingError("forward_critic: non-finite value");
  return v;
}

double gaussian_log_prob(double x, double mean, double log_std) {
  const double z = (x - mean) * std::exp(-log_std);
  return -0.5 * z * z - log_std - 0.5 * std::log(2.0 * std::numbers::pi);
}

double Trajectory::undiscounted_return() const { return std::accumulate(rewards.begin(), rewards.end(), 0.0); }

GaeResult compute_gae(const std::vector<double>& rewards, const std::vector<double>& values, double bootstrap_value,
                      bool terminal, double gamma, double lambda) {
  if (rewards.size() != values.size()) throw std::invalid_argument("compute_gae: rewards and values differ in length");
  const std::size_t n = rewards.size();
  GaeResult r;
  r.advantages.resize(n);
  r.returns.resize(n);
  double gae = 0.0;
  for (std::size_t t = n; t-- > 0;) {
    const double next = t + 1 < n ? values[t + 1] : (terminal ? 0.0 : bootstrap_value);
    const double delta = rewards[t] + gamma * next - values[t];
    gae = delta + gamma * lambda * gae;
    r.advantages[t] = gae;
    r.returns[t] = gae + values[t];
  }
  return r;
}

void normalize_advantages(Eigen::Ref<Eigen::VectorXd> a) {
  if (a.size() == 0) return;
  const double mean = a.mean();
  a.array() -= mean;
  const double sd = std::sqrt(a.squaredNorm() / static_cast<double>(a.size()));
  if (sd > 0.0) a /= sd;
}

Batch make_batch(const std::vector<Trajectory>& trajectories, double gamma, double lambda) {
  Eigen::Index n = 0;
  for (const auto& t : trajectories) n += static_cast<Eigen::Index>(t.size());
  Batch b;
  b.observations.resize(static_cast<Eigen::Index>(kObservationSize), n);
  b.actions.resize(n);
  b.old_log_probs.resize(n);
  b.advantages.resize(n);
  b.returns.resize(n);
  b.old_values.resize(n);
  Eigen::Index i = 0;
  for (const auto& t : trajectories) {
    if (t.observations.size() != t.size() || t.actions.size() != t.size() || t.log_probs.size() != t.size() ||
        t.values.size() != t.size()) {
      throw std::invalid_argument("make_batch: ragged trajectory");
    }
    const GaeResult g = compute_gae(t.rewards, t.values, t.bootstrap_value, t.terminal, gamma, lambda);
    for (std::size_t k = 0; k < t.size(); ++k, ++i) {
      for (std::size_t r = 0; r < kObservationSize; ++r) {
        b.observations(static_cast<Eigen::Index>(r), i) = t.observations[k][r];
      }
      b.actions[i] = t.actions[k];
      b.old_log_probs[i] = t.log_probs[k];
      b.advantages[i] = g.advantages[k];
      b.returns[i] = g.returns[k];
      b.old_values[i] = t.values[k];
    }
  }
  normalize_advantages(b.advantages);
  return b;
}

LossGrad actor_loss(const PolicyParams& params, const Eigen::MatrixXd& obs, const Eigen::VectorXd& actions,
                    const Eigen::VectorXd& old_log_probs, const Eigen::VectorXd& advantages, double clip_eps,
                    double entropy_coef) {
  const Eigen::Index m = obs.cols();
  if (m == 0) throw std::invalid_argument("actor_loss: empty batch");
  Mlp::Cache cache;
  const Eigen::MatrixXd z = params.actor_net.forward(params.actor_weights(), obs, &cache);
  const double log_std = params.log_std();
  const double inv_var = std::exp(-2.0 * log_std);
  const double a_max = params.max_accel;
  const double inv_m = 1.0 / static_cast<double>(m);

  LossGrad out;
  out.grad = Eigen::VectorXd::Zero(params.actor.size());
  Eigen::MatrixXd dz(1, m);
  double d_log_std = 0.0;
  double surrogate = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const double t = std::tanh(z(0, i));
    const double mean = a_max * t;
    const double diff = actions[i] - mean;
    const double log_prob = gaussian_log_prob(actions[i], mean, log_std);
    const double ratio = std::exp(log_prob - old_log_probs[i]);
    const double adv = advantages[i];
    const double unclipped = ratio * adv;
    const double clipped = std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv;
    surrogate += std::min(unclipped, clipped);
    // The clipped term is constant in the parameters, so only samples where
    // the unclipped term is the minimum carry gradient.
    const double d_log_prob = unclipped <= clipped ? -adv * ratio * inv_m : 0.0;
    dz(0, i) = d_log_prob * diff * inv_var * a_max * (1.0 - t * t);
    d_log_std += d_log_prob * (diff * diff * inv_var - 1.0);
    out.kl += (ratio - 1.0) - std::log(ratio);
    if (std::abs(ratio - 1.0) > clip_eps) out.clip_fraction += 1.0;
  }
  out.entropy = log_std + 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e);
  out.loss = -surrogate * inv_m - entropy_coef * out.entropy;
  out.kl *= inv_m;
  out.clip_fraction *= inv_m;
  const Eigen::Index n = params.actor.size() - 1;
  params.actor_net.backward(params.actor_weights(), cache, dz, out.grad.head(n));
  out.grad[n] = d_log_std - entropy_coef;
  return out;
}

LossGrad critic_loss(const PolicyParams& params, const Eigen::MatrixXd& obs, const Eigen::VectorXd& returns) {
  const Eigen::Index m = obs.cols();
  if (m == 0) throw std::invalid_argument("critic_loss: empty batch");
  Mlp::Cache cache;
  const Eigen::MatrixXd v = params.critic_net.forward(params.critic, obs, &cache);
  const Eigen::RowVectorXd diff = v.row(0) - returns.transpose();
  LossGrad out;
  out.loss = diff.squaredNorm() / static_cast<double>(m);
  out.grad = Eigen::VectorXd::Zero(params.critic.size());
  const Eigen::MatrixXd dv = (2.0 / static_cast<double>(m)) * diff;
  params.critic_net.backward(params.critic, cache, dv, out.grad);
  return out;
}

PpoOptimizer::PpoOptimizer(const PolicyParams& params, double lr)
    : actor(params.actor.size(), lr), critic(params.critic.size(), lr) {}

UpdateStats ppo_update(PolicyParams& params, PpoOptimizer& opt, const Batch& batch, const TrainConfig& cfg, Rng& rng,
                       bool update_actor) {
  UpdateStats stats;
  const Eigen::Index n = batch.size();
  if (n == 0) return stats;
  stats.explained_variance = explained_variance(batch.returns, batch.old_values);

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  int count = 0;
  for (int epoch = 0; epoch < cfg.epochs_per_iter; ++epoch) {
    rng.shuffle(std::span<Eigen::Index>(order));
    for (Eigen::Index start = 0; start < n; start += cfg.minibatch) {
      const Eigen::Index end = std::min(n, start + cfg.minibatch);
      const std::vector<Eigen::Index> cols(order.begin() + start, order.begin() + end);
      const Eigen::MatrixXd obs = batch.observations(Eigen::all, cols);

      LossGrad v = critic_loss(params, obs, batch.returns(cols));
      require_finite(v.loss, "value loss");
      clip_grad_norm(v.grad, cfg.max_grad_norm);
      opt.critic.step(params.critic, v.grad);
      stats.value_loss += v.loss;

      if (update_actor) {
        LossGrad p = actor_loss(params, obs, batch.actions(cols), batch.old_log_probs(cols), batch.advantages(cols),
                                cfg.clip_eps, cfg.entropy_coef);
        require_finite(p.loss, "policy loss");
        clip_grad_norm(p.grad, cfg.max_grad_norm);
        opt.actor.step(params.actor, p.grad);
        stats.policy_loss += p.loss;
        stats.entropy += p.entropy;
        stats.kl += p.kl;
        stats.clip_fraction += p.clip_fraction;
      }
      ++count;
    }
  }
  const double c = static_cast<double>(count);
  stats.value_loss /= c;
  stats.policy_loss /= c;
  stats.entropy /= c;
  stats.kl /= c;
  stats.clip_fraction /= c;
  if (!params.actor.allFinite() || !params.critic.allFinite()) throw TrainingError("ppo_update: non-finite parameters");
  return stats;
}

std::vector<std::size_t> context_schedule(std::size_t corpus_size, int workers, int iteration, std::uint64_t seed) {
  if (corpus_size == 0) throw std::invalid_argument("context_schedule: empty corpus");
  std::vector<std::size_t> perm(corpus_size);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(seed, kScheduleStream));
  rng.shuffle(std::span<std::size_t>(perm));
  std::vector<std::size_t> out;
  for (int w = 0; w < workers; ++w) {
    const auto pos = (static_cast<std::uint64_t>(iteration) * static_cast<std::uint64_t>(workers) +
                      static_cast<std::uint64_t>(w)) % corpus_size;
    out.push_back(perm[pos]);
  }
  return out;
}

std::vector<Trajectory> collect_rollouts(const PolicyParams& params, const Corpus& corpus, const EnvConfig& env,
                                         const TrainConfig& cfg, int iteration, std::uint64_t stream,
                                         bool apply_residual) {
  if (corpus.empty()) throw std::invalid_argument("collect_rollouts: empty corpus");
  const std::vector<std::size_t> schedule = context_schedule(corpus.size(), cfg.workers, iteration, cfg.seed);
  const std::uint64_t iteration_seed =
      derive_seed(derive_seed(cfg.seed, stream), static_cast<std::uint64_t>(iteration));
  std::vector<std::vector<Trajectory>> per_worker(static_cast<std::size_t>(cfg.workers));
  parallel_for(cfg.workers, resolve_thread_count(cfg.threads), [&](int w) {
    const auto wi = static_cast<std::size_t>(w);
    per_worker[wi] = run_worker(params, corpus[schedule[wi]], schedule[wi], env, cfg.steps_per_worker_per_iter,
                                derive_seed(iteration_seed, wi), apply_residual);
  });
  std::vector<Trajectory> all;
  for (auto& v : per_worker) {
    for (auto& t : v) all.push_back(std::move(t));
  }
  return all;
}

namespace {

void log_contexts(const std::vector<Trajectory>& trajs, int iteration, std::vector<ContextLogRow>* out) {
  if (out == nullptr) return;
  std::map<std::size_t, std::pair<double, std::int64_t>> acc;
  for (const auto& t : trajs) {
    auto& [sum, count] = acc[t.context_id];
    sum += t.undiscounted_return();
    ++count;
  }
  for (const auto& [id, sc] : acc) out->push_back({iteration, id, sc.first / static_cast<double>(sc.second), sc.second});
}

TrainLogRow make_row(const char* phase, int iteration, const std::vector<Trajectory>& trajs, const Batch& batch,
                     const UpdateStats& stats, double value_loss_before) {
  TrainLogRow row;
  row.phase = phase;
  row.iteration = iteration;
  row.mean_return = mean_return(trajs);
  row.policy_loss = stats.policy_loss;
  row.value_loss = stats.value_loss;
  row.value_loss_before = value_loss_before;
  row.entropy = stats.entropy;
  row.kl = stats.kl;
  row.clip_fraction = stats.clip_fraction;
  row.explained_variance = stats.explained_variance;
  row.samples = batch.size();
  row.agents = static_cast<std::int64_t>(trajs.size());
  return row;
}

double batch_value_loss(const Batch& batch) {
  if (batch.size() == 0) return 0.0;
  return (batch.old_values - batch.returns).squaredNorm() / static_cast<double>(batch.size());
}

}  // namespace

void pretrain_critic(PolicyParams& params, PpoOptimizer& opt, const Corpus& corpus, const EnvConfig& env,
                     const TrainConfig& cfg, std::vector<TrainLogRow>* log) {
  Rng rng(derive_seed(cfg.seed, kUpdateStream ^ kPretrainStream));
  for (int it = 0; it < cfg.critic_pretrain_iters; ++it) {
    const std::vector<Trajectory> trajs = collect_rollouts(params, corpus, env, cfg, it, kPretrainStream, false);
    const Batch batch = make_batch(trajs, cfg.gamma, cfg.gae_lambda);
    const double before = batch_value_loss(batch);
    const UpdateStats stats = ppo_update(params, opt, batch, cfg, rng, false);
    if (log != nullptr) log->push_back(make_row("pretrain", it, trajs, batch, stats, before));
  }
}

TrainResult train(const Corpus& corpus, const EnvConfig& env, const TrainConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  env.validate();
  if (corpus.empty()) throw std::invalid_argument("train: empty corpus");
  const auto start = std::chrono::steady_clock::now();
  const auto elapsed = [&] {
    return options.record_wall_time
               ? std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()
               : 0.0;
  };

  Rng init_rng(derive_seed(cfg.seed, kInitStream));
  TrainResult result;
  result.params = PolicyParams::initialize(cfg.hidden, cfg.init_log_std, env.sim.max_accel, cfg.mode, init_rng);
  PolicyParams& params = result.params;
  PpoOptimizer opt(params, cfg.lr);

  const auto emit = [&](TrainLogRow row) {
    row.wall_time_s = elapsed();
    result.log.push_back(row);
    if (options.on_iteration) options.on_iteration(row);
  };

  {
    std::vector<TrainLogRow> pre;
    pretrain_critic(params, opt, corpus, env, cfg, &pre);
    for (auto& row : pre) emit(row);
  }

  Rng update_rng(derive_seed(cfg.seed, kUpdateStream));
  for (int it = 0; it < cfg.iterations; ++it) {
    const std::vector<Trajectory> trajs = collect_rollouts(params, corpus, env, cfg, it, kTrainStream, true);
    const Batch batch = make_batch(trajs, cfg.gamma, cfg.gae_lambda);
    const double before = batch_value_loss(batch);
    UpdateStats stats;
    try {
      stats = ppo_update(params, opt, batch, cfg, update_rng, true);
    } catch (const TrainingError&) {
      if (!options.checkpoint_path.empty()) {
        dump_batch(batch, options.checkpoint_path.string() + ".abort_batch.csv");
      }
      throw;
    }
    emit(make_row("train", it, trajs, batch, stats, before));
    log_contexts(trajs, it, &result.context_log);
    if (!options.checkpoint_path.empty() && cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0) {
      save_checkpoint({params, cfg, env, options.corpus_hash, it + 1}, options.checkpoint_path);
    }
  }
  return result;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const PolicyParams& p = ckpt.params;
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  j["mode"] = to_string(p.mode);
  j["max_accel"] = p.max_accel;
  j["actor"] = mlp_json(p.actor_net, p.actor);
  j["critic"] = mlp_json(p.critic_net, p.critic);
  j["observation_scales"] = observation_scales_json();
  j["train_config"] = ckpt.train;
  j["env"] = ckpt.env;
  j["corpus_hash"] = ckpt.corpus_hash;
  j["iteration"] = ckpt.iteration;

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    out << j.dump(1) << '\n';
    if (!out) throw std::runtime_error("error writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string(), 0, std::string("invalid checkpoint JSON: ") + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != kCheckpointFormat) throw std::runtime_error("not a checkpoint file");
    if (j.at("version").get<int>() != kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version");
    if (j.at("observation_scales") != observation_scales_json()) {
      throw std::runtime_error("observation scales differ from this build");
    }
    Checkpoint c;
    c.params.mode = parse_policy_mode(j.at("mode").get<std::string>());
    c.params.max_accel = j.at("max_accel").get<double>();
    const auto& a = j.at("actor");
    const auto& v = j.at("critic");
    c.params.actor_net = Mlp(a.at("inputs").get<int>(), a.at("hidden").get<std::vector<int>>(), a.at("outputs").get<int>());
    c.params.critic_net = Mlp(v.at("inputs").get<int>(), v.at("hidden").get<std::vector<int>>(), v.at("outputs").get<int>());
    if (c.params.actor_net.inputs() != static_cast<int>(kObservationSize) ||
        c.params.critic_net.inputs() != static_cast<int>(kObservationSize)) {
      throw std::runtime_error("network input size does not match the observation");
    }
    c.params.actor = json_vector(a.at("params"));
    c.params.critic = json_vector(v.at("params"));
    if (c.params.actor.size() != c.params.actor_net.param_count() + 1 ||
        c.params.critic.size() != c.params.critic_net.param_count()) {
      throw std::runtime_error("parameter count does not match the topology");
    }
    c.train = j.at("train_config").get<TrainConfig>();
    c.env = j.at("env").get<EnvConfig>();
    c.corpus_hash = j.at("corpus_hash").get<std::string>();
    c.iteration = j.at("iteration").get<int>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string(), 0, std::string("malformed checkpoint: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ParseError(path.string(), 0, std::string("malformed checkpoint: ") + e.what());
  } catch (const std::runtime_error& e) {
    if (dynamic_cast<const ParseError*>(&e) != nullptr) throw;
    throw ParseError(path.string(), 0, e.what());
  }
}

void write_train_log_csv(std::ostream& out, const std::vector<TrainLogRow>& rows) {
  out << "phase,iteration,mean_return,policy_loss,value_loss,value_loss_before,entropy,kl,clip_fraction,"
         "explained_variance,samples,agents,wall_time_s\n";
  for (const auto& r : rows) {
    out << r.phase << ',' << r.iteration << ',' << text::format_double(r.mean_return) << ','
        << text::format_double(r.policy_loss) << ',' << text::format_double(r.value_loss) << ','
        << text::format_double(r.value_loss_before) << ',' << text::format_double(r.entropy) << ','
        << text::format_double(r.kl) << ',' << text::format_double(r.clip_fraction) << ','
        << text::format_double(r.explained_variance) << ',' << r.samples << ',' << r.agents << ','
        << text::format_double(r.wall_time_s) << '\n';
  }
}

void write_context_log_csv(std::ostream& out, const std::vector<ContextLogRow>& rows) {
  out << "iteration,context_id,mean_return,agents\n";
  for (const auto& r : rows) {
    out << r.iteration << ',' << r.context_id << ',' << text::format_double(r.mean_return) << ',' << r.agents << '\n';
  }
}

Controller make_policy_controller(std::shared_ptr<const PolicyParams> params, const NominalParams& nominal) {
  if (!params) throw std::invalid_argument("make_policy_controller: null parameters");
  nominal.validate();
  return [params, nominal](const Simulation& sim) {
    ActionMap actions;
    const std::vector<VehicleId> ids = sim.active_avs();
    if (ids.empty()) return actions;
    std::vector<Feature> features;
    features.reserve(ids.size());
    for (const VehicleId id : ids) features.push_back(build_observation(sim, id).features());
    const ActorOutput out = forward_actor(*params, observation_matrix(features));
    const double limit = sim.config().max_accel;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const double base = base_action(*params, sim, *sim.find(ids[k]), nominal);
      actions.emplace(ids[k], compose_action(base, out.mean[static_cast<Eigen::Index>(k)], limit));
    }
    return actions;
  };
}

}  // namespace ecomrtl
