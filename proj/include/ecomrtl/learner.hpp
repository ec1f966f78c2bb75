#pragma once

// Actor-critic residual policy and its PPO trainer.
//
// The actor outputs a residual acceleration mean A tanh(z) with a
// state-independent log standard deviation; its output layer starts at
// exactly zero so the untrained policy reproduces the nominal controller.
// In standalone mode (the multi-task baseline) the same network drives the
// vehicle without a nominal policy underneath.

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "ecomrtl/control.hpp"
#include "ecomrtl/microsim.hpp"
#include "ecomrtl/mlp.hpp"
#include "ecomrtl/rng.hpp"
#include "ecomrtl/scenario.hpp"

namespace ecomrtl {

enum class PolicyMode { kResidual, kStandalone };

/// "mrtl" / "multitask".
const char* to_string(PolicyMode m);
PolicyMode parse_policy_mode(const std::string& s);

/// Everything about the environment a policy is trained or evaluated in.
struct EnvConfig {
  SimConfig sim;
  NominalParams nominal;
  RewardParams reward;

  void validate() const;
};

struct TrainConfig {
  double lr = 0.005;
  int iterations = 400;
  int workers = 12;
  int critic_pretrain_iters = 30;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double clip_eps = 0.2;
  int steps_per_worker_per_iter = 1200;
  int epochs_per_iter = 4;
  int minibatch = 256;
  double entropy_coef = 0.003;
  double max_grad_norm = 0.5;
  double init_log_std = -1.2039728043259361;  // log(0.3)
  std::vector<int> hidden{128, 128, 128};
  int checkpoint_every = 10;
  int threads = 0;  // 0: one per hardware thread, capped at workers
  std::uint64_t seed = 0;
  PolicyMode mode = PolicyMode::kResidual;

  static TrainConfig paper();
  /// Reduced budget for workstation runs (8-context corpora, 50 iterations).
  static TrainConfig desk();
  void validate() const;
};

struct PolicyParams {
  Mlp actor_net;
  Mlp critic_net;
  Eigen::VectorXd actor;  // actor_net parameters followed by log_std
  Eigen::VectorXd critic;
  PolicyMode mode = PolicyMode::kResidual;
  double max_accel = 3.0;  // residual head scale A

  static PolicyParams initialize(const std::vector<int>& hidden, double init_log_std, double max_accel,
                                 PolicyMode mode, Rng& rng);

  double log_std() const { return actor[actor.size() - 1]; }
  Eigen::Ref<const Eigen::VectorXd> actor_weights() const { return actor.head(actor.size() - 1); }
};

struct ActorOutput {
  Eigen::VectorXd mean;  // m/s^2, one per column of the input
  double log_std = 0.0;
};

/// Throws TrainingError when any output is not finite.
ActorOutput forward_actor(const PolicyParams& params, const Eigen::MatrixXd& obs);
Eigen::VectorXd forward_critic(const PolicyParams& params, const Eigen::MatrixXd& obs);

/// Feature columns for a set of observations.
Eigen::MatrixXd observation_matrix(const std::vector<std::array<double, kObservationSize>>& features);

double gaussian_log_prob(double x, double mean, double log_std);

/// One AV's contiguous experience within one episode.
struct Trajectory {
  std::size_t context_id = 0;
  std::vector<std::array<double, kObservationSize>> observations;
  std::vector<double> actions;  // sampled residuals
  std::vector<double> log_probs;
  std::vector<double> rewards;
  std::vector<double> values;
  bool terminal = false;         // true when the vehicle left the road
  double bootstrap_value = 0.0;  // V(s_T) for a trajectory cut by the horizon

  std::size_t size() const { return rewards.size(); }
  double undiscounted_return() const;
};

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;  // advantage + value
};

/// Generalized advantage estimation over one trajectory.
GaeResult compute_gae(const std::vector<double>& rewards, const std::vector<double>& values, double bootstrap_value,
                      bool terminal, double gamma, double lambda);

/// Zero mean, unit variance (left centred only when the variance is 0).
void normalize_advantages(Eigen::Ref<Eigen::VectorXd> advantages);

struct Batch {
  Eigen::MatrixXd observations;  // kObservationSize x N
  Eigen::VectorXd actions;
  Eigen::VectorXd old_log_probs;
  Eigen::VectorXd advantages;  // normalized
  Eigen::VectorXd returns;
  Eigen::VectorXd old_values;

  Eigen::Index size() const { return actions.size(); }
};

Batch make_batch(const std::vector<Trajectory>& trajectories, double gamma, double lambda);

struct LossGrad {
  double loss = 0.0;
  Eigen::VectorXd grad;
  double entropy = 0.0;
  double kl = 0.0;             // mean of (r - 1) - log r
  double clip_fraction = 0.0;  // samples whose ratio left [1 - eps, 1 + eps]
};

/// Clipped surrogate minus the entropy bonus, averaged over the columns;
/// gradient with respect to PolicyParams::actor.
LossGrad actor_loss(const PolicyParams& params, const Eigen::MatrixXd& obs, const Eigen::VectorXd& actions,
                    const Eigen::VectorXd& old_log_probs, const Eigen::VectorXd& advantages, double clip_eps,
                    double entropy_coef);

/// Mean squared error against `returns`; gradient with respect to
/// PolicyParams::critic.
LossGrad critic_loss(const PolicyParams& params, const Eigen::MatrixXd& obs, const Eigen::VectorXd& returns);

class PpoOptimizer {
 public:
  PpoOptimizer(const PolicyParams& params, double lr);
  Adam actor;
  Adam critic;
};

struct UpdateStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double kl = 0.0;
  double clip_fraction = 0.0;
  double explained_variance = 0.0;
};

/// Several epochs of minibatch PPO. With `update_actor` false only the
/// critic is fitted. Throws TrainingError on a non-finite loss.
UpdateStats ppo_update(PolicyParams& params, PpoOptimizer& opt, const Batch& batch, const TrainConfig& cfg, Rng& rng,
                       bool update_actor);

/// Context index used by each worker in one iteration: consecutive
/// positions of a seeded permutation of the corpus, wrapping around.
std::vector<std::size_t> context_schedule(std::size_t corpus_size, int workers, int iteration, std::uint64_t seed);

/// Runs every worker for steps_per_worker_per_iter simulator steps. With
/// `apply_residual` false the sampled residual is recorded but the applied
/// action is the base action (nominal, or zero in standalone mode).
std::vector<Trajectory> collect_rollouts(const PolicyParams& params, const Corpus& corpus, const EnvConfig& env,
                                         const TrainConfig& cfg, int iteration, std::uint64_t stream,
                                         bool apply_residual);

struct TrainLogRow {
  std::string phase;  // "pretrain" or "train"
  int iteration = 0;
  double mean_return = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double value_loss_before = 0.0;  // critic MSE on the fresh batch before fitting
  double entropy = 0.0;
  double kl = 0.0;
  double clip_fraction = 0.0;
  double explained_variance = 0.0;
  std::int64_t samples = 0;
  std::int64_t agents = 0;
  double wall_time_s = 0.0;
};

struct ContextLogRow {
  int iteration = 0;
  std::size_t context_id = 0;
  double mean_return = 0.0;
  std::int64_t agents = 0;
};

/// Fits only the critic for cfg.critic_pretrain_iters iterations of pure
/// base-policy rollouts.
void pretrain_critic(PolicyParams& params, PpoOptimizer& opt, const Corpus& corpus, const EnvConfig& env,
                     const TrainConfig& cfg, std::vector<TrainLogRow>* log = nullptr);

struct Checkpoint {
  PolicyParams params;
  TrainConfig train;
  EnvConfig env;
  std::string corpus_hash;
  int iteration = 0;
};

/// Versioned JSON container. Doubles are written in shortest round-trip
/// form, so load(save(x)) reproduces every weight bitwise. The file is
/// written to a temporary and renamed into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct TrainOptions {
  std::filesystem::path checkpoint_path;  // empty: no periodic checkpoints
  std::string corpus_hash;
  bool record_wall_time = false;
  std::function<void(const TrainLogRow&)> on_iteration;
};

struct TrainResult {
  PolicyParams params;
  std::vector<TrainLogRow> log;
  std::vector<ContextLogRow> context_log;
};

TrainResult train(const Corpus& corpus, const EnvConfig& env, const TrainConfig& cfg, const TrainOptions& options = {});

void write_train_log_csv(std::ostream& out, const std::vector<TrainLogRow>& rows);
void write_context_log_csv(std::ostream& out, const std::vector<ContextLogRow>& rows);

/// Deterministic (mean-action) controller for every AV.
Controller make_policy_controller(std::shared_ptr<const PolicyParams> params, const NominalParams& nominal);

}  // namespace ecomrtl
