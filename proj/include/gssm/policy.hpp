#pragma once

// Latent-conditioned policies and their optimization inside a learned model.
//
//   continuous (cartpole)  [s, z] -> 50 relu -> tanh * max_action, trained by
//                          backpropagation through model rollouts
//   discrete (acrobot)     [s, z] -> 128 relu -> softmax over 3 actions, with a
//                          critic of the same shape, trained by clipped PPO
//
// In ablation mode z is dropped from every input.

#include "gssm/autodiff.hpp"
#include "gssm/dynamics.hpp"
#include "gssm/envs.hpp"
#include "gssm/nn.hpp"
#include "gssm/optim.hpp"
#include "gssm/rng.hpp"

#include <filesystem>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

namespace gssm::pol {

enum class PolicyMode { amortized, ablation };

PolicyMode parse_policy_mode(std::string_view name);  // throws std::invalid_argument
std::string_view policy_mode_name(PolicyMode m);

struct ActorConfig {
  std::size_t dim_s = 4;
  std::size_t dim_lat = 16;
  std::size_t hidden = 50;
  PolicyMode mode = PolicyMode::amortized;
  std::size_t n_actions = 0;  // 0 = continuous
  double max_action = 10.0;
};

ActorConfig cartpole_actor_config(std::size_t dim_lat, PolicyMode mode, double max_force = 10.0);
ActorConfig acrobot_actor_config(std::size_t dim_lat, PolicyMode mode);

struct ActionSample {
  int index = 0;
  double log_prob = 0.0;
};

class NonFiniteOutput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Actor {
 public:
  Actor() = default;
  Actor(const ActorConfig& cfg, Rng& rng, const std::string& name = "actor");

  [[nodiscard]] const ActorConfig& config() const { return cfg_; }
  [[nodiscard]] bool discrete() const { return cfg_.n_actions > 0; }
  [[nodiscard]] std::size_t input_width() const;

  /// Network input: [s, z] or s. z is N x dim_lat (or ignored).
  ad::Var input(ad::Tape& t, ad::Var s, ad::Var z) const;
  /// N x 1 action in [-max_action, max_action]; continuous only.
  ad::Var action(ad::Tape& t, ad::Var s, ad::Var z, nn::Grad g);
  /// N x n_actions log-probabilities; discrete only.
  ad::Var log_probs(ad::Tape& t, ad::Var s, ad::Var z, nn::Grad g);

  /// Deterministic continuous action.
  double act(const envs::State& s, const Eigen::RowVectorXd& z);
  /// Categorical sample with its log-probability.
  ActionSample sample(const envs::State& s, const Eigen::RowVectorXd& z, Rng& rng);
  /// Log-probabilities for one state, values only.
  Eigen::RowVectorXd action_log_probs(const envs::State& s, const Eigen::RowVectorXd& z);

  std::vector<ad::Param*> params() { return net_.params(); }
  nn::Mlp& net() { return net_; }

 private:
  ActorConfig cfg_;
  nn::Mlp net_;
};

class Critic {
 public:
  Critic() = default;
  Critic(const ActorConfig& cfg, Rng& rng, const std::string& name = "critic");

  /// N x 1 state values.
  ad::Var value(ad::Tape& t, ad::Var s, ad::Var z, nn::Grad g);
  double value(const envs::State& s, const Eigen::RowVectorXd& z);
  std::vector<ad::Param*> params() { return net_.params(); }

 private:
  ActorConfig cfg_;
  nn::Mlp net_;
};

// ---------------------------------------------------------------------------
// Backpropagation through model rollouts

/// Next states (N x dim_s) for states s and actions a (N x 1).
using ModelStep = std::function<ad::Var(ad::Tape&, ad::Var s, ad::Var a)>;
/// Per-row rewards (N x 1) of states.
using RewardVar = std::function<ad::Var(ad::Tape&, ad::Var s)>;

/// Cartpole reward on the tape; agrees with envs::cartpole_reward.
ad::Var cartpole_reward(ad::Tape& t, ad::Var s, const envs::CartpoleParams& p = {});

/// J = mean_k sum_{t<H} gamma^t r(s_{t+1}) over the K rows of s0. z holds one
/// row per rollout and stays fixed for the whole rollout.
ad::Var bptt_objective(ad::Tape& t, Actor& actor, ad::Var s0, ad::Var z, const ModelStep& step,
                       const RewardVar& reward, std::size_t horizon, double gamma, nn::Grad g);

/// Learned-model transition: decoder mean plus reparameterized noise
/// (or the mean only). The decoder is read frozen.
ModelStep learned_model_step(dyn::DynamicsModel& model, ad::Var z, const envs::Environment& env, bool mean_only,
                             Rng noise);

struct BpttConfig {
  std::size_t horizon = 25;
  double gamma = 0.95;
  std::size_t rollouts = 10;  // K
  double clip_norm = 10.0;
  bool mean_only = false;
};

struct UpdateStats {
  double objective = 0.0;
  double grad_norm = 0.0;
  bool skipped = false;
};

/// One ascent step on J built by `objective`; the gradient is clipped to
/// clip_norm and a non-finite gradient skips the step.
UpdateStats bptt_update(Actor& actor, ad::Adam& adam, const std::function<ad::Var(ad::Tape&)>& objective,
                        double clip_norm);

// ---------------------------------------------------------------------------
// Clipped actor-critic

struct ModelTrajectory {
  Matrix states;         // T x dim_s, the state each action was taken in
  Eigen::RowVectorXd z;  // fixed for the rollout
  std::vector<int> actions;
  std::vector<double> log_probs;
  std::vector<double> rewards;
  std::vector<double> values;
  bool terminal = false;         // ended in a terminal state
  double bootstrap_value = 0.0;  // V(s_T) when truncated
  [[nodiscard]] std::size_t size() const { return actions.size(); }
};

struct Advantages {
  Eigen::VectorXd advantage;
  Eigen::VectorXd value_target;
};

/// Generalized advantage estimates for one trajectory, unnormalized.
Advantages gae(std::span<const double> rewards, std::span<const double> values, bool terminal, double bootstrap,
               double gamma, double lambda);

struct PpoConfig {
  double clip = 0.2;
  std::size_t epochs = 10;
  std::size_t minibatch = 64;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  double lambda = 0.95;
  double gamma = 0.99;
  std::size_t rollout_horizon = 50;
  std::size_t rollouts = 16;
  double clip_norm = 10.0;
};

/// Per-row min(r A, clamp(r, 1-eps, 1+eps) A).
ad::Var clipped_surrogate(ad::Var ratio, ad::Var advantage, double clip);

struct PpoStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double grad_norm = 0.0;
  double initial_ratio_error = 0.0;  // max |ratio - 1| before the first step
  std::size_t dropped = 0;
  std::size_t steps = 0;
};

/// Clipped-surrogate epochs over the batch, one Adam over actor and critic.
PpoStats ppo_update(Actor& actor, Critic& critic, ad::Adam& adam, std::span<const ModelTrajectory> batch,
                    const PpoConfig& cfg, Rng& rng);

/// Acrobot rollouts in the learned model from the given start states, one
/// latent row per start.
std::vector<ModelTrajectory> collect_model_rollouts(Actor& actor, Critic& critic, dyn::DynamicsModel& model,
                                                    const envs::Environment& env, std::span<const envs::State> starts,
                                                    const Matrix& z, std::size_t horizon, bool mean_only, Rng& rng);

struct PolicyMetricsRow {
  int iteration = 0;
  double avg_return_normalized = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double grad_norm = 0.0;
};

void append_policy_metrics(const std::filesystem::path& file, std::span<const PolicyMetricsRow> rows);

}  // namespace gssm::pol
