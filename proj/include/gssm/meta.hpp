#pragma once

// Meta-training and meta-testing.
//
// Training alternates, per iteration: one real episode on the current task,
// dynamics updates on context/target splits drawn from every task buffer,
// policy updates inside the learned model, and an offline evaluation on a
// fixed set of held-out tasks. Testing is either amortized (latent inference
// only, no optimizer steps) or per-task fine-tuning of a latent-free policy.

#include "gssm/config.hpp"
#include "gssm/dynamics.hpp"
#include "gssm/envs.hpp"
#include "gssm/optim.hpp"
#include "gssm/policy.hpp"

#include <deque>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

namespace gssm::meta {

/// Real transitions of one task; keeps the most recent `capacity` episodes.
class MemoryBuffer {
 public:
  MemoryBuffer(envs::TaskSpec task, std::size_t capacity);

  /// Throws std::invalid_argument when the trajectory belongs to another task.
  void add(envs::Trajectory traj);

  [[nodiscard]] const envs::TaskSpec& task() const { return task_; }
  [[nodiscard]] std::size_t episodes() const { return episodes_.size(); }
  [[nodiscard]] std::size_t transitions() const;
  [[nodiscard]] Matrix x() const;
  [[nodiscard]] Matrix y() const;
  /// First state of every stored episode.
  [[nodiscard]] std::vector<envs::State> start_states() const;
  [[nodiscard]] std::vector<envs::State> states() const;

 private:
  envs::TaskSpec task_;
  std::size_t capacity_;
  std::deque<envs::Trajectory> episodes_;
};

/// Disjoint random split: context size uniform in [n_min, n_max] (clipped to
/// N - 1), at most `max_targets` of the remaining rows become targets.
dyn::TaskItem split_context_target(const Matrix& x, const Matrix& y, Rng& rng, std::size_t n_min,
                                   std::size_t n_max, std::size_t max_targets, std::uint64_t key = 0,
                                   int task_id = 0);

/// Random subset of n rows (all rows when fewer).
std::pair<Matrix, Matrix> sample_rows(const Matrix& x, const Matrix& y, std::size_t n, Rng& rng);

enum class ExplorationMode { uniform_random, current_policy };

/// Action source for real data collection. current_policy adds N(0, noise^2)
/// to the continuous action (clipped), or samples the categorical policy.
/// Random draws (uniform actions, continuous noise) are held for `hold`
/// consecutive steps; use a fresh PolicyFn per episode.
envs::PolicyFn exploration_policy(ExplorationMode mode, const envs::Environment& env, pol::Actor* actor,
                                  Eigen::RowVectorXd z, double noise, Rng& rng, std::size_t hold = 1);

/// Dynamics model, actor and (discrete envs) critic built from a config.
struct Agent {
  explicit Agent(const cfg::RunConfig& c);

  cfg::RunConfig config;
  envs::Environment env;
  dyn::DynamicsModel model;
  pol::Actor actor;
  pol::Critic critic;

  std::vector<ad::Param*> policy_params();
  std::vector<ad::Param*> all_params();
  void save(const std::filesystem::path& dir, int iteration);
  /// Restores parameters and normalization statistics.
  static std::unique_ptr<Agent> load(const std::filesystem::path& dir);
};

/// Context and held-out transitions of one task, both from the
/// uniform-random exploration policy.
struct TaskData {
  envs::TaskSpec task;
  Matrix xc, yc;
  Matrix xt, yt;
};

TaskData collect_task_data(const envs::Environment& env, const envs::TaskSpec& task, std::size_t context,
                           std::size_t targets, Rng& rng);

struct ReturnStats {
  double mean = 0.0;
  double std = 0.0;
};

/// Normalized returns of `episodes` real episodes; z is redrawn from q for
/// every episode.
ReturnStats evaluate_policy(Agent& agent, pol::Actor& actor, const envs::TaskSpec& task,
                            const enc::DiagGaussian& q, std::size_t episodes, Rng& rng);

struct IterationRecord {
  int iteration = 0;
  int task_id = 0;
  double mass1 = 0.0, mass2 = 0.0;
  double episode_return = 0.0;
  double elbo = 0.0, nll = 0.0, kl = 0.0;
  double heldout_mse = 0.0;
  double avg_return_normalized = 0.0;
  double policy_loss = 0.0, value_loss = 0.0, entropy = 0.0, grad_norm = 0.0;
  std::string status = "ok";
};

struct TrainResult {
  std::unique_ptr<Agent> agent;
  std::vector<IterationRecord> log;
  std::filesystem::path checkpoint;
};

/// Runs meta-training into c.out_dir: effective_config.toml, train_log.csv,
/// metrics.csv, dynamics_metrics.csv, policy_metrics.csv and checkpoints.
TrainResult meta_train(const cfg::RunConfig& c);

struct TaskResult {
  envs::TaskSpec task;
  double mean_return = 0.0;
  double std_return = 0.0;
  double one_step_mse = 0.0;
  std::size_t adaptation_steps = 0;
  double wall_clock_s = 0.0;
  bool fallback = false;
  bool skipped = false;
};

/// Unseen tasks from the test stream of `seed`.
std::vector<envs::TaskSpec> test_tasks(envs::EnvId env, std::uint64_t seed, std::size_t n);

/// Latent inference only; throws std::logic_error if any optimizer step runs.
std::vector<TaskResult> meta_test_amortized(Agent& agent, std::span<const envs::TaskSpec> tasks, Rng& rng);

/// Per-task copies of the policy fine-tuned for `steps` gradient steps in the
/// learned model. A fine-tuned copy whose return collapses by more than half
/// is replaced by the original policy and marked.
std::vector<TaskResult> meta_test_finetune(Agent& agent, std::span<const envs::TaskSpec> tasks, std::size_t steps,
                                           Rng& rng);

/// Header: task_id,mass1,mass2,mean_return,std_return,one_step_mse,adaptation_steps,wall_clock_s,fallback
void write_test_results(const std::filesystem::path& file, std::span<const TaskResult> rows);

/// Mean held-out one-step MSE over tasks with the first n context rows.
double context_mse(Agent& agent, std::span<const TaskData> data, std::size_t n_context, Rng& rng);

}  // namespace gssm::meta
