#pragma once

// Task-distribution environments. Both physical systems have a 4-d state
// and a scalar action; the acrobot action is a torque in {-1, 0, +1} chosen
// by index.
//
//   cartpole  state [x_c, theta, x_c', theta'], theta = 0 hanging down,
//             y = s' - s
//   acrobot   state [theta1, theta1', theta2, theta2'], y = s'

#include "gssm/autodiff.hpp"
#include "gssm/rng.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gssm::envs {

enum class EnvId { cartpole, acrobot };
enum class Integrator { semi_implicit_euler, rk4 };

EnvId parse_env_id(std::string_view name);  // throws std::invalid_argument
std::string_view env_name(EnvId id);
Integrator parse_integrator(std::string_view name);
std::string_view integrator_name(Integrator i);

using State = Eigen::Vector4d;

struct TaskSpec {
  EnvId env = EnvId::cartpole;
  // cartpole: cart mass, pole mass; acrobot: link 1 mass, link 2 mass
  double mass1 = 1.0;
  double mass2 = 1.0;
  std::uint64_t seed = 0;
  int id = 0;
};

TaskSpec sample_task(EnvId env, Rng& rng, int id = 0);
TaskSpec sample_task(std::string_view env, Rng& rng, int id = 0);

struct CartpoleParams {
  double pole_length = 0.6;
  double gravity = 9.82;
  double friction = 0.1;
  double dt = 0.1;
  int substeps = 4;
  double max_force = 10.0;
  double sigma_c = 0.25;
  double reset_std = 0.01;
  int horizon = 25;
  Integrator integrator = Integrator::rk4;
};

struct AcrobotParams {
  double link_length1 = 1.0;
  double link_length2 = 1.0;
  double com1 = 0.5;
  double com2 = 0.5;
  double moi = 1.0;
  double gravity = 9.8;
  double dt = 0.2;
  int substeps = 4;
  double reset_range = 0.1;
  int horizon = 200;
  Integrator integrator = Integrator::rk4;
};

struct StepResult {
  State next;
  double reward = 0.0;
  bool terminal = false;
};

class NonFiniteState : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// State derivative [x', theta', x'', theta''] under force f.
State cartpole_derivative(const TaskSpec& spec, const State& s, double force, const CartpoleParams& p);
StepResult step_cartpole(const TaskSpec& spec, const State& s, double force, const CartpoleParams& p = {});
double cartpole_reward(const State& s, const CartpoleParams& p = {});
double cartpole_energy(const TaskSpec& spec, const State& s, const CartpoleParams& p = {});

inline constexpr double kAcrobotTorques[3] = {-1.0, 0.0, 1.0};

State acrobot_derivative(const TaskSpec& spec, const State& s, double torque, const AcrobotParams& p);
/// `action` indexes kAcrobotTorques; anything else throws std::out_of_range.
StepResult step_acrobot(const TaskSpec& spec, const State& s, int action, const AcrobotParams& p = {});
double acrobot_height(const State& s, const AcrobotParams& p = {});
double acrobot_energy(const TaskSpec& spec, const State& s, const AcrobotParams& p = {});

/// Angle wrapped to (-pi, pi], for reporting only.
double wrap_angle(double a);

struct Transition {
  Eigen::VectorXd x;  // [s, a]
  Eigen::VectorXd y;  // per-env target
  double reward = 0.0;
  bool done = false;
};

struct Trajectory {
  std::vector<Transition> steps;
  int horizon = 0;
  int task_id = 0;
  [[nodiscard]] std::size_t size() const { return steps.size(); }
};

double episode_return(const Trajectory& traj, double gamma, bool normalize);

// Uniform front end used by the training loop.
class Environment {
 public:
  explicit Environment(EnvId id, CartpoleParams cp = {}, AcrobotParams ap = {});

  [[nodiscard]] EnvId id() const { return id_; }
  [[nodiscard]] std::size_t state_dim() const { return 4; }
  [[nodiscard]] std::size_t action_dim() const { return 1; }
  [[nodiscard]] bool discrete() const { return id_ == EnvId::acrobot; }
  [[nodiscard]] std::size_t n_actions() const { return discrete() ? 3 : 0; }
  [[nodiscard]] int horizon() const;
  [[nodiscard]] bool delta_target() const { return id_ == EnvId::cartpole; }
  [[nodiscard]] const CartpoleParams& cartpole() const { return cp_; }
  [[nodiscard]] const AcrobotParams& acrobot() const { return ap_; }

  State reset(Rng& rng) const;
  /// Continuous action for cartpole (force, clipped), action index for acrobot.
  [[nodiscard]] StepResult step(const TaskSpec& spec, const State& s, double action) const;
  /// Value stored in x for an action (the force, or the torque of an index).
  [[nodiscard]] double action_value(double action) const;

  [[nodiscard]] Eigen::VectorXd target(const State& s, const State& next) const;
  [[nodiscard]] State next_from_target(const State& s, const Eigen::VectorXd& y) const;

  [[nodiscard]] std::vector<std::string> state_names() const;
  [[nodiscard]] std::string action_name() const;

 private:
  EnvId id_;
  CartpoleParams cp_;
  AcrobotParams ap_;
};

using PolicyFn = std::function<double(const State&)>;

/// Runs one episode from a fresh reset until the horizon or termination.
/// The last transition is marked done.
Trajectory run_episode(const Environment& env, const TaskSpec& spec, const PolicyFn& policy, Rng& rng);

void write_trajectory_csv(const std::filesystem::path& file, const Environment& env,
                          const std::vector<Trajectory>& trajectories);

struct TabularMDP {
  std::size_t n_states = 0;
  std::size_t n_actions = 0;
  std::vector<Matrix> transition;  // per action, S x S row-stochastic
  Matrix reward;                   // S x A, entries in [0, r_max]
  double r_max = 1.0;
  double gamma = 0.9;
  Eigen::VectorXd initial;  // S

  [[nodiscard]] double max_row_sum_error() const;
};

struct TabularSizes {
  std::size_t n_states = 5;
  std::size_t n_actions = 2;
  double gamma = 0.9;
  double r_max = 1.0;
};

/// Base MDP and a copy whose rows are (1-c) P + c Q for fresh random rows Q.
std::pair<TabularMDP, TabularMDP> make_random_tabular_pair(const TabularSizes& sizes, double perturbation, Rng& rng);

/// Uniform-Dirichlet row.
Eigen::RowVectorXd random_distribution(std::size_t n, Rng& rng);

}  // namespace gssm::envs
