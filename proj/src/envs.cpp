#include "gssm/envs.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace gssm::envs {

namespace {

using Deriv = std::function<State(const State&)>;

struct Coord {
  int pos, vel;
};

State integrate(const Deriv& f, State s, double dt, int substeps, Integrator method, const Coord (&coords)[2]) {
  const double h = dt / substeps;
  for (int k = 0; k < substeps; ++k) {
    if (method == Integrator::rk4) {
      const State k1 = f(s);
      const State k2 = f(s + 0.5 * h * k1);
      const State k3 = f(s + 0.5 * h * k2);
      const State k4 = f(s + h * k3);
      s += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    } else {
      const State d = f(s);
      for (const Coord& c : coords) {
        s[c.vel] += h * d[c.vel];
        s[c.pos] += h * s[c.vel];
      }
    }
  }
  return s;
}

void check_finite(const State& s, const char* what) {
  if (!s.allFinite()) {
    std::ostringstream os;
    os << what << ": non-finite state [" << s.transpose() << "]";
    throw NonFiniteState(os.str());
  }
}

constexpr Coord kCartpoleCoords[2] = {{0, 2}, {1, 3}};
constexpr Coord kAcrobotCoords[2] = {{0, 1}, {2, 3}};

}  // namespace

EnvId parse_env_id(std::string_view name) {
  if (name == "cartpole") return EnvId::cartpole;
  if (name == "acrobot") return EnvId::acrobot;
  throw std::invalid_argument("unknown env_id '" + std::string(name) + "'");
}

std::string_view env_name(EnvId id) { return id == EnvId::cartpole ? "cartpole" : "acrobot"; }

Integrator parse_integrator(std::string_view name) {
  if (name == "semi_implicit_euler") return Integrator::semi_implicit_euler;
  if (name == "rk4") return Integrator::rk4;
  throw std::invalid_argument("unknown integrator '" + std::string(name) + "'");
}

std::string_view integrator_name(Integrator i) {
  return i == Integrator::rk4 ? "rk4" : "semi_implicit_euler";
}

TaskSpec sample_task(EnvId env, Rng& rng, int id) {
  TaskSpec t;
  t.env = env;
  t.id = id;
  t.seed = rng();
  if (env == EnvId::cartpole) {
    t.mass1 = rng.uniform(1.0, 2.0);
    t.mass2 = rng.uniform(0.7, 1.0);
  } else {
    t.mass1 = rng.uniform(0.8, 1.2);
    t.mass2 = rng.uniform(0.8, 1.2);
  }
  return t;
}

TaskSpec sample_task(std::string_view env, Rng& rng, int id) { return sample_task(parse_env_id(env), rng, id); }

// Uniform rod of length l hinged at the cart, theta = 0 hanging down.
State cartpole_derivative(const TaskSpec& spec, const State& s, double f, const CartpoleParams& p) {
  const double M = spec.mass1, m = spec.mass2, l = p.pole_length, g = p.gravity, b = p.friction;
  const double xd = s[2], th = s[1], thd = s[3];
  const double sn = std::sin(th), cs = std::cos(th);
  const double den = 4.0 * (M + m) - 3.0 * m * cs * cs;
  const double xdd = (2.0 * m * l * thd * thd * sn + 3.0 * m * g * sn * cs + 4.0 * f - 4.0 * b * xd) / den;
  const double thdd =
      (-3.0 * m * l * thd * thd * sn * cs - 6.0 * (M + m) * g * sn - 6.0 * (f - b * xd) * cs) / (l * den);
  return {xd, thd, xdd, thdd};
}

double cartpole_reward(const State& s, const CartpoleParams& p) {
  const double l = p.pole_length;
  const double dx = s[0] + l * std::sin(s[1]);
  const double dy = -l * std::cos(s[1]) - l;
  return std::exp(-(dx * dx + dy * dy) / (p.sigma_c * p.sigma_c)) - 1.0;
}

StepResult step_cartpole(const TaskSpec& spec, const State& s, double force, const CartpoleParams& p) {
  check_finite(s, "step_cartpole");
  const double f = std::clamp(force, -p.max_force, p.max_force);
  StepResult r;
  r.next = integrate([&](const State& x) { return cartpole_derivative(spec, x, f, p); }, s, p.dt, p.substeps,
                     p.integrator, kCartpoleCoords);
  check_finite(r.next, "step_cartpole");
  r.reward = cartpole_reward(r.next, p);
  return r;
}

double cartpole_energy(const TaskSpec& spec, const State& s, const CartpoleParams& p) {
  const double M = spec.mass1, m = spec.mass2, l = p.pole_length;
  const double xd = s[2], th = s[1], thd = s[3];
  return 0.5 * (M + m) * xd * xd + 0.5 * m * l * std::cos(th) * xd * thd + m * l * l * thd * thd / 6.0 -
         0.5 * m * p.gravity * l * std::cos(th);
}

State acrobot_derivative(const TaskSpec& spec, const State& s, double a, const AcrobotParams& p) {
  const double m1 = spec.mass1, m2 = spec.mass2;
  const double l1 = p.link_length1, lc1 = p.com1, lc2 = p.com2, I1 = p.moi, I2 = p.moi, g = p.gravity;
  const double th1 = s[0], dth1 = s[1], th2 = s[2], dth2 = s[3];
  const double half_pi = std::numbers::pi / 2.0;
  const double d1 = m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * std::cos(th2)) + I1 + I2;
  const double d2 = m2 * (lc2 * lc2 + l1 * lc2 * std::cos(th2)) + I2;
  const double phi2 = m2 * lc2 * g * std::cos(th1 + th2 - half_pi);
  const double phi1 = -m2 * l1 * lc2 * dth2 * dth2 * std::sin(th2) - 2.0 * m2 * l1 * lc2 * dth2 * dth1 * std::sin(th2) +
                      (m1 * lc1 + m2 * l1) * g * std::cos(th1 - half_pi) + phi2;
  const double ddth2 = (a + d2 / d1 * phi1 - m2 * l1 * lc2 * dth1 * dth1 * std::sin(th2) - phi2) /
                       (m2 * lc2 * lc2 + I2 - d2 * d2 / d1);
  const double ddth1 = -(d2 * ddth2 + phi1) / d1;
  return {dth1, ddth1, dth2, ddth2};
}

double acrobot_height(const State& s, const AcrobotParams& p) {
  return -p.link_length1 * std::cos(s[0]) - p.link_length2 * std::cos(s[0] + s[2]);
}

StepResult step_acrobot(const TaskSpec& spec, const State& s, int action, const AcrobotParams& p) {
  if (action < 0 || action > 2) throw std::out_of_range("acrobot action index " + std::to_string(action));
  check_finite(s, "step_acrobot");
  const double torque = kAcrobotTorques[action];
  StepResult r;
  r.next = integrate([&](const State& x) { return acrobot_derivative(spec, x, torque, p); }, s, p.dt, p.substeps,
                     p.integrator, kAcrobotCoords);
  check_finite(r.next, "step_acrobot");
  r.reward = -1.0;
  r.terminal = acrobot_height(r.next, p) > p.link_length1;
  return r;
}

double acrobot_energy(const TaskSpec& spec, const State& s, const AcrobotParams& p) {
  const double m1 = spec.mass1, m2 = spec.mass2;
  const double l1 = p.link_length1, lc1 = p.com1, lc2 = p.com2, I = p.moi, g = p.gravity;
  const double th1 = s[0], dth1 = s[1], th2 = s[2], dth2 = s[3];
  const double d1 = m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * std::cos(th2)) + 2.0 * I;
  const double d2 = m2 * (lc2 * lc2 + l1 * lc2 * std::cos(th2)) + I;
  const double d3 = m2 * lc2 * lc2 + I;
  const double kinetic = 0.5 * d1 * dth1 * dth1 + d2 * dth1 * dth2 + 0.5 * d3 * dth2 * dth2;
  const double potential = -m1 * g * lc1 * std::cos(th1) - m2 * g * (l1 * std::cos(th1) + lc2 * std::cos(th1 + th2));
  return kinetic + potential;
}

double wrap_angle(double a) {
  const double two_pi = 2.0 * std::numbers::pi;
  double w = std::fmod(a + std::numbers::pi, two_pi);
  if (w <= 0.0) w += two_pi;
  return w - std::numbers::pi;
}

double episode_return(const Trajectory& traj, double gamma, bool normalize) {
  if (traj.steps.empty()) throw std::invalid_argument("episode_return: empty trajectory");
  double total = 0.0, discount = 1.0;
  for (const auto& t : traj.steps) {
    total += discount * t.reward;
    discount *= gamma;
  }
  if (normalize) {
    const int h = traj.horizon > 0 ? traj.horizon : static_cast<int>(traj.steps.size());
    total /= h;
  }
  return total;
}

Environment::Environment(EnvId id, CartpoleParams cp, AcrobotParams ap) : id_(id), cp_(cp), ap_(ap) {}

int Environment::horizon() const { return id_ == EnvId::cartpole ? cp_.horizon : ap_.horizon; }

State Environment::reset(Rng& rng) const {
  State s = State::Zero();
  if (id_ == EnvId::cartpole) {
    s[1] = rng.normal(0.0, cp_.reset_std);
  } else {
    for (int i = 0; i < 4; ++i) s[i] = rng.uniform(-ap_.reset_range, ap_.reset_range);
  }
  return s;
}

StepResult Environment::step(const TaskSpec& spec, const State& s, double action) const {
  if (id_ == EnvId::cartpole) return step_cartpole(spec, s, action, cp_);
  const double idx = std::round(action);
  if (idx != action) throw std::out_of_range("acrobot action must be an index, got " + std::to_string(action));
  return step_acrobot(spec, s, static_cast<int>(idx), ap_);
}

double Environment::action_value(double action) const {
  if (id_ == EnvId::cartpole) return std::clamp(action, -cp_.max_force, cp_.max_force);
  const int idx = static_cast<int>(std::round(action));
  if (idx < 0 || idx > 2) throw std::out_of_range("acrobot action index " + std::to_string(idx));
  return kAcrobotTorques[idx];
}

Eigen::VectorXd Environment::target(const State& s, const State& next) const {
  if (delta_target()) return next - s;
  return next;
}

State Environment::next_from_target(const State& s, const Eigen::VectorXd& y) const {
  if (delta_target()) return s + y;
  return y;
}

std::vector<std::string> Environment::state_names() const {
  if (id_ == EnvId::cartpole) return {"x_c", "theta", "x_c_dot", "theta_dot"};
  return {"theta1", "theta1_dot", "theta2", "theta2_dot"};
}

std::string Environment::action_name() const { return id_ == EnvId::cartpole ? "force" : "torque"; }

Trajectory run_episode(const Environment& env, const TaskSpec& spec, const PolicyFn& policy, Rng& rng) {
  Trajectory traj;
  traj.horizon = env.horizon();
  traj.task_id = spec.id;
  State s = env.reset(rng);
  for (int t = 0; t < traj.horizon; ++t) {
    const double a = policy(s);
    const StepResult r = env.step(spec, s, a);
    Transition tr;
    tr.x.resize(5);
    tr.x << s, env.action_value(a);
    tr.y = env.target(s, r.next);
    tr.reward = r.reward;
    tr.done = r.terminal || t + 1 == traj.horizon;
    traj.steps.push_back(std::move(tr));
    if (r.terminal) break;
    s = r.next;
  }
  return traj;
}

void write_trajectory_csv(const std::filesystem::path& file, const Environment& env,
                          const std::vector<Trajectory>& trajectories) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << "task_id,step";
  for (const auto& n : env.state_names()) out << ',' << n;
  out << ',' << env.action_name() << ",reward,done\n";
  out.precision(10);
  for (const auto& traj : trajectories) {
    for (std::size_t t = 0; t < traj.steps.size(); ++t) {
      const auto& tr = traj.steps[t];
      out << traj.task_id << ',' << t;
      for (Eigen::Index i = 0; i < tr.x.size(); ++i) out << ',' << tr.x[i];
      out << ',' << tr.reward << ',' << (tr.done ? 1 : 0) << '\n';
    }
  }
}

double TabularMDP::max_row_sum_error() const {
  double worst = 0.0;
  for (const auto& P : transition)
    worst = std::max(worst, (P.rowwise().sum().array() - 1.0).abs().maxCoeff());
  return worst;
}

Eigen::RowVectorXd random_distribution(std::size_t n, Rng& rng) {
  Eigen::RowVectorXd row(static_cast<Eigen::Index>(n));
  for (Eigen::Index j = 0; j < row.size(); ++j) row[j] = -std::log(1.0 - rng.uniform());
  return row / row.sum();
}

std::pair<TabularMDP, TabularMDP> make_random_tabular_pair(const TabularSizes& sizes, double perturbation, Rng& rng) {
  if (sizes.n_states < 1 || sizes.n_actions < 1) throw std::invalid_argument("make_random_tabular_pair: empty MDP");
  if (!(perturbation >= 0.0 && perturbation <= 1.0))
    throw std::invalid_argument("make_random_tabular_pair: perturbation outside [0, 1]");
  const auto S = static_cast<Eigen::Index>(sizes.n_states);
  const auto A = static_cast<Eigen::Index>(sizes.n_actions);
  TabularMDP base;
  base.n_states = sizes.n_states;
  base.n_actions = sizes.n_actions;
  base.gamma = sizes.gamma;
  base.r_max = sizes.r_max;
  base.initial = Eigen::VectorXd::Constant(S, 1.0 / static_cast<double>(S));
  base.reward.resize(S, A);
  for (Eigen::Index i = 0; i < base.reward.size(); ++i) base.reward.data()[i] = rng.uniform(0.0, sizes.r_max);
  for (Eigen::Index a = 0; a < A; ++a) {
    Matrix P(S, S);
    for (Eigen::Index s = 0; s < S; ++s) P.row(s) = random_distribution(sizes.n_states, rng);
    base.transition.push_back(std::move(P));
  }
  TabularMDP other = base;
  if (perturbation == 0.0) return {std::move(base), std::move(other)};
  for (auto& P : other.transition) {
    for (Eigen::Index s = 0; s < S; ++s) {
      const Eigen::RowVectorXd q = random_distribution(sizes.n_states, rng);
      Eigen::RowVectorXd mixed = (1.0 - perturbation) * P.row(s) + perturbation * q;
      P.row(s) = mixed / mixed.sum();
    }
  }
  return {std::move(base), std::move(other)};
}

}  // namespace gssm::envs
