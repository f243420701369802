#include "gssm/bounds.hpp"

#include "gssm/csv.hpp"

#include <Eigen/LU>

#include <cmath>
#include <stdexcept>

namespace gssm::bounds {

namespace {

// Floating-point slack when comparing an exact quantity to its bound.
constexpr double kSlack = 1e-12;

Matrix transition_under(const TabularMDP& m, const Policy& pi) {
  Matrix p = Matrix::Zero(static_cast<Eigen::Index>(m.n_states), static_cast<Eigen::Index>(m.n_states));
  for (std::size_t a = 0; a < m.n_actions; ++a)
    p += pi.col(static_cast<Eigen::Index>(a)).asDiagonal() * m.transition[a];
  return p;
}

Eigen::VectorXd reward_under(const TabularMDP& m, const Policy& pi) {
  return (m.reward.array() * pi.array()).rowwise().sum();
}

std::pair<TabularMDP, TabularMDP> random_pair(const SweepConfig& cfg, Rng& rng) {
  envs::TabularSizes sizes;
  sizes.n_states = 2 + rng.index(cfg.max_states - 1);
  sizes.n_actions = 2 + rng.index(cfg.max_actions - 1);
  sizes.gamma = cfg.gamma;
  sizes.r_max = cfg.r_max;
  return envs::make_random_tabular_pair(sizes, rng.uniform(0.0, cfg.max_perturbation), rng);
}

}  // namespace

ValueResult exact_value(const TabularMDP& m, const Policy& pi) {
  if (!(m.gamma < 1.0)) throw std::invalid_argument("exact_value: gamma must be < 1");
  const auto n = static_cast<Eigen::Index>(m.n_states);
  const Matrix a = Matrix::Identity(n, n) - m.gamma * transition_under(m, pi);
  const Eigen::VectorXd r = reward_under(m, pi);
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(a);
  ValueResult out;
  out.v = lu.solve(r);
  if (!out.v.allFinite() || (a * out.v - r).cwiseAbs().maxCoeff() > 1e-9)
    throw std::logic_error("exact_value: singular Bellman system");
  out.j = m.initial.dot(out.v);
  return out;
}

Policy optimal_policy(const TabularMDP& m) {
  const auto s_n = static_cast<Eigen::Index>(m.n_states), a_n = static_cast<Eigen::Index>(m.n_actions);
  Policy pi = Policy::Zero(s_n, a_n);
  pi.col(0).setOnes();
  for (int iter = 0; iter < 1000; ++iter) {
    const Eigen::VectorXd v = exact_value(m, pi).v;
    Policy next = Policy::Zero(s_n, a_n);
    bool stable = true;
    for (Eigen::Index s = 0; s < s_n; ++s) {
      Eigen::Index cur = 0;
      pi.row(s).maxCoeff(&cur);
      Eigen::VectorXd q(a_n);
      for (Eigen::Index a = 0; a < a_n; ++a)
        q[a] = m.reward(s, a) + m.gamma * m.transition[static_cast<std::size_t>(a)].row(s).dot(v);
      Eigen::Index best = cur;
      // switch only on a strict improvement so ties cannot cycle
      for (Eigen::Index a = 0; a < a_n; ++a)
        if (q[a] > q[best] + 1e-12) best = a;
      if (best != cur) stable = false;
      next(s, best) = 1.0;
    }
    pi = next;
    if (stable) return pi;
  }
  throw std::logic_error("optimal_policy: policy iteration did not converge");
}

Policy random_policy(std::size_t n_states, std::size_t n_actions, Rng& rng) {
  Policy pi(static_cast<Eigen::Index>(n_states), static_cast<Eigen::Index>(n_actions));
  for (std::size_t s = 0; s < n_states; ++s) pi.row(static_cast<Eigen::Index>(s)) = envs::random_distribution(n_actions, rng);
  return pi;
}

Policy uniform_policy(std::size_t n_states, std::size_t n_actions) {
  return Policy::Constant(static_cast<Eigen::Index>(n_states), static_cast<Eigen::Index>(n_actions),
                          1.0 / static_cast<double>(n_actions));
}

Matrix tv_table(const TabularMDP& m, const TabularMDP& m_hat) {
  if (m.n_states != m_hat.n_states || m.n_actions != m_hat.n_actions)
    throw std::invalid_argument("tv_table: MDPs differ in shape");
  Matrix tv(static_cast<Eigen::Index>(m.n_states), static_cast<Eigen::Index>(m.n_actions));
  for (std::size_t a = 0; a < m.n_actions; ++a)
    tv.col(static_cast<Eigen::Index>(a)) = 0.5 * (m.transition[a] - m_hat.transition[a]).cwiseAbs().rowwise().sum();
  return tv;
}

double discrepancy_eps(const TabularMDP& m, const TabularMDP& m_hat, const Matrix& nu) {
  const Matrix tv = tv_table(m, m_hat);
  if (nu.size() == 0) return tv.mean();
  if (nu.rows() != tv.rows() || nu.cols() != tv.cols()) throw std::invalid_argument("discrepancy_eps: nu shape");
  if (std::abs(nu.sum() - 1.0) > 1e-9 || nu.minCoeff() < 0.0)
    throw std::invalid_argument("discrepancy_eps: nu is not a distribution");
  return (tv.array() * nu.array()).sum();
}

double lemma_bound(double eps, double r_max, double gamma) { return 2.0 * eps * r_max / ((1 - gamma) * (1 - gamma)); }

double theorem_bound(double eps, double r_max, double gamma) {
  return 4.0 * eps * r_max / ((1 - gamma) * (1 - gamma));
}

PairReport lemma1_check(const TabularMDP& m, const TabularMDP& m_hat, std::size_t n_policies, Rng& rng) {
  PairReport r;
  r.eps = discrepancy_eps(m, m_hat);
  r.sup_tv = tv_table(m, m_hat).maxCoeff();
  r.lemma_bound = lemma_bound(r.eps, m.r_max, m.gamma);
  r.theorem_bound = theorem_bound(r.eps, m.r_max, m.gamma);
  for (std::size_t i = 0; i < n_policies; ++i) {
    const Policy pi = random_policy(m.n_states, m.n_actions, rng);
    const double gap = std::abs(exact_value(m_hat, pi).j - exact_value(m, pi).j);
    r.max_gap = std::max(r.max_gap, gap);
    if (gap > r.lemma_bound + kSlack) ++r.violations;
  }
  return r;
}

PairReport theorem1_check(const TabularMDP& m, const TabularMDP& m_hat) {
  PairReport r;
  r.eps = discrepancy_eps(m, m_hat);
  r.sup_tv = tv_table(m, m_hat).maxCoeff();
  r.lemma_bound = lemma_bound(r.eps, m.r_max, m.gamma);
  r.theorem_bound = theorem_bound(r.eps, m.r_max, m.gamma);
  const Policy pi_m = optimal_policy(m), pi_hat = optimal_policy(m_hat);
  r.regret = exact_value(m, pi_m).j - exact_value(m, pi_hat).j;
  r.max_gap = std::abs(exact_value(m_hat, pi_hat).j - exact_value(m, pi_hat).j);
  if (r.regret > r.theorem_bound + kSlack) r.violations = 1;
  return r;
}

SweepResult run_sweep(const SweepConfig& cfg, Rng& rng) {
  if (cfg.max_states < 2 || cfg.max_actions < 2) throw std::invalid_argument("run_sweep: need at least 2 states and actions");
  SweepResult out;
  Rng lemma_rng = rng.split("lemma"), theorem_rng = rng.split("theorem");
  for (std::size_t i = 0; i < cfg.lemma_pairs; ++i) {
    Rng pair_rng = lemma_rng.split(i);
    auto [m, m_hat] = random_pair(cfg, pair_rng);
    Rng pol_rng = pair_rng.split("policies");
    PairReport r = lemma1_check(m, m_hat, cfg.policies, pol_rng);
    r.pair_id = static_cast<int>(i);
    out.lemma_violations += r.violations;
    out.mean_gap_worst += r.max_gap;
    out.mean_lemma_bound += r.lemma_bound;
    out.lemma.push_back(r);
  }
  for (std::size_t i = 0; i < cfg.theorem_pairs; ++i) {
    Rng pair_rng = theorem_rng.split(i);
    auto [m, m_hat] = random_pair(cfg, pair_rng);
    PairReport r = theorem1_check(m, m_hat);
    r.pair_id = static_cast<int>(i);
    out.theorem_violations += r.violations;
    out.mean_regret += r.regret;
    out.mean_theorem_bound += r.theorem_bound;
    out.theorem.push_back(r);
  }
  if (cfg.lemma_pairs > 0) {
    out.mean_gap_worst /= static_cast<double>(cfg.lemma_pairs);
    out.mean_lemma_bound /= static_cast<double>(cfg.lemma_pairs);
  }
  if (cfg.theorem_pairs > 0) {
    out.mean_regret /= static_cast<double>(cfg.theorem_pairs);
    out.mean_theorem_bound /= static_cast<double>(cfg.theorem_pairs);
  }
  return out;
}

void write_bound_report(const std::filesystem::path& file, const SweepResult& r) {
  csv::Writer w(file,
                {"pair_id", "eps", "max_gap", "lemma_bound", "regret", "theorem_bound", "violations", "check",
                 "sup_tv"},
                false);
  auto row = [&](std::string_view check, const PairReport& p) {
    w.field(p.pair_id).field(p.eps).field(p.max_gap).field(p.lemma_bound).field(p.regret).field(p.theorem_bound)
        .field(p.violations).field(check).field(p.sup_tv);
    w.end();
  };
  for (const auto& p : r.lemma) row("lemma", p);
  for (const auto& p : r.theorem) row("theorem", p);
}

}  // namespace gssm::bounds
