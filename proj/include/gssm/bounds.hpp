#pragma once

// Exact checks of the model-discrepancy performance-gap and regret bounds
// on small tabular MDP pairs (real M, surrogate M-hat sharing S, A, R, gamma).

#include "gssm/envs.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace gssm::bounds {

using envs::TabularMDP;

/// Stochastic policy: S x A, rows sum to one.
using Policy = Matrix;

struct ValueResult {
  Eigen::VectorXd v;  // per-state values
  double j = 0.0;     // initial-distribution expectation
};

/// Solves (I - gamma P_pi) v = r_pi directly.
ValueResult exact_value(const TabularMDP& m, const Policy& pi);

/// Deterministic optimal policy (one-hot rows) by exact policy iteration.
Policy optimal_policy(const TabularMDP& m);

Policy random_policy(std::size_t n_states, std::size_t n_actions, Rng& rng);
Policy uniform_policy(std::size_t n_states, std::size_t n_actions);

/// Per-(s, a) total-variation distance between the two transition kernels, S x A.
Matrix tv_table(const TabularMDP& m, const TabularMDP& m_hat);

/// sum nu(s, a) TV(s, a); an empty nu means uniform over (s, a).
double discrepancy_eps(const TabularMDP& m, const TabularMDP& m_hat, const Matrix& nu = {});

double lemma_bound(double eps, double r_max, double gamma);    // 2 eps R / (1 - gamma)^2
double theorem_bound(double eps, double r_max, double gamma);  // 4 eps R / (1 - gamma)^2

struct PairReport {
  int pair_id = 0;
  double eps = 0.0;     // uniform-nu expected TV
  double sup_tv = 0.0;  // max over (s, a)
  double max_gap = 0.0;
  double lemma_bound = 0.0;
  double regret = 0.0;  // J_M(pi_M) - J_M(pi_Mhat)
  double theorem_bound = 0.0;
  std::size_t violations = 0;
};

/// Exact |J_Mhat(pi) - J_M(pi)| for `n_policies` random policies against the
/// pair's own bound.
PairReport lemma1_check(const TabularMDP& m, const TabularMDP& m_hat, std::size_t n_policies, Rng& rng);

/// Regret of the surrogate-optimal policy in the real MDP against the bound.
PairReport theorem1_check(const TabularMDP& m, const TabularMDP& m_hat);

struct SweepConfig {
  std::size_t lemma_pairs = 100;
  std::size_t policies = 10000;
  std::size_t theorem_pairs = 500;
  std::size_t max_states = 5;
  std::size_t max_actions = 3;
  double gamma = 0.9;
  double r_max = 1.0;
  double max_perturbation = 0.5;
};

struct SweepResult {
  std::vector<PairReport> lemma;
  std::vector<PairReport> theorem;
  std::size_t lemma_violations = 0;
  std::size_t theorem_violations = 0;
  // averaged forms over the sampled pairs
  double mean_gap_worst = 0.0;  // mean over pairs of the max gap
  double mean_lemma_bound = 0.0;
  double mean_regret = 0.0;
  double mean_theorem_bound = 0.0;
  [[nodiscard]] bool averaged_lemma_holds() const { return mean_gap_worst <= mean_lemma_bound; }
  [[nodiscard]] bool averaged_theorem_holds() const { return mean_regret <= mean_theorem_bound; }
};

/// Random pairs with |S| in [2, max_states], |A| in [2, max_actions] and
/// perturbation uniform in [0, max_perturbation].
SweepResult run_sweep(const SweepConfig& cfg, Rng& rng);

/// Header: pair_id,eps,max_gap,lemma_bound,regret,theorem_bound,violations,check,sup_tv
void write_bound_report(const std::filesystem::path& file, const SweepResult& r);

}  // namespace gssm::bounds
