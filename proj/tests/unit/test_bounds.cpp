#include "gssm/bounds.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace gssm;
using namespace gssm::bounds;

namespace {

// Plain fixed-point iteration v <- r_pi + gamma P_pi v.
Eigen::VectorXd iterate_value(const TabularMDP& m, const Policy& pi) {
  const auto n = static_cast<Eigen::Index>(m.n_states);
  Eigen::VectorXd v = Eigen::VectorXd::Zero(n);
  for (int it = 0; it < 1000000; ++it) {
    Eigen::VectorXd next = Eigen::VectorXd::Zero(n);
    for (Eigen::Index s = 0; s < n; ++s)
      for (std::size_t a = 0; a < m.n_actions; ++a) {
        const double p = pi(s, static_cast<Eigen::Index>(a));
        next[s] += p * (m.reward(s, static_cast<Eigen::Index>(a)) + m.gamma * m.transition[a].row(s).dot(v));
      }
    const double change = (next - v).cwiseAbs().maxCoeff();
    v = next;
    if (change == 0.0) break;
  }
  return v;
}

TabularMDP single_state(double reward, double gamma) {
  TabularMDP m;
  m.n_states = 1;
  m.n_actions = 1;
  m.transition = {Matrix::Ones(1, 1)};
  m.reward = Matrix::Constant(1, 1, reward);
  m.gamma = gamma;
  m.initial = Eigen::VectorXd::Ones(1);
  return m;
}

}  // namespace

TEST_CASE("exact value on hand cases") {
  CHECK(exact_value(single_state(1.0, 0.9), uniform_policy(1, 1)).v[0] == doctest::Approx(10.0).epsilon(1e-14));
  Rng rng(1);
  auto [m, unused] = envs::make_random_tabular_pair({4, 3, 0.9, 1.0}, 0.0, rng);
  m.reward.setZero();
  CHECK(exact_value(m, random_policy(4, 3, rng)).v.cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(exact_value(single_state(1.0, 1.0), uniform_policy(1, 1)), std::invalid_argument);
}

TEST_CASE("exact value agrees with iterative evaluation") {
  Rng rng(2);
  for (int rep = 0; rep < 20; ++rep) {
    auto [m, unused] = envs::make_random_tabular_pair({4, 2 + rng.index(2), 0.9, 1.0}, 0.0, rng);
    const Policy pi = random_policy(m.n_states, m.n_actions, rng);
    CHECK((exact_value(m, pi).v - iterate_value(m, pi)).cwiseAbs().maxCoeff() <= 1e-8);
  }
}

TEST_CASE("policy iteration finds the best deterministic policy") {
  Rng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    auto [m, unused] = envs::make_random_tabular_pair({2 + rng.index(4), 2 + rng.index(2), 0.9, 1.0}, 0.0, rng);
    const Policy best = optimal_policy(m);
    const Eigen::VectorXd v_best = exact_value(m, best).v;
    std::size_t total = 1;
    for (std::size_t s = 0; s < m.n_states; ++s) total *= m.n_actions;
    for (std::size_t code = 0; code < total; ++code) {
      Policy pi = Policy::Zero(static_cast<Eigen::Index>(m.n_states), static_cast<Eigen::Index>(m.n_actions));
      std::size_t c = code;
      for (std::size_t s = 0; s < m.n_states; ++s, c /= m.n_actions)
        pi(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(c % m.n_actions)) = 1.0;
      CHECK(((exact_value(m, pi).v - v_best).array() <= 1e-10).all());
    }
  }
}

TEST_CASE("discrepancy") {
  Rng rng(4);
  SUBCASE("identical pair") {
    auto [m, m_hat] = envs::make_random_tabular_pair({5, 3, 0.9, 1.0}, 0.0, rng);
    CHECK(discrepancy_eps(m, m_hat) == 0.0);
    CHECK(tv_table(m, m_hat).maxCoeff() == 0.0);
  }
  SUBCASE("mixing toward disjoint support gives TV equal to the coefficient") {
    const double c = 0.3;
    TabularMDP m, m_hat;
    m.n_states = m_hat.n_states = 4;
    m.n_actions = m_hat.n_actions = 2;
    for (int a = 0; a < 2; ++a) {
      Matrix p = Matrix::Zero(4, 4), q = Matrix::Zero(4, 4);
      for (int s = 0; s < 4; ++s) {
        const double u = rng.uniform(0.1, 0.9), w = rng.uniform(0.1, 0.9);
        p(s, 0) = u;
        p(s, 1) = 1 - u;
        q(s, 2) = w;
        q(s, 3) = 1 - w;
      }
      m.transition.push_back(p);
      m_hat.transition.push_back((1 - c) * p + c * q);
    }
    CHECK(discrepancy_eps(m, m_hat) == doctest::Approx(c).epsilon(1e-14));
    CHECK((tv_table(m, m_hat).array() - c).abs().maxCoeff() <= 1e-14);
  }
  SUBCASE("eps stays in [0, 1]") {
    for (int rep = 0; rep < 100; ++rep) {
      auto [m, m_hat] = envs::make_random_tabular_pair({5, 3, 0.9, 1.0}, rng.uniform(), rng);
      const double e = discrepancy_eps(m, m_hat);
      CHECK(e >= 0.0);
      CHECK(e <= 1.0);
    }
  }
  SUBCASE("explicit occupancy") {
    auto [m, m_hat] = envs::make_random_tabular_pair({3, 2, 0.9, 1.0}, 0.4, rng);
    Matrix nu = Matrix::Zero(3, 2);
    nu(1, 1) = 1.0;
    CHECK(discrepancy_eps(m, m_hat, nu) == doctest::Approx(tv_table(m, m_hat)(1, 1)));
    CHECK(discrepancy_eps(m, m_hat, Matrix::Constant(3, 2, 1.0 / 6)) == doctest::Approx(discrepancy_eps(m, m_hat)));
    CHECK_THROWS_AS(discrepancy_eps(m, m_hat, Matrix::Ones(3, 2)), std::invalid_argument);
  }
}

TEST_CASE("bound constants") {
  CHECK(lemma_bound(0.05, 1.0, 0.9) == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(theorem_bound(0.05, 1.0, 0.9) == doctest::Approx(2.0 * lemma_bound(0.05, 1.0, 0.9)));
}

TEST_CASE("identical models leave no gap and no regret") {
  Rng rng(5);
  auto [m, m_hat] = envs::make_random_tabular_pair({5, 3, 0.9, 1.0}, 0.0, rng);
  const PairReport l = lemma1_check(m, m_hat, 200, rng);
  CHECK(l.max_gap == 0.0);
  CHECK(l.lemma_bound == 0.0);
  CHECK(l.violations == 0);
  const PairReport t = theorem1_check(m, m_hat);
  CHECK(t.regret == 0.0);
  CHECK(t.violations == 0);
}

TEST_CASE("regret is never negative") {
  Rng rng(6);
  for (int rep = 0; rep < 50; ++rep) {
    auto [m, m_hat] = envs::make_random_tabular_pair({5, 3, 0.9, 1.0}, rng.uniform(0, 0.5), rng);
    CHECK(theorem1_check(m, m_hat).regret >= -1e-12);
  }
}

TEST_CASE("small sweep has no violations") {
  Rng rng(7);
  SweepConfig cfg;
  cfg.lemma_pairs = 10;
  cfg.policies = 200;
  cfg.theorem_pairs = 50;
  const SweepResult r = run_sweep(cfg, rng);
  CHECK(r.lemma_violations == 0);
  CHECK(r.theorem_violations == 0);
  CHECK(r.averaged_lemma_holds());
  CHECK(r.averaged_theorem_holds());
  CHECK(r.lemma.size() == 10);
  CHECK(r.theorem.size() == 50);
}

TEST_CASE("shrinking the perturbation shrinks eps and the worst gap") {
  Rng pick(8);
  for (int rep = 0; rep < 5; ++rep) {
    const std::uint64_t seed = 100 + static_cast<std::uint64_t>(rep);
    std::vector<double> eps, gaps;
    for (int level = 1; level <= 10; ++level) {
      Rng rng(seed);
      auto [m, m_hat] = envs::make_random_tabular_pair({5, 3, 0.9, 1.0}, 0.05 * level, rng);
      Rng policies(seed + 1000);
      eps.push_back(discrepancy_eps(m, m_hat));
      gaps.push_back(lemma1_check(m, m_hat, 500, policies).max_gap);
    }
    for (std::size_t i = 1; i < eps.size(); ++i) CHECK(eps[i] > eps[i - 1]);
    // the worst gap follows the same trend end to end
    CHECK(gaps.front() < gaps.back());
    int rises = 0;
    for (std::size_t i = 1; i < gaps.size(); ++i) rises += gaps[i] > gaps[i - 1] ? 1 : 0;
    CAPTURE(rises);
    CHECK(rises >= 8);
  }
}

TEST_CASE("bound report csv") {
  Rng rng(9);
  SweepConfig cfg;
  cfg.lemma_pairs = 2;
  cfg.policies = 10;
  cfg.theorem_pairs = 3;
  const SweepResult r = run_sweep(cfg, rng);
  const auto file = std::filesystem::temp_directory_path() / "gssm_bound_report.csv";
  write_bound_report(file, r);
  std::ifstream in(file);
  std::string header, line;
  std::getline(in, header);
  CHECK(header == "pair_id,eps,max_gap,lemma_bound,regret,theorem_bound,violations,check,sup_tv");
  int n = 0;
  while (std::getline(in, line)) ++n;
  CHECK(n == 5);
  std::filesystem::remove(file);
}
