#include "gssm/grad_check.hpp"
#include "gssm/policy.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace gssm;
using namespace gssm::pol;
using gssm::testing::random_matrix;

namespace {

envs::State random_state(Rng& rng, double scale = 1.0) {
  envs::State s;
  for (int i = 0; i < 4; ++i) s[i] = scale * rng.normal();
  return s;
}

Eigen::RowVectorXd random_row(Rng& rng, std::size_t n) { return random_matrix(rng, 1, n).row(0); }

using gssm::testing::LinearToy;

struct SmallDyn {
  enc::EncoderConfig ec;
  dyn::DecoderConfig dc;
  SmallDyn() {
    ec.dim_latxy = 8;
    ec.dim_lat = 3;
    dc.dim_lat = 3;
    dc.hidden_layers = 1;
    dc.dim_h = 16;
  }
};

// Random-action cartpole data from one task and a small model fitted to it.
dyn::DynamicsModel fit_single_task_model(std::uint64_t seed, std::vector<envs::State>& starts) {
  Rng rng(seed);
  const envs::Environment env(envs::EnvId::cartpole);
  const envs::TaskSpec spec{envs::EnvId::cartpole, 1.5, 0.85, 0, 0};
  Matrix x(0, 5), y(0, 4);
  Rng act = rng.split("act");
  for (int ep = 0; ep < 8; ++ep) {
    Rng ep_rng = rng.split(static_cast<std::uint64_t>(ep));
    const auto traj = envs::run_episode(env, spec, [&](const envs::State&) { return act.uniform(-10, 10); }, ep_rng);
    for (const auto& tr : traj.steps) {
      x.conservativeResize(x.rows() + 1, Eigen::NoChange);
      y.conservativeResize(y.rows() + 1, Eigen::NoChange);
      x.row(x.rows() - 1) = tr.x.transpose();
      y.row(y.rows() - 1) = tr.y.transpose();
      starts.push_back(tr.x.head<4>());
    }
  }
  SmallDyn d;
  Rng init = rng.split("init");
  dyn::DynamicsModel model(enc::EncoderKind::gssm, d.ec, d.dc, init);
  model.stats() = dyn::fit_normalization(x, y);
  ad::Adam adam(model.params(), {.lr = 3e-3});
  Rng split = rng.split("split");
  for (int it = 0; it < 150; ++it) {
    const auto perm = split.permutation(static_cast<std::size_t>(x.rows()));
    dyn::TaskItem item;
    const std::size_t nc = 20, nt = 40;
    item.xc.resize(nc, 5);
    item.yc.resize(nc, 4);
    item.xt.resize(nt, 5);
    item.yt.resize(nt, 4);
    for (std::size_t i = 0; i < nc; ++i) {
      item.xc.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(perm[i]));
      item.yc.row(static_cast<Eigen::Index>(i)) = y.row(static_cast<Eigen::Index>(perm[i]));
    }
    for (std::size_t i = 0; i < nt; ++i) {
      item.xt.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(perm[nc + i]));
      item.yt.row(static_cast<Eigen::Index>(i)) = y.row(static_cast<Eigen::Index>(perm[nc + i]));
    }
    const std::vector<dyn::TaskItem> batch{item};
    ad::Tape t;
    adam.zero_grad();
    const auto r = model.elbo(t, batch, 1, split.split(static_cast<std::uint64_t>(it)), nn::Grad::track);
    t.backward(r.loss);
    t.accumulate_param_grads();
    adam.step();
  }
  return model;
}

}  // namespace

TEST_CASE("policy modes parse") {
  CHECK(parse_policy_mode("amortized") == PolicyMode::amortized);
  CHECK(parse_policy_mode("ablation") == PolicyMode::ablation);
  CHECK_THROWS_AS(parse_policy_mode("both"), std::invalid_argument);
  CHECK(policy_mode_name(PolicyMode::ablation) == "ablation");
}

TEST_CASE("input width follows the mode") {
  Rng rng(1);
  CHECK(Actor(cartpole_actor_config(16, PolicyMode::amortized), rng).input_width() == 20);
  CHECK(Actor(cartpole_actor_config(16, PolicyMode::ablation), rng).input_width() == 4);
  Actor a(acrobot_actor_config(16, PolicyMode::amortized), rng);
  CHECK(a.net().layers().front().weight.value.rows() == 20);
  CHECK(a.net().layers().front().weight.value.cols() == 128);
  Actor b(acrobot_actor_config(16, PolicyMode::ablation), rng);
  CHECK(b.net().layers().front().weight.value.rows() == 4);
  CHECK(Actor(cartpole_actor_config(16, PolicyMode::amortized), rng).net().layers().front().out() == 50);
}

TEST_CASE("zero weights give a neutral action") {
  Rng rng(2);
  Actor cart(cartpole_actor_config(3, PolicyMode::amortized), rng);
  Actor acro(acrobot_actor_config(3, PolicyMode::amortized), rng);
  for (auto* p : cart.params()) p->value.setZero();
  for (auto* p : acro.params()) p->value.setZero();
  const envs::State s = random_state(rng);
  const Eigen::RowVectorXd z = random_row(rng, 3);
  CHECK(cart.act(s, z) == 0.0);
  const Eigen::RowVectorXd lp = acro.action_log_probs(s, z);
  for (Eigen::Index i = 0; i < 3; ++i) CHECK(std::exp(lp[i]) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("force stays in range and probabilities normalize") {
  Rng rng(3);
  Actor cart(cartpole_actor_config(3, PolicyMode::amortized), rng);
  Actor acro(acrobot_actor_config(3, PolicyMode::amortized), rng);
  for (auto* p : cart.params()) p->value *= 50.0;
  for (auto* p : acro.params()) p->value *= 20.0;
  for (int i = 0; i < 200; ++i) {
    const envs::State s = random_state(rng, 10.0);
    const Eigen::RowVectorXd z = random_row(rng, 3);
    CHECK(std::abs(cart.act(s, z)) <= 10.0);
    CHECK(std::abs(acro.action_log_probs(s, z).array().exp().sum() - 1.0) <= 1e-12);
    const ActionSample a = acro.sample(s, z, rng);
    CHECK(a.index >= 0);
    CHECK(a.index <= 2);
  }
}

TEST_CASE("categorical sampling follows the probabilities") {
  Rng rng(4);
  Actor acro(acrobot_actor_config(2, PolicyMode::amortized), rng);
  const envs::State s = random_state(rng);
  const Eigen::RowVectorXd z = random_row(rng, 2);
  const Eigen::RowVectorXd p = acro.action_log_probs(s, z).array().exp();
  const int n = 30000;
  Eigen::Vector3d count = Eigen::Vector3d::Zero();
  for (int i = 0; i < n; ++i) count[acro.sample(s, z, rng).index] += 1.0;
  for (int k = 0; k < 3; ++k) {
    const double se = std::sqrt(p[k] * (1 - p[k]) / n);
    CHECK(std::abs(count[k] / n - p[k]) <= 4 * se);
  }
}

TEST_CASE("ablation keeps the rollout streams of the amortized run") {
  const Rng master(5);
  Rng init_a = master.split("policy"), init_b = master.split("policy");
  Actor amortized(cartpole_actor_config(16, PolicyMode::amortized), init_a);
  Actor ablation(cartpole_actor_config(16, PolicyMode::ablation), init_b);
  CHECK(amortized.input_width() != ablation.input_width());
  Rng ra = master.split("rollouts"), rb = master.split("rollouts");
  for (int i = 0; i < 10; ++i) CHECK(ra() == rb());
}

TEST_CASE("tape cartpole reward matches the environment") {
  Rng rng(6);
  const Matrix s = random_matrix(rng, 50, 4, 2.0);
  ad::Tape t;
  const Matrix r = cartpole_reward(t, t.constant(s)).value();
  for (Eigen::Index i = 0; i < s.rows(); ++i)
    CHECK(r(i, 0) == doctest::Approx(envs::cartpole_reward(s.row(i).transpose())).epsilon(1e-14));
}

TEST_CASE("bptt objective edge cases") {
  Rng rng(7);
  Actor actor(cartpole_actor_config(2, PolicyMode::amortized), rng);
  LinearToy toy(rng);
  const Matrix s0 = random_matrix(rng, 3, 4), z = random_matrix(rng, 3, 2);

  SUBCASE("zero reward") {
    RewardVar zero = [](ad::Tape& t, ad::Var s) { return ad::sum_over_cols(s) * 0.0 + 0.0 * t.constant(0.0); };
    ad::LossFn loss = [&](ad::Tape& t) {
      return bptt_objective(t, actor, t.constant(s0), t.constant(z), toy.step(), zero, 5, 0.95, nn::Grad::track);
    };
    ad::Tape t;
    CHECK(loss(t).item() == 0.0);
    for (auto* p : actor.params()) p->zero_grad();
    ad::Tape t2;
    t2.backward(loss(t2));
    t2.accumulate_param_grads();
    for (auto* p : actor.params()) CHECK(p->grad.cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("gamma zero keeps only the first reward") {
    ad::Tape t;
    const double j = bptt_objective(t, actor, t.constant(s0), t.constant(z), toy.step(), toy.reward(), 6, 0.0,
                                    nn::Grad::frozen)
                         .item();
    ad::Tape t1;
    const double first = bptt_objective(t1, actor, t1.constant(s0), t1.constant(z), toy.step(), toy.reward(), 1,
                                        0.0, nn::Grad::frozen)
                             .item();
    CHECK(j == first);
  }
  SUBCASE("one latent row per rollout") {
    ad::Tape t;
    CHECK_THROWS_AS(bptt_objective(t, actor, t.constant(s0), t.constant(Matrix(z.topRows(1))), toy.step(),
                                   toy.reward(), 2, 0.9, nn::Grad::frozen),
                    std::invalid_argument);
  }
}

TEST_CASE("bptt gradients through a linear toy") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(10 + seed);
    Actor actor(cartpole_actor_config(2, PolicyMode::amortized), rng);
    LinearToy toy(rng);
    const Matrix s0 = random_matrix(rng, 4, 4, 0.5), z = random_matrix(rng, 4, 2);
    for (std::size_t horizon : {1u, 10u}) {
      ad::LossFn j = [&](ad::Tape& t) {
        return bptt_objective(t, actor, t.constant(s0), t.constant(z), toy.step(), toy.reward(), horizon, 0.95,
                              nn::Grad::track);
      };
      for (auto* p : actor.params()) {
        CAPTURE(p->name);
        CAPTURE(horizon);
        const auto r = ad::grad_check_param(j, *p);
        CAPTURE(r.max_rel_error);
        CHECK(r.passed(1e-4));
      }
    }
  }
}

TEST_CASE("bptt gradients through a learned model") {
  Rng rng(20);
  SmallDyn d;
  dyn::DynamicsModel model(enc::EncoderKind::gssm, d.ec, d.dc, rng);
  const envs::Environment env(envs::EnvId::cartpole);
  Actor actor(cartpole_actor_config(3, PolicyMode::amortized), rng);
  const Matrix s0 = random_matrix(rng, 3, 4, 0.3), z = random_matrix(rng, 3, 3);
  for (bool mean_only : {true, false}) {
    ad::LossFn j = [&](ad::Tape& t) {
      ad::Var zv = t.constant(z);
      return bptt_objective(t, actor, t.constant(s0), zv, learned_model_step(model, zv, env, mean_only, Rng(21)),
                            [](ad::Tape& tt, ad::Var s) { return cartpole_reward(tt, s); }, 8, 0.95,
                            nn::Grad::track);
    };
    for (auto* p : actor.params()) {
      CAPTURE(p->name);
      CAPTURE(mean_only);
      const auto r = ad::grad_check_param(j, *p);
      CAPTURE(r.max_rel_error);
      CHECK(r.passed(1e-4));
    }
  }
}

TEST_CASE("bptt improves the model return of a fixed task") {
  int improved = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::vector<envs::State> starts;
    dyn::DynamicsModel model = fit_single_task_model(300 + seed, starts);
    const envs::Environment env(envs::EnvId::cartpole);
    Rng rng(400 + seed);
    Actor actor(cartpole_actor_config(3, PolicyMode::amortized), rng);
    ad::Adam adam(actor.params(), {.lr = 1e-3});
    const std::size_t k = 8;
    Matrix s0(k, 4);
    for (std::size_t i = 0; i < k; ++i) s0.row(static_cast<Eigen::Index>(i)) = starts[i * 7].transpose();
    const Matrix z = Matrix::Zero(k, 3);
    auto objective = [&](ad::Tape& t, Rng noise) {
      ad::Var zv = t.constant(z);
      return bptt_objective(t, actor, t.constant(s0), zv, learned_model_step(model, zv, env, false, noise),
                            [](ad::Tape& tt, ad::Var s) { return cartpole_reward(tt, s); }, 25, 0.95,
                            nn::Grad::track);
    };
    auto evaluate = [&] {
      ad::Tape t;
      return objective(t, Rng(999)).item();
    };
    const double before = evaluate();
    for (std::uint64_t u = 0; u < 50; ++u)
      bptt_update(actor, adam, [&](ad::Tape& t) { return objective(t, rng.split(u)); }, 10.0);
    const double after = evaluate();
    CAPTURE(before);
    CAPTURE(after);
    if (after > before) ++improved;
  }
  CHECK(improved >= 4);
}

TEST_CASE("generalized advantage estimates") {
  SUBCASE("lambda one with zero values is the discounted return-to-go") {
    const std::vector<double> r{1.0, -2.0, 0.5, 3.0}, v(4, 0.0);
    const auto a = gae(r, v, true, 0.0, 0.9, 1.0);
    double ret = 0.0;
    for (int i = 3; i >= 0; --i) {
      ret = r[static_cast<std::size_t>(i)] + 0.9 * ret;
      CHECK(a.advantage[i] == doctest::Approx(ret).epsilon(1e-14));
    }
  }
  SUBCASE("a perfect critic leaves nothing to explain") {
    const std::vector<double> r{1.0, 1.0, 1.0};
    const std::vector<double> v{1.0 + 0.9 + 0.81, 1.0 + 0.9, 1.0};
    const auto a = gae(r, v, true, 0.0, 0.9, 0.95);
    CHECK(a.advantage.cwiseAbs().maxCoeff() <= 1e-14);
  }
  SUBCASE("three-step hand example") {
    const std::vector<double> r{0.5, -1.0, 2.0}, v{0.3, -0.2, 0.7};
    const double g = 0.99, l = 0.95, boot = 0.4;
    const double d0 = r[0] + g * v[1] - v[0];
    const double d1 = r[1] + g * v[2] - v[1];
    const double d2 = r[2] + g * boot - v[2];
    const auto a = gae(r, v, false, boot, g, l);
    CHECK(a.advantage[0] == doctest::Approx(d0 + g * l * d1 + g * g * l * l * d2).epsilon(1e-14));
    CHECK(a.advantage[1] == doctest::Approx(d1 + g * l * d2).epsilon(1e-14));
    CHECK(a.advantage[2] == doctest::Approx(d2).epsilon(1e-14));
    CHECK(a.value_target[1] == doctest::Approx(a.advantage[1] + v[1]).epsilon(1e-14));
  }
}

TEST_CASE("clipped surrogate") {
  ad::Tape t;
  const Matrix adv = (Matrix(4, 1) << 1.0, -2.0, 0.5, 3.0).finished();
  CHECK(ad::mean(clipped_surrogate(t.constant(Matrix::Ones(4, 1)), t.constant(adv), 0.2)).item() ==
        doctest::Approx(adv.mean()));

  ad::Var ratio = t.leaf(Matrix::Constant(1, 1, 1.5));
  t.backward(ad::sum(clipped_surrogate(ratio, t.constant(Matrix::Constant(1, 1, 2.0)), 0.2)));
  CHECK(t.adjoint(ratio)(0, 0) == 0.0);

  ad::Var inside = t.leaf(Matrix::Constant(1, 1, 1.1));
  t.backward(ad::sum(clipped_surrogate(inside, t.constant(Matrix::Constant(1, 1, 2.0)), 0.2)));
  CHECK(t.adjoint(inside)(0, 0) == doctest::Approx(2.0));
}

TEST_CASE("single-sample update direction follows the advantage sign") {
  for (double a : {1.5, -0.7}) {
    ad::Tape t;
    ad::Var logits = t.leaf((Matrix(1, 3) << 0.2, -0.1, 0.4).finished());
    ad::Var lp = ad::log_softmax_rows(logits);
    ad::Var chosen = ad::sum_over_cols(lp * t.constant((Matrix(1, 3) << 0, 1, 0).finished()));
    const double old = chosen.item();
    ad::Var ratio = ad::exp(chosen - old);
    t.backward(ad::sum(clipped_surrogate(ratio, t.constant(Matrix::Constant(1, 1, a)), 0.2)));
    const double g = t.adjoint(logits)(0, 1);
    CHECK((g > 0) == (a > 0));
  }
}

TEST_CASE("model rollouts and the ppo update") {
  Rng rng(30);
  SmallDyn d;
  dyn::DynamicsModel model(enc::EncoderKind::gssm, d.ec, d.dc, rng);
  const envs::Environment env(envs::EnvId::acrobot);
  Actor actor(acrobot_actor_config(3, PolicyMode::amortized), rng);
  Critic critic(acrobot_actor_config(3, PolicyMode::amortized), rng);
  std::vector<envs::State> starts;
  for (int i = 0; i < 6; ++i) starts.push_back(env.reset(rng));
  const Matrix z = random_matrix(rng, 6, 3);
  const auto batch = collect_model_rollouts(actor, critic, model, env, starts, z, 20, false, rng);
  REQUIRE(batch.size() == 6);
  for (const auto& tr : batch) {
    CHECK(tr.size() >= 1);
    CHECK(tr.size() <= 20);
    CHECK(static_cast<std::size_t>(tr.states.rows()) == tr.size());
    for (int a : tr.actions) CHECK((a >= 0 && a <= 2));
    for (double r : tr.rewards) CHECK(r == -1.0);
    if (tr.size() < 20) CHECK(tr.terminal);
  }
  CHECK(batch[0].z == z.row(0));

  std::vector<ad::Param*> params = actor.params();
  nn::append(params, critic.params());
  ad::Adam adam(params, {.lr = 3e-4});
  PpoConfig cfg;
  cfg.epochs = 2;
  const auto st = ppo_update(actor, critic, adam, batch, cfg, rng);
  CHECK(st.initial_ratio_error <= 1e-10);
  CHECK(st.steps > 0);
  CHECK(st.dropped == 0);
  CHECK(std::isfinite(st.policy_loss));
  CHECK(st.entropy > 0.0);
  CHECK(st.entropy <= std::log(3.0) + 1e-12);
}

TEST_CASE("policy metrics csv") {
  const auto file = std::filesystem::temp_directory_path() / "gssm_policy_metrics.csv";
  std::filesystem::remove(file);
  const std::vector<PolicyMetricsRow> rows{{3, -0.5, 0.1, 0.2, 1.0, 4.0}};
  append_policy_metrics(file, rows);
  std::ifstream in(file);
  std::string header;
  std::getline(in, header);
  CHECK(header == "iteration,avg_return_normalized,policy_loss,value_loss,entropy,grad_norm");
  std::filesystem::remove(file);
}
