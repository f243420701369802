#include "gssm/policy.hpp"

#include "gssm/csv.hpp"

#include <cmath>
#include <memory>
#include <numeric>
#include <stdexcept>

namespace gssm::pol {

PolicyMode parse_policy_mode(std::string_view name) {
  if (name == "amortized") return PolicyMode::amortized;
  if (name == "ablation") return PolicyMode::ablation;
  throw std::invalid_argument("unknown policy mode '" + std::string(name) + "'");
}

std::string_view policy_mode_name(PolicyMode m) { return m == PolicyMode::amortized ? "amortized" : "ablation"; }

ActorConfig cartpole_actor_config(std::size_t dim_lat, PolicyMode mode, double max_force) {
  return {4, dim_lat, 50, mode, 0, max_force};
}

ActorConfig acrobot_actor_config(std::size_t dim_lat, PolicyMode mode) { return {4, dim_lat, 128, mode, 3, 1.0}; }

namespace {

std::size_t input_width_of(const ActorConfig& c) {
  return c.dim_s + (c.mode == PolicyMode::amortized ? c.dim_lat : 0);
}

ad::Var policy_input(ad::Tape& t, const ActorConfig& c, ad::Var s, ad::Var z) {
  (void)t;
  if (c.mode == PolicyMode::ablation) return s;
  if (z.rows() != s.rows()) throw std::invalid_argument("policy input: z rows must match state rows");
  return ad::concat_cols({s, z});
}

Matrix state_row(const envs::State& s) { return Matrix(s.transpose()); }

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw NonFiniteOutput(std::string(what) + ": non-finite network output");
}

Matrix standard_normal(Rng& rng, Eigen::Index r, Eigen::Index c) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal();
  return m;
}

}  // namespace

Actor::Actor(const ActorConfig& cfg, Rng& rng, const std::string& name) : cfg_(cfg) {
  if (discrete())
    net_ = nn::Mlp(name, {input_width_of(cfg), cfg.hidden, cfg.n_actions}, nn::Activation::relu, rng);
  else
    net_ = nn::Mlp(name, {input_width_of(cfg), cfg.hidden, 1}, nn::Activation::relu, rng, nn::Activation::tanh);
}

std::size_t Actor::input_width() const { return input_width_of(cfg_); }

ad::Var Actor::input(ad::Tape& t, ad::Var s, ad::Var z) const { return policy_input(t, cfg_, s, z); }

ad::Var Actor::action(ad::Tape& t, ad::Var s, ad::Var z, nn::Grad g) {
  if (discrete()) throw std::logic_error("Actor::action on a discrete policy");
  return net_.forward(t, input(t, s, z), g) * cfg_.max_action;
}

ad::Var Actor::log_probs(ad::Tape& t, ad::Var s, ad::Var z, nn::Grad g) {
  if (!discrete()) throw std::logic_error("Actor::log_probs on a continuous policy");
  return ad::log_softmax_rows(net_.forward(t, input(t, s, z), g));
}

double Actor::act(const envs::State& s, const Eigen::RowVectorXd& z) {
  ad::Tape t;
  const Matrix a = action(t, t.constant(state_row(s)), t.constant(Matrix(z)), nn::Grad::frozen).value();
  require_finite(a, "Actor::act");
  return a(0, 0);
}

Eigen::RowVectorXd Actor::action_log_probs(const envs::State& s, const Eigen::RowVectorXd& z) {
  ad::Tape t;
  const Matrix lp = log_probs(t, t.constant(state_row(s)), t.constant(Matrix(z)), nn::Grad::frozen).value();
  require_finite(lp, "Actor::action_log_probs");
  return lp.row(0);
}

ActionSample Actor::sample(const envs::State& s, const Eigen::RowVectorXd& z, Rng& rng) {
  const Eigen::RowVectorXd lp = action_log_probs(s, z);
  const double u = rng.uniform();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < lp.size(); ++i) {
    acc += std::exp(lp[i]);
    if (u < acc) return {static_cast<int>(i), lp[i]};
  }
  const auto last = static_cast<int>(lp.size() - 1);
  return {last, lp[last]};
}

Critic::Critic(const ActorConfig& cfg, Rng& rng, const std::string& name)
    : cfg_(cfg), net_(name, {input_width_of(cfg), cfg.hidden, 1}, nn::Activation::relu, rng) {}

ad::Var Critic::value(ad::Tape& t, ad::Var s, ad::Var z, nn::Grad g) {
  return net_.forward(t, policy_input(t, cfg_, s, z), g);
}

double Critic::value(const envs::State& s, const Eigen::RowVectorXd& z) {
  ad::Tape t;
  return value(t, t.constant(state_row(s)), t.constant(Matrix(z)), nn::Grad::frozen).item();
}

ad::Var cartpole_reward(ad::Tape& t, ad::Var s, const envs::CartpoleParams& p) {
  (void)t;
  const double l = p.pole_length;
  ad::Var theta = ad::slice_cols(s, 1, 2);
  ad::Var dx = ad::slice_cols(s, 0, 1) + l * ad::sin(theta);
  ad::Var dy = -l * ad::cos(theta) - l;
  return ad::exp((ad::square(dx) + ad::square(dy)) * (-1.0 / (p.sigma_c * p.sigma_c))) - 1.0;
}

ad::Var bptt_objective(ad::Tape& t, Actor& actor, ad::Var s0, ad::Var z, const ModelStep& step,
                       const RewardVar& reward, std::size_t horizon, double gamma, nn::Grad g) {
  if (z.rows() != s0.rows() && actor.config().mode == PolicyMode::amortized)
    throw std::invalid_argument("bptt_objective: one latent row per rollout");
  ad::Var s = s0;
  ad::Var total = t.constant(0.0);
  double discount = 1.0;
  for (std::size_t h = 0; h < horizon; ++h) {
    ad::Var a = actor.action(t, s, z, g);
    s = step(t, s, a);
    total = total + ad::mean(reward(t, s)) * discount;
    discount *= gamma;
  }
  return total;
}

ModelStep learned_model_step(dyn::DynamicsModel& model, ad::Var z, const envs::Environment& env, bool mean_only,
                             Rng noise) {
  auto stream = std::make_shared<Rng>(noise);
  const bool delta = env.delta_target();
  return [&model, z, delta, mean_only, stream](ad::Tape& t, ad::Var s, ad::Var a) {
    const enc::GaussianVar q = model.predict_gaussian(t, ad::concat_cols({s, a}), z, nn::Grad::frozen);
    ad::Var y = q.mean;
    if (!mean_only) {
      const Matrix eps = standard_normal(*stream, static_cast<Eigen::Index>(q.mean.rows()),
                                         static_cast<Eigen::Index>(q.mean.cols()));
      y = y + ad::exp(q.logvar * 0.5) * t.constant(eps);
    }
    return delta ? s + y : y;
  };
}

UpdateStats bptt_update(Actor& actor, ad::Adam& adam, const std::function<ad::Var(ad::Tape&)>& objective,
                        double clip_norm) {
  UpdateStats st;
  adam.zero_grad();
  ad::Tape t;
  ad::Var j = objective(t);
  st.objective = j.item();
  t.backward(-j);
  t.accumulate_param_grads();
  st.grad_norm = ad::clip_global_norm(actor.params(), clip_norm);
  if (!std::isfinite(st.grad_norm) || !std::isfinite(st.objective)) {
    adam.zero_grad();
    st.skipped = true;
    return st;
  }
  adam.step();
  return st;
}

Advantages gae(std::span<const double> rewards, std::span<const double> values, bool terminal, double bootstrap,
               double gamma, double lambda) {
  if (rewards.size() != values.size()) throw std::invalid_argument("gae: rewards and values differ in length");
  const auto n = static_cast<Eigen::Index>(rewards.size());
  Advantages out{Eigen::VectorXd(n), Eigen::VectorXd(n)};
  double running = 0.0;
  for (Eigen::Index i = n - 1; i >= 0; --i) {
    const auto u = static_cast<std::size_t>(i);
    const double next = i == n - 1 ? (terminal ? 0.0 : bootstrap) : values[u + 1];
    const double delta = rewards[u] + gamma * next - values[u];
    running = delta + gamma * lambda * running;
    out.advantage[i] = running;
    out.value_target[i] = running + values[u];
  }
  return out;
}

ad::Var clipped_surrogate(ad::Var ratio, ad::Var advantage, double clip) {
  return ad::minimum(ratio * advantage, ad::clamp(ratio, 1.0 - clip, 1.0 + clip) * advantage);
}

namespace {

struct FlatBatch {
  Matrix states, z, onehot;
  Eigen::VectorXd old_log_prob, advantage, target;
  std::size_t size() const { return static_cast<std::size_t>(states.rows()); }
};

FlatBatch flatten(std::span<const ModelTrajectory> batch, const PpoConfig& cfg, std::size_t n_actions) {
  std::size_t n = 0;
  for (const auto& tr : batch) n += tr.size();
  if (n == 0) throw std::invalid_argument("ppo_update: empty batch");
  const auto rows = static_cast<Eigen::Index>(n);
  FlatBatch f;
  f.states.resize(rows, batch.front().states.cols());
  f.z.resize(rows, batch.front().z.size());
  f.onehot = Matrix::Zero(rows, static_cast<Eigen::Index>(n_actions));
  f.old_log_prob.resize(rows);
  f.advantage.resize(rows);
  f.target.resize(rows);
  Eigen::Index r = 0;
  for (const auto& tr : batch) {
    const Advantages adv = gae(tr.rewards, tr.values, tr.terminal, tr.bootstrap_value, cfg.gamma, cfg.lambda);
    for (std::size_t i = 0; i < tr.size(); ++i, ++r) {
      const auto ii = static_cast<Eigen::Index>(i);
      f.states.row(r) = tr.states.row(ii);
      f.z.row(r) = tr.z;
      f.onehot(r, tr.actions[i]) = 1.0;
      f.old_log_prob[r] = tr.log_probs[i];
      f.advantage[r] = adv.advantage[ii];
      f.target[r] = adv.value_target[ii];
    }
  }
  const double mean = f.advantage.mean();
  const double sd = std::sqrt((f.advantage.array() - mean).square().mean());
  f.advantage = (f.advantage.array() - mean) / (sd > 1e-8 ? sd : 1.0);
  return f;
}

Matrix take(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

Matrix take(const Eigen::VectorXd& v, std::span<const std::size_t> idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), 1);
  for (std::size_t i = 0; i < idx.size(); ++i) out(static_cast<Eigen::Index>(i), 0) = v[static_cast<Eigen::Index>(idx[i])];
  return out;
}

// Chosen-action log-probabilities (N x 1) under the current actor.
ad::Var chosen_log_prob(ad::Tape& t, Actor& actor, const FlatBatch& f, std::span<const std::size_t> idx, nn::Grad g) {
  ad::Var lp = actor.log_probs(t, t.constant(take(f.states, idx)), t.constant(take(f.z, idx)), g);
  return ad::sum_over_cols(lp * t.constant(take(f.onehot, idx)));
}

}  // namespace

PpoStats ppo_update(Actor& actor, Critic& critic, ad::Adam& adam, std::span<const ModelTrajectory> batch,
                    const PpoConfig& cfg, Rng& rng) {
  if (!actor.discrete()) throw std::logic_error("ppo_update needs a discrete actor");
  const FlatBatch f = flatten(batch, cfg, actor.config().n_actions);
  PpoStats st;
  std::vector<std::size_t> all(f.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  {
    ad::Tape t;
    const Matrix lp = chosen_log_prob(t, actor, f, all, nn::Grad::frozen).value();
    st.initial_ratio_error = ((lp.col(0) - f.old_log_prob).array().exp() - 1.0).abs().maxCoeff();
  }

  std::vector<ad::Param*> params = actor.params();
  nn::append(params, critic.params());
  double sum_pl = 0, sum_vl = 0, sum_ent = 0, sum_gn = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<std::size_t> perm = rng.permutation(f.size());
    for (std::size_t begin = 0; begin < perm.size(); begin += cfg.minibatch) {
      const std::size_t end = std::min(perm.size(), begin + cfg.minibatch);
      std::vector<std::size_t> idx(perm.begin() + static_cast<std::ptrdiff_t>(begin),
                                   perm.begin() + static_cast<std::ptrdiff_t>(end));
      {
        // drop samples whose ratio is not finite
        ad::Tape probe;
        const Matrix lp = chosen_log_prob(probe, actor, f, idx, nn::Grad::frozen).value();
        std::vector<std::size_t> kept;
        for (std::size_t i = 0; i < idx.size(); ++i)
          if (std::isfinite(std::exp(lp(static_cast<Eigen::Index>(i), 0) - f.old_log_prob[static_cast<Eigen::Index>(idx[i])])))
            kept.push_back(idx[i]);
        st.dropped += idx.size() - kept.size();
        idx = std::move(kept);
      }
      if (idx.empty()) continue;

      ad::Tape t;
      ad::Var lp_all = actor.log_probs(t, t.constant(take(f.states, idx)), t.constant(take(f.z, idx)), nn::Grad::track);
      ad::Var chosen = ad::sum_over_cols(lp_all * t.constant(take(f.onehot, idx)));
      ad::Var ratio = ad::exp(chosen - t.constant(take(f.old_log_prob, idx)));
      ad::Var surrogate = ad::mean(clipped_surrogate(ratio, t.constant(take(f.advantage, idx)), cfg.clip));
      ad::Var entropy = ad::mean(-ad::sum_over_cols(ad::exp(lp_all) * lp_all));
      ad::Var v = critic.value(t, t.constant(take(f.states, idx)), t.constant(take(f.z, idx)), nn::Grad::track);
      ad::Var value_loss = ad::mean(ad::square(v - t.constant(take(f.target, idx))));
      ad::Var loss = -surrogate + value_loss * cfg.value_coef - entropy * cfg.entropy_coef;

      adam.zero_grad();
      t.backward(loss);
      t.accumulate_param_grads();
      const double gn = ad::clip_global_norm(params, cfg.clip_norm);
      if (!std::isfinite(gn) || !std::isfinite(loss.item())) {
        adam.zero_grad();
        continue;
      }
      adam.step();
      ++st.steps;
      sum_pl += -surrogate.item();
      sum_vl += value_loss.item();
      sum_ent += entropy.item();
      sum_gn += gn;
    }
  }
  if (st.steps > 0) {
    const double inv = 1.0 / static_cast<double>(st.steps);
    st.policy_loss = sum_pl * inv;
    st.value_loss = sum_vl * inv;
    st.entropy = sum_ent * inv;
    st.grad_norm = sum_gn * inv;
  }
  return st;
}

std::vector<ModelTrajectory> collect_model_rollouts(Actor& actor, Critic& critic, dyn::DynamicsModel& model,
                                                    const envs::Environment& env, std::span<const envs::State> starts,
                                                    const Matrix& z, std::size_t horizon, bool mean_only, Rng& rng) {
  if (!actor.discrete()) throw std::logic_error("collect_model_rollouts needs a discrete actor");
  const auto n = static_cast<Eigen::Index>(starts.size());
  if (z.rows() != n) throw std::invalid_argument("collect_model_rollouts: one latent row per start");
  std::vector<ModelTrajectory> out(starts.size());
  Matrix s(n, 4);
  for (Eigen::Index i = 0; i < n; ++i) {
    s.row(i) = starts[static_cast<std::size_t>(i)].transpose();
    out[static_cast<std::size_t>(i)].z = z.row(i);
    out[static_cast<std::size_t>(i)].states.resize(0, 4);
  }
  std::vector<bool> active(starts.size(), true);
  std::vector<std::vector<Eigen::RowVectorXd>> visited(starts.size());

  for (std::size_t h = 0; h < horizon; ++h) {
    ad::Tape t;
    ad::Var sv = t.constant(s), zv = t.constant(z);
    const Matrix lp = actor.log_probs(t, sv, zv, nn::Grad::frozen).value();
    const Matrix v = critic.value(t, sv, zv, nn::Grad::frozen).value();
    Matrix a(n, 1);
    std::vector<int> idx(starts.size());
    for (Eigen::Index i = 0; i < n; ++i) {
      const double u = rng.uniform();
      double acc = 0.0;
      int k = static_cast<int>(lp.cols()) - 1;
      for (Eigen::Index j = 0; j < lp.cols(); ++j) {
        acc += std::exp(lp(i, j));
        if (u < acc) {
          k = static_cast<int>(j);
          break;
        }
      }
      idx[static_cast<std::size_t>(i)] = k;
      a(i, 0) = env.action_value(k);
    }
    const enc::GaussianVar q = model.predict_gaussian(t, ad::concat_cols({sv, t.constant(a)}), zv, nn::Grad::frozen);
    Matrix y = q.mean.value();
    if (!mean_only) y += ((0.5 * q.logvar.value().array()).exp() * standard_normal(rng, n, y.cols()).array()).matrix();
    const Matrix next = env.delta_target() ? Matrix(s + y) : y;

    for (Eigen::Index i = 0; i < n; ++i) {
      const auto u = static_cast<std::size_t>(i);
      if (!active[u]) continue;
      ModelTrajectory& tr = out[u];
      visited[u].push_back(s.row(i));
      tr.actions.push_back(idx[u]);
      tr.log_probs.push_back(lp(i, idx[u]));
      tr.values.push_back(v(i, 0));
      const envs::State ns = next.row(i).transpose();
      if (!ns.allFinite()) {
        tr.rewards.push_back(-1.0);
        tr.terminal = true;
        active[u] = false;
        continue;
      }
      if (env.id() == envs::EnvId::acrobot) {
        tr.rewards.push_back(-1.0);
        if (envs::acrobot_height(ns, env.acrobot()) > 1.0) {
          tr.terminal = true;
          active[u] = false;
        }
      } else {
        tr.rewards.push_back(envs::cartpole_reward(ns, env.cartpole()));
      }
    }
    s = next;
    for (Eigen::Index i = 0; i < n; ++i)
      if (!active[static_cast<std::size_t>(i)]) s.row(i) = visited[static_cast<std::size_t>(i)].back();
  }

  for (Eigen::Index i = 0; i < n; ++i) {
    const auto u = static_cast<std::size_t>(i);
    ModelTrajectory& tr = out[u];
    tr.states.resize(static_cast<Eigen::Index>(visited[u].size()), 4);
    for (std::size_t r = 0; r < visited[u].size(); ++r) tr.states.row(static_cast<Eigen::Index>(r)) = visited[u][r];
    if (!tr.terminal) tr.bootstrap_value = critic.value(envs::State(s.row(i).transpose()), z.row(i));
  }
  return out;
}

void append_policy_metrics(const std::filesystem::path& file, std::span<const PolicyMetricsRow> rows) {
  csv::Writer w(file, {"iteration", "avg_return_normalized", "policy_loss", "value_loss", "entropy", "grad_norm"},
                true);
  for (const auto& r : rows) {
    w.field(r.iteration).field(r.avg_return_normalized).field(r.policy_loss).field(r.value_loss).field(r.entropy)
        .field(r.grad_norm);
    w.end();
  }
}

}  // namespace gssm::pol
