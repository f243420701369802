#include "gssm/meta.hpp"

#include "gssm/checkpoint.hpp"
#include "gssm/csv.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numeric>
#include <stdexcept>

namespace gssm::meta {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Matrix stack_rows(const Matrix& a, const Matrix& b) {
  if (a.rows() == 0) return b;
  Matrix out(a.rows() + b.rows(), b.cols());
  out << a, b;
  return out;
}

Matrix trajectory_x(const envs::Trajectory& t) {
  Matrix m(static_cast<Eigen::Index>(t.size()), t.steps.empty() ? 0 : t.steps[0].x.size());
  for (std::size_t i = 0; i < t.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = t.steps[i].x.transpose();
  return m;
}

Matrix trajectory_y(const envs::Trajectory& t) {
  Matrix m(static_cast<Eigen::Index>(t.size()), t.steps.empty() ? 0 : t.steps[0].y.size());
  for (std::size_t i = 0; i < t.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = t.steps[i].y.transpose();
  return m;
}

Eigen::RowVectorXd sample_z(const enc::DiagGaussian& q, Rng& rng) {
  Eigen::RowVectorXd z(q.mean.cols());
  for (Eigen::Index j = 0; j < z.size(); ++j) z[j] = q.mean(0, j) + std::exp(0.5 * q.logvar(0, j)) * rng.normal();
  return z;
}

enc::EncoderConfig encoder_config(const cfg::RunConfig& c) {
  enc::EncoderConfig e;
  e.dim_x = 5;
  e.dim_y = 4;
  e.dim_latxy = c.model.dim_latxy;
  e.dim_lat = c.model.dim_lat;
  e.layers = c.model.mp_layers;
  e.self_inclusive = c.model.self_inclusive;
  e.var_floor = c.model.var_floor;
  return e;
}

dyn::DecoderConfig decoder_config(const cfg::RunConfig& c) {
  dyn::DecoderConfig d;
  d.dim_x = 5;
  d.dim_y = 4;
  d.dim_lat = c.model.dim_lat;
  d.hidden_layers = c.model.decoder_layers;
  d.dim_h = c.model.dim_h;
  d.var_floor = c.model.var_floor;
  return d;
}

dyn::DynamicsModel make_model(const cfg::RunConfig& c) {
  Rng rng = Rng(c.seed).split("init").split("model");
  return dyn::DynamicsModel(c.encoder, encoder_config(c), decoder_config(c), rng);
}

pol::ActorConfig actor_config(const cfg::RunConfig& c, const envs::Environment& env) {
  return env.discrete() ? pol::acrobot_actor_config(c.model.dim_lat, c.policy_mode)
                        : pol::cartpole_actor_config(c.model.dim_lat, c.policy_mode, env.cartpole().max_force);
}

std::vector<double> to_vector(const Eigen::RowVectorXd& v) { return {v.data(), v.data() + v.size()}; }

Eigen::RowVectorXd from_json(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  Eigen::RowVectorXd out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[i];
  return out;
}

// Real states from a buffer: episode starts with probability p_start, else any stored state.
envs::State draw_start(const std::vector<envs::State>& starts, const std::vector<envs::State>& all, double p_start,
                       Rng& rng) {
  if (rng.uniform() < p_start) return starts[rng.index(starts.size())];
  return all[rng.index(all.size())];
}

struct BufferView {
  Matrix x, y;
  std::vector<envs::State> starts, states;
};

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

// ---------------------------------------------------------------------------

MemoryBuffer::MemoryBuffer(envs::TaskSpec task, std::size_t capacity) : task_(task), capacity_(capacity) {
  if (capacity == 0) throw std::invalid_argument("MemoryBuffer: capacity must be > 0");
}

void MemoryBuffer::add(envs::Trajectory traj) {
  if (traj.task_id != task_.id)
    throw std::invalid_argument("MemoryBuffer: trajectory of task " + std::to_string(traj.task_id) +
                                " added to buffer of task " + std::to_string(task_.id));
  episodes_.push_back(std::move(traj));
  while (episodes_.size() > capacity_) episodes_.pop_front();
}

std::size_t MemoryBuffer::transitions() const {
  std::size_t n = 0;
  for (const auto& e : episodes_) n += e.size();
  return n;
}

Matrix MemoryBuffer::x() const {
  Matrix out(0, 5);
  for (const auto& e : episodes_) out = stack_rows(out, trajectory_x(e));
  return out;
}

Matrix MemoryBuffer::y() const {
  Matrix out(0, 4);
  for (const auto& e : episodes_) out = stack_rows(out, trajectory_y(e));
  return out;
}

std::vector<envs::State> MemoryBuffer::start_states() const {
  std::vector<envs::State> out;
  for (const auto& e : episodes_)
    if (!e.steps.empty()) out.emplace_back(e.steps.front().x.head<4>());
  return out;
}

std::vector<envs::State> MemoryBuffer::states() const {
  std::vector<envs::State> out;
  for (const auto& e : episodes_)
    for (const auto& t : e.steps) out.emplace_back(t.x.head<4>());
  return out;
}

dyn::TaskItem split_context_target(const Matrix& x, const Matrix& y, Rng& rng, std::size_t n_min,
                                   std::size_t n_max, std::size_t max_targets, std::uint64_t key, int task_id) {
  const auto n = static_cast<std::size_t>(x.rows());
  if (n < 2) throw std::invalid_argument("split_context_target: need at least 2 transitions");
  if (y.rows() != x.rows()) throw std::invalid_argument("split_context_target: x and y differ in rows");
  if (n_min < 1 || n_max < n_min) throw std::invalid_argument("split_context_target: bad context range");
  const std::size_t hi = std::min(n_max, n - 1), lo = std::min(n_min, hi);
  const std::size_t nc = lo + rng.index(hi - lo + 1);
  const std::size_t nt = std::min(max_targets, n - nc);
  const std::vector<std::size_t> perm = rng.permutation(n);
  dyn::TaskItem item;
  item.key = key;
  item.task_id = task_id;
  item.xc.resize(static_cast<Eigen::Index>(nc), x.cols());
  item.yc.resize(static_cast<Eigen::Index>(nc), y.cols());
  item.xt.resize(static_cast<Eigen::Index>(nt), x.cols());
  item.yt.resize(static_cast<Eigen::Index>(nt), y.cols());
  for (std::size_t i = 0; i < nc; ++i) {
    item.xc.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(perm[i]));
    item.yc.row(static_cast<Eigen::Index>(i)) = y.row(static_cast<Eigen::Index>(perm[i]));
  }
  for (std::size_t i = 0; i < nt; ++i) {
    item.xt.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(perm[nc + i]));
    item.yt.row(static_cast<Eigen::Index>(i)) = y.row(static_cast<Eigen::Index>(perm[nc + i]));
  }
  return item;
}

std::pair<Matrix, Matrix> sample_rows(const Matrix& x, const Matrix& y, std::size_t n, Rng& rng) {
  const auto total = static_cast<std::size_t>(x.rows());
  if (n >= total) return {x, y};
  const std::vector<std::size_t> perm = rng.permutation(total);
  Matrix xs(static_cast<Eigen::Index>(n), x.cols()), ys(static_cast<Eigen::Index>(n), y.cols());
  for (std::size_t i = 0; i < n; ++i) {
    xs.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(perm[i]));
    ys.row(static_cast<Eigen::Index>(i)) = y.row(static_cast<Eigen::Index>(perm[i]));
  }
  return {xs, ys};
}

envs::PolicyFn exploration_policy(ExplorationMode mode, const envs::Environment& env, pol::Actor* actor,
                                  Eigen::RowVectorXd z, double noise, Rng& rng, std::size_t hold) {
  if (hold == 0) throw std::invalid_argument("exploration_policy: hold must be > 0");
  // draws are refreshed every `hold` calls and reused in between
  auto counter = std::make_shared<std::size_t>(0);
  auto held = std::make_shared<double>(0.0);
  auto refresh = [counter, hold]() { return (*counter)++ % hold == 0; };
  if (mode == ExplorationMode::uniform_random || actor == nullptr) {
    if (env.discrete())
      return [&rng, refresh, held, n = env.n_actions()](const envs::State&) {
        if (refresh()) *held = static_cast<double>(rng.index(n));
        return *held;
      };
    const double f = env.cartpole().max_force;
    return [&rng, refresh, held, f](const envs::State&) {
      if (refresh()) *held = rng.uniform(-f, f);
      return *held;
    };
  }
  if (env.discrete())
    return [actor, z, &rng](const envs::State& s) { return static_cast<double>(actor->sample(s, z, rng).index); };
  const double f = env.cartpole().max_force;
  return [actor, z, noise, f, &rng, refresh, held](const envs::State& s) {
    if (refresh()) *held = noise > 0.0 ? noise * rng.normal() : 0.0;
    return std::clamp(actor->act(s, z) + *held, -f, f);
  };
}

// ---------------------------------------------------------------------------

Agent::Agent(const cfg::RunConfig& c)
    : config(c), env(c.env), model(make_model(c)) {
  Rng actor_rng = Rng(c.seed).split("init").split("actor");
  actor = pol::Actor(actor_config(c, env), actor_rng);
  if (env.discrete()) {
    Rng critic_rng = Rng(c.seed).split("init").split("critic");
    critic = pol::Critic(actor_config(c, env), critic_rng);
  }
}

std::vector<ad::Param*> Agent::policy_params() {
  std::vector<ad::Param*> out = actor.params();
  if (env.discrete()) nn::append(out, critic.params());
  return out;
}

std::vector<ad::Param*> Agent::all_params() {
  std::vector<ad::Param*> out = model.params();
  nn::append(out, policy_params());
  return out;
}

void Agent::save(const std::filesystem::path& dir, int iteration) {
  const auto& s = model.stats();
  nlohmann::json meta;
  meta["config"] = cfg::to_toml(config);
  meta["iteration"] = iteration;
  meta["stats"] = {{"x_mean", to_vector(s.x_mean)},
                   {"x_std", to_vector(s.x_std)},
                   {"y_mean", to_vector(s.y_mean)},
                   {"y_std", to_vector(s.y_std)}};
  save_checkpoint(dir, all_params(), meta);
}

std::unique_ptr<Agent> Agent::load(const std::filesystem::path& dir) {
  const nlohmann::json manifest = read_manifest(dir);
  if (!manifest.contains("meta") || !manifest["meta"].contains("config"))
    throw CheckpointError("checkpoint has no run configuration");
  auto agent = std::make_unique<Agent>(cfg::parse_config(manifest["meta"]["config"].get<std::string>()));
  const nlohmann::json meta = load_checkpoint(dir, agent->all_params());
  const auto& st = meta.at("stats");
  agent->model.stats() = {from_json(st.at("x_mean")), from_json(st.at("x_std")), from_json(st.at("y_mean")),
                          from_json(st.at("y_std"))};
  return agent;
}

// ---------------------------------------------------------------------------

TaskData collect_task_data(const envs::Environment& env, const envs::TaskSpec& task, std::size_t context,
                           std::size_t targets, Rng& rng) {
  auto gather = [&](std::size_t n, Rng stream) {
    Matrix x(0, 5), y(0, 4);
    Rng act = stream.split("actions");
    const envs::PolicyFn pi = exploration_policy(ExplorationMode::uniform_random, env, nullptr, {}, 0.0, act);
    for (std::uint64_t ep = 0; static_cast<std::size_t>(x.rows()) < n; ++ep) {
      Rng ep_rng = stream.split(ep);
      envs::TaskSpec t = task;
      const envs::Trajectory traj = envs::run_episode(env, t, pi, ep_rng);
      x = stack_rows(x, trajectory_x(traj));
      y = stack_rows(y, trajectory_y(traj));
    }
    return std::pair<Matrix, Matrix>{x.topRows(static_cast<Eigen::Index>(n)), y.topRows(static_cast<Eigen::Index>(n))};
  };
  TaskData d;
  d.task = task;
  std::tie(d.xc, d.yc) = gather(context, rng.split("context"));
  std::tie(d.xt, d.yt) = gather(targets, rng.split("targets"));
  return d;
}

ReturnStats evaluate_policy(Agent& agent, pol::Actor& actor, const envs::TaskSpec& task,
                            const enc::DiagGaussian& q, std::size_t episodes, Rng& rng) {
  std::vector<double> returns;
  for (std::uint64_t e = 0; e < episodes; ++e) {
    Rng er = rng.split(e);
    Rng zr = er.split("latent"), ar = er.split("actions"), reset = er.split("reset");
    const Eigen::RowVectorXd z = sample_z(q, zr);
    envs::PolicyFn pi;
    if (agent.env.discrete())
      pi = [&actor, &z, &ar](const envs::State& s) { return static_cast<double>(actor.sample(s, z, ar).index); };
    else
      pi = [&actor, &z](const envs::State& s) { return actor.act(s, z); };
    returns.push_back(envs::episode_return(envs::run_episode(agent.env, task, pi, reset), 1.0, true));
  }
  ReturnStats st;
  st.mean = mean_of(returns);
  double var = 0.0;
  for (double r : returns) var += (r - st.mean) * (r - st.mean);
  st.std = returns.size() > 1 ? std::sqrt(var / static_cast<double>(returns.size() - 1)) : 0.0;
  return st;
}

// ---------------------------------------------------------------------------

namespace {

const char* kTrainLogHeader[] = {"iteration", "task_id", "mass1",   "mass2",       "episode_return",
                                 "elbo",      "nll",     "kl",      "heldout_mse", "avg_return_normalized",
                                 "policy_loss", "value_loss", "entropy", "grad_norm", "status"};

void write_train_log_header(const std::filesystem::path& file) {
  csv::Writer w(file,
                {kTrainLogHeader[0], kTrainLogHeader[1], kTrainLogHeader[2], kTrainLogHeader[3], kTrainLogHeader[4],
                 kTrainLogHeader[5], kTrainLogHeader[6], kTrainLogHeader[7], kTrainLogHeader[8], kTrainLogHeader[9],
                 kTrainLogHeader[10], kTrainLogHeader[11], kTrainLogHeader[12], kTrainLogHeader[13],
                 kTrainLogHeader[14]},
                false);
}

void append_train_log(const std::filesystem::path& file, const IterationRecord& r) {
  csv::Writer w(file, {}, true);
  w.field(r.iteration).field(r.task_id).field(r.mass1).field(r.mass2).field(r.episode_return).field(r.elbo)
      .field(r.nll).field(r.kl).field(r.heldout_mse).field(r.avg_return_normalized).field(r.policy_loss)
      .field(r.value_loss).field(r.entropy).field(r.grad_norm).field(r.status);
  w.end();
}

void append_metrics(const std::filesystem::path& file, const std::string& run_id, const IterationRecord& r,
                    double wall) {
  csv::Writer w(file, {"run_id", "iteration", "metric", "value", "wall_clock_s"}, true);
  auto put = [&](std::string_view name, double v) {
    w.field(run_id).field(r.iteration).field(name).field(v).field(wall);
    w.end();
  };
  put("episode_return", r.episode_return);
  put("elbo", r.elbo);
  put("nll", r.nll);
  put("kl", r.kl);
  put("heldout_mse", r.heldout_mse);
  put("avg_return_normalized", r.avg_return_normalized);
  put("policy_loss", r.policy_loss);
  put("value_loss", r.value_loss);
  put("entropy", r.entropy);
  put("grad_norm", r.grad_norm);
}

std::string run_id_of(const cfg::RunConfig& c) {
  return std::string(envs::env_name(c.env)) + "-" + std::string(enc::encoder_kind_name(c.encoder)) + "-" +
         std::string(pol::policy_mode_name(c.policy_mode)) + "-s" + std::to_string(c.seed);
}

struct PolicyOutcome {
  double loss = 0.0, value_loss = 0.0, entropy = 0.0, grad_norm = 0.0;
};

// BPTT updates inside the learned model from buffer states.
PolicyOutcome bptt_round(Agent& agent, ad::Adam& adam, std::span<const BufferView> views, std::size_t updates,
                         const Rng& stream) {
  const cfg::RunConfig& c = agent.config;
  PolicyOutcome out;
  std::size_t done = 0;
  for (std::uint64_t u = 0; u < updates; ++u) {
    Rng rng = stream.split(u);
    const std::size_t k = c.bptt.rollouts;
    Matrix s0(static_cast<Eigen::Index>(k), 4), z(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c.model.dim_lat));
    for (std::size_t r = 0; r < k; ++r) {
      const BufferView& v = views[rng.index(views.size())];
      auto [xc, yc] = sample_rows(v.x, v.y, c.train.context_max, rng);
      z.row(static_cast<Eigen::Index>(r)) = sample_z(agent.model.context_latent(xc, yc), rng);
      s0.row(static_cast<Eigen::Index>(r)) = draw_start(v.starts, v.states, c.train.start_state_prob, rng).transpose();
    }
    Rng noise = rng.split("noise");
    const auto& cp = agent.env.cartpole();
    const auto st = pol::bptt_update(
        agent.actor, adam,
        [&](ad::Tape& t) {
          ad::Var zv = t.constant(z);
          return pol::bptt_objective(t, agent.actor, t.constant(s0), zv,
                                     pol::learned_model_step(agent.model, zv, agent.env, c.bptt.mean_only, noise),
                                     [&cp](ad::Tape& tt, ad::Var s) { return pol::cartpole_reward(tt, s, cp); },
                                     c.bptt.horizon, c.bptt.gamma, nn::Grad::track);
        },
        c.bptt.clip_norm);
    if (st.skipped) continue;
    out.loss += -st.objective;
    out.grad_norm += st.grad_norm;
    ++done;
  }
  if (done > 0) {
    out.loss /= static_cast<double>(done);
    out.grad_norm /= static_cast<double>(done);
  }
  return out;
}

PolicyOutcome ppo_round(Agent& agent, ad::Adam& adam, std::span<const BufferView> views, std::size_t updates,
                        const Rng& stream) {
  const cfg::RunConfig& c = agent.config;
  PolicyOutcome out;
  std::size_t done = 0;
  for (std::uint64_t u = 0; u < updates; ++u) {
    Rng rng = stream.split(u);
    const std::size_t k = c.ppo.rollouts;
    std::vector<envs::State> starts;
    Matrix z(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c.model.dim_lat));
    for (std::size_t r = 0; r < k; ++r) {
      const BufferView& v = views[rng.index(views.size())];
      auto [xc, yc] = sample_rows(v.x, v.y, c.train.context_max, rng);
      z.row(static_cast<Eigen::Index>(r)) = sample_z(agent.model.context_latent(xc, yc), rng);
      starts.push_back(v.states[rng.index(v.states.size())]);
    }
    Rng roll = rng.split("rollouts"), upd = rng.split("update");
    const auto batch = pol::collect_model_rollouts(agent.actor, agent.critic, agent.model, agent.env, starts, z,
                                                   c.ppo.rollout_horizon, c.bptt.mean_only, roll);
    const auto st = pol::ppo_update(agent.actor, agent.critic, adam, batch, c.ppo, upd);
    if (st.steps == 0) continue;
    out.loss += st.policy_loss;
    out.value_loss += st.value_loss;
    out.entropy += st.entropy;
    out.grad_norm += st.grad_norm;
    ++done;
  }
  if (done > 0) {
    const double inv = 1.0 / static_cast<double>(done);
    out.loss *= inv;
    out.value_loss *= inv;
    out.entropy *= inv;
    out.grad_norm *= inv;
  }
  return out;
}

}  // namespace

TrainResult meta_train(const cfg::RunConfig& c) {
  cfg::validate(c);
  const std::filesystem::path out = c.out_dir;
  std::filesystem::create_directories(out);
  cfg::write_effective_config(out / "effective_config.toml", c);
  const auto train_log = out / "train_log.csv", metrics = out / "metrics.csv";
  const auto dyn_metrics = out / "dynamics_metrics.csv", pol_metrics = out / "policy_metrics.csv";
  for (const auto& f : {metrics, dyn_metrics, pol_metrics}) std::filesystem::remove(f);
  write_train_log_header(train_log);

  TrainResult result;
  result.agent = std::make_unique<Agent>(c);
  Agent& agent = *result.agent;
  const std::string run_id = run_id_of(c);
  const Rng master(c.seed);
  Rng task_rng = master.split("tasks"), eval_task_rng = master.split("eval_tasks");

  std::vector<TaskData> eval_data;
  for (std::size_t e = 0; e < c.train.eval_tasks; ++e) {
    const envs::TaskSpec t = envs::sample_task(c.env, eval_task_rng, 1000 + static_cast<int>(e));
    Rng data_rng = master.split("eval_data").split(e);
    eval_data.push_back(collect_task_data(agent.env, t, c.test.context, c.test.mse_targets, data_rng));
  }

  ad::Adam model_adam(agent.model.params(), {.lr = c.train.dynamics_lr});
  ad::Adam policy_adam(agent.policy_params(), {.lr = c.train.policy_lr});
  std::vector<MemoryBuffer> buffers;
  const auto t0 = Clock::now();

  for (std::size_t it = 0; it < c.train.iterations; ++it) {
    const Rng it_rng = master.split("iteration").split(it);
    if (it % c.train.task_resample_every == 0)
      buffers.emplace_back(envs::sample_task(c.env, task_rng, static_cast<int>(buffers.size())),
                           c.train.buffer_episodes);
    MemoryBuffer& current = buffers.back();
    IterationRecord rec;
    rec.iteration = static_cast<int>(it);
    rec.task_id = current.task().id;
    rec.mass1 = current.task().mass1;
    rec.mass2 = current.task().mass2;

    try {
      // real data
      {
        const bool random = c.train.exploration == "uniform-random" || current.episodes() == 0;
        Rng explore = it_rng.split("explore"), reset = it_rng.split("episode");
        Eigen::RowVectorXd z = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(c.model.dim_lat));
        if (!random) {
          Rng zr = it_rng.split("explore_latent");
          auto [xc, yc] = sample_rows(current.x(), current.y(), c.train.context_max, zr);
          z = sample_z(agent.model.context_latent(xc, yc), zr);
        }
        const envs::PolicyFn pi =
            exploration_policy(random ? ExplorationMode::uniform_random : ExplorationMode::current_policy, agent.env,
                               &agent.actor, z, c.train.exploration_noise, explore, c.train.exploration_hold);
        envs::Trajectory traj = envs::run_episode(agent.env, current.task(), pi, reset);
        rec.episode_return = envs::episode_return(traj, 1.0, true);
        current.add(std::move(traj));
      }

      std::vector<BufferView> views;
      Matrix all_x(0, 5), all_y(0, 4);
      for (const auto& b : buffers) {
        views.push_back({b.x(), b.y(), b.start_states(), b.states()});
        all_x = stack_rows(all_x, views.back().x);
        all_y = stack_rows(all_y, views.back().y);
      }
      agent.model.stats() = dyn::fit_normalization(all_x, all_y);

      // dynamics
      std::vector<std::size_t> usable;
      for (std::size_t i = 0; i < views.size(); ++i)
        if (views[i].x.rows() >= 2) usable.push_back(i);
      std::size_t good = 0;
      for (std::uint64_t g = 0; g < c.train.dynamics_updates && !usable.empty(); ++g) {
        Rng grng = it_rng.split("dynamics").split(g);
        std::vector<std::size_t> pick = usable;
        if (pick.size() > c.train.tasks_per_batch) {
          const auto perm = grng.permutation(pick.size());
          std::vector<std::size_t> chosen;
          for (std::size_t i = 0; i < c.train.tasks_per_batch; ++i) chosen.push_back(pick[perm[i]]);
          pick = chosen;
        }
        std::vector<dyn::TaskItem> items;
        for (std::size_t i : pick)
          items.push_back(split_context_target(views[i].x, views[i].y, grng, c.train.context_min, c.train.context_max,
                                               c.train.max_targets, i, buffers[i].task().id));
        ad::Tape t;
        model_adam.zero_grad();
        const auto r = agent.model.elbo(t, items, c.model.k_train, grng.split("noise"), nn::Grad::track);
        if (!std::isfinite(r.loss.item())) continue;
        t.backward(r.loss);
        t.accumulate_param_grads();
        if (!std::isfinite(ad::global_grad_norm(agent.model.params()))) {
          model_adam.zero_grad();
          continue;
        }
        model_adam.step();
        rec.elbo += -r.loss.item();
        rec.nll += r.nll;
        rec.kl += r.kl;
        ++good;
      }
      if (good > 0) {
        rec.elbo /= static_cast<double>(good);
        rec.nll /= static_cast<double>(good);
        rec.kl /= static_cast<double>(good);
      } else if (c.train.dynamics_updates > 0) {
        rec.status = "nonfinite";
      }

      // policy
      if (c.train.policy_updates > 0) {
        const Rng prng = it_rng.split("policy");
        const PolicyOutcome po = agent.env.discrete()
                                     ? ppo_round(agent, policy_adam, views, c.train.policy_updates, prng)
                                     : bptt_round(agent, policy_adam, views, c.train.policy_updates, prng);
        rec.policy_loss = po.loss;
        rec.value_loss = po.value_loss;
        rec.entropy = po.entropy;
        rec.grad_norm = po.grad_norm;
      }

      // offline evaluation on held-out tasks
      std::vector<double> returns, mses;
      std::vector<dyn::DynamicsMetricsRow> dyn_rows;
      for (std::size_t e = 0; e < eval_data.size(); ++e) {
        const TaskData& d = eval_data[e];
        const Rng erng = master.split("eval").split(it).split(e);
        const enc::DiagGaussian q = agent.model.context_latent(d.xc, d.yc);
        Rng ep = erng.split("episodes"), mr = erng.split("mse");
        returns.push_back(evaluate_policy(agent, agent.actor, d.task, q, c.train.eval_episodes, ep).mean);
        mses.push_back(agent.model.one_step_mse(d.xc, d.yc, d.xt, d.yt, c.train.eval_k, mr));
        ad::Tape t;
        const std::vector<dyn::TaskItem> item{{d.xc, d.yc, d.xt, d.yt, e, d.task.id}};
        const auto r = agent.model.elbo(t, item, 1, erng.split("elbo"), nn::Grad::frozen);
        dyn_rows.push_back({rec.iteration, d.task.id, -r.loss.item(), r.nll, r.kl, mses.back()});
      }
      rec.avg_return_normalized = mean_of(returns);
      rec.heldout_mse = mean_of(mses);
      dyn::append_dynamics_metrics(dyn_metrics, dyn_rows);
      const std::vector<pol::PolicyMetricsRow> prow{{rec.iteration, rec.avg_return_normalized, rec.policy_loss,
                                                     rec.value_loss, rec.entropy, rec.grad_norm}};
      pol::append_policy_metrics(pol_metrics, prow);
    } catch (const envs::NonFiniteState& e) {
      rec.status = "nonfinite";
      std::cerr << "iteration " << it << ": " << e.what() << '\n';
    } catch (const pol::NonFiniteOutput& e) {
      rec.status = "nonfinite";
      std::cerr << "iteration " << it << ": " << e.what() << '\n';
    }

    append_train_log(train_log, rec);
    append_metrics(metrics, run_id, rec, seconds_since(t0));
    result.log.push_back(rec);
    if (c.train.checkpoint_every > 0 && (it + 1) % c.train.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "iter_%06zu", it + 1);
      agent.save(out / "checkpoints" / name, static_cast<int>(it + 1));
    }
  }
  result.checkpoint = out / "checkpoint";
  agent.save(result.checkpoint, static_cast<int>(c.train.iterations));
  return result;
}

// ---------------------------------------------------------------------------

std::vector<envs::TaskSpec> test_tasks(envs::EnvId env, std::uint64_t seed, std::size_t n) {
  Rng rng = Rng(seed).split("test_tasks");
  std::vector<envs::TaskSpec> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(envs::sample_task(env, rng, 2000 + static_cast<int>(i)));
  return out;
}

std::vector<TaskResult> meta_test_amortized(Agent& agent, std::span<const envs::TaskSpec> tasks, Rng& rng) {
  const cfg::RunConfig& c = agent.config;
  const std::uint64_t steps_before = ad::Adam::global_step_count();
  std::vector<TaskResult> out;
  for (std::size_t j = 0; j < tasks.size(); ++j) {
    const auto t0 = Clock::now();
    const Rng trng = rng.split(j);
    Rng data_rng = trng.split("data");
    const TaskData d = collect_task_data(agent.env, tasks[j], c.test.context, c.test.mse_targets, data_rng);
    TaskResult r;
    r.task = tasks[j];
    if (static_cast<std::size_t>(d.xc.rows()) < c.test.context) {
      std::cerr << "warning: task " << tasks[j].id << " skipped, insufficient context\n";
      r.skipped = true;
      out.push_back(r);
      continue;
    }
    const enc::DiagGaussian q = agent.model.context_latent(d.xc, d.yc);
    Rng ep = trng.split("episodes"), mr = trng.split("mse");
    const ReturnStats st = evaluate_policy(agent, agent.actor, tasks[j], q, c.test.episodes, ep);
    r.mean_return = st.mean;
    r.std_return = st.std;
    r.one_step_mse = agent.model.one_step_mse(d.xc, d.yc, d.xt, d.yt, c.model.k_eval, mr);
    r.wall_clock_s = seconds_since(t0);
    out.push_back(r);
  }
  if (ad::Adam::global_step_count() != steps_before)
    throw std::logic_error("meta_test_amortized: optimizer steps were taken during amortized evaluation");
  return out;
}

std::vector<TaskResult> meta_test_finetune(Agent& agent, std::span<const envs::TaskSpec> tasks, std::size_t steps,
                                           Rng& rng) {
  const cfg::RunConfig& c = agent.config;
  std::vector<TaskResult> out;
  for (std::size_t j = 0; j < tasks.size(); ++j) {
    const auto t0 = Clock::now();
    const Rng trng = rng.split(j);
    Rng data_rng = trng.split("data");
    const TaskData d = collect_task_data(agent.env, tasks[j], c.test.context, c.test.mse_targets, data_rng);
    TaskResult r;
    r.task = tasks[j];
    if (static_cast<std::size_t>(d.xc.rows()) < c.test.context) {
      std::cerr << "warning: task " << tasks[j].id << " skipped, insufficient context\n";
      r.skipped = true;
      out.push_back(r);
      continue;
    }
    const enc::DiagGaussian q = agent.model.context_latent(d.xc, d.yc);
    std::vector<envs::State> starts;
    for (Eigen::Index i = 0; i < d.xc.rows(); ++i) starts.emplace_back(d.xc.row(i).head<4>().transpose());

    pol::Actor tuned = agent.actor;
    pol::Critic tuned_critic = agent.critic;
    std::vector<ad::Param*> params = tuned.params();
    if (agent.env.discrete()) nn::append(params, tuned_critic.params());
    ad::Adam adam(params, {.lr = c.train.policy_lr});
    for (std::uint64_t k = 0; k < steps; ++k) {
      Rng srng = trng.split("finetune").split(k);
      if (agent.env.discrete()) {
        const std::vector<envs::State> s0{starts[srng.index(starts.size())]};
        Matrix z(1, static_cast<Eigen::Index>(c.model.dim_lat));
        z.row(0) = sample_z(q, srng);
        const auto batch = pol::collect_model_rollouts(tuned, tuned_critic, agent.model, agent.env, s0, z,
                                                       c.ppo.rollout_horizon, c.bptt.mean_only, srng);
        pol::PpoConfig one = c.ppo;
        one.epochs = 1;
        one.minibatch = std::numeric_limits<std::size_t>::max() / 2;
        r.adaptation_steps += pol::ppo_update(tuned, tuned_critic, adam, batch, one, srng).steps;
      } else {
        const std::size_t n = c.bptt.rollouts;
        Matrix s0(static_cast<Eigen::Index>(n), 4), z(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c.model.dim_lat));
        for (std::size_t i = 0; i < n; ++i) {
          s0.row(static_cast<Eigen::Index>(i)) = starts[srng.index(starts.size())].transpose();
          z.row(static_cast<Eigen::Index>(i)) = sample_z(q, srng);
        }
        Rng noise = srng.split("noise");
        const auto& cp = agent.env.cartpole();
        const auto st = pol::bptt_update(
            tuned, adam,
            [&](ad::Tape& t) {
              ad::Var zv = t.constant(z);
              return pol::bptt_objective(t, tuned, t.constant(s0), zv,
                                         pol::learned_model_step(agent.model, zv, agent.env, c.bptt.mean_only, noise),
                                         [&cp](ad::Tape& tt, ad::Var s) { return pol::cartpole_reward(tt, s, cp); },
                                         c.bptt.horizon, c.bptt.gamma, nn::Grad::track);
            },
            c.bptt.clip_norm);
        if (!st.skipped) ++r.adaptation_steps;
      }
    }

    Rng ep_tuned = trng.split("episodes");
    const ReturnStats tuned_st = evaluate_policy(agent, tuned, tasks[j], q, c.test.episodes, ep_tuned);
    ReturnStats chosen = tuned_st;
    if (steps > 0) {
      Rng ep_base = trng.split("episodes");
      const ReturnStats base = evaluate_policy(agent, agent.actor, tasks[j], q, c.test.episodes, ep_base);
      if (tuned_st.mean < base.mean - 0.5 * std::abs(base.mean)) {
        r.fallback = true;
        chosen = base;
      }
    }
    r.mean_return = chosen.mean;
    r.std_return = chosen.std;
    Rng mr = trng.split("mse");
    r.one_step_mse = agent.model.one_step_mse(d.xc, d.yc, d.xt, d.yt, c.model.k_eval, mr);
    r.wall_clock_s = seconds_since(t0);
    out.push_back(r);
  }
  return out;
}

void write_test_results(const std::filesystem::path& file, std::span<const TaskResult> rows) {
  csv::Writer w(file,
                {"task_id", "mass1", "mass2", "mean_return", "std_return", "one_step_mse", "adaptation_steps",
                 "wall_clock_s", "fallback"},
                false);
  for (const auto& r : rows) {
    if (r.skipped) continue;
    w.field(r.task.id).field(r.task.mass1).field(r.task.mass2).field(r.mean_return).field(r.std_return)
        .field(r.one_step_mse).field(r.adaptation_steps).field(r.wall_clock_s).field(r.fallback ? 1 : 0);
    w.end();
  }
}

double context_mse(Agent& agent, std::span<const TaskData> data, std::size_t n_context, Rng& rng) {
  std::vector<double> mses;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const TaskData& d = data[i];
    const auto n = static_cast<Eigen::Index>(std::min<std::size_t>(n_context, static_cast<std::size_t>(d.xc.rows())));
    Rng r = rng.split(i);
    mses.push_back(agent.model.one_step_mse(d.xc.topRows(n), d.yc.topRows(n), d.xt, d.yt, agent.config.model.k_eval, r));
  }
  return mean_of(mses);
}

}  // namespace gssm::meta
