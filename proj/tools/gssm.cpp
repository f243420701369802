// gssm: command-line entry points for training, testing and the experiment
// sweeps. Exit codes: 0 success, 2 configuration error, 3 runtime failure.

#include "gssm/checkpoint.hpp"
#include "gssm/experiments.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

using namespace gssm;

namespace {

constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

struct RunFlags {
  std::string config;
  std::optional<std::string> env, encoder, policy_mode, out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> iters;
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--config", f.config, "TOML run configuration");
  cmd->add_option("--env", f.env, "cartpole | acrobot");
  cmd->add_option("--seed", f.seed, "master seed");
  cmd->add_option("--iters", f.iters, "meta-training iterations");
  cmd->add_option("--encoder", f.encoder, "gssm | mean_pool");
  cmd->add_option("--policy-mode", f.policy_mode, "amortized | ablation");
  cmd->add_option("--out", f.out, "output directory (fallback: $GSSM_OUT_DIR)");
}

cfg::RunConfig resolve(const RunFlags& f) {
  cfg::Overrides o;
  o.env = f.env;
  o.seed = f.seed;
  o.iterations = f.iters;
  o.encoder = f.encoder;
  o.policy_mode = f.policy_mode;
  o.out_dir = f.out;
  if (const char* env_out = std::getenv("GSSM_OUT_DIR"); env_out && *env_out) o.out_dir_fallback = env_out;
  return f.config.empty() ? cfg::parse_config("", o) : cfg::load_config(f.config, o);
}

std::string one_line(std::string s) {
  for (char& ch : s)
    if (ch == '\n' || ch == '\r') ch = ' ';
  for (std::size_t p = 0; (p = s.find('"', p)) != std::string::npos; p += 2) s.insert(p, "\\");
  return s;
}

int fail(std::string_view category, const std::string& message, int code) {
  std::cerr << "gssm-error category=" << category << " message=\"" << one_line(message) << "\"\n";
  return code;
}

void print_summary(const exp::RunSummary& s) {
  std::cout << "mean_return=" << s.mean_return << " std_return=" << s.std_return
            << " one_step_mse=" << s.one_step_mse << " tasks=" << s.tasks << " test_mode=" << exp::test_mode_name(s.mode)
            << " optimizer_steps=" << s.optimizer_steps << '\n';
}

std::vector<std::uint64_t> seed_list(const std::vector<std::uint64_t>& given, std::uint64_t fallback) {
  return given.empty() ? std::vector<std::uint64_t>{fallback} : given;
}

// Micro-scale end-to-end run: train, both test modes, a small bounds sweep.
int smoke(const cfg::RunConfig& base) {
  const auto t0 = std::chrono::steady_clock::now();
  for (auto env : {envs::EnvId::cartpole, envs::EnvId::acrobot}) {
    cfg::Overrides o;
    o.env = std::string(envs::env_name(env));
    cfg::RunConfig c = cfg::parse_config("", o);
    c.seed = base.seed;
    c.out_dir = (std::filesystem::path(base.out_dir) / envs::env_name(env)).string();
    c.model.dim_lat = 4;
    c.model.dim_latxy = 8;
    c.model.dim_h = 32;
    c.model.decoder_layers = 1;
    c.model.k_eval = 4;
    c.train.iterations = 4;
    c.train.task_resample_every = 2;
    c.train.dynamics_updates = 3;
    c.train.policy_updates = 1;
    c.train.eval_tasks = 1;
    c.train.eval_episodes = 2;
    c.train.eval_k = 2;
    c.train.checkpoint_every = 2;
    c.bptt.rollouts = 4;
    c.bptt.horizon = 10;
    c.ppo.rollouts = 4;
    c.ppo.rollout_horizon = 20;
    c.ppo.epochs = 2;
    c.test.tasks = 2;
    c.test.episodes = 2;
    c.test.finetune_steps = 1;
    auto trained = meta::meta_train(c);
    const auto loaded = meta::Agent::load(trained.checkpoint);
    print_summary(exp::test_agent(*loaded, exp::TestMode::amortized, c.out_dir));
    print_summary(exp::test_agent(*loaded, exp::TestMode::finetune,
                                  std::filesystem::path(c.out_dir) / "finetune"));
  }
  bounds::SweepConfig sc;
  sc.lemma_pairs = 5;
  sc.policies = 50;
  sc.theorem_pairs = 10;
  const auto r = exp::run_bounds(sc, base.seed, std::filesystem::path(base.out_dir) / "bounds");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "smoke lemma_violations=" << r.lemma_violations << " theorem_violations=" << r.theorem_violations
            << " seconds=" << secs << '\n';
  return r.lemma_violations + r.theorem_violations == 0 ? 0 : kRuntimeError;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Graph-structured surrogate model meta-RL"};
  app.require_subcommand(1);

  RunFlags train_f, test_f, abl_f, sweep_f, bounds_f, smoke_f;
  auto* train = app.add_subcommand("train", "meta-train and write logs and checkpoints");
  add_run_flags(train, train_f);

  auto* test = app.add_subcommand("test", "evaluate a checkpoint on unseen tasks");
  add_run_flags(test, test_f);
  std::string checkpoint, test_mode = "auto";
  test->add_option("--checkpoint", checkpoint, "checkpoint directory (default <out>/checkpoint)");
  test->add_option("--mode", test_mode, "auto | amortized | finetune")
      ->check(CLI::IsMember({"auto", "amortized", "finetune"}));

  auto* ablation = app.add_subcommand("ablation", "amortized vs latent-free policy at equal budget");
  add_run_flags(ablation, abl_f);
  std::vector<std::uint64_t> abl_seeds;
  ablation->add_option("--seeds", abl_seeds, "seeds (default: --seed)");

  auto* sweep = app.add_subcommand("sweep-latent-dim", "train and test for several latent sizes");
  add_run_flags(sweep, sweep_f);
  std::vector<std::size_t> dims{16, 32, 64};
  std::vector<std::uint64_t> sweep_seeds;
  sweep->add_option("--dims", dims, "latent sizes")->capture_default_str();
  sweep->add_option("--seeds", sweep_seeds, "seeds (default: --seed)");

  auto* bnd = app.add_subcommand("bounds", "verify the performance-gap and regret bounds");
  add_run_flags(bnd, bounds_f);
  bounds::SweepConfig sc;
  bnd->add_option("--pairs", sc.lemma_pairs, "MDP pairs for the gap check")->capture_default_str();
  bnd->add_option("--policies", sc.policies, "random policies per pair")->capture_default_str();
  bnd->add_option("--theorem-pairs", sc.theorem_pairs, "MDP pairs for the regret check")->capture_default_str();
  bnd->add_option("--gamma", sc.gamma, "discount")->capture_default_str();

  auto* smk = app.add_subcommand("smoke", "micro-scale end-to-end pipeline");
  add_run_flags(smk, smoke_f);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), kConfigError);
  }

  try {
    if (*train) {
      const cfg::RunConfig c = resolve(train_f);
      const auto r = meta::meta_train(c);
      std::cout << "trained " << r.log.size() << " iterations, checkpoint " << r.checkpoint.string() << '\n';
    } else if (*test) {
      const cfg::RunConfig c = resolve(test_f);
      const std::filesystem::path ckpt = checkpoint.empty() ? std::filesystem::path(c.out_dir) / "checkpoint"
                                                            : std::filesystem::path(checkpoint);
      auto agent = meta::Agent::load(ckpt);
      // the evaluation seed and test budget come from the command line / config
      if (test_f.seed) agent->config.seed = *test_f.seed;
      agent->config.test = c.test;
      exp::TestMode mode = agent->config.policy_mode == pol::PolicyMode::amortized ? exp::TestMode::amortized
                                                                                    : exp::TestMode::finetune;
      if (test_mode == "amortized") mode = exp::TestMode::amortized;
      if (test_mode == "finetune") mode = exp::TestMode::finetune;
      print_summary(exp::test_agent(*agent, mode, c.out_dir));
    } else if (*ablation) {
      cfg::RunConfig c = resolve(abl_f);
      for (const auto& [label, s] : exp::run_ablation(c, seed_list(abl_seeds, c.seed))) {
        std::cout << label << ' ';
        print_summary(s);
      }
    } else if (*sweep) {
      cfg::RunConfig c = resolve(sweep_f);
      for (std::size_t d : dims)
        if (d == 0) throw cfg::ConfigError("--dims: latent sizes must be > 0");
      for (const auto& [label, s] : exp::run_latent_sweep(c, dims, seed_list(sweep_seeds, c.seed))) {
        std::cout << label << ' ';
        print_summary(s);
      }
    } else if (*bnd) {
      const cfg::RunConfig c = resolve(bounds_f);
      if (!(sc.gamma >= 0.0 && sc.gamma < 1.0)) throw cfg::ConfigError("--gamma must be in [0, 1)");
      const auto r = exp::run_bounds(sc, c.seed, c.out_dir);
      std::cout << "lemma_violations=" << r.lemma_violations << " theorem_violations=" << r.theorem_violations
                << '\n';
      if (r.lemma_violations + r.theorem_violations > 0) return fail("bounds", "bound violations found", kRuntimeError);
    } else if (*smk) {
      return smoke(resolve(smoke_f));
    }
  } catch (const cfg::ConfigError& e) {
    return fail("config", e.what(), kConfigError);
  } catch (const CheckpointError& e) {
    return fail("checkpoint", e.what(), kRuntimeError);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), kRuntimeError);
  }
  return 0;
}
