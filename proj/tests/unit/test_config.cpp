#include "gssm/config.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace gssm;
using cfg::ConfigError;

TEST_CASE("empty config resolves to cartpole defaults") {
  const cfg::RunConfig c = cfg::parse_config("");
  CHECK(c.env == envs::EnvId::cartpole);
  CHECK(c.encoder == enc::EncoderKind::gssm);
  CHECK(c.policy_mode == pol::PolicyMode::amortized);
  CHECK(c.model.mp_layers == 2);
  CHECK(c.model.dim_latxy == 32);
  CHECK(c.model.dim_lat == 16);
  CHECK(c.model.decoder_layers == 2);
  CHECK(c.model.dim_h == 200);
  CHECK(c.train.iterations == 200);
  CHECK(c.bptt.horizon == 25);
}

TEST_CASE("acrobot picks its own network sizes") {
  const cfg::RunConfig c = cfg::parse_config("env = \"acrobot\"\n");
  CHECK(c.env == envs::EnvId::acrobot);
  CHECK(c.model.decoder_layers == 5);
  CHECK(c.model.dim_h == 400);
  CHECK(c.model.mp_layers == 2);

  Rng rng(1);
  const pol::Actor cart(pol::cartpole_actor_config(16, pol::PolicyMode::amortized, 10.0), rng);
  const pol::Actor acro(pol::acrobot_actor_config(16, pol::PolicyMode::amortized), rng);
  CHECK(cart.config().hidden == 50);
  CHECK(acro.config().hidden == 128);
  CHECK(acro.config().n_actions == 3);
}

TEST_CASE("env flag selects defaults before the file is applied") {
  cfg::Overrides o;
  o.env = "acrobot";
  const cfg::RunConfig c = cfg::parse_config("env = \"cartpole\"\n[model]\ndim_h = 64\n", o);
  CHECK(c.env == envs::EnvId::acrobot);
  CHECK(c.model.decoder_layers == 5);
  CHECK(c.model.dim_h == 64);
}

TEST_CASE("flags override file values") {
  cfg::Overrides o;
  o.seed = 7;
  o.iterations = 3;
  o.encoder = "mean_pool";
  o.policy_mode = "ablation";
  o.out_dir = "elsewhere";
  const cfg::RunConfig c =
      cfg::parse_config("seed = 1\nencoder = \"gssm\"\nout_dir = \"a\"\n[train]\niterations = 50\n", o);
  CHECK(c.seed == 7);
  CHECK(c.train.iterations == 3);
  CHECK(c.encoder == enc::EncoderKind::mean_pool);
  CHECK(c.policy_mode == pol::PolicyMode::ablation);
  CHECK(c.out_dir == "elsewhere");
}

TEST_CASE("output directory precedence") {
  cfg::Overrides o;
  o.out_dir_fallback = "from_env";
  CHECK(cfg::parse_config("", o).out_dir == "from_env");
  CHECK(cfg::parse_config("out_dir = \"from_file\"\n", o).out_dir == "from_file");
  o.out_dir = "from_flag";
  CHECK(cfg::parse_config("out_dir = \"from_file\"\n", o).out_dir == "from_flag");
}

TEST_CASE("invalid values are rejected") {
  CHECK_THROWS_AS(cfg::parse_config("[model]\ndim_lat = 0\n"), ConfigError);
  CHECK_THROWS_AS(cfg::parse_config("[model]\ndim_lat = -3\n"), ConfigError);
  CHECK_THROWS_AS(cfg::parse_config("[model]\ndim_lat = 1.5\n"), ConfigError);
  CHECK_THROWS_AS(cfg::parse_config("[train]\ncontext_min = 10\ncontext_max = 5\n"), ConfigError);
  CHECK_THROWS_AS(cfg::parse_config("[train]\nexploration = \"greedy\"\n"), ConfigError);
  CHECK_THROWS_AS(cfg::parse_config("env = \"pendulum\"\n"), ConfigError);
  CHECK_THROWS_AS(cfg::parse_config("encoder = \"attention\"\n"), ConfigError);
  CHECK_THROWS_AS(cfg::parse_config("[ppo]\nclip = 1.5\n"), ConfigError);
  CHECK_THROWS_AS(cfg::parse_config("[model\n"), ConfigError);

  cfg::Overrides o;
  o.policy_mode = "both";
  CHECK_THROWS_AS(cfg::parse_config("", o), ConfigError);
}

TEST_CASE("unknown keys and sections are rejected") {
  CHECK_THROWS_AS(cfg::parse_config("learning_rate = 0.1\n"), ConfigError);
  CHECK_THROWS_AS(cfg::parse_config("[model]\nwidth = 3\n"), ConfigError);
  CHECK_THROWS_AS(cfg::parse_config("[optimizer]\nlr = 3\n"), ConfigError);
}

TEST_CASE("serialized config reads back identically") {
  for (const char* env : {"cartpole", "acrobot"}) {
    cfg::Overrides o;
    o.env = env;
    o.seed = 12345678901234ULL;
    cfg::RunConfig c = cfg::parse_config("[train]\npolicy_lr = 0.000123456789\nexploration = \"uniform-random\"\n", o);
    c.model.var_floor = 1.0 / 3.0;
    c.ppo.clip = 0.25;
    const std::string text = cfg::to_toml(c);
    const cfg::RunConfig back = cfg::parse_config(text);
    CHECK(back == c);
    CHECK(back.train.policy_lr == c.train.policy_lr);
    CHECK(back.model.var_floor == c.model.var_floor);
    CHECK(cfg::to_toml(back) == text);
  }
}

TEST_CASE("config files") {
  const auto dir = std::filesystem::temp_directory_path() / "gssm_test_config";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  CHECK_THROWS_AS(cfg::load_config(dir / "missing.toml"), ConfigError);

  const cfg::RunConfig c = cfg::parse_config("env = \"acrobot\"\nseed = 4\n");
  cfg::write_effective_config(dir / "effective_config.toml", c);
  CHECK(cfg::load_config(dir / "effective_config.toml") == c);
  std::filesystem::remove_all(dir);
}
