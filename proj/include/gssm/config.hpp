#pragma once

// Run configuration: TOML file, then command-line overrides, then
// validation. Defaults depend on the environment, so the environment is
// resolved first.

#include "gssm/encoder.hpp"
#include "gssm/envs.hpp"
#include "gssm/policy.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace gssm::cfg {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  std::size_t dim_lat = 16;
  std::size_t dim_latxy = 32;
  std::size_t mp_layers = 2;       // message-passing layers (n)
  std::size_t decoder_layers = 2;  // decoder hidden layers (m)
  std::size_t dim_h = 200;
  bool self_inclusive = true;
  double var_floor = 1e-6;
  std::size_t k_train = 1;
  std::size_t k_eval = 32;
};

struct TrainConfig {
  std::size_t iterations = 200;
  std::size_t task_resample_every = 10;
  std::size_t buffer_episodes = 20;
  std::size_t context_min = 5;
  std::size_t context_max = 50;
  std::size_t max_targets = 50;
  std::size_t tasks_per_batch = 4;
  std::size_t dynamics_updates = 20;
  double dynamics_lr = 5e-4;
  std::size_t policy_updates = 5;
  double policy_lr = 5e-4;
  std::string exploration = "current-policy";  // or "uniform-random"
  double exploration_noise = 1.0;
  std::size_t exploration_hold = 1;  // steps each random draw is held
  double start_state_prob = 0.5;     // model rollouts start at an episode start, else any buffer state
  std::size_t eval_tasks = 3;
  std::size_t eval_episodes = 10;
  std::size_t eval_k = 8;
  std::size_t checkpoint_every = 0;  // 0 = final checkpoint only
};

struct TestConfig {
  std::size_t tasks = 10;
  std::size_t episodes = 50;
  std::size_t context = 50;
  std::size_t mse_targets = 100;
  std::size_t finetune_steps = 5;
};

struct RunConfig {
  envs::EnvId env = envs::EnvId::cartpole;
  enc::EncoderKind encoder = enc::EncoderKind::gssm;
  pol::PolicyMode policy_mode = pol::PolicyMode::amortized;
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";
  ModelConfig model;
  TrainConfig train;
  pol::BpttConfig bptt;
  pol::PpoConfig ppo;
  TestConfig test;
};

/// Defaults for an environment (network sizes, horizons, cadences).
RunConfig defaults_for(envs::EnvId env);

struct Overrides {
  std::optional<std::string> env;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> iterations;
  std::optional<std::string> encoder;
  std::optional<std::string> policy_mode;
  std::optional<std::string> out_dir;
  /// Used only when neither the file nor out_dir sets an output directory.
  std::optional<std::string> out_dir_fallback;
};

/// Parses TOML text (may be empty), applies overrides and validates.
RunConfig parse_config(std::string_view toml_text, const Overrides& overrides = {});
/// Same for a file; a missing file is a ConfigError.
RunConfig load_config(const std::filesystem::path& file, const Overrides& overrides = {});

/// Throws ConfigError naming the first invalid field.
void validate(const RunConfig& c);

/// Every resolved field as TOML; parse_config(to_toml(c)) == c.
std::string to_toml(const RunConfig& c);
void write_effective_config(const std::filesystem::path& file, const RunConfig& c);

bool operator==(const RunConfig& a, const RunConfig& b);

}  // namespace gssm::cfg
