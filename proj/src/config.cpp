#include "gssm/config.hpp"

#include <toml.hpp>

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace gssm::cfg {

namespace {

struct Field {
  std::string section;  // empty = top level
  std::string key;
  std::function<void(RunConfig&, const toml::node&)> set;
  std::function<std::string(const RunConfig&)> get;
};

std::string toml_quote(std::string_view s) {
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"' || ch == '\\') out += '\\';
    out += ch;
  }
  return out + "\"";
}

std::size_t as_size(const toml::node& n, const std::string& name) {
  const auto v = n.value<std::int64_t>();
  if (!v || !n.is_integer()) throw ConfigError(name + ": expected an integer");
  if (*v < 0) throw ConfigError(name + ": must be >= 0");
  return static_cast<std::size_t>(*v);
}

double as_double(const toml::node& n, const std::string& name) {
  if (!n.is_number()) throw ConfigError(name + ": expected a number");
  return *n.value<double>();
}

bool as_bool(const toml::node& n, const std::string& name) {
  if (!n.is_boolean()) throw ConfigError(name + ": expected true or false");
  return *n.value<bool>();
}

std::string as_string(const toml::node& n, const std::string& name) {
  if (!n.is_string()) throw ConfigError(name + ": expected a string");
  return *n.value<std::string>();
}

template <class G, class T>
Field size_field(std::string sec, std::string key, G RunConfig::*group, T G::*member) {
  const std::string name = sec + "." + key;
  return {sec, key, [=](RunConfig& c, const toml::node& n) { (c.*group).*member = as_size(n, name); },
          [=](const RunConfig& c) { return std::to_string((c.*group).*member); }};
}

template <class G>
Field double_field(std::string sec, std::string key, G RunConfig::*group, double G::*member) {
  const std::string name = sec + "." + key;
  return {sec, key, [=](RunConfig& c, const toml::node& n) { (c.*group).*member = as_double(n, name); },
          [=](const RunConfig& c) {
            // keep a decimal point or exponent so the value reads back as a float
            char buf[32];
            const auto res = std::to_chars(buf, buf + sizeof buf, (c.*group).*member);
            std::string s(buf, res.ptr);
            if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
            return s;
          }};
}

template <class G>
Field bool_field(std::string sec, std::string key, G RunConfig::*group, bool G::*member) {
  const std::string name = sec + "." + key;
  return {sec, key, [=](RunConfig& c, const toml::node& n) { (c.*group).*member = as_bool(n, name); },
          [=](const RunConfig& c) { return std::string((c.*group).*member ? "true" : "false"); }};
}

template <class G>
Field string_field(std::string sec, std::string key, G RunConfig::*group, std::string G::*member) {
  const std::string name = sec + "." + key;
  return {sec, key, [=](RunConfig& c, const toml::node& n) { (c.*group).*member = as_string(n, name); },
          [=](const RunConfig& c) { return toml_quote((c.*group).*member); }};
}

template <class E, class Parse, class Name>
Field enum_field(std::string key, E RunConfig::*member, Parse parse, Name name) {
  return {"", key,
          [=](RunConfig& c, const toml::node& n) {
            const std::string s = as_string(n, key);
            try {
              c.*member = parse(s);
            } catch (const std::invalid_argument& e) {
              throw ConfigError(key + ": " + e.what());
            }
          },
          [=](const RunConfig& c) { return toml_quote(name(c.*member)); }};
}

const std::vector<Field>& fields() {
  using M = ModelConfig;
  using T = TrainConfig;
  using B = pol::BpttConfig;
  using P = pol::PpoConfig;
  using X = TestConfig;
  static const std::vector<Field> all = [] {
    std::vector<Field> f;
    f.push_back(enum_field("env", &RunConfig::env, [](std::string_view s) { return envs::parse_env_id(s); },
                           [](envs::EnvId e) { return envs::env_name(e); }));
    f.push_back(enum_field("encoder", &RunConfig::encoder,
                           [](std::string_view s) { return enc::parse_encoder_kind(s); },
                           [](enc::EncoderKind k) { return enc::encoder_kind_name(k); }));
    f.push_back(enum_field("policy_mode", &RunConfig::policy_mode,
                           [](std::string_view s) { return pol::parse_policy_mode(s); },
                           [](pol::PolicyMode m) { return pol::policy_mode_name(m); }));
    f.push_back({"", "seed", [](RunConfig& c, const toml::node& n) { c.seed = as_size(n, "seed"); },
                 [](const RunConfig& c) { return std::to_string(c.seed); }});
    f.push_back({"", "out_dir", [](RunConfig& c, const toml::node& n) { c.out_dir = as_string(n, "out_dir"); },
                 [](const RunConfig& c) { return toml_quote(c.out_dir); }});

    f.push_back(size_field("model", "dim_lat", &RunConfig::model, &M::dim_lat));
    f.push_back(size_field("model", "dim_latxy", &RunConfig::model, &M::dim_latxy));
    f.push_back(size_field("model", "mp_layers", &RunConfig::model, &M::mp_layers));
    f.push_back(size_field("model", "decoder_layers", &RunConfig::model, &M::decoder_layers));
    f.push_back(size_field("model", "dim_h", &RunConfig::model, &M::dim_h));
    f.push_back(bool_field("model", "self_inclusive", &RunConfig::model, &M::self_inclusive));
    f.push_back(double_field("model", "var_floor", &RunConfig::model, &M::var_floor));
    f.push_back(size_field("model", "k_train", &RunConfig::model, &M::k_train));
    f.push_back(size_field("model", "k_eval", &RunConfig::model, &M::k_eval));

    f.push_back(size_field("train", "iterations", &RunConfig::train, &T::iterations));
    f.push_back(size_field("train", "task_resample_every", &RunConfig::train, &T::task_resample_every));
    f.push_back(size_field("train", "buffer_episodes", &RunConfig::train, &T::buffer_episodes));
    f.push_back(size_field("train", "context_min", &RunConfig::train, &T::context_min));
    f.push_back(size_field("train", "context_max", &RunConfig::train, &T::context_max));
    f.push_back(size_field("train", "max_targets", &RunConfig::train, &T::max_targets));
    f.push_back(size_field("train", "tasks_per_batch", &RunConfig::train, &T::tasks_per_batch));
    f.push_back(size_field("train", "dynamics_updates", &RunConfig::train, &T::dynamics_updates));
    f.push_back(double_field("train", "dynamics_lr", &RunConfig::train, &T::dynamics_lr));
    f.push_back(size_field("train", "policy_updates", &RunConfig::train, &T::policy_updates));
    f.push_back(double_field("train", "policy_lr", &RunConfig::train, &T::policy_lr));
    f.push_back(string_field("train", "exploration", &RunConfig::train, &T::exploration));
    f.push_back(double_field("train", "exploration_noise", &RunConfig::train, &T::exploration_noise));
    f.push_back(size_field("train", "exploration_hold", &RunConfig::train, &T::exploration_hold));
    f.push_back(double_field("train", "start_state_prob", &RunConfig::train, &T::start_state_prob));
    f.push_back(size_field("train", "eval_tasks", &RunConfig::train, &T::eval_tasks));
    f.push_back(size_field("train", "eval_episodes", &RunConfig::train, &T::eval_episodes));
    f.push_back(size_field("train", "eval_k", &RunConfig::train, &T::eval_k));
    f.push_back(size_field("train", "checkpoint_every", &RunConfig::train, &T::checkpoint_every));

    f.push_back(size_field("bptt", "horizon", &RunConfig::bptt, &B::horizon));
    f.push_back(double_field("bptt", "gamma", &RunConfig::bptt, &B::gamma));
    f.push_back(size_field("bptt", "rollouts", &RunConfig::bptt, &B::rollouts));
    f.push_back(double_field("bptt", "clip_norm", &RunConfig::bptt, &B::clip_norm));
    f.push_back(bool_field("bptt", "mean_only", &RunConfig::bptt, &B::mean_only));

    f.push_back(double_field("ppo", "clip", &RunConfig::ppo, &P::clip));
    f.push_back(size_field("ppo", "epochs", &RunConfig::ppo, &P::epochs));
    f.push_back(size_field("ppo", "minibatch", &RunConfig::ppo, &P::minibatch));
    f.push_back(double_field("ppo", "entropy_coef", &RunConfig::ppo, &P::entropy_coef));
    f.push_back(double_field("ppo", "value_coef", &RunConfig::ppo, &P::value_coef));
    f.push_back(double_field("ppo", "lambda", &RunConfig::ppo, &P::lambda));
    f.push_back(double_field("ppo", "gamma", &RunConfig::ppo, &P::gamma));
    f.push_back(size_field("ppo", "rollout_horizon", &RunConfig::ppo, &P::rollout_horizon));
    f.push_back(size_field("ppo", "rollouts", &RunConfig::ppo, &P::rollouts));
    f.push_back(double_field("ppo", "clip_norm", &RunConfig::ppo, &P::clip_norm));

    f.push_back(size_field("test", "tasks", &RunConfig::test, &X::tasks));
    f.push_back(size_field("test", "episodes", &RunConfig::test, &X::episodes));
    f.push_back(size_field("test", "context", &RunConfig::test, &X::context));
    f.push_back(size_field("test", "mse_targets", &RunConfig::test, &X::mse_targets));
    f.push_back(size_field("test", "finetune_steps", &RunConfig::test, &X::finetune_steps));
    return f;
  }();
  return all;
}

const Field* find_field(std::string_view section, std::string_view key) {
  for (const Field& f : fields())
    if (f.section == section && f.key == key) return &f;
  return nullptr;
}

bool known_section(std::string_view s) {
  for (const Field& f : fields())
    if (!f.section.empty() && f.section == s) return true;
  return false;
}

toml::table parse_toml(std::string_view text) {
  try {
    return toml::parse(text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "TOML parse error at line " << e.source().begin.line << ": " << e.description();
    throw ConfigError(msg.str());
  }
}

void apply_table(RunConfig& c, const toml::table& root) {
  for (auto&& [k, node] : root) {
    const std::string key(k.str());
    if (node.is_table()) {
      if (!known_section(key)) throw ConfigError("unknown section [" + key + "]");
      for (auto&& [sk, sub] : *node.as_table()) {
        const Field* f = find_field(key, sk.str());
        if (!f) throw ConfigError("unknown key " + key + "." + std::string(sk.str()));
        f->set(c, sub);
      }
    } else {
      const Field* f = find_field("", key);
      if (!f) throw ConfigError("unknown key " + key);
      f->set(c, node);
    }
  }
}

template <class Fn>
auto wrap(const std::string& name, Fn fn) {
  try {
    return fn();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(name + ": " + e.what());
  }
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

}  // namespace

RunConfig defaults_for(envs::EnvId env) {
  RunConfig c;
  c.env = env;
  if (env == envs::EnvId::acrobot) {
    c.model.decoder_layers = 5;
    c.model.dim_h = 400;
    c.model.k_eval = 8;
    c.train.iterations = 100;
    c.train.task_resample_every = 3;
    c.train.policy_updates = 3;
    c.train.dynamics_updates = 10;
    c.train.max_targets = 32;
    c.bptt.horizon = 200;
  } else {
    c.bptt.horizon = static_cast<std::size_t>(envs::CartpoleParams{}.horizon);
    c.bptt.rollouts = 32;
    c.train.exploration = "uniform-random";
    c.train.exploration_hold = 4;
    c.train.start_state_prob = 0.0;
  }
  return c;
}

RunConfig parse_config(std::string_view toml_text, const Overrides& o) {
  const toml::table root = parse_toml(toml_text);
  envs::EnvId env = envs::EnvId::cartpole;
  if (o.env) {
    env = wrap("env", [&] { return envs::parse_env_id(*o.env); });
  } else if (const toml::node* n = root.get("env")) {
    env = wrap("env", [&] { return envs::parse_env_id(as_string(*n, "env")); });
  }
  RunConfig c = defaults_for(env);
  if (o.out_dir_fallback) c.out_dir = *o.out_dir_fallback;
  apply_table(c, root);
  c.env = env;
  if (o.seed) c.seed = *o.seed;
  if (o.iterations) c.train.iterations = *o.iterations;
  if (o.encoder) c.encoder = wrap("encoder", [&] { return enc::parse_encoder_kind(*o.encoder); });
  if (o.policy_mode) c.policy_mode = wrap("policy_mode", [&] { return pol::parse_policy_mode(*o.policy_mode); });
  if (o.out_dir) c.out_dir = *o.out_dir;
  validate(c);
  return c;
}

RunConfig load_config(const std::filesystem::path& file, const Overrides& o) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot read config file " + file.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str(), o);
}

void validate(const RunConfig& c) {
  const auto& m = c.model;
  require(m.dim_lat > 0, "model.dim_lat must be > 0");
  require(m.dim_latxy > 0, "model.dim_latxy must be > 0");
  require(m.mp_layers > 0, "model.mp_layers must be > 0");
  require(m.decoder_layers > 0, "model.decoder_layers must be > 0");
  require(m.dim_h > 0, "model.dim_h must be > 0");
  require(m.var_floor > 0.0, "model.var_floor must be > 0");
  require(m.k_train > 0, "model.k_train must be > 0");
  require(m.k_eval > 0, "model.k_eval must be > 0");

  const auto& t = c.train;
  require(t.task_resample_every > 0, "train.task_resample_every must be > 0");
  require(t.buffer_episodes > 0, "train.buffer_episodes must be > 0");
  require(t.context_min > 0, "train.context_min must be > 0");
  require(t.context_max >= t.context_min, "train.context_max must be >= train.context_min");
  require(t.max_targets > 0, "train.max_targets must be > 0");
  require(t.tasks_per_batch > 0, "train.tasks_per_batch must be > 0");
  require(t.dynamics_lr > 0.0, "train.dynamics_lr must be > 0");
  require(t.policy_lr > 0.0, "train.policy_lr must be > 0");
  require(t.exploration == "current-policy" || t.exploration == "uniform-random",
          "train.exploration must be current-policy or uniform-random");
  require(t.exploration_noise >= 0.0, "train.exploration_noise must be >= 0");
  require(t.exploration_hold > 0, "train.exploration_hold must be > 0");
  require(t.start_state_prob >= 0.0 && t.start_state_prob <= 1.0, "train.start_state_prob must be in [0, 1]");
  require(t.eval_episodes > 0, "train.eval_episodes must be > 0");
  require(t.eval_k > 0, "train.eval_k must be > 0");

  require(c.bptt.horizon > 0, "bptt.horizon must be > 0");
  require(c.bptt.gamma >= 0.0 && c.bptt.gamma <= 1.0, "bptt.gamma must be in [0, 1]");
  require(c.bptt.rollouts > 0, "bptt.rollouts must be > 0");
  require(c.bptt.clip_norm > 0.0, "bptt.clip_norm must be > 0");

  require(c.ppo.clip > 0.0 && c.ppo.clip < 1.0, "ppo.clip must be in (0, 1)");
  require(c.ppo.epochs > 0, "ppo.epochs must be > 0");
  require(c.ppo.minibatch > 0, "ppo.minibatch must be > 0");
  require(c.ppo.entropy_coef >= 0.0, "ppo.entropy_coef must be >= 0");
  require(c.ppo.value_coef >= 0.0, "ppo.value_coef must be >= 0");
  require(c.ppo.lambda >= 0.0 && c.ppo.lambda <= 1.0, "ppo.lambda must be in [0, 1]");
  require(c.ppo.gamma >= 0.0 && c.ppo.gamma <= 1.0, "ppo.gamma must be in [0, 1]");
  require(c.ppo.rollout_horizon > 0, "ppo.rollout_horizon must be > 0");
  require(c.ppo.rollouts > 0, "ppo.rollouts must be > 0");
  require(c.ppo.clip_norm > 0.0, "ppo.clip_norm must be > 0");

  require(c.test.episodes > 0, "test.episodes must be > 0");
  require(c.test.context > 0, "test.context must be > 0");
  require(c.test.mse_targets > 0, "test.mse_targets must be > 0");
  require(!c.out_dir.empty(), "out_dir must not be empty");
}

std::string to_toml(const RunConfig& c) {
  std::ostringstream out;
  for (const Field& f : fields())
    if (f.section.empty()) out << f.key << " = " << f.get(c) << '\n';
  std::string current;
  for (const Field& f : fields()) {
    if (f.section.empty()) continue;
    if (f.section != current) {
      out << '\n' << '[' << f.section << "]\n";
      current = f.section;
    }
    out << f.key << " = " << f.get(c) << '\n';
  }
  return out.str();
}

void write_effective_config(const std::filesystem::path& file, const RunConfig& c) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << to_toml(c);
}

bool operator==(const RunConfig& a, const RunConfig& b) { return to_toml(a) == to_toml(b); }

}  // namespace gssm::cfg
