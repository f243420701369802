#include "gssm/experiments.hpp"

#include "gssm/csv.hpp"

#include <cmath>

namespace gssm::exp {

std::string_view test_mode_name(TestMode m) { return m == TestMode::amortized ? "amortized" : "finetune"; }

RunSummary test_agent(meta::Agent& agent, TestMode mode, const std::filesystem::path& out) {
  const cfg::RunConfig& c = agent.config;
  const auto tasks = meta::test_tasks(c.env, c.seed, c.test.tasks);
  Rng rng = Rng(c.seed).split("test");
  const std::uint64_t before = ad::Adam::global_step_count();
  const auto results = mode == TestMode::amortized ? meta::meta_test_amortized(agent, tasks, rng)
                                                   : meta::meta_test_finetune(agent, tasks, c.test.finetune_steps, rng);
  RunSummary s;
  s.config = c;
  s.mode = mode;
  s.optimizer_steps = ad::Adam::global_step_count() - before;
  std::vector<double> returns;
  for (const auto& r : results) {
    if (r.skipped) continue;
    returns.push_back(r.mean_return);
    s.one_step_mse += r.one_step_mse;
    s.adaptation_steps += r.adaptation_steps;
    s.fallbacks += r.fallback ? 1 : 0;
  }
  s.tasks = returns.size();
  if (s.tasks > 0) {
    for (double r : returns) s.mean_return += r;
    s.mean_return /= static_cast<double>(s.tasks);
    s.one_step_mse /= static_cast<double>(s.tasks);
    double var = 0.0;
    for (double r : returns) var += (r - s.mean_return) * (r - s.mean_return);
    s.std_return = s.tasks > 1 ? std::sqrt(var / static_cast<double>(s.tasks - 1)) : 0.0;
  }
  std::filesystem::create_directories(out);
  meta::write_test_results(out / "test_results.csv", results);
  return s;
}

RunSummary train_and_test(const cfg::RunConfig& c) {
  auto trained = meta::meta_train(c);
  const TestMode mode = c.policy_mode == pol::PolicyMode::amortized ? TestMode::amortized : TestMode::finetune;
  return test_agent(*trained.agent, mode, c.out_dir);
}

void write_summary(const std::filesystem::path& file, const std::vector<std::pair<std::string, RunSummary>>& rows) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  csv::Writer w(file,
                {"label", "env", "encoder", "policy_mode", "dim_lat", "seed", "test_mode", "mean_return", "std_return",
                 "one_step_mse", "adaptation_steps", "optimizer_steps", "tasks", "fallbacks"},
                false);
  for (const auto& [label, s] : rows) {
    w.field(label).field(envs::env_name(s.config.env)).field(enc::encoder_kind_name(s.config.encoder))
        .field(pol::policy_mode_name(s.config.policy_mode)).field(s.config.model.dim_lat).field(s.config.seed)
        .field(test_mode_name(s.mode)).field(s.mean_return).field(s.std_return).field(s.one_step_mse)
        .field(s.adaptation_steps).field(s.optimizer_steps).field(s.tasks).field(s.fallbacks);
    w.end();
  }
}

std::vector<std::pair<std::string, RunSummary>> run_ablation(const cfg::RunConfig& base,
                                                             const std::vector<std::uint64_t>& seeds) {
  std::vector<std::pair<std::string, RunSummary>> rows;
  for (std::uint64_t seed : seeds) {
    for (auto mode : {pol::PolicyMode::amortized, pol::PolicyMode::ablation}) {
      cfg::RunConfig c = base;
      c.seed = seed;
      c.policy_mode = mode;
      const std::string label = std::string(pol::policy_mode_name(mode)) + "_s" + std::to_string(seed);
      c.out_dir = (std::filesystem::path(base.out_dir) / label).string();
      rows.emplace_back(label, train_and_test(c));
      write_summary(std::filesystem::path(base.out_dir) / "ablation_summary.csv", rows);
    }
  }
  return rows;
}

std::vector<std::pair<std::string, RunSummary>> run_latent_sweep(const cfg::RunConfig& base,
                                                                 const std::vector<std::size_t>& dims,
                                                                 const std::vector<std::uint64_t>& seeds) {
  std::vector<std::pair<std::string, RunSummary>> rows;
  for (std::uint64_t seed : seeds) {
    for (std::size_t d : dims) {
      cfg::RunConfig c = base;
      c.seed = seed;
      c.model.dim_lat = d;
      cfg::validate(c);
      const std::string label = "dim_" + std::to_string(d) + "_s" + std::to_string(seed);
      c.out_dir = (std::filesystem::path(base.out_dir) / label).string();
      rows.emplace_back(label, train_and_test(c));
      write_summary(std::filesystem::path(base.out_dir) / "sweep_summary.csv", rows);
    }
  }
  return rows;
}

bounds::SweepResult run_bounds(const bounds::SweepConfig& sc, std::uint64_t seed, const std::filesystem::path& out) {
  Rng rng = Rng(seed).split("bounds");
  const bounds::SweepResult r = bounds::run_sweep(sc, rng);
  std::filesystem::create_directories(out);
  bounds::write_bound_report(out / "bound_report.csv", r);
  csv::Writer w(out / "bound_summary.csv",
                {"check", "pairs", "violations", "mean_gap_or_regret", "mean_bound", "averaged_form_holds"}, false);
  w.field("lemma").field(r.lemma.size()).field(r.lemma_violations).field(r.mean_gap_worst).field(r.mean_lemma_bound)
      .field(r.averaged_lemma_holds() ? 1 : 0);
  w.end();
  w.field("theorem").field(r.theorem.size()).field(r.theorem_violations).field(r.mean_regret)
      .field(r.mean_theorem_bound).field(r.averaged_theorem_holds() ? 1 : 0);
  w.end();
  return r;
}

}  // namespace gssm::exp
