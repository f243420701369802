#pragma once

// Experiment drivers shared by the command-line tool and the acceptance
// runner: train-then-test runs, the policy-mode ablation, the latent-size
// sweep and the bounds sweep, each with its CSV outputs.

#include "gssm/bounds.hpp"
#include "gssm/config.hpp"
#include "gssm/meta.hpp"

#include <filesystem>
#include <vector>

namespace gssm::exp {

enum class TestMode { amortized, finetune };

struct RunSummary {
  cfg::RunConfig config;
  TestMode mode = TestMode::amortized;
  double mean_return = 0.0;   // averaged over held-out tasks
  double std_return = 0.0;    // across held-out tasks
  double one_step_mse = 0.0;  // averaged over held-out tasks
  std::size_t adaptation_steps = 0;
  std::uint64_t optimizer_steps = 0;  // global optimizer steps taken during testing
  std::size_t tasks = 0;
  std::size_t fallbacks = 0;
};

/// Evaluates a trained agent on config.test.tasks unseen tasks and writes
/// <out>/test_results.csv. Amortized testing asserts zero optimizer steps.
RunSummary test_agent(meta::Agent& agent, TestMode mode, const std::filesystem::path& out);

/// Trains into c.out_dir and tests the final agent (amortized policies are
/// tested amortized, latent-free policies are fine-tuned).
RunSummary train_and_test(const cfg::RunConfig& c);

/// Header: label,env,encoder,policy_mode,dim_lat,seed,test_mode,mean_return,std_return,one_step_mse,
///         adaptation_steps,optimizer_steps,tasks,fallbacks
void write_summary(const std::filesystem::path& file, const std::vector<std::pair<std::string, RunSummary>>& rows);

/// Amortized vs latent-free policy at equal budget, one pair per seed, into
/// <base.out_dir>/<mode>_s<seed>/.
std::vector<std::pair<std::string, RunSummary>> run_ablation(const cfg::RunConfig& base,
                                                             const std::vector<std::uint64_t>& seeds);

/// One run per latent size into <base.out_dir>/dim_<d>_s<seed>/.
std::vector<std::pair<std::string, RunSummary>> run_latent_sweep(const cfg::RunConfig& base,
                                                                 const std::vector<std::size_t>& dims,
                                                                 const std::vector<std::uint64_t>& seeds);

/// Lemma and theorem sweeps; writes bound_report.csv and bound_summary.csv.
bounds::SweepResult run_bounds(const bounds::SweepConfig& sc, std::uint64_t seed, const std::filesystem::path& out);

std::string_view test_mode_name(TestMode m);

}  // namespace gssm::exp
