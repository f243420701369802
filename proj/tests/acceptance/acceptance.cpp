// Acceptance runner. Prints one PASS/FAIL line per criterion and writes
// <out>/acceptance.csv.
//
//   acceptance [--only name[,name...]] [--out dir] [--gssm path] [--expect-fail name]... [--iters n]
//
// --iters shortens every training run for a quick plumbing check; results
// are then not meaningful against the thresholds.
//
// Exit status is 0 when every selected criterion passes or is listed with
// --expect-fail.

#include "gssm/dynamics.hpp"
#include "gssm/experiments.hpp"
#include "gssm/grad_check.hpp"

#include "oracles.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>

using namespace gssm;
using testing::random_matrix;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Options {
  std::set<std::string> only, expect_fail;
  std::filesystem::path out = "acceptance_out";
  std::string gssm;
  std::optional<std::size_t> iters;
};

const std::vector<std::uint64_t> kSeeds{1, 2, 3, 4, 5};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// --- gradients --------------------------------------------------------------

Outcome gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst_graph = 0.0;
  int graphs = 0, graph_fail = 0;
  for (std::uint64_t seed = 0; graphs < 100; ++seed) {
    auto g = testing::make_random_graph(seed);
    auto f = g.fn();
    (void)ad::evaluate(f, g.point);
    if (*g.closest_kink < 1e-3) continue;  // finite differences straddle a relu kink
    const auto r = ad::grad_check(f, g.point, 1e-6);
    worst_graph = std::max(worst_graph, r.max_rel_error);
    graph_fail += r.passed(1e-5) ? 0 : 1;
    ++graphs;
  }

  double worst_elbo = 0.0;
  int elbo_fail = 0;
  for (auto kind : {enc::EncoderKind::gssm, enc::EncoderKind::mean_pool}) {
    Rng rng(7);
    enc::EncoderConfig ec;
    ec.dim_x = 2;
    ec.dim_y = 2;
    ec.dim_latxy = 8;
    ec.dim_lat = 3;
    dyn::DecoderConfig dc;
    dc.dim_x = 2;
    dc.dim_y = 2;
    dc.dim_lat = 3;
    dc.hidden_layers = 2;
    dc.dim_h = 12;
    dyn::DynamicsModel model(kind, ec, dc, rng);
    std::vector<dyn::TaskItem> items;
    for (std::size_t k = 0; k < 2; ++k) {
      const std::size_t nc = k == 0 ? 5 : 2, nt = k == 0 ? 3 : 4;
      items.push_back({random_matrix(rng, nc, 2), random_matrix(rng, nc, 2), random_matrix(rng, nt, 2),
                       random_matrix(rng, nt, 2), k + 1, static_cast<int>(k + 1)});
    }
    const Rng noise(8);
    ad::LossFn loss = [&](ad::Tape& t) { return model.elbo(t, items, 3, noise, nn::Grad::track).loss; };
    for (ad::Param* p : model.params()) {
      const auto r = ad::grad_check_param(loss, *p);
      worst_elbo = std::max(worst_elbo, r.max_rel_error);
      elbo_fail += r.passed(1e-5) ? 0 : 1;
    }
  }

  double worst_bptt = 0.0;
  int bptt_fail = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(10 + seed);
    pol::Actor actor(pol::cartpole_actor_config(2, pol::PolicyMode::amortized), rng);
    testing::LinearToy toy(rng);
    const Matrix s0 = random_matrix(rng, 4, 4, 0.5), z = random_matrix(rng, 4, 2);
    for (std::size_t horizon : {1u, 10u, 25u}) {
      ad::LossFn j = [&](ad::Tape& t) {
        return pol::bptt_objective(t, actor, t.constant(s0), t.constant(z), toy.step(), toy.reward(), horizon, 0.95,
                                   nn::Grad::track);
      };
      for (auto* p : actor.params()) {
        const auto r = ad::grad_check_param(j, *p);
        worst_bptt = std::max(worst_bptt, r.max_rel_error);
        bptt_fail += r.passed(1e-4) ? 0 : 1;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {graph_fail + elbo_fail + bptt_fail == 0 && secs < 30.0,
          fmt("graphs=%d max_rel=%.2e elbo_max_rel=%.2e bptt_max_rel=%.2e failures=%d seconds=%.1f", graphs,
              worst_graph, worst_elbo, worst_bptt, graph_fail + elbo_fail + bptt_fail, secs)};
}

// --- encoder ----------------------------------------------------------------

enc::EncoderConfig small_encoder(bool self_inclusive) {
  enc::EncoderConfig c;
  c.dim_x = 3;
  c.dim_y = 2;
  c.dim_latxy = 6;
  c.dim_lat = 4;
  c.layers = 2;
  c.self_inclusive = self_inclusive;
  return c;
}

Outcome encoder_properties() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst_perm = 0.0;
  for (auto kind : {enc::EncoderKind::gssm, enc::EncoderKind::mean_pool}) {
    Rng rng(6);
    auto e = enc::make_encoder(kind, small_encoder(true), rng);
    for (int set = 0; set < 100; ++set) {
      const std::size_t n = 2 + rng.index(30), m = 1 + rng.index(6);
      const Matrix xc = random_matrix(rng, n, 3), yc = random_matrix(rng, n, 2);
      const Matrix xt = random_matrix(rng, m, 3), yt = random_matrix(rng, m, 2);
      const auto perm = rng.permutation(n);
      const Matrix xp = testing::permute_rows(xc, perm), yp = testing::permute_rows(yc, perm);
      ad::Tape t;
      const auto a = enc::DiagGaussian::of(e->prior(t, xc, yc, nn::Grad::frozen));
      const auto b = enc::DiagGaussian::of(e->prior(t, xp, yp, nn::Grad::frozen));
      const auto pa = enc::DiagGaussian::of(e->posterior(t, xc, yc, xt, yt, nn::Grad::frozen));
      const auto pb = enc::DiagGaussian::of(e->posterior(t, xp, yp, xt, yt, nn::Grad::frozen));
      worst_perm = std::max({worst_perm, (a.mean - b.mean).cwiseAbs().maxCoeff(),
                             (a.logvar - b.logvar).cwiseAbs().maxCoeff(), (pa.mean - pb.mean).cwiseAbs().maxCoeff(),
                             (pa.logvar - pb.logvar).cwiseAbs().maxCoeff()});
    }
  }

  double worst_row = 0.0;
  bool nonnegative = true;
  double worst_oracle = 0.0;
  for (bool self_inclusive : {true, false}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(100 + seed);
      enc::GraphEncoder e(small_encoder(self_inclusive), rng);
      e.beta().value(0, 0) = rng.uniform(0.5, 3.0);
      testing::EncoderOracle oracle{e, self_inclusive};
      for (std::size_t n = 1; n <= 5; ++n) {
        const Matrix x = random_matrix(rng, n, 3), y = random_matrix(rng, n, 2), xt = random_matrix(rng, 3, 3);
        ad::Tape t;
        const auto emb = e.embed(t, x, y, nn::Grad::frozen);
        const auto q = e.prior(t, x, y, nn::Grad::frozen);
        const auto pt = e.pooled_target(t, emb, xt, nn::Grad::frozen);
        worst_oracle = std::max({worst_oracle, (emb.weights.value() - oracle.weights(x)).cwiseAbs().maxCoeff(),
                                 (emb.nodes.value() - oracle.nodes(x, y)).cwiseAbs().maxCoeff(),
                                 (q.mean.value() - oracle.prior_mean(x, y)).cwiseAbs().maxCoeff(),
                                 (pt.second.value() - oracle.target_pooled(x, y, xt)).cwiseAbs().maxCoeff()});
      }
      for (int rep = 0; rep < 5; ++rep) {
        const std::size_t n = 2 + rng.index(20);
        e.beta().value(0, 0) = rng.uniform(-5, 5);
        ad::Tape t;
        const auto emb = e.embed(t, random_matrix(rng, n, 3, 3.0), random_matrix(rng, n, 2), nn::Grad::frozen);
        const auto pt = e.pooled_target(t, emb, random_matrix(rng, 4, 3), nn::Grad::frozen);
        worst_row = std::max({worst_row, (emb.weights.value().rowwise().sum().array() - 1.0).abs().maxCoeff(),
                              (pt.first.value().rowwise().sum().array() - 1.0).abs().maxCoeff()});
        nonnegative = nonnegative && emb.weights.value().minCoeff() >= 0.0 && pt.first.value().minCoeff() >= 0.0;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst_perm <= 1e-10 && worst_row <= 1e-10 && nonnegative && worst_oracle <= 1e-12 && secs < 10.0,
          fmt("permutation_max=%.2e row_sum_err=%.2e nonnegative=%d oracle_max=%.2e seconds=%.2f", worst_perm,
              worst_row, nonnegative ? 1 : 0, worst_oracle, secs)};
}

// --- analytic ---------------------------------------------------------------

Outcome analytic() {
  const auto t0 = std::chrono::steady_clock::now();
  auto row = [](double v) { return Eigen::RowVectorXd::Constant(1, v); };
  Rng rng(11);
  double worst_nll = 0.0, worst_kl = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double mu = rng.uniform(-3, 3), sd = std::exp(rng.uniform(-1.5, 1.5));
    const double y = mu + sd * rng.uniform(-3, 3);
    worst_nll = std::max(worst_nll, std::abs(dyn::gaussian_nll(row(y), row(mu), row(sd * sd)) +
                                             std::log(testing::density_from_cdf(y, mu, sd))));
    const double mq = rng.uniform(-2, 2), sq = std::exp(rng.uniform(-1, 1));
    const double mp = rng.uniform(-2, 2), sp = std::exp(rng.uniform(-1, 1));
    worst_kl = std::max(worst_kl, std::abs(dyn::kl_diag(row(mq), row(sq * sq), row(mp), row(sp * sp)) -
                                           testing::kl_quadrature(mq, sq, mp, sp)));
  }
  const double secs = seconds_since(t0);
  return {worst_nll <= 1e-6 && worst_kl <= 1e-6 && secs < 10.0,
          fmt("nll_max_err=%.2e kl_max_err=%.2e seconds=%.2f", worst_nll, worst_kl, secs)};
}

// --- bounds -----------------------------------------------------------------

Outcome bounds_sweep(const Options& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const bounds::SweepConfig sc;  // 100 pairs x 1e4 policies, 500 theorem pairs, |S|<=5, |A|<=3, gamma 0.9
  const auto r = exp::run_bounds(sc, 1, o.out / "bounds");
  const double secs = seconds_since(t0);
  return {r.lemma.size() == sc.lemma_pairs && r.theorem.size() == sc.theorem_pairs && r.lemma_violations == 0 &&
              r.theorem_violations == 0 && secs < 120.0,
          fmt("lemma_pairs=%zu lemma_violations=%zu theorem_pairs=%zu theorem_violations=%zu averaged_forms=%d/%d "
              "seconds=%.1f",
              r.lemma.size(), r.lemma_violations, r.theorem.size(), r.theorem_violations,
              r.averaged_lemma_holds() ? 1 : 0, r.averaged_theorem_holds() ? 1 : 0, secs)};
}

// --- cartpole ---------------------------------------------------------------

struct CartpoleRun {
  std::uint64_t seed = 0;
  exp::RunSummary gssm, mean_pool;
  double mse_full = 0.0, mse_one = 0.0;
};

cfg::RunConfig run_config(const Options& o, envs::EnvId env, std::uint64_t seed, const std::filesystem::path& out) {
  cfg::Overrides ov;
  ov.iterations = o.iters;
  ov.env = std::string(envs::env_name(env));
  ov.seed = seed;
  ov.out_dir = out.string();
  return cfg::parse_config("", ov);
}

struct CartpoleResults {
  std::vector<CartpoleRun> runs;
  double seconds = 0.0;
};

CartpoleResults cartpole_experiment(const Options& o) {
  CartpoleResults res;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::uint64_t seed : kSeeds) {
    CartpoleRun run;
    run.seed = seed;
    for (auto kind : {enc::EncoderKind::gssm, enc::EncoderKind::mean_pool}) {
      cfg::RunConfig c = run_config(o, envs::EnvId::cartpole, seed,
                                    o.out / "cartpole" / (std::string(enc::encoder_kind_name(kind)) + "_s" + std::to_string(seed)));
      c.encoder = kind;
      auto trained = meta::meta_train(c);
      const auto s = exp::test_agent(*trained.agent, exp::TestMode::amortized, c.out_dir);
      (kind == enc::EncoderKind::gssm ? run.gssm : run.mean_pool) = s;
      if (kind == enc::EncoderKind::gssm) {
        // posterior contraction on 20 unseen tasks
        const envs::Environment env(envs::EnvId::cartpole);
        Rng rng = Rng(seed).split("contraction");
        std::vector<meta::TaskData> data;
        for (const auto& t : meta::test_tasks(envs::EnvId::cartpole, seed, 20)) {
          Rng dr = rng.split(static_cast<std::uint64_t>(t.id));
          data.push_back(meta::collect_task_data(env, t, 50, 100, dr));
        }
        Rng m50 = rng.split("z"), m1 = rng.split("z");
        run.mse_full = meta::context_mse(*trained.agent, data, 50, m50);
        run.mse_one = meta::context_mse(*trained.agent, data, 1, m1);
      }
      std::cout << "  cartpole seed " << seed << ' ' << enc::encoder_kind_name(kind) << " mse=" << s.one_step_mse
                << " return=" << s.mean_return << " (" << seconds_since(t0) << " s)" << std::endl;
    }
    res.runs.push_back(run);
  }
  res.seconds = seconds_since(t0);
  exp::write_summary(o.out / "cartpole" / "cartpole_summary.csv", [&] {
    std::vector<std::pair<std::string, exp::RunSummary>> rows;
    for (const auto& r : res.runs) {
      rows.emplace_back("gssm_s" + std::to_string(r.seed), r.gssm);
      rows.emplace_back("mean_pool_s" + std::to_string(r.seed), r.mean_pool);
    }
    return rows;
  }());
  return res;
}

Outcome cartpole_mse(const CartpoleResults& r) {
  int wins = 0;
  std::string per;
  for (const auto& run : r.runs) {
    wins += run.gssm.one_step_mse < run.mean_pool.one_step_mse ? 1 : 0;
    per += fmt(" s%llu=%.4f/%.4f", static_cast<unsigned long long>(run.seed), run.gssm.one_step_mse,
               run.mean_pool.one_step_mse);
  }
  return {wins >= 4 && r.seconds <= 3600.0,
          fmt("gssm_below_mean_pool=%d/5 (gssm/mean_pool)", wins) + per + fmt(" seconds=%.0f", r.seconds)};
}

Outcome cartpole_return(const CartpoleResults& r) {
  double total = 0.0;
  std::string per;
  for (const auto& run : r.runs) {
    total += run.gssm.mean_return;
    per += fmt(" s%llu=%.4f", static_cast<unsigned long long>(run.seed), run.gssm.mean_return);
  }
  const double mean = total / static_cast<double>(r.runs.size());
  return {mean >= -0.75 && r.seconds <= 3600.0, fmt("mean_normalized_return=%.4f threshold=-0.75", mean) + per};
}

Outcome contraction(const CartpoleResults& r) {
  int ok = 0;
  std::string per;
  for (const auto& run : r.runs) {
    ok += run.mse_full <= run.mse_one ? 1 : 0;
    per += fmt(" s%llu=%.4f/%.4f", static_cast<unsigned long long>(run.seed), run.mse_full, run.mse_one);
  }
  return {ok >= 4, fmt("mse50_le_mse1=%d/5 (n50/n1)", ok) + per};
}

// --- acrobot ablation -------------------------------------------------------

Outcome ablation(const Options& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const cfg::RunConfig base = run_config(o, envs::EnvId::acrobot, kSeeds.front(), o.out / "ablation");
  int wins = 0;
  std::uint64_t amortized_steps = 0;
  std::string per;
  const auto rows = exp::run_ablation(base, kSeeds);
  for (std::size_t i = 0; i + 1 < rows.size(); i += 2) {
    const auto& am = rows[i].second;
    const auto& ab = rows[i + 1].second;
    wins += am.mean_return >= ab.mean_return ? 1 : 0;
    amortized_steps += am.optimizer_steps;
    per += fmt(" s%llu=%.4f/%.4f", static_cast<unsigned long long>(am.config.seed), am.mean_return, ab.mean_return);
  }
  const double secs = seconds_since(t0);
  return {wins >= 4 && amortized_steps == 0 && secs <= 3 * 3600.0,
          fmt("amortized_ge_ablation=%d/5 amortized_optimizer_steps=%llu (amortized/ablation)", wins,
              static_cast<unsigned long long>(amortized_steps)) +
              per + fmt(" seconds=%.0f", secs)};
}

// --- determinism ------------------------------------------------------------

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism(const Options& o) {
  if (o.gssm.empty()) return {false, "no --gssm binary given"};
  std::string logs[2];
  for (int i = 0; i < 2; ++i) {
    const auto dir = o.out / "determinism" / ("run" + std::to_string(i));
    std::filesystem::remove_all(dir);
    const std::string cmd = "\"" + o.gssm + "\" train --env cartpole --seed 7 --out \"" + dir.string() + "\"" +
                            (o.iters ? " --iters " + std::to_string(*o.iters) : std::string()) + " > \"" +
                            (o.out / "determinism").string() + "/run" + std::to_string(i) + ".log\" 2>&1";
    std::filesystem::create_directories(o.out / "determinism");
    if (std::system(cmd.c_str()) != 0) return {false, "train run " + std::to_string(i) + " failed"};
    logs[i] = slurp(dir / "train_log.csv");
  }
  const bool same = !logs[0].empty() && logs[0] == logs[1];
  return {same, fmt("train_log_bytes=%zu identical=%d", logs[0].size(), same ? 1 : 0)};
}

std::set<std::string> split_list(const std::string& s) {
  std::set<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.insert(item);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    auto value = [&]() -> std::string {
      if (i + 1 >= argc) {
        std::cerr << "missing value for " << a << '\n';
        std::exit(2);
      }
      return argv[++i];
    };
    if (a == "--only") o.only = split_list(value());
    else if (a == "--out") o.out = value();
    else if (a == "--gssm") o.gssm = value();
    else if (a == "--iters") o.iters = std::stoul(value());
    else if (a == "--expect-fail") o.expect_fail.insert(value());
    else {
      std::cerr << "unknown argument " << a << '\n';
      return 2;
    }
  }
  std::filesystem::create_directories(o.out);
  auto selected = [&](std::initializer_list<const char*> names) {
    if (o.only.empty()) return true;
    return std::any_of(names.begin(), names.end(), [&](const char* n) { return o.only.count(n) > 0; });
  };

  std::ofstream csv(o.out / "acceptance.csv");
  csv << "criterion,status,expected_failure,detail\n";
  int blocking = 0;
  auto report = [&](const std::string& name, const Outcome& r) {
    const bool expected = o.expect_fail.count(name) > 0;
    std::string tag;
    if (!r.pass && expected) tag = " [expected failure]";
    if (r.pass && expected) tag = " [unexpected pass]";
    std::cout << (r.pass ? "PASS " : "FAIL ") << name << ": " << r.detail << tag << std::endl;
    csv << name << ',' << (r.pass ? "PASS" : "FAIL") << ',' << (expected ? 1 : 0) << ",\"" << r.detail << "\"\n";
    csv.flush();
    if (!r.pass && !expected) ++blocking;
  };
  auto guarded = [&](const std::string& name, const std::function<Outcome()>& f) {
    try {
      report(name, f());
    } catch (const std::exception& e) {
      report(name, {false, std::string("exception: ") + e.what()});
    }
  };

  if (selected({"gradients"})) guarded("gradients", gradients);
  if (selected({"encoder"})) guarded("encoder", encoder_properties);
  if (selected({"analytic"})) guarded("analytic", analytic);
  if (selected({"bounds"})) guarded("bounds", [&] { return bounds_sweep(o); });
  if (selected({"cartpole_mse", "cartpole_return", "contraction"})) {
    try {
      const CartpoleResults r = cartpole_experiment(o);
      if (selected({"cartpole_mse"})) report("cartpole_mse", cartpole_mse(r));
      if (selected({"cartpole_return"})) report("cartpole_return", cartpole_return(r));
      if (selected({"contraction"})) report("contraction", contraction(r));
    } catch (const std::exception& e) {
      for (const char* n : {"cartpole_mse", "cartpole_return", "contraction"})
        if (selected({n})) report(n, {false, std::string("exception: ") + e.what()});
    }
  }
  if (selected({"ablation"})) guarded("ablation", [&] { return ablation(o); });
  if (selected({"determinism"})) guarded("determinism", [&] { return determinism(o); });
  return blocking == 0 ? 0 : 1;
}
