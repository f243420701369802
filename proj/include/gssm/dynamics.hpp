#pragma once

// Latent-conditioned probabilistic dynamics: a decoder p(y | x, z) producing
// a diagonal Gaussian, the Monte-Carlo ELBO over a batch of tasks, and the
// K-particle predictive mixture. All network inputs and outputs live in
// standardized units; NormalizationStats converts at the boundary.

#include "gssm/autodiff.hpp"
#include "gssm/encoder.hpp"
#include "gssm/nn.hpp"
#include "gssm/rng.hpp"

#include <filesystem>
#include <memory>
#include <span>
#include <vector>

namespace gssm::dyn {

struct NormalizationStats {
  Eigen::RowVectorXd x_mean, x_std, y_mean, y_std;

  static NormalizationStats identity(std::size_t dim_x, std::size_t dim_y);
  [[nodiscard]] Matrix normalize_x(const Matrix& x) const;
  [[nodiscard]] Matrix normalize_y(const Matrix& y) const;
  [[nodiscard]] Matrix denormalize_y(const Matrix& y) const;
  [[nodiscard]] Matrix denormalize_y_var(const Matrix& var) const;
};

/// Per-column mean and population std; columns with std below 1e-6 get 1.
NormalizationStats fit_normalization(const Matrix& x, const Matrix& y);
Eigen::RowVectorXd column_std(const Matrix& m, const Eigen::RowVectorXd& mean);

struct DecoderConfig {
  std::size_t dim_x = 5;
  std::size_t dim_y = 4;
  std::size_t dim_lat = 16;
  std::size_t hidden_layers = 2;
  std::size_t dim_h = 200;
  double var_floor = 1e-6;
};

class Decoder {
 public:
  Decoder() = default;
  Decoder(const DecoderConfig& cfg, Rng& rng);

  /// Rows of x and z pair up; returns one Gaussian per row.
  enc::GaussianVar forward(ad::Tape& t, ad::Var x, ad::Var z, nn::Grad g);
  std::vector<ad::Param*> params() { return net_.params(); }
  nn::Mlp& net() { return net_; }
  [[nodiscard]] const DecoderConfig& config() const { return cfg_; }

 private:
  DecoderConfig cfg_;
  nn::Mlp net_;
};

/// Per-row 0.5 * sum_d [log(2 pi var) + (y - mean)^2 / var], as a column.
ad::Var gaussian_nll(ad::Var y, const enc::GaussianVar& q);
double gaussian_nll(const Eigen::RowVectorXd& y, const Eigen::RowVectorXd& mean, const Eigen::RowVectorXd& var);

/// Per-row KL(q || p) summed over dimensions. p may have a single row that
/// is shared by every row of q.
ad::Var kl_diag(const enc::GaussianVar& q, const enc::GaussianVar& p);
double kl_diag(const Eigen::RowVectorXd& mean_q, const Eigen::RowVectorXd& var_q, const Eigen::RowVectorXd& mean_p,
               const Eigen::RowVectorXd& var_p);

/// One task's context/target split in raw units. `key` selects the latent
/// noise stream so a task's loss does not depend on its position in a batch.
struct TaskItem {
  Matrix xc, yc, xt, yt;
  std::uint64_t key = 0;
  int task_id = 0;
};

struct ElboResult {
  ad::Var loss;  // mean over used tasks of (nll + kl)
  double nll = 0.0;
  double kl = 0.0;
  std::size_t used = 0;
  std::size_t skipped = 0;
};

/// Uniform K-component mixture in raw units; component k is (means[k], vars[k]).
struct PredictiveMixture {
  std::vector<Matrix> means;
  std::vector<Matrix> vars;
  [[nodiscard]] std::size_t k() const { return means.size(); }
  [[nodiscard]] Matrix mean() const;
};

class DynamicsModel {
 public:
  DynamicsModel(enc::EncoderKind kind, const enc::EncoderConfig& ec, const DecoderConfig& dc, Rng& rng);

  enc::Encoder& encoder() { return *encoder_; }
  Decoder& decoder() { return decoder_; }
  NormalizationStats& stats() { return stats_; }
  [[nodiscard]] const NormalizationStats& stats() const { return stats_; }
  std::vector<ad::Param*> params();

  ElboResult elbo(ad::Tape& t, std::span<const TaskItem> items, std::size_t k, const Rng& noise, nn::Grad g);

  /// Mixture over latents drawn from the target-aware distribution.
  PredictiveMixture predict(const Matrix& xc, const Matrix& yc, const Matrix& xt, std::size_t k, Rng& rng);
  /// Mean squared error of the mixture mean against yt, raw units.
  double one_step_mse(const Matrix& xc, const Matrix& yc, const Matrix& xt, const Matrix& yt, std::size_t k,
                      Rng& rng);

  /// Context-only latent distribution used for planning.
  enc::DiagGaussian context_latent(const Matrix& xc, const Matrix& yc);

  /// Decoder mean in raw units for raw inputs, differentiable in x and z.
  ad::Var predict_y(ad::Tape& t, ad::Var x_raw, ad::Var z, nn::Grad g);
  /// Same, with the log-variance also converted to raw units.
  enc::GaussianVar predict_gaussian(ad::Tape& t, ad::Var x_raw, ad::Var z, nn::Grad g);

 private:
  std::unique_ptr<enc::Encoder> encoder_;
  Decoder decoder_;
  NormalizationStats stats_;
};

struct DynamicsMetricsRow {
  int iteration = 0;
  int task_id = 0;
  double elbo = 0.0;
  double nll = 0.0;
  double kl = 0.0;
  double one_step_mse = 0.0;
};

/// Appends rows, writing the header when the file is new.
void append_dynamics_metrics(const std::filesystem::path& file, std::span<const DynamicsMetricsRow> rows);

}  // namespace gssm::dyn
