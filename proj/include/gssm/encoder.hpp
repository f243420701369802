#pragma once

// Latent encoders over a context set of (x, y) rows.
//
// GraphEncoder: fully connected context graph with edge weights
//   S = softmax_rows(beta * cos(t(x_i), t(x_j)))
// and n layers of  H <- relu((H + S H) W + b),  H0 = [x, y].
// The prior pools r = S H by a mean over nodes; the per-target posterior
// uses context-to-target weights from x* alone, r* = S* H.
//
// MeanPoolEncoder: per-point MLP on [x, y], mean pooled, one head.

#include "gssm/autodiff.hpp"
#include "gssm/nn.hpp"
#include "gssm/rng.hpp"

#include <memory>
#include <string_view>
#include <vector>

namespace gssm::enc {

enum class EncoderKind { gssm, mean_pool };
EncoderKind parse_encoder_kind(std::string_view name);  // "gssm" | "mean_pool"
std::string_view encoder_kind_name(EncoderKind k);

struct EncoderConfig {
  std::size_t dim_x = 5;
  std::size_t dim_y = 4;
  std::size_t dim_latxy = 32;
  std::size_t dim_lat = 16;
  std::size_t layers = 2;
  bool self_inclusive = true;
  double beta_init = 1.0;
  double var_floor = 1e-6;
};

/// Diagonal Gaussian on the tape, one distribution per row.
struct GaussianVar {
  ad::Var mean;
  ad::Var logvar;
  [[nodiscard]] std::size_t rows() const { return mean.rows(); }
};

/// Diagonal Gaussian values, one distribution per row.
struct DiagGaussian {
  Matrix mean;
  Matrix logvar;
  static DiagGaussian of(const GaussianVar& g) { return {g.mean.value(), g.logvar.value()}; }
  [[nodiscard]] Matrix variance() const { return logvar.array().exp().matrix(); }
};

// ---- building blocks ----

/// Cosine similarity with the norm guard |v| + 1e-12.
double similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b);
/// Row softmax of beta * sim.
Matrix normalize_weights(const Matrix& sim, double beta);

/// Pairwise cosine similarities of the rows of a (n x d) and b (m x d): n x m.
ad::Var cosine_similarity(ad::Var a, ad::Var b);
/// softmax_rows(beta * sim). With exclude_diagonal the self-edge is masked;
/// a single node with no neighbours gets an all-zero row.
ad::Var edge_weights(ad::Var sim, ad::Var beta, bool exclude_diagonal);

/// mean + exp(logvar / 2) * eps for k fixed standard-normal draws per row.
/// Output rows are ordered row-major: (row 0, draw 0..k-1), (row 1, ...).
ad::Var sample_latent(ad::Tape& t, const GaussianVar& q, Rng& rng, std::size_t k);

/// (mean, log max(softplus(raw), floor)) from a head output [mean | raw].
GaussianVar gaussian_head(ad::Var out, std::size_t dim, double floor);

class Encoder {
 public:
  virtual ~Encoder() = default;

  [[nodiscard]] virtual EncoderKind kind() const = 0;
  [[nodiscard]] const EncoderConfig& config() const { return cfg_; }

  /// q(z_c) from the context alone; one row.
  virtual GaussianVar prior(ad::Tape& t, const Matrix& xc, const Matrix& yc, nn::Grad g) = 0;
  /// Distribution used for prediction at target inputs (no target outputs).
  virtual GaussianVar predictive(ad::Tape& t, const Matrix& xc, const Matrix& yc, const Matrix& xt,
                                 nn::Grad g) = 0;
  /// Distribution trained against the prior in the ELBO. One row per target,
  /// or a single row shared by all targets.
  virtual GaussianVar posterior(ad::Tape& t, const Matrix& xc, const Matrix& yc, const Matrix& xt,
                                const Matrix& yt, nn::Grad g) = 0;

  virtual std::vector<ad::Param*> params() = 0;

 protected:
  explicit Encoder(EncoderConfig cfg) : cfg_(cfg) {}
  EncoderConfig cfg_;
};

class GraphEncoder : public Encoder {
 public:
  GraphEncoder(const EncoderConfig& cfg, Rng& rng);

  [[nodiscard]] EncoderKind kind() const override { return EncoderKind::gssm; }
  GaussianVar prior(ad::Tape& t, const Matrix& xc, const Matrix& yc, nn::Grad g) override;
  GaussianVar predictive(ad::Tape& t, const Matrix& xc, const Matrix& yc, const Matrix& xt, nn::Grad g) override;
  GaussianVar posterior(ad::Tape& t, const Matrix& xc, const Matrix& yc, const Matrix& xt, const Matrix& yt,
                        nn::Grad g) override;
  std::vector<ad::Param*> params() override;

  struct Embedding {
    ad::Var features;  // t(x_i), N x latxy
    ad::Var weights;   // S, N x N
    ad::Var nodes;     // H after the last layer, N x latxy
    ad::Var beta;
  };
  Embedding embed(ad::Tape& t, const Matrix& xc, const Matrix& yc, nn::Grad g);
  /// r_c = mean_i (S H)_i, 1 x latxy.
  ad::Var pooled_context(const Embedding& e);
  /// S* (T x N) and r* = S* H (T x latxy).
  std::pair<ad::Var, ad::Var> pooled_target(ad::Tape& t, const Embedding& e, const Matrix& xt, nn::Grad g);

  nn::Mlp& feature_net() { return feature_; }
  std::vector<nn::Linear>& layers() { return layers_; }
  ad::Param& beta() { return beta_; }
  nn::Linear& prior_head() { return prior_head_; }
  nn::Linear& posterior_head() { return post_head_; }

 private:
  nn::Mlp feature_;
  std::vector<nn::Linear> layers_;
  ad::Param beta_;
  nn::Linear prior_head_;
  nn::Linear post_head_;
};

class MeanPoolEncoder : public Encoder {
 public:
  MeanPoolEncoder(const EncoderConfig& cfg, Rng& rng);

  [[nodiscard]] EncoderKind kind() const override { return EncoderKind::mean_pool; }
  GaussianVar prior(ad::Tape& t, const Matrix& xc, const Matrix& yc, nn::Grad g) override;
  GaussianVar predictive(ad::Tape& t, const Matrix& xc, const Matrix& yc, const Matrix& xt, nn::Grad g) override;
  /// Encodes context and targets together.
  GaussianVar posterior(ad::Tape& t, const Matrix& xc, const Matrix& yc, const Matrix& xt, const Matrix& yt,
                        nn::Grad g) override;
  std::vector<ad::Param*> params() override;

  nn::Mlp& point_net() { return point_; }
  nn::Linear& head() { return head_; }

 private:
  nn::Mlp point_;
  nn::Linear head_;
};

std::unique_ptr<Encoder> make_encoder(EncoderKind kind, const EncoderConfig& cfg, Rng& rng);

}  // namespace gssm::enc
