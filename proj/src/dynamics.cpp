#include "gssm/dynamics.hpp"

#include "gssm/csv.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace gssm::dyn {

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

// Row index pairs for T targets x K draws, target-major.
struct Pairing {
  std::vector<std::size_t> target;
  std::vector<std::size_t> draw;
};

// `per_target` draws come as (target, draw) rows; otherwise there are K
// shared draws.
Pairing pair_rows(std::size_t targets, std::size_t k, bool per_target) {
  Pairing p;
  p.target.reserve(targets * k);
  p.draw.reserve(targets * k);
  for (std::size_t t = 0; t < targets; ++t)
    for (std::size_t j = 0; j < k; ++j) {
      p.target.push_back(t);
      p.draw.push_back(per_target ? t * k + j : j);
    }
  return p;
}

}  // namespace

NormalizationStats NormalizationStats::identity(std::size_t dim_x, std::size_t dim_y) {
  const auto dx = static_cast<Eigen::Index>(dim_x), dy = static_cast<Eigen::Index>(dim_y);
  return {Eigen::RowVectorXd::Zero(dx), Eigen::RowVectorXd::Ones(dx), Eigen::RowVectorXd::Zero(dy),
          Eigen::RowVectorXd::Ones(dy)};
}

Matrix NormalizationStats::normalize_x(const Matrix& x) const {
  return ((x.rowwise() - x_mean).array().rowwise() / x_std.array()).matrix();
}

Matrix NormalizationStats::normalize_y(const Matrix& y) const {
  return ((y.rowwise() - y_mean).array().rowwise() / y_std.array()).matrix();
}

Matrix NormalizationStats::denormalize_y(const Matrix& y) const {
  return ((y.array().rowwise() * y_std.array()).matrix().rowwise() + y_mean);
}

Matrix NormalizationStats::denormalize_y_var(const Matrix& var) const {
  return (var.array().rowwise() * y_std.array().square()).matrix();
}

Eigen::RowVectorXd column_std(const Matrix& m, const Eigen::RowVectorXd& mean) {
  Eigen::RowVectorXd sd = ((m.rowwise() - mean).array().square().colwise().sum() / static_cast<double>(m.rows())).sqrt();
  for (Eigen::Index j = 0; j < sd.size(); ++j)
    if (!(sd[j] >= 1e-6)) sd[j] = 1.0;
  return sd;
}

NormalizationStats fit_normalization(const Matrix& x, const Matrix& y) {
  if (x.rows() == 0 || y.rows() == 0) throw std::invalid_argument("fit_normalization: empty buffer");
  NormalizationStats s;
  s.x_mean = x.colwise().mean();
  s.x_std = column_std(x, s.x_mean);
  s.y_mean = y.colwise().mean();
  s.y_std = column_std(y, s.y_mean);
  return s;
}

Decoder::Decoder(const DecoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  std::vector<std::size_t> widths{cfg.dim_x + cfg.dim_lat};
  for (std::size_t i = 0; i < cfg.hidden_layers; ++i) widths.push_back(cfg.dim_h);
  widths.push_back(2 * cfg.dim_y);
  net_ = nn::Mlp("decoder", widths, nn::Activation::relu, rng);
}

enc::GaussianVar Decoder::forward(ad::Tape& t, ad::Var x, ad::Var z, nn::Grad g) {
  ad::Var out = net_.forward(t, ad::concat_cols({x, z}), g);
  return enc::gaussian_head(out, cfg_.dim_y, cfg_.var_floor);
}

ad::Var gaussian_nll(ad::Var y, const enc::GaussianVar& q) {
  ad::Var sq = ad::square(y - q.mean) * ad::exp(-q.logvar);
  return 0.5 * ad::sum_over_cols(q.logvar + sq + kLog2Pi);
}

double gaussian_nll(const Eigen::RowVectorXd& y, const Eigen::RowVectorXd& mean, const Eigen::RowVectorXd& var) {
  return 0.5 * ((2.0 * std::numbers::pi * var.array()).log() + (y - mean).array().square() / var.array()).sum();
}

ad::Var kl_diag(const enc::GaussianVar& q, const enc::GaussianVar& p) {
  ad::Var ratio = ad::exp(q.logvar - p.logvar);
  ad::Var mahal = ad::square(q.mean - p.mean) * ad::exp(-p.logvar);
  return 0.5 * ad::sum_over_cols(ratio + mahal - (q.logvar - p.logvar) - 1.0);
}

double kl_diag(const Eigen::RowVectorXd& mean_q, const Eigen::RowVectorXd& var_q, const Eigen::RowVectorXd& mean_p,
               const Eigen::RowVectorXd& var_p) {
  const auto r = (var_q.array() / var_p.array());
  return 0.5 * (r + (mean_q - mean_p).array().square() / var_p.array() - r.log() - 1.0).sum();
}

Matrix PredictiveMixture::mean() const {
  if (means.empty()) throw std::logic_error("empty predictive mixture");
  Matrix m = Matrix::Zero(means[0].rows(), means[0].cols());
  for (const auto& c : means) m += c;
  return m / static_cast<double>(means.size());
}

DynamicsModel::DynamicsModel(enc::EncoderKind kind, const enc::EncoderConfig& ec, const DecoderConfig& dc, Rng& rng)
    : encoder_(enc::make_encoder(kind, ec, rng)),
      decoder_(dc, rng),
      stats_(NormalizationStats::identity(dc.dim_x, dc.dim_y)) {
  if (ec.dim_lat != dc.dim_lat || ec.dim_x != dc.dim_x || ec.dim_y != dc.dim_y)
    throw std::invalid_argument("DynamicsModel: encoder and decoder dimensions differ");
}

std::vector<ad::Param*> DynamicsModel::params() {
  std::vector<ad::Param*> out = encoder_->params();
  nn::append(out, decoder_.params());
  return out;
}

ElboResult DynamicsModel::elbo(ad::Tape& t, std::span<const TaskItem> items, std::size_t k, const Rng& noise,
                               nn::Grad g) {
  if (k < 1) throw std::invalid_argument("elbo: k must be >= 1");
  ElboResult res;
  std::vector<ad::Var> losses;
  for (const TaskItem& item : items) {
    if (item.xc.rows() == 0 || item.xt.rows() == 0) {
      ++res.skipped;
      continue;
    }
    const Matrix xc = stats_.normalize_x(item.xc), yc = stats_.normalize_y(item.yc);
    const Matrix xt = stats_.normalize_x(item.xt), yt = stats_.normalize_y(item.yt);
    const enc::GaussianVar prior = encoder_->prior(t, xc, yc, g);
    const enc::GaussianVar post = encoder_->posterior(t, xc, yc, xt, yt, g);
    Rng draws = noise.split(item.key);
    ad::Var z = enc::sample_latent(t, post, draws, k);

    const auto targets = static_cast<std::size_t>(xt.rows());
    const bool per_target = post.rows() == targets && targets > 1;
    const Pairing pr = pair_rows(targets, k, per_target);
    ad::Var x_rows = ad::gather_rows(t.constant(xt), pr.target);
    ad::Var y_rows = ad::gather_rows(t.constant(yt), pr.target);
    ad::Var z_rows = per_target || targets == 1 ? z : ad::gather_rows(z, pr.draw);

    ad::Var nll = ad::mean(gaussian_nll(y_rows, decoder_.forward(t, x_rows, z_rows, g)));
    ad::Var kl = ad::mean(kl_diag(post, prior));
    res.nll += nll.item();
    res.kl += kl.item();
    losses.push_back(nll + kl);
    ++res.used;
  }
  if (losses.empty()) throw std::invalid_argument("elbo: no task item has both context and targets");
  const double inv = 1.0 / static_cast<double>(res.used);
  res.loss = ad::sum(ad::concat_rows(std::span<const ad::Var>(losses))) * inv;
  res.nll *= inv;
  res.kl *= inv;
  return res;
}

PredictiveMixture DynamicsModel::predict(const Matrix& xc, const Matrix& yc, const Matrix& xt, std::size_t k,
                                         Rng& rng) {
  if (k < 1) throw std::invalid_argument("predict: k must be >= 1");
  ad::Tape t;
  const Matrix xt_n = stats_.normalize_x(xt);
  const enc::GaussianVar q =
      encoder_->predictive(t, stats_.normalize_x(xc), stats_.normalize_y(yc), xt_n, nn::Grad::frozen);
  ad::Var z = enc::sample_latent(t, q, rng, k);
  const auto targets = static_cast<std::size_t>(xt.rows());
  const bool per_target = q.rows() == targets && targets > 1;
  const Pairing pr = pair_rows(targets, k, per_target);
  ad::Var z_rows = per_target || targets == 1 ? z : ad::gather_rows(z, pr.draw);
  const enc::GaussianVar out =
      decoder_.forward(t, ad::gather_rows(t.constant(xt_n), pr.target), z_rows, nn::Grad::frozen);

  const Matrix mean = stats_.denormalize_y(out.mean.value());
  const Matrix var = stats_.denormalize_y_var(out.logvar.value().array().exp().matrix());
  PredictiveMixture mix;
  for (std::size_t j = 0; j < k; ++j) {
    Matrix m(xt.rows(), mean.cols()), v(xt.rows(), mean.cols());
    for (std::size_t i = 0; i < targets; ++i) {
      m.row(static_cast<Eigen::Index>(i)) = mean.row(static_cast<Eigen::Index>(i * k + j));
      v.row(static_cast<Eigen::Index>(i)) = var.row(static_cast<Eigen::Index>(i * k + j));
    }
    mix.means.push_back(std::move(m));
    mix.vars.push_back(std::move(v));
  }
  return mix;
}

double DynamicsModel::one_step_mse(const Matrix& xc, const Matrix& yc, const Matrix& xt, const Matrix& yt,
                                   std::size_t k, Rng& rng) {
  return (predict(xc, yc, xt, k, rng).mean() - yt).array().square().mean();
}

enc::DiagGaussian DynamicsModel::context_latent(const Matrix& xc, const Matrix& yc) {
  ad::Tape t;
  return enc::DiagGaussian::of(
      encoder_->prior(t, stats_.normalize_x(xc), stats_.normalize_y(yc), nn::Grad::frozen));
}

enc::GaussianVar DynamicsModel::predict_gaussian(ad::Tape& t, ad::Var x_raw, ad::Var z, nn::Grad g) {
  const Eigen::RowVectorXd inv_x = stats_.x_std.cwiseInverse();
  ad::Var xn = (x_raw - t.constant(Matrix(stats_.x_mean))) * t.constant(Matrix(inv_x));
  const enc::GaussianVar out = decoder_.forward(t, xn, z, g);
  const Eigen::RowVectorXd log_var_scale = 2.0 * stats_.y_std.array().log();
  return {out.mean * t.constant(Matrix(stats_.y_std)) + t.constant(Matrix(stats_.y_mean)),
          out.logvar + t.constant(Matrix(log_var_scale))};
}

ad::Var DynamicsModel::predict_y(ad::Tape& t, ad::Var x_raw, ad::Var z, nn::Grad g) {
  return predict_gaussian(t, x_raw, z, g).mean;
}

void append_dynamics_metrics(const std::filesystem::path& file, std::span<const DynamicsMetricsRow> rows) {
  csv::Writer w(file, {"iteration", "task_id", "elbo", "nll", "kl", "one_step_mse"}, true);
  for (const auto& r : rows) {
    w.field(r.iteration).field(r.task_id).field(r.elbo).field(r.nll).field(r.kl).field(r.one_step_mse);
    w.end();
  }
}

}  // namespace gssm::dyn
