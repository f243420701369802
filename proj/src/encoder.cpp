#include "gssm/encoder.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace gssm::enc {

namespace {

constexpr double kNormGuard = 1e-12;
// Finite stand-in for -inf so masked logits keep a finite tape.
constexpr double kMasked = -1e30;

Matrix stack_xy(const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows())
    throw ad::ShapeError("stack_xy", ad::shape_of(x), ad::shape_of(y));
  Matrix xy(x.rows(), x.cols() + y.cols());
  xy << x, y;
  return xy;
}

void require_rows(const Matrix& x, const char* what) {
  if (x.rows() < 1) throw std::invalid_argument(std::string(what) + ": empty context set");
  if (!x.allFinite()) throw std::invalid_argument(std::string(what) + ": non-finite context features");
}

ad::Var param_var(ad::Tape& t, ad::Param& p, nn::Grad g) {
  return g == nn::Grad::track ? t.param(p) : t.frozen(p);
}

}  // namespace

EncoderKind parse_encoder_kind(std::string_view name) {
  if (name == "gssm") return EncoderKind::gssm;
  if (name == "mean_pool") return EncoderKind::mean_pool;
  throw std::invalid_argument("unknown encoder '" + std::string(name) + "'");
}

std::string_view encoder_kind_name(EncoderKind k) { return k == EncoderKind::gssm ? "gssm" : "mean_pool"; }

double similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return a.dot(b) / ((a.norm() + kNormGuard) * (b.norm() + kNormGuard));
}

Matrix normalize_weights(const Matrix& sim, double beta) {
  Matrix logits = beta * sim;
  Matrix w = (logits.colwise() - logits.rowwise().maxCoeff()).array().exp();
  w.array().colwise() /= w.rowwise().sum().array();
  return w;
}

ad::Var cosine_similarity(ad::Var a, ad::Var b) {
  auto unit = [](ad::Var v) { return v / (ad::sqrt(ad::sum_over_cols(ad::square(v))) + kNormGuard); };
  return ad::matmul(unit(a), ad::transpose(unit(b)));
}

ad::Var edge_weights(ad::Var sim, ad::Var beta, bool exclude_diagonal) {
  ad::Tape& t = *sim.tape();
  ad::Var logits = sim * beta;
  if (!exclude_diagonal) return ad::softmax_rows(logits);
  const auto n = static_cast<Eigen::Index>(sim.rows());
  if (n == 1) return t.constant(Matrix::Zero(1, 1));
  Matrix mask = Matrix::Zero(n, static_cast<Eigen::Index>(sim.cols()));
  for (Eigen::Index i = 0; i < std::min(n, mask.cols()); ++i) mask(i, i) = kMasked;
  return ad::softmax_rows(logits + t.constant(std::move(mask)));
}

ad::Var sample_latent(ad::Tape& t, const GaussianVar& q, Rng& rng, std::size_t k) {
  if (k < 1) throw std::invalid_argument("sample_latent: k must be >= 1");
  const std::size_t rows = q.rows(), dim = q.mean.cols();
  std::vector<std::size_t> index(rows * k);
  for (std::size_t i = 0; i < index.size(); ++i) index[i] = i / k;
  Matrix eps(static_cast<Eigen::Index>(rows * k), static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = rng.normal();
  ad::Var mean = k == 1 && rows == 1 ? q.mean : ad::gather_rows(q.mean, index);
  ad::Var stdev = ad::exp(0.5 * ad::gather_rows(q.logvar, index));
  return mean + stdev * t.constant(std::move(eps));
}

GaussianVar gaussian_head(ad::Var out, std::size_t dim, double floor) {
  if (out.cols() != 2 * dim) throw ad::ShapeError("gaussian_head", out.shape(), "expected 2*dim columns");
  ad::Var raw = ad::slice_cols(out, dim, 2 * dim);
  return {ad::slice_cols(out, 0, dim), ad::log(ad::clamp_min(ad::softplus(raw), floor))};
}

// ---- graph encoder ----

GraphEncoder::GraphEncoder(const EncoderConfig& cfg, Rng& rng) : Encoder(cfg), beta_("encoder.beta", 1, 1) {
  if (cfg.layers < 1) throw std::invalid_argument("GraphEncoder: need at least one message-passing layer");
  feature_ = nn::Mlp("encoder.feature", {cfg.dim_x, cfg.dim_latxy, cfg.dim_latxy}, nn::Activation::relu, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l)
    layers_.emplace_back("encoder.mp.l" + std::to_string(l), l == 0 ? cfg.dim_x + cfg.dim_y : cfg.dim_latxy,
                         cfg.dim_latxy, rng);
  beta_.value(0, 0) = cfg.beta_init;
  prior_head_ = nn::Linear("encoder.prior_head", cfg.dim_latxy, 2 * cfg.dim_lat, rng);
  post_head_ = nn::Linear("encoder.posterior_head", cfg.dim_latxy, 2 * cfg.dim_lat, rng);
}

GraphEncoder::Embedding GraphEncoder::embed(ad::Tape& t, const Matrix& xc, const Matrix& yc, nn::Grad g) {
  require_rows(xc, "GraphEncoder");
  Embedding e;
  e.beta = param_var(t, beta_, g);
  e.features = feature_.forward(t, t.constant(xc), g);
  e.weights = edge_weights(cosine_similarity(e.features, e.features), e.beta, !cfg_.self_inclusive);
  ad::Var h = t.constant(stack_xy(xc, yc));
  for (auto& layer : layers_) h = ad::relu(layer.forward(t, h + ad::matmul(e.weights, h), g));
  e.nodes = h;
  return e;
}

ad::Var GraphEncoder::pooled_context(const Embedding& e) {
  return ad::mean_over_rows(ad::matmul(e.weights, e.nodes));
}

std::pair<ad::Var, ad::Var> GraphEncoder::pooled_target(ad::Tape& t, const Embedding& e, const Matrix& xt,
                                                        nn::Grad g) {
  ad::Var ft = feature_.forward(t, t.constant(xt), g);
  ad::Var w = edge_weights(cosine_similarity(ft, e.features), e.beta, false);
  return {w, ad::matmul(w, e.nodes)};
}

GaussianVar GraphEncoder::prior(ad::Tape& t, const Matrix& xc, const Matrix& yc, nn::Grad g) {
  const Embedding e = embed(t, xc, yc, g);
  return gaussian_head(prior_head_.forward(t, pooled_context(e), g), cfg_.dim_lat, cfg_.var_floor);
}

GaussianVar GraphEncoder::predictive(ad::Tape& t, const Matrix& xc, const Matrix& yc, const Matrix& xt,
                                     nn::Grad g) {
  const Embedding e = embed(t, xc, yc, g);
  const auto r = pooled_target(t, e, xt, g).second;
  return gaussian_head(post_head_.forward(t, r, g), cfg_.dim_lat, cfg_.var_floor);
}

GaussianVar GraphEncoder::posterior(ad::Tape& t, const Matrix& xc, const Matrix& yc, const Matrix& xt,
                                    const Matrix& /*yt*/, nn::Grad g) {
  return predictive(t, xc, yc, xt, g);
}

std::vector<ad::Param*> GraphEncoder::params() {
  std::vector<ad::Param*> out = feature_.params();
  for (auto& l : layers_) nn::append(out, l.params());
  out.push_back(&beta_);
  nn::append(out, prior_head_.params());
  nn::append(out, post_head_.params());
  return out;
}

// ---- mean-pool baseline ----

MeanPoolEncoder::MeanPoolEncoder(const EncoderConfig& cfg, Rng& rng) : Encoder(cfg) {
  std::vector<std::size_t> widths{cfg.dim_x + cfg.dim_y};
  for (std::size_t l = 0; l < cfg.layers; ++l) widths.push_back(cfg.dim_latxy);
  point_ = nn::Mlp("encoder.point", widths, nn::Activation::relu, rng, nn::Activation::relu);
  head_ = nn::Linear("encoder.head", cfg.dim_latxy, 2 * cfg.dim_lat, rng);
}

GaussianVar MeanPoolEncoder::prior(ad::Tape& t, const Matrix& xc, const Matrix& yc, nn::Grad g) {
  require_rows(xc, "MeanPoolEncoder");
  ad::Var r = ad::mean_over_rows(point_.forward(t, t.constant(stack_xy(xc, yc)), g));
  return gaussian_head(head_.forward(t, r, g), cfg_.dim_lat, cfg_.var_floor);
}

GaussianVar MeanPoolEncoder::predictive(ad::Tape& t, const Matrix& xc, const Matrix& yc, const Matrix& /*xt*/,
                                        nn::Grad g) {
  return prior(t, xc, yc, g);
}

GaussianVar MeanPoolEncoder::posterior(ad::Tape& t, const Matrix& xc, const Matrix& yc, const Matrix& xt,
                                       const Matrix& yt, nn::Grad g) {
  Matrix x(xc.rows() + xt.rows(), xc.cols()), y(yc.rows() + yt.rows(), yc.cols());
  x << xc, xt;
  y << yc, yt;
  return prior(t, x, y, g);
}

std::vector<ad::Param*> MeanPoolEncoder::params() {
  std::vector<ad::Param*> out = point_.params();
  nn::append(out, head_.params());
  return out;
}

std::unique_ptr<Encoder> make_encoder(EncoderKind kind, const EncoderConfig& cfg, Rng& rng) {
  if (kind == EncoderKind::gssm) return std::make_unique<GraphEncoder>(cfg, rng);
  return std::make_unique<MeanPoolEncoder>(cfg, rng);
}

}  // namespace gssm::enc
