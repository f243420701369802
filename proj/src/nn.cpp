#include "gssm/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace gssm::nn {

ad::Var activate(ad::Var x, Activation act) {
  switch (act) {
    case Activation::relu: return ad::relu(x);
    case Activation::tanh: return ad::tanh(x);
    case Activation::none: break;
  }
  return x;
}

Matrix activate(Matrix x, Activation act) {
  switch (act) {
    case Activation::relu: x = x.array().max(0.0); break;
    case Activation::tanh: x = x.array().tanh(); break;
    case Activation::none: break;
  }
  return x;
}

Linear::Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng)
    : weight(name + ".weight", in, out), bias(name + ".bias", 1, out) {
  // U(-1/sqrt(in), 1/sqrt(in)) for both weight and bias
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (Eigen::Index i = 0; i < weight.value.size(); ++i) weight.value.data()[i] = rng.uniform(-bound, bound);
  for (Eigen::Index i = 0; i < bias.value.size(); ++i) bias.value.data()[i] = rng.uniform(-bound, bound);
}

ad::Var Linear::forward(ad::Tape& t, ad::Var x, Grad g) {
  const bool track = g == Grad::track;
  ad::Var w = track ? t.param(weight) : t.frozen(weight);
  ad::Var b = track ? t.param(bias) : t.frozen(bias);
  return ad::matmul(x, w) + b;
}

Matrix Linear::apply(const Matrix& x) const {
  if (x.cols() != weight.value.rows())
    throw ad::ShapeError("Linear::apply", ad::shape_of(x), weight.shape());
  Matrix y = x * weight.value;
  y.rowwise() += bias.value.row(0);
  return y;
}

Mlp::Mlp(const std::string& name, std::vector<std::size_t> widths, Activation hidden, Rng& rng,
         Activation output)
    : hidden_(hidden), output_(output) {
  if (widths.size() < 2) throw std::invalid_argument("Mlp: need at least input and output width");
  for (std::size_t i = 0; i + 1 < widths.size(); ++i)
    layers_.emplace_back(name + ".l" + std::to_string(i), widths[i], widths[i + 1], rng);
}

ad::Var Mlp::forward(ad::Tape& t, ad::Var x, Grad g) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i].forward(t, x, g);
    x = activate(x, i + 1 < layers_.size() ? hidden_ : output_);
  }
  return x;
}

Matrix Mlp::apply(const Matrix& x) const {
  Matrix h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    h = activate(layers_[i].apply(h), i + 1 < layers_.size() ? hidden_ : output_);
  return h;
}

std::vector<ad::Param*> Mlp::params() {
  std::vector<ad::Param*> out;
  for (auto& l : layers_) append(out, l.params());
  return out;
}

void append(std::vector<ad::Param*>& into, const std::vector<ad::Param*>& more) {
  into.insert(into.end(), more.begin(), more.end());
}

}  // namespace gssm::nn
