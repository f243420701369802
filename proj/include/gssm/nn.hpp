#pragma once

#include "gssm/autodiff.hpp"
#include "gssm/rng.hpp"

#include <string>
#include <vector>

namespace gssm::nn {

enum class Activation { none, relu, tanh };

ad::Var activate(ad::Var x, Activation act);
Matrix activate(Matrix x, Activation act);

/// Whether a forward pass registers parameters for gradients or reads them
/// as constants.
enum class Grad { track, frozen };

/// y = x W + b with W stored (in x out) and b a 1 x out row.
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng);

  ad::Var forward(ad::Tape& t, ad::Var x, Grad g = Grad::track);
  [[nodiscard]] Matrix apply(const Matrix& x) const;

  [[nodiscard]] std::size_t in() const { return static_cast<std::size_t>(weight.value.rows()); }
  [[nodiscard]] std::size_t out() const { return static_cast<std::size_t>(weight.value.cols()); }
  std::vector<ad::Param*> params() { return {&weight, &bias}; }

  ad::Param weight;
  ad::Param bias;
};

/// Stack of Linear layers; `hidden` is applied after every layer but the
/// last, `output` after the last.
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::string& name, std::vector<std::size_t> widths, Activation hidden, Rng& rng,
      Activation output = Activation::none);

  ad::Var forward(ad::Tape& t, ad::Var x, Grad g = Grad::track);
  [[nodiscard]] Matrix apply(const Matrix& x) const;

  [[nodiscard]] std::size_t in() const { return layers_.front().in(); }
  [[nodiscard]] std::size_t out() const { return layers_.back().out(); }
  [[nodiscard]] std::size_t depth() const { return layers_.size(); }
  std::vector<ad::Param*> params();
  std::vector<Linear>& layers() { return layers_; }

 private:
  std::vector<Linear> layers_;
  Activation hidden_ = Activation::relu;
  Activation output_ = Activation::none;
};

void append(std::vector<ad::Param*>& into, const std::vector<ad::Param*>& more);

}  // namespace gssm::nn
